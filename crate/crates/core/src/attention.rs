//! Dense attention oracle, the attention-density measure, and the
//! logit-variance proxy in both direct and closed-form (trace-identity)
//! shape, plus the layer-stability bound evaluator.

use crate::error::{Error, Result};
use crate::numerics::{
    matmul, softmax_rows, spectral_norm, Matrix, SPECTRAL_MAX_ITERS, SPECTRAL_TOL,
};

/// Row sums of a stochastic matrix may deviate from 1 by at most this much.
pub const ROW_STOCHASTIC_TOL: f64 = 1e-9;

/// Slack used when comparing cumulative probability mass against a target,
/// so that exact-arithmetic prefix counts survive floating-point rounding.
pub(crate) const MASS_PREFIX_SLACK: f64 = 1e-12;

/// One attention head's projections and dimensions.
///
/// The coupling matrix `M = W_Q W_K`ᵀ is always derived on demand, never
/// stored, so it cannot go stale.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub layer_id: usize,
    pub head_id: usize,
    /// Model (token) dimension d.
    pub d: usize,
    /// Head dimension d'.
    pub d_prime: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
}

impl LayerParams {
    pub fn new(
        layer_id: usize,
        head_id: usize,
        d: usize,
        d_prime: usize,
        w_q: Matrix,
        w_k: Matrix,
    ) -> Result<Self> {
        if d_prime == 0 {
            return Err(Error::Argument("head dimension d' must be >= 1".into()));
        }
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k)] {
            if w.rows() != d || w.cols() != d_prime {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {d}x{d_prime}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(Self { layer_id, head_id, d, d_prime, w_q, w_k })
    }

    /// The query-key coupling matrix `M = W_Q W_K`ᵀ (d x d).
    pub fn coupling_matrix(&self) -> Matrix {
        matmul(&self.w_q, &self.w_k.transpose()).expect("projection shapes validated on construction")
    }
}

/// Inputs to the layer-stability bound: the token-norm bound R, the failure
/// probability, and the absolute constant the bound is stated up to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityBoundParams {
    pub r_bound: f64,
    pub delta: f64,
    pub c_const: f64,
}

impl StabilityBoundParams {
    pub fn new(r_bound: f64, delta: f64, c_const: f64) -> Result<Self> {
        if !(r_bound > 0.0) {
            return Err(Error::Argument(format!("R must be > 0, got {r_bound}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Argument(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(c_const > 0.0) {
            return Err(Error::Argument(format!("C must be > 0, got {c_const}")));
        }
        Ok(Self { r_bound, delta, c_const })
    }
}

/// Project tokens through one head: `q = x W_Q`, `k = x W_K`.
pub fn project(x: &Matrix, layer: &LayerParams) -> Result<(Matrix, Matrix)> {
    if x.cols() != layer.d {
        return Err(Error::Shape(format!(
            "input has {} columns, layer expects d = {}",
            x.cols(),
            layer.d
        )));
    }
    Ok((matmul(x, &layer.w_q)?, matmul(x, &layer.w_k)?))
}

/// Scaled dot-product logits: entry (i, j) = <q_i, k_j> / sqrt(d').
pub fn logits(q: &Matrix, k: &Matrix, d_prime: usize) -> Result<Matrix> {
    if q.cols() != d_prime || k.cols() != d_prime {
        return Err(Error::Shape(format!(
            "q has {} and k has {} columns, expected d' = {d_prime}",
            q.cols(),
            k.cols()
        )));
    }
    let scale = 1.0 / (d_prime as f64).sqrt();
    matmul(q, &k.transpose())?.scale(scale)
}

/// Full softmax attention: `softmax(QK`ᵀ`/sqrt(d')) V`.
pub fn dense_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "q has {} columns but k has {}",
            q.cols(),
            k.cols()
        )));
    }
    if v.rows() != k.rows() {
        return Err(Error::Shape(format!(
            "v has {} rows but k has {}",
            v.rows(),
            k.rows()
        )));
    }
    let weights = softmax_rows(&logits(q, k, q.cols())?);
    matmul(&weights, v)
}

/// Minimum fraction of entries per row needed to cover `tau` of the row's
/// mass, averaged over rows.
///
/// Rows must be stochastic within [`ROW_STOCHASTIC_TOL`]. Per row, entries
/// are sorted descending (ties broken by ascending column index) and the
/// shortest prefix reaching `tau` is counted.
pub fn attention_density(a: &Matrix, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Argument(format!("tau must lie in (0, 1], got {tau}")));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Argument("attention map must be nonempty".into()));
    }
    let n = a.cols();
    let mut fractions_sum = 0.0;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..a.rows() {
        let row = a.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_STOCHASTIC_TOL {
            return Err(Error::Contract(format!("row {i} sums to {sum}, not stochastic")));
        }
        order.clear();
        order.extend(0..n);
        order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap().then(x.cmp(&y)));
        fractions_sum += prefix_fraction(row, &order, tau);
    }
    Ok(fractions_sum / a.rows() as f64)
}

/// Length of the minimal prefix of `order` whose mass reaches `tau`, as a
/// fraction of the row width. Falls back to the whole row when rounding in
/// the row sum leaves the target unreached.
pub(crate) fn prefix_fraction(row: &[f64], order: &[usize], tau: f64) -> f64 {
    let mut acc = 0.0;
    for (count, &j) in order.iter().enumerate() {
        acc += row[j];
        if acc >= tau - MASS_PREFIX_SLACK {
            return (count + 1) as f64 / row.len() as f64;
        }
    }
    1.0
}

/// Average row-wise population variance (divide by n) of the logit matrix.
pub fn logit_variance_direct(z: &Matrix) -> f64 {
    if z.rows() == 0 || z.cols() == 0 {
        return 0.0;
    }
    let n = z.cols() as f64;
    let mut total = 0.0;
    for i in 0..z.rows() {
        let row = z.row(i);
        let mean = row.iter().sum::<f64>() / n;
        total += row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    total / z.rows() as f64
}

/// Closed-form logit variance: `tr(M Sigma M`ᵀ` (Sigma + mu`ᵀ`mu)) / d'`
/// with `mu` the token mean, `Sigma` the (population) token covariance and
/// `M` the layer's coupling matrix. Agrees with routing the input through
/// [`project`], [`logits`] and [`logit_variance_direct`].
pub fn logit_variance_trace(x: &Matrix, layer: &LayerParams) -> Result<f64> {
    if x.cols() != layer.d {
        return Err(Error::Shape(format!(
            "input has {} columns, layer expects d = {}",
            x.cols(),
            layer.d
        )));
    }
    if x.rows() == 0 {
        return Err(Error::Argument("token matrix must have at least one row".into()));
    }
    let n = x.rows() as f64;
    let d = layer.d;

    let mut mu = vec![0.0; d];
    for i in 0..x.rows() {
        for (m, &v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n;
    }
    let mu = Matrix::new(1, d, mu)?;
    let mu_outer = matmul(&mu.transpose(), &mu)?;

    let xt = x.transpose();
    let gram = matmul(&xt, x)?.scale(1.0 / n)?;
    let sigma = Matrix::from_fn(d, d, |i, j| gram.get(i, j) - mu_outer.get(i, j))?;

    let m = layer.coupling_matrix();
    let left = matmul(&matmul(&m, &sigma)?, &m.transpose())?;
    let right = Matrix::from_fn(d, d, |i, j| sigma.get(i, j) + mu_outer.get(i, j))?;

    let mut trace = 0.0;
    for i in 0..d {
        for j in 0..d {
            trace += left.get(i, j) * right.get(j, i);
        }
    }
    Ok(trace / layer.d_prime as f64)
}

/// High-probability bound on |V(X) - V(X_hat)| for token count `n`:
/// `(d ||M||^2 / d') C R^4 (sqrt(log(d/delta)/n) + log(d/delta)/n)`.
/// Logarithms are natural; constant-factor differences are absorbed into C.
pub fn stability_bound(layer: &LayerParams, n: usize, params: &StabilityBoundParams) -> Result<f64> {
    if n == 0 {
        return Err(Error::Argument("token count n must be >= 1".into()));
    }
    let log_term = (layer.d as f64 / params.delta).ln();
    if log_term <= 0.0 {
        return Err(Error::Argument(format!(
            "log(d/delta) = {log_term} must be positive"
        )));
    }
    let m_norm = spectral_norm(&layer.coupling_matrix(), SPECTRAL_MAX_ITERS, SPECTRAL_TOL).value;
    let ratio = log_term / n as f64;
    let r4 = params.r_bound.powi(4);
    Ok((layer.d as f64 * m_norm * m_norm / layer.d_prime as f64)
        * params.c_const
        * r4
        * (ratio.sqrt() + ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_layer(rng: &mut StdRng, d: usize, d_prime: usize) -> LayerParams {
        LayerParams::new(
            0,
            0,
            d,
            d_prime,
            random_matrix(rng, d, d_prime),
            random_matrix(rng, d, d_prime),
        )
        .unwrap()
    }

    /// Identity-padded projections so the coupling matrix has spectral norm 1.
    fn unit_norm_layer(d: usize, d_prime: usize) -> LayerParams {
        let w = Matrix::from_fn(d, d_prime, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        LayerParams::new(0, 0, d, d_prime, w.clone(), w).unwrap()
    }

    #[test]
    fn project_identity_input_returns_weights() {
        let mut rng = StdRng::seed_from_u64(1);
        let layer = random_layer(&mut rng, 4, 2);
        let (q, k) = project(&Matrix::identity(4), &layer).unwrap();
        assert_eq!(q, layer.w_q);
        assert_eq!(k, layer.w_k);
    }

    #[test]
    fn project_zero_input_gives_zero() {
        let mut rng = StdRng::seed_from_u64(2);
        let layer = random_layer(&mut rng, 3, 2);
        let (q, k) = project(&Matrix::zeros(5, 3), &layer).unwrap();
        assert_eq!(q, Matrix::zeros(5, 2));
        assert_eq!(k, Matrix::zeros(5, 2));
    }

    #[test]
    fn project_matches_hand_multiplication() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 4, 3);
        let layer = random_layer(&mut rng, 3, 2);
        let (q, _) = project(&x, &layer).unwrap();
        // Triple-loop oracle independent of Matrix::matmul internals.
        for i in 0..4 {
            for j in 0..2 {
                let mut want = 0.0;
                for t in 0..3 {
                    want += x.get(i, t) * layer.w_q.get(t, j);
                }
                assert!((q.get(i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn project_rejects_wrong_width() {
        let mut rng = StdRng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 3, 2);
        assert!(matches!(project(&Matrix::zeros(2, 4), &layer), Err(Error::Shape(_))));
    }

    #[test]
    fn logits_identity_case() {
        let z = logits(&Matrix::identity(2), &Matrix::identity(2), 2).unwrap();
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert!((z.get(0, 0) - inv_sqrt2).abs() < 1e-15);
        assert!((z.get(1, 1) - inv_sqrt2).abs() < 1e-15);
        assert_eq!(z.get(0, 1), 0.0);
        assert_eq!(z.get(1, 0), 0.0);
    }

    #[test]
    fn logits_orthogonal_rows_are_zero() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -2.0]]).unwrap();
        assert_eq!(logits(&q, &k, 2).unwrap(), Matrix::zeros(1, 2));
    }

    #[test]
    fn logits_scale_linearly_in_q() {
        let mut rng = StdRng::seed_from_u64(5);
        let q = random_matrix(&mut rng, 3, 4);
        let k = random_matrix(&mut rng, 5, 4);
        let z = logits(&q, &k, 4).unwrap();
        let z_scaled = logits(&q.scale(3.0).unwrap(), &k, 4).unwrap();
        assert!(z.scale(3.0).unwrap().max_abs_diff(&z_scaled).unwrap() < 1e-12);
    }

    #[test]
    fn dense_attention_single_key_replicates_value_row() {
        let mut rng = StdRng::seed_from_u64(6);
        let q = random_matrix(&mut rng, 4, 3);
        let k = random_matrix(&mut rng, 1, 3);
        let v = random_matrix(&mut rng, 1, 2);
        let out = dense_attention(&q, &k, &v).unwrap();
        for i in 0..4 {
            assert!((out.get(i, 0) - v.get(0, 0)).abs() < 1e-15);
            assert!((out.get(i, 1) - v.get(0, 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_attention_identical_keys_average_values() {
        let mut rng = StdRng::seed_from_u64(7);
        let q = random_matrix(&mut rng, 2, 3);
        let key_row: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = Matrix::from_rows(&[key_row.clone(), key_row.clone(), key_row]).unwrap();
        let v = random_matrix(&mut rng, 3, 2);
        let out = dense_attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mean = (v.get(0, j) + v.get(1, j) + v.get(2, j)) / 3.0;
                assert!((out.get(i, j) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dense_attention_matches_brute_force_at_n3() {
        let mut rng = StdRng::seed_from_u64(8);
        let q = random_matrix(&mut rng, 3, 2);
        let k = random_matrix(&mut rng, 3, 2);
        let v = random_matrix(&mut rng, 3, 2);
        let out = dense_attention(&q, &k, &v).unwrap();
        // Plain softmax-then-average oracle without max subtraction.
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    ((q.get(i, 0) * k.get(j, 0) + q.get(i, 1) * k.get(j, 1)) / 2.0f64.sqrt()).exp()
                })
                .collect();
            let total: f64 = scores.iter().sum();
            for c in 0..2 {
                let want: f64 =
                    (0..3).map(|j| scores[j] / total * v.get(j, c)).sum();
                assert!((out.get(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn density_uniform_rows() {
        let a = Matrix::from_fn(1, 10, |_, _| 0.1).unwrap();
        assert_eq!(attention_density(&a, 0.8).unwrap(), 0.8);
        let a = Matrix::from_fn(3, 10, |_, _| 0.1).unwrap();
        assert!((attention_density(&a, 0.8).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn density_one_hot_rows() {
        let a = Matrix::from_fn(4, 8, |i, j| if j == i { 1.0 } else { 0.0 }).unwrap();
        for tau in [0.1, 0.5, 1.0] {
            assert_eq!(attention_density(&a, tau).unwrap(), 1.0 / 8.0);
        }
    }

    #[test]
    fn density_hand_row() {
        let a = Matrix::from_rows(&[vec![0.5, 0.3, 0.1, 0.1]]).unwrap();
        assert_eq!(attention_density(&a, 0.8).unwrap(), 0.5);
    }

    #[test]
    fn density_rejects_non_stochastic_rows() {
        let a = Matrix::from_rows(&[vec![0.5, 0.4]]).unwrap();
        assert!(matches!(attention_density(&a, 0.8), Err(Error::Contract(_))));
    }

    #[test]
    fn density_rejects_bad_tau() {
        let a = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(attention_density(&a, 0.0).is_err());
        assert!(attention_density(&a, 1.0 + 1e-9).is_err());
    }

    #[test]
    fn variance_direct_constant_matrix_is_zero() {
        assert_eq!(logit_variance_direct(&Matrix::from_fn(3, 5, |_, _| 2.5).unwrap()), 0.0);
    }

    #[test]
    fn variance_direct_hand_row() {
        let z = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert_eq!(logit_variance_direct(&z), 1.0);
    }

    #[test]
    fn variance_direct_duplicated_row_stays_in_hull() {
        let z = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap();
        let z_dup = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        for m in [&z, &z_dup] {
            let v = logit_variance_direct(m);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn variance_trace_zero_for_identical_rows() {
        let mut rng = StdRng::seed_from_u64(9);
        let layer = random_layer(&mut rng, 4, 2);
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        assert!(logit_variance_trace(&x, &layer).unwrap().abs() < 1e-12);
    }

    #[test]
    fn variance_trace_zero_for_zero_weights() {
        let layer =
            LayerParams::new(0, 0, 3, 2, Matrix::zeros(3, 2), Matrix::zeros(3, 2)).unwrap();
        let mut rng = StdRng::seed_from_u64(10);
        let x = random_matrix(&mut rng, 6, 3);
        assert_eq!(logit_variance_trace(&x, &layer).unwrap(), 0.0);
    }

    #[test]
    fn variance_trace_matches_direct_route() {
        let mut rng = StdRng::seed_from_u64(11);
        for trial in 0..10 {
            let n = [16, 32, 64][trial % 3];
            let x = random_matrix(&mut rng, n, 8);
            let layer = random_layer(&mut rng, 8, 4);
            let (q, k) = project(&x, &layer).unwrap();
            let direct = logit_variance_direct(&logits(&q, &k, 4).unwrap());
            let trace = logit_variance_trace(&x, &layer).unwrap();
            let rel = (direct - trace).abs() / direct.max(1e-12);
            assert!(rel <= 1e-9, "trial {trial}: direct {direct} vs trace {trace}");
        }
    }

    #[test]
    fn stability_bound_linear_in_c() {
        let layer = unit_norm_layer(8, 4);
        let p1 = StabilityBoundParams::new(1.0, 0.05, 1.0).unwrap();
        let p2 = StabilityBoundParams::new(1.0, 0.05, 2.0).unwrap();
        let b1 = stability_bound(&layer, 128, &p1).unwrap();
        let b2 = stability_bound(&layer, 128, &p2).unwrap();
        assert!((b2 - 2.0 * b1).abs() < 1e-12);
    }

    #[test]
    fn stability_bound_sqrt_term_halves_at_4n() {
        let layer = unit_norm_layer(8, 4);
        let params = StabilityBoundParams::new(1.5, 0.1, 2.0).unwrap();
        let log_term = (8.0f64 / 0.1).ln();
        let amp = 8.0 / 4.0 * 2.0 * 1.5f64.powi(4);
        let expect = |nn: f64| amp * ((log_term / nn).sqrt() + log_term / nn);
        let b1 = stability_bound(&layer, 64, &params).unwrap();
        let b4 = stability_bound(&layer, 256, &params).unwrap();
        assert!((b1 - expect(64.0)).abs() < 1e-9);
        assert!((b4 - expect(256.0)).abs() < 1e-9);
        // sqrt part exactly halves, linear part exactly quarters
        let sqrt_part = amp * (log_term / 64.0).sqrt();
        let lin_part = amp * log_term / 64.0;
        assert!((b4 - (0.5 * sqrt_part + 0.25 * lin_part)).abs() < 1e-9);
    }

    #[test]
    fn stability_bound_frozen_plug_in() {
        // d=64, d'=16, R=1, delta=0.05, C=1, ||M||=1, n=1024.
        let layer = unit_norm_layer(64, 16);
        let params = StabilityBoundParams::new(1.0, 0.05, 1.0).unwrap();
        let got = stability_bound(&layer, 1024, &params).unwrap();
        let log_term = 1280.0f64.ln();
        let want = 4.0 * ((log_term / 1024.0).sqrt() + log_term / 1024.0);
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        assert!((want - 0.36227).abs() < 5e-5);
    }

    #[test]
    fn stability_bound_rejects_zero_n() {
        let layer = unit_norm_layer(4, 2);
        let params = StabilityBoundParams::new(1.0, 0.05, 1.0).unwrap();
        assert!(stability_bound(&layer, 0, &params).is_err());
    }

    proptest! {
        #[test]
        fn density_monotone_in_tau(
            rows in 1usize..5,
            cols in 2usize..9,
            raw in proptest::collection::vec(0.001f64..1.0, 40),
            tau_lo in 0.05f64..0.9,
            bump in 0.01f64..0.1,
        ) {
            let data: Vec<f64> = raw.into_iter().take(rows * cols).collect();
            prop_assume!(data.len() == rows * cols);
            let m = Matrix::new(rows, cols, data).unwrap();
            // normalize rows to make the map stochastic
            let norm: Vec<Vec<f64>> = (0..rows)
                .map(|i| {
                    let s: f64 = m.row(i).iter().sum();
                    m.row(i).iter().map(|v| v / s).collect()
                })
                .collect();
            let m = Matrix::from_rows(&norm).unwrap();
            let d_lo = attention_density(&m, tau_lo).unwrap();
            let d_hi = attention_density(&m, (tau_lo + bump).min(1.0)).unwrap();
            prop_assert!(d_hi >= d_lo);
            prop_assert!(d_lo >= 1.0 / cols as f64 && d_lo <= 1.0);
            prop_assert!(d_hi >= 1.0 / cols as f64 && d_hi <= 1.0);
        }

        #[test]
        fn dense_attention_outputs_are_convex_combinations(
            nq in 1usize..5,
            nk in 1usize..5,
            vals in proptest::collection::vec(-5.0f64..5.0, 60),
        ) {
            let need = nq * 3 + nk * 3 + nk * 2;
            prop_assume!(vals.len() >= need);
            let q = Matrix::new(nq, 3, vals[..nq * 3].to_vec()).unwrap();
            let k = Matrix::new(nk, 3, vals[nq * 3..nq * 3 + nk * 3].to_vec()).unwrap();
            let v = Matrix::new(nk, 2, vals[nq * 3 + nk * 3..need].to_vec()).unwrap();
            let out = dense_attention(&q, &k, &v).unwrap();
            for c in 0..2 {
                let lo = (0..nk).map(|j| v.get(j, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..nk).map(|j| v.get(j, c)).fold(f64::NEG_INFINITY, f64::max);
                for i in 0..nq {
                    prop_assert!(out.get(i, c) >= lo - 1e-12 && out.get(i, c) <= hi + 1e-12);
                }
            }
        }
    }
}
