//! Deterministic synthetic generators: layer stacks with controllable
//! per-layer spectral scale, token sets with planted cluster structure
//! inside an R-ball, and seeded input perturbation for reuse studies.
//!
//! Every random draw is keyed by a 64-bit seed derived from the master seed
//! with [`fold_in`], so cells can be generated in any order (or in parallel)
//! without changing their contents.

use crate::attention::LayerParams;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Parameters of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Tokens per generated input.
    pub n: usize,
    /// Model (token) dimension.
    pub d: usize,
    /// Head dimension.
    pub d_prime: usize,
    pub layers: usize,
    pub heads_per_layer: usize,
    /// Token-norm bound R; every generated token satisfies |x| <= R.
    pub r_bound: f64,
    /// Number of planted cluster centers.
    pub cluster_count: usize,
    /// Gaussian noise scale around each center.
    pub cluster_noise: f64,
    /// Per-layer weight scale; larger values mean larger coupling norm and
    /// sparser attention. One entry per layer.
    pub layer_scales: Vec<f64>,
    pub master_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 256,
            d: 32,
            d_prime: 16,
            layers: 4,
            heads_per_layer: 2,
            r_bound: 1.0,
            cluster_count: 8,
            cluster_noise: 0.1,
            layer_scales: vec![0.5, 1.0, 2.0, 4.0],
            master_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.d_prime == 0 {
            return Err(Error::Argument("n, d and d_prime must be >= 1".into()));
        }
        if self.layers == 0 || self.heads_per_layer == 0 {
            return Err(Error::Argument("layers and heads_per_layer must be >= 1".into()));
        }
        if !(self.r_bound > 0.0 && self.r_bound.is_finite()) {
            return Err(Error::Argument(format!("r_bound must be positive, got {}", self.r_bound)));
        }
        if self.cluster_count == 0 || self.cluster_count > self.n {
            return Err(Error::Argument(format!(
                "cluster_count {} must lie in [1, n = {}]",
                self.cluster_count, self.n
            )));
        }
        if !(self.cluster_noise >= 0.0 && self.cluster_noise.is_finite()) {
            return Err(Error::Argument(format!(
                "cluster_noise must be >= 0, got {}",
                self.cluster_noise
            )));
        }
        if self.layer_scales.len() != self.layers {
            return Err(Error::Argument(format!(
                "layer_scales has {} entries for {} layers",
                self.layer_scales.len(),
                self.layers
            )));
        }
        // Zero is allowed: a zero-scale layer produces uniform attention,
        // which the profiling path relies on as a degenerate reference.
        if let Some(bad) = self.layer_scales.iter().find(|g| !g.is_finite() || **g < 0.0) {
            return Err(Error::Argument(format!("layer scale {bad} must be finite and >= 0")));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; the standard avalanche constants.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a data word into a seed: `mix64(seed ^ mix64(data))`.
///
/// Folding is order-sensitive, so `fold_in(fold_in(s, a), b)` and
/// `fold_in(fold_in(s, b), a)` name different streams.
pub fn fold_in(seed: u64, data: u64) -> u64 {
    mix64(seed ^ mix64(data))
}

/// Stream labels folded in before indices, keeping streams disjoint.
const STREAM_WEIGHTS: u64 = 0x5745_4947;
const STREAM_TOKENS: u64 = 0x544f_4b45;
const STREAM_CLUSTER: u64 = 0x434c_5553;
const STREAM_DRIFT: u64 = 0x4452_4946;

/// Seed for one (layer, head) weight cell.
pub fn cell_seed(master_seed: u64, layer: usize, head: usize) -> u64 {
    fold_in(fold_in(fold_in(master_seed, STREAM_WEIGHTS), layer as u64), head as u64)
}

/// Seed for one calibration/pipeline input.
pub fn input_seed(master_seed: u64, index: u64) -> u64 {
    fold_in(fold_in(master_seed, STREAM_TOKENS), index)
}

/// Seed for a clustering run at a given (layer, head, step) cell.
pub fn cluster_seed(master_seed: u64, layer: usize, head: usize, step: usize) -> u64 {
    fold_in(
        fold_in(fold_in(fold_in(master_seed, STREAM_CLUSTER), layer as u64), head as u64),
        step as u64,
    )
}

/// Seed for the simulated input drift at one step.
pub fn drift_seed(master_seed: u64, step: usize) -> u64 {
    fold_in(fold_in(master_seed, STREAM_DRIFT), step as u64)
}

fn normal_matrix(rng: &mut StdRng, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

/// Generate the weights of one (layer, head) cell from its own seed.
pub fn gen_cell(spec: &SynthSpec, layer: usize, head: usize) -> Result<LayerParams> {
    let mut rng = StdRng::seed_from_u64(cell_seed(spec.master_seed, layer, head));
    let scale = spec.layer_scales[layer] / (spec.d as f64).sqrt();
    let w_q = normal_matrix(&mut rng, spec.d, spec.d_prime, scale)?;
    let w_k = normal_matrix(&mut rng, spec.d, spec.d_prime, scale)?;
    LayerParams::new(layer, head, spec.d, spec.d_prime, w_q, w_k)
}

/// Generate the full stack, one [`LayerParams`] per (layer, head) cell,
/// ordered by (layer, head).
pub fn gen_stack(spec: &SynthSpec) -> Result<Vec<LayerParams>> {
    spec.validate()?;
    let mut stack = Vec::with_capacity(spec.layers * spec.heads_per_layer);
    for layer in 0..spec.layers {
        for head in 0..spec.heads_per_layer {
            stack.push(gen_cell(spec, layer, head)?);
        }
    }
    Ok(stack)
}

/// Generate one n x d token matrix inside the R-ball.
///
/// `cluster_count` centers are drawn on the sphere of radius 0.7 R; token i
/// is its round-robin center (i mod cluster_count) plus Gaussian noise, and
/// any token leaving the ball is radially rescaled back to norm R.
pub fn gen_tokens(spec: &SynthSpec, input_index: u64) -> Result<Matrix> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(input_seed(spec.master_seed, input_index));
    let d = spec.d;
    let target = 0.7 * spec.r_bound;
    let mut centers = Vec::with_capacity(spec.cluster_count);
    for _ in 0..spec.cluster_count {
        let mut c: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        // A fresh Gaussian vector is zero with probability zero; guard anyway.
        if norm > 0.0 {
            for v in &mut c {
                *v *= target / norm;
            }
        } else {
            c[0] = target;
        }
        centers.push(c);
    }
    let mut data = Vec::with_capacity(spec.n * d);
    for i in 0..spec.n {
        let center = &centers[i % spec.cluster_count];
        let mut row: Vec<f64> = center
            .iter()
            .map(|c| c + spec.cluster_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > spec.r_bound {
            for v in &mut row {
                *v *= spec.r_bound / norm;
            }
        }
        data.extend_from_slice(&row);
    }
    Matrix::new(spec.n, d, data)
}

/// Add seeded Gaussian noise of scale `epsilon`, then project back into the
/// `r_bound`-ball used at generation time.
pub fn perturb(x: &Matrix, epsilon: f64, seed: u64, r_bound: f64) -> Result<Matrix> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Argument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if !(r_bound > 0.0 && r_bound.is_finite()) {
        return Err(Error::Argument(format!("r_bound must be positive, got {r_bound}")));
    }
    if epsilon == 0.0 {
        // Zero drift is the identity; re-projecting would jitter rows that
        // sit on the ball boundary by one ulp.
        return Ok(x.clone());
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        let mut row: Vec<f64> = x
            .row(i)
            .iter()
            .map(|v| v + epsilon * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > r_bound {
            for v in &mut row {
                *v *= r_bound / norm;
            }
        }
        data.extend_from_slice(&row);
    }
    Matrix::new(x.rows(), x.cols(), data)
}
