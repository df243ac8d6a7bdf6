//! Evaluation protocol: the top-mass reference pair set, block-pair budgets
//! induced by a partitioning, recall at a matched budget, and PSNR plus
//! error norms for sparse-vs-dense output comparison.

use crate::attention::{MASS_PREFIX_SLACK, ROW_STOCHASTIC_TOL};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::partitioning::CoClusterResult;
use crate::selection::CoarseEstimate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// The minimal set of (query, key) token pairs covering a target fraction
/// of total attention mass, in descending-mass order.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePairSet {
    pub pairs: Vec<(usize, usize)>,
    pub mass_fraction: f64,
    pub total_mass_covered: f64,
}

/// Sort all entries of a row-stochastic map globally (descending, ties by
/// lexicographic index) and keep the minimal prefix reaching
/// `mass_fraction` of the total mass.
pub fn reference_pairs(a: &Matrix, mass_fraction: f64) -> Result<ReferencePairSet> {
    if !(mass_fraction > 0.0 && mass_fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "mass_fraction must lie in (0, 1], got {mass_fraction}"
        )));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Argument("attention map must be nonempty".into()));
    }
    let mut total = 0.0;
    for i in 0..a.rows() {
        let sum: f64 = a.row(i).iter().sum();
        if (sum - 1.0).abs() > ROW_STOCHASTIC_TOL {
            return Err(Error::Contract(format!("row {i} sums to {sum}, not stochastic")));
        }
        total += sum;
    }
    let mut order: Vec<(usize, usize)> = (0..a.rows())
        .flat_map(|i| (0..a.cols()).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&x, &y| {
        a.get(y.0, y.1).partial_cmp(&a.get(x.0, x.1)).unwrap().then(x.cmp(&y))
    });
    let target = mass_fraction * total;
    let slack = MASS_PREFIX_SLACK * total.max(1.0);
    let mut covered = 0.0;
    let mut pairs = Vec::new();
    for (i, j) in order {
        covered += a.get(i, j);
        pairs.push((i, j));
        if covered >= target - slack {
            break;
        }
    }
    Ok(ReferencePairSet { pairs, mass_fraction, total_mass_covered: covered })
}

/// Count the distinct block pairs the reference set touches under the given
/// partitioning: the budget that lets this partitioning cover it exactly.
pub fn induced_budget(reference: &ReferencePairSet, result: &CoClusterResult) -> Result<usize> {
    let labels_q = &result.query_partition.labels;
    let labels_k = &result.key_partition.labels;
    let mut blocks = BTreeSet::new();
    for &(i, j) in &reference.pairs {
        let (Some(&bq), Some(&bk)) = (labels_q.get(i), labels_k.get(j)) else {
            return Err(Error::Argument(format!(
                "reference pair ({i}, {j}) outside the partitioned token range"
            )));
        };
        blocks.insert((bq, bk));
    }
    Ok(blocks.len())
}

/// Fraction of reference pairs whose block pair is in `selected`.
pub fn covered_fraction_with_pairs(
    reference: &ReferencePairSet,
    result: &CoClusterResult,
    selected: &BTreeSet<(usize, usize)>,
) -> Result<f64> {
    if reference.pairs.is_empty() {
        return Err(Error::Argument("reference pair set is empty".into()));
    }
    let labels_q = &result.query_partition.labels;
    let labels_k = &result.key_partition.labels;
    let mut covered = 0usize;
    for &(i, j) in &reference.pairs {
        let (Some(&bq), Some(&bk)) = (labels_q.get(i), labels_k.get(j)) else {
            return Err(Error::Argument(format!(
                "reference pair ({i}, {j}) outside the partitioned token range"
            )));
        };
        if selected.contains(&(bq, bk)) {
            covered += 1;
        }
    }
    Ok(covered as f64 / reference.pairs.len() as f64)
}

/// Coverage of the reference set by one method's block pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    #[serde(rename = "method")]
    pub method_name: String,
    #[serde(rename = "budget")]
    pub budget_pairs: usize,
    pub covered_fraction: f64,
    pub k_q: usize,
    pub k_k: usize,
    pub seed: u64,
}

/// Select the globally top `budget` block pairs by raw coarse-estimate value
/// (ties by lexicographic block index) and report the fraction of reference
/// pairs they cover.
pub fn recall_at_budget(
    a: &Matrix,
    reference: &ReferencePairSet,
    result: &CoClusterResult,
    est: &CoarseEstimate,
    budget: usize,
    method_name: &str,
) -> Result<RecallReport> {
    let k_q = est.values.rows();
    let k_k = est.values.cols();
    if budget == 0 {
        return Err(Error::Argument("budget must be >= 1".into()));
    }
    if budget > k_q * k_k {
        return Err(Error::Argument(format!(
            "budget {budget} exceeds {k_q} x {k_k} block pairs"
        )));
    }
    if result.query_partition.labels.len() != a.rows()
        || result.key_partition.labels.len() != a.cols()
    {
        return Err(Error::Shape(format!(
            "partitions cover {}x{} tokens, map is {}x{}",
            result.query_partition.labels.len(),
            result.key_partition.labels.len(),
            a.rows(),
            a.cols()
        )));
    }
    let mut order: Vec<(usize, usize)> =
        (0..k_q).flat_map(|i| (0..k_k).map(move |j| (i, j))).collect();
    order.sort_by(|&x, &y| {
        est.values.get(y.0, y.1).partial_cmp(&est.values.get(x.0, x.1)).unwrap().then(x.cmp(&y))
    });
    let selected: BTreeSet<(usize, usize)> = order.into_iter().take(budget).collect();
    let covered_fraction = covered_fraction_with_pairs(reference, result, &selected)?;
    Ok(RecallReport {
        method_name: method_name.to_string(),
        budget_pairs: budget,
        covered_fraction,
        k_q,
        k_k,
        seed: result.seed,
    })
}

/// Serialize possibly-infinite f64 values as the strings "inf" / "-inf",
/// since JSON has no infinity literal.
pub mod serde_infinite_f64 {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    struct InfVisitor;

    impl Visitor<'_> for InfVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            write!(f, "a number or the string \"inf\"/\"-inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("unexpected string {other:?}"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(InfVisitor)
    }
}

/// Similarity of a test matrix against a reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// Infinite exactly when the two matrices agree entrywise.
    #[serde(with = "serde_infinite_f64")]
    pub psnr_db: f64,
    pub max_abs_err: f64,
    /// Frobenius error relative to the reference norm.
    #[serde(with = "serde_infinite_f64")]
    pub rel_fro_err: f64,
}

/// PSNR with the reference's max absolute entry as the peak, plus the max
/// absolute error and the relative Frobenius error.
pub fn psnr(reference: &Matrix, test: &Matrix) -> Result<QualityReport> {
    if reference.rows() != test.rows() || reference.cols() != test.cols() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            reference.rows(),
            reference.cols(),
            test.rows(),
            test.cols()
        )));
    }
    if reference.data().is_empty() {
        return Err(Error::Argument("matrices must be nonempty".into()));
    }
    let count = reference.data().len() as f64;
    let mut sq_sum = 0.0;
    let mut max_abs_err = 0.0f64;
    for (r, t) in reference.data().iter().zip(test.data()) {
        let diff = r - t;
        sq_sum += diff * diff;
        max_abs_err = max_abs_err.max(diff.abs());
    }
    let mse = sq_sum / count;
    let peak = reference.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let psnr_db = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    };
    let ref_norm = reference.frobenius_norm();
    let rel_fro_err = if ref_norm == 0.0 {
        if sq_sum == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        sq_sum.sqrt() / ref_norm
    };
    Ok(QualityReport { psnr_db, max_abs_err, rel_fro_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partitioning::Partition;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn partitions(labels_q: Vec<usize>, k_q: usize, labels_k: Vec<usize>, k_k: usize) -> CoClusterResult {
        let dim = 2;
        CoClusterResult::from_partitions(
            Partition::new(labels_q, Matrix::zeros(k_q, dim), k_q).unwrap(),
            Partition::new(labels_k, Matrix::zeros(k_k, dim), k_k).unwrap(),
            0,
            0,
        )
    }

    fn stochastic(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = StdRng::seed_from_u64(seed);
        let rows_vec: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        Matrix::from_rows(&rows_vec).unwrap()
    }

    #[test]
    fn reference_pairs_one_hot() {
        let a = Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        let set = reference_pairs(&a, 0.5).unwrap();
        assert_eq!(set.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(set.total_mass_covered, 2.0);
    }

    #[test]
    fn reference_pairs_uniform() {
        let a = Matrix::from_fn(4, 4, |_, _| 0.25).unwrap();
        let set = reference_pairs(&a, 0.5).unwrap();
        assert_eq!(set.pairs.len(), 8);
    }

    #[test]
    fn reference_pairs_hand_case() {
        let a = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap();
        let set = reference_pairs(&a, 0.5).unwrap();
        assert_eq!(set.pairs, vec![(0, 0), (1, 0)]);
        assert!((set.total_mass_covered - 1.5).abs() < 1e-12);
    }

    #[test]
    fn reference_pairs_minimality() {
        for seed in 0..10 {
            let a = stochastic(seed, 6, 6);
            let set = reference_pairs(&a, 0.5).unwrap();
            let target = 0.5 * 6.0;
            let without_last: f64 =
                set.pairs[..set.pairs.len() - 1].iter().map(|&(i, j)| a.get(i, j)).sum();
            assert!(
                without_last < target,
                "seed {seed}: dropping the smallest member still covers the target"
            );
        }
    }

    #[test]
    fn reference_pairs_rejects_bad_inputs() {
        let a = Matrix::from_rows(&[vec![0.9, 0.2]]).unwrap();
        assert!(matches!(reference_pairs(&a, 0.5), Err(Error::Contract(_))));
        let a = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(reference_pairs(&a, 0.0).is_err());
    }

    #[test]
    fn induced_budget_singleton_blocks_counts_pairs() {
        let a = stochastic(1, 4, 4);
        let set = reference_pairs(&a, 0.5).unwrap();
        let result = partitions((0..4).collect(), 4, (0..4).collect(), 4);
        assert_eq!(induced_budget(&set, &result).unwrap(), set.pairs.len());
    }

    #[test]
    fn induced_budget_single_block_is_one() {
        let a = stochastic(2, 4, 4);
        let set = reference_pairs(&a, 0.5).unwrap();
        let result = partitions(vec![0; 4], 1, vec![0; 4], 1);
        assert_eq!(induced_budget(&set, &result).unwrap(), 1);
    }

    #[test]
    fn induced_budget_hand_mapping() {
        // 4 tokens, 2 blocks per side, reference touching 3 of 4 block pairs.
        let set = ReferencePairSet {
            pairs: vec![(0, 0), (0, 3), (3, 3)],
            mass_fraction: 0.5,
            total_mass_covered: 2.0,
        };
        let result = partitions(vec![0, 0, 1, 1], 2, vec![0, 0, 1, 1], 2);
        assert_eq!(induced_budget(&set, &result).unwrap(), 3);
    }

    #[test]
    fn induced_budget_rejects_out_of_range() {
        let set = ReferencePairSet {
            pairs: vec![(9, 0)],
            mass_fraction: 0.5,
            total_mass_covered: 1.0,
        };
        let result = partitions(vec![0, 1], 2, vec![0, 1], 2);
        assert!(induced_budget(&set, &result).is_err());
    }

    fn hand_estimate(result: &CoClusterResult, a: &Matrix) -> CoarseEstimate {
        // Block-level mass sums play the role of the coarse estimate here.
        let kq = result.query_partition.k;
        let kk = result.key_partition.k;
        let mut values = vec![0.0; kq * kk];
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let bq = result.query_partition.labels[i];
                let bk = result.key_partition.labels[j];
                values[bq * kk + bk] += a.get(i, j);
            }
        }
        CoarseEstimate { values: Matrix::new(kq, kk, values).unwrap(), d_prime: 2 }
    }

    #[test]
    fn recall_at_full_budget_is_one() {
        let a = stochastic(3, 6, 6);
        let set = reference_pairs(&a, 0.5).unwrap();
        let result = partitions(vec![0, 0, 1, 1, 2, 2], 3, vec![0, 1, 2, 0, 1, 2], 3);
        let est = hand_estimate(&result, &a);
        let report = recall_at_budget(&a, &set, &result, &est, 9, "test").unwrap();
        assert_eq!(report.covered_fraction, 1.0);
        assert_eq!(report.budget_pairs, 9);
    }

    #[test]
    fn recall_self_consistency_with_induced_pairs() {
        let a = stochastic(4, 6, 6);
        let set = reference_pairs(&a, 0.5).unwrap();
        let result = partitions(vec![0, 1, 0, 1, 0, 1], 2, vec![0, 0, 1, 1, 2, 2], 3);
        let induced: BTreeSet<(usize, usize)> = set
            .pairs
            .iter()
            .map(|&(i, j)| {
                (result.query_partition.labels[i], result.key_partition.labels[j])
            })
            .collect();
        let frac = covered_fraction_with_pairs(&set, &result, &induced).unwrap();
        assert_eq!(frac, 1.0);
        assert_eq!(induced.len(), induced_budget(&set, &result).unwrap());
    }

    #[test]
    fn recall_monotone_in_budget() {
        let a = stochastic(5, 8, 8);
        let set = reference_pairs(&a, 0.5).unwrap();
        let result = partitions(vec![0, 0, 1, 1, 2, 2, 3, 3], 4, vec![0, 1, 2, 3, 0, 1, 2, 3], 4);
        let est = hand_estimate(&result, &a);
        let mut last = 0.0;
        for budget in 1..=16 {
            let report = recall_at_budget(&a, &set, &result, &est, budget, "mono").unwrap();
            assert!(report.covered_fraction >= last, "budget {budget} decreased recall");
            last = report.covered_fraction;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn recall_rejects_bad_budgets() {
        let a = stochastic(6, 4, 4);
        let set = reference_pairs(&a, 0.5).unwrap();
        let result = partitions(vec![0, 0, 1, 1], 2, vec![0, 0, 1, 1], 2);
        let est = hand_estimate(&result, &a);
        assert!(recall_at_budget(&a, &set, &result, &est, 0, "x").is_err());
        assert!(recall_at_budget(&a, &set, &result, &est, 5, "x").is_err());
    }

    #[test]
    fn psnr_identical_matrices() {
        let m = stochastic(7, 3, 4);
        let report = psnr(&m, &m).unwrap();
        assert!(report.psnr_db.is_infinite() && report.psnr_db > 0.0);
        assert_eq!(report.max_abs_err, 0.0);
        assert_eq!(report.rel_fro_err, 0.0);
    }

    #[test]
    fn psnr_hand_case() {
        let reference = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let test = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let report = psnr(&reference, &test).unwrap();
        assert!((report.psnr_db - 10.0 * 2.0f64.log10()).abs() < 1e-12);
        assert_eq!(report.max_abs_err, 1.0);
        assert_eq!(report.rel_fro_err, 1.0);
    }

    #[test]
    fn psnr_scale_invariant() {
        let mut rng = StdRng::seed_from_u64(8);
        let reference = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let test = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let base = psnr(&reference, &test).unwrap();
        let scaled =
            psnr(&reference.scale(7.5).unwrap(), &test.scale(7.5).unwrap()).unwrap();
        assert!((base.psnr_db - scaled.psnr_db).abs() < 1e-10);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        assert!(psnr(&Matrix::zeros(2, 2), &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn quality_report_serializes_infinity_as_string() {
        let report = QualityReport { psnr_db: f64::INFINITY, max_abs_err: 0.0, rel_fro_err: 0.0 };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"psnr_db\":\"inf\""), "json was {json}");
        let back: QualityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let finite = QualityReport { psnr_db: 12.5, max_abs_err: 0.5, rel_fro_err: 0.25 };
        let json = serde_json::to_string(&finite).unwrap();
        let back: QualityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, finite);
    }
}
