//! Online block selection: the coarse block-level estimate from centroid
//! products, the recall measure on it, the threshold-dependent keep-ratio
//! rule, mask construction and masked block-sparse attention.

use crate::attention::MASS_PREFIX_SLACK;
use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_rows, Matrix};
use crate::partitioning::CoClusterResult;
use crate::profiling::ScheduleEntry;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Block-level stand-in for the attention map: raw centroid products.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseEstimate {
    /// K_q x K_k matrix of raw inner products `C_q C_k`ᵀ.
    pub values: Matrix,
    /// Head dimension used when the estimate is softmax-normalized.
    pub d_prime: usize,
}

/// Which budget quantity enters the keep-ratio rule.
///
/// `AsWritten` feeds the schedule's sparsity into the min/max rule verbatim;
/// `Density` feeds the keep ratio `d_hat` instead. The branch condition
/// compares sparsity against theta either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoSemantics {
    AsWritten,
    Density,
}

impl fmt::Display for RhoSemantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AsWritten => write!(f, "as-written"),
            Self::Density => write!(f, "density"),
        }
    }
}

impl FromStr for RhoSemantics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(Self::AsWritten),
            "density" => Ok(Self::Density),
            other => Err(Error::Argument(format!(
                "unknown rho semantics {other:?}, expected \"as-written\" or \"density\""
            ))),
        }
    }
}

/// Outcome of the keep-ratio rule for one (layer, head) cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub recall_ratio: f64,
    /// The schedule quantity that entered the rule (sparsity or d_hat).
    pub budget: f64,
    pub theta: f64,
    pub rho: f64,
    pub semantics: RhoSemantics,
}

/// Per query block, the set of key blocks dense attention is computed over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMask {
    pub k_q: usize,
    pub k_k: usize,
    /// Keep ratio actually applied.
    pub rho: f64,
    /// Sorted key-block indices per query block; every row has the same
    /// length `ceil(rho * k_k)` and is never empty.
    pub selected: Vec<Vec<usize>>,
}

impl BlockMask {
    /// Row budget implied by a keep ratio.
    pub fn row_budget(rho: f64, k_k: usize) -> usize {
        ((rho * k_k as f64).ceil() as usize).clamp(1, k_k)
    }

    /// Check all invariants; used after deserializing untrusted data.
    pub fn validate(&self) -> Result<()> {
        if self.k_q == 0 || self.k_k == 0 {
            return Err(Error::Format("mask block counts must be >= 1".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Format(format!("rho {} outside (0, 1]", self.rho)));
        }
        if self.selected.len() != self.k_q {
            return Err(Error::Format(format!(
                "mask has {} rows for k_q = {}",
                self.selected.len(),
                self.k_q
            )));
        }
        let budget = Self::row_budget(self.rho, self.k_k);
        for (b, row) in self.selected.iter().enumerate() {
            if row.len() != budget {
                return Err(Error::Format(format!(
                    "query block {b} selects {} key blocks, expected {budget}",
                    row.len()
                )));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!("query block {b} selection not ascending")));
            }
            if row.iter().any(|&kb| kb >= self.k_k) {
                return Err(Error::Format(format!("query block {b} selects out-of-range block")));
            }
        }
        Ok(())
    }
}

/// Raw centroid products `C_q C_k`ᵀ.
pub fn coarse_estimate(result: &CoClusterResult, d_prime: usize) -> Result<CoarseEstimate> {
    if d_prime == 0 {
        return Err(Error::Argument("d_prime must be >= 1".into()));
    }
    let values = matmul(
        &result.query_partition.centroids,
        &result.key_partition.centroids.transpose(),
    )?;
    Ok(CoarseEstimate { values, d_prime })
}

/// Block-level analog of the attention density: softmax-normalize the scaled
/// estimate and return the mean minimal prefix fraction covering `tau`.
pub fn block_recall(est: &CoarseEstimate, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Argument(format!("tau must lie in (0, 1], got {tau}")));
    }
    let scaled = est.values.scale(1.0 / (est.d_prime as f64).sqrt())?;
    let weights = softmax_rows(&scaled);
    let k_k = weights.cols();
    if weights.rows() == 0 || k_k == 0 {
        return Err(Error::Argument("coarse estimate must be nonempty".into()));
    }
    // Deliberately a second implementation of the prefix count; tests pin it
    // against the token-level density routine.
    let mut total = 0.0;
    for i in 0..weights.rows() {
        let row = weights.row(i);
        let mut order: Vec<usize> = (0..k_k).collect();
        order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap().then(x.cmp(&y)));
        let mut acc = 0.0;
        let mut fraction = 1.0;
        for (count, &j) in order.iter().enumerate() {
            acc += row[j];
            if acc >= tau - MASS_PREFIX_SLACK {
                fraction = (count + 1) as f64 / k_k as f64;
                break;
            }
        }
        total += fraction;
    }
    Ok(total / weights.rows() as f64)
}

/// Threshold-dependent keep-ratio rule.
///
/// When the schedule's sparsity exceeds `theta`, rho is the smaller of the
/// measured recall and the budget; otherwise the larger. The budget quantity
/// is chosen by `semantics`, and the result is clamped to `[1/k_k, 1]`.
pub fn select_rho(
    recall_ratio: f64,
    entry: &ScheduleEntry,
    theta: f64,
    semantics: RhoSemantics,
    k_k: usize,
) -> Result<SelectionDecision> {
    if !(recall_ratio > 0.0 && recall_ratio <= 1.0) {
        return Err(Error::Argument(format!("recall ratio {recall_ratio} outside (0, 1]")));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Argument(format!("theta {theta} outside (0, 1)")));
    }
    if k_k == 0 {
        return Err(Error::Argument("k_k must be >= 1".into()));
    }
    let budget = match semantics {
        RhoSemantics::AsWritten => entry.sparsity,
        RhoSemantics::Density => entry.d_hat,
    };
    let raw = if entry.sparsity > theta {
        recall_ratio.min(budget)
    } else {
        recall_ratio.max(budget)
    };
    let rho = raw.clamp(1.0 / k_k as f64, 1.0);
    Ok(SelectionDecision { recall_ratio, budget, theta, rho, semantics })
}

/// Select the top `ceil(rho * k_k)` key blocks per query block by raw
/// estimate value; ties go to the lower key-block index.
pub fn build_mask(est: &CoarseEstimate, rho: f64) -> Result<BlockMask> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Argument(format!("rho {rho} outside (0, 1]")));
    }
    let k_q = est.values.rows();
    let k_k = est.values.cols();
    if k_q == 0 || k_k == 0 {
        return Err(Error::Argument("coarse estimate must be nonempty".into()));
    }
    let budget = BlockMask::row_budget(rho, k_k);
    let mut selected = Vec::with_capacity(k_q);
    for i in 0..k_q {
        let row = est.values.row(i);
        let mut order: Vec<usize> = (0..k_k).collect();
        order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap().then(x.cmp(&y)));
        let mut keep: Vec<usize> = order[..budget].to_vec();
        keep.sort_unstable();
        selected.push(keep);
    }
    Ok(BlockMask { k_q, k_k, rho, selected })
}

/// Token-level block-sparse attention.
///
/// Each query token attends exactly to the keys whose block is selected for
/// the query's block; softmax runs over those logits only. With a full mask
/// this reproduces dense attention bit for bit.
pub fn sparse_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    result: &CoClusterResult,
    mask: &BlockMask,
) -> Result<Matrix> {
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
    let labels_q = &result.query_partition.labels;
    let labels_k = &result.key_partition.labels;
    if labels_q.len() != q.rows() || labels_k.len() != k.rows() {
        return Err(Error::Shape(format!(
            "partitions cover {}/{} tokens, matrices have {}/{}",
            labels_q.len(),
            labels_k.len(),
            q.rows(),
            k.rows()
        )));
    }
    if mask.k_q != result.query_partition.k || mask.k_k != result.key_partition.k {
        return Err(Error::Shape(format!(
            "mask is {}x{} blocks, partitions are {}x{}",
            mask.k_q, mask.k_k, result.query_partition.k, result.key_partition.k
        )));
    }
    // allowed_blocks[b][kb]: is key block kb selected for query block b
    let mut allowed_blocks = vec![vec![false; mask.k_k]; mask.k_q];
    for (b, row) in mask.selected.iter().enumerate() {
        for &kb in row {
            if kb >= mask.k_k {
                return Err(Error::Contract(format!("mask selects key block {kb} >= {}", mask.k_k)));
            }
            allowed_blocks[b][kb] = true;
        }
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = vec![0.0; q.rows() * v.cols()];
    let mut logit_buf: Vec<(usize, f64)> = Vec::with_capacity(k.rows());
    for i in 0..q.rows() {
        let allowed = &allowed_blocks[labels_q[i]];
        logit_buf.clear();
        let q_row = q.row(i);
        for j in 0..k.rows() {
            if allowed[labels_k[j]] {
                logit_buf.push((j, crate::numerics::dot(q_row, k.row(j)) * scale));
            }
        }
        if logit_buf.is_empty() {
            return Err(Error::Contract(format!(
                "query token {i} (block {}) has an empty allowed key set",
                labels_q[i]
            )));
        }
        let max = logit_buf.iter().map(|&(_, z)| z).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (_, z) in logit_buf.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        let out_row = &mut out[i * v.cols()..(i + 1) * v.cols()];
        for &(j, e) in &logit_buf {
            let w = e / sum;
            for (o, &vj) in out_row.iter_mut().zip(v.row(j)) {
                *o += w * vj;
            }
        }
    }
    Matrix::new(q.rows(), v.cols(), out)
}
