//! Block partitioning: bidirectional co-clustering of queries and keys,
//! the independent K-means baseline, and normalized mutual information for
//! comparing labelings.
//!
//! Both clusterers assign in some feature space (normalized affinity rows
//! for co-clustering, raw tokens for K-means) but always update centroids
//! as raw-token block means. Empty blocks are repaired by moving in the
//! token farthest from its own centroid before the next step runs.

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, matmul, Matrix};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::collections::BTreeMap;

/// Block assignment for one token side.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    /// Block index per token, each strictly below `k`.
    pub labels: Vec<usize>,
    /// Raw-space block centroids, one row per block.
    pub centroids: Matrix,
    pub k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, centroids: Matrix, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("block count must be >= 1".into()));
        }
        if centroids.rows() != k {
            return Err(Error::Shape(format!(
                "centroid matrix has {} rows for k = {k}",
                centroids.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(Error::Argument(format!("label {bad} out of range for k = {k}")));
        }
        Ok(Self { labels, centroids, k })
    }
}

/// Joint query/key block assignments produced by the co-clustering loop.
#[derive(Clone, Debug, PartialEq)]
pub struct CoClusterResult {
    pub query_partition: Partition,
    pub key_partition: Partition,
    pub iterations_run: usize,
    pub seed: u64,
}

impl CoClusterResult {
    /// Pack two independently produced partitions (the K-means baseline)
    /// into the same container the selection stage consumes.
    pub fn from_partitions(
        query_partition: Partition,
        key_partition: Partition,
        iterations_run: usize,
        seed: u64,
    ) -> Self {
        Self { query_partition, key_partition, iterations_run, seed }
    }
}

/// Assign each row of `points` to the nearest centroid row by Euclidean
/// distance; ties go to the lowest block index.
pub fn assign_to_nearest(points: &Matrix, centroids: &Matrix) -> Vec<usize> {
    let mut labels = Vec::with_capacity(points.rows());
    for i in 0..points.rows() {
        let row = points.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for b in 0..centroids.rows() {
            let d = sq_dist(row, centroids.row(b));
            if d < best_d {
                best_d = d;
                best = b;
            }
        }
        labels.push(best);
    }
    labels
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Move tokens into empty blocks: repeatedly take the token farthest (in the
/// assignment space) from its own centroid out of a block with at least two
/// members. Terminates because every repair fills one empty block.
fn repair_empty_blocks(
    assign_rows: &Matrix,
    assign_centroids: &Matrix,
    labels: &mut [usize],
    k: usize,
) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut dist: Vec<f64> = (0..assign_rows.rows())
        .map(|i| sq_dist(assign_rows.row(i), assign_centroids.row(labels[i])))
        .collect();
    for b in 0..k {
        if counts[b] > 0 {
            continue;
        }
        let mut pick = None;
        let mut pick_d = f64::NEG_INFINITY;
        for (i, &d) in dist.iter().enumerate() {
            if counts[labels[i]] >= 2 && d > pick_d {
                pick_d = d;
                pick = Some(i);
            }
        }
        let i = pick.expect("an empty block implies some block holds two tokens");
        counts[labels[i]] -= 1;
        labels[i] = b;
        counts[b] = 1;
        // The stolen token now defines its block; never steal it again.
        dist[i] = f64::NEG_INFINITY;
    }
}

/// Raw-space block means. Every block must be nonempty (repair ran first).
fn mean_centroids(tokens: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let dim = tokens.cols();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(tokens.row(i)) {
            *s += v;
        }
    }
    for (b, &c) in counts.iter().enumerate() {
        if c > 0 {
            for s in &mut sums[b * dim..(b + 1) * dim] {
                *s /= c as f64;
            }
        }
    }
    Matrix::new(k, dim, sums).expect("means of finite tokens are finite")
}

fn sample_distinct_rows(rng: &mut StdRng, m: &Matrix, count: usize) -> Matrix {
    let idx = rand::seq::index::sample(rng, m.rows(), count);
    let mut data = Vec::with_capacity(count * m.cols());
    for i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(count, m.cols(), data).expect("sampled rows of a finite matrix")
}

/// Bidirectional co-clustering of queries and keys.
///
/// Per iteration, keys are grouped by their normalized affinity to the
/// current query centroids and queries by their normalized affinity to the
/// just-updated key centroids, with centroids recomputed as raw token means
/// after each side.
pub fn cocluster(
    q: &Matrix,
    k: &Matrix,
    k_q: usize,
    k_k: usize,
    i_max: usize,
    seed: u64,
) -> Result<CoClusterResult> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "queries have {} columns but keys have {}",
            q.cols(),
            k.cols()
        )));
    }
    if k_q == 0 || k_q > q.rows() {
        return Err(Error::Argument(format!(
            "k_q = {k_q} must lie in [1, {}]",
            q.rows()
        )));
    }
    if k_k == 0 || k_k > k.rows() {
        return Err(Error::Argument(format!(
            "k_k = {k_k} must lie in [1, {}]",
            k.rows()
        )));
    }
    if i_max == 0 {
        return Err(Error::Argument("i_max must be >= 1".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut c_q = sample_distinct_rows(&mut rng, q, k_q);
    let mut c_k = sample_distinct_rows(&mut rng, k, k_k);
    let mut labels_q = vec![0usize; q.rows()];
    let mut labels_k = vec![0usize; k.rows()];

    for _ in 0..i_max {
        // Step A: query-aware key-side partitioning.
        let p_k = l2_normalize_rows(&matmul(k, &c_q.transpose())?);
        let pbar_k = l2_normalize_rows(&matmul(&c_k, &c_q.transpose())?);
        labels_k = assign_to_nearest(&p_k, &pbar_k);
        repair_empty_blocks(&p_k, &pbar_k, &mut labels_k, k_k);
        c_k = mean_centroids(k, &labels_k, k_k);

        // Step B: key-aware query-side partitioning, using the fresh C_k.
        let p_q = l2_normalize_rows(&matmul(q, &c_k.transpose())?);
        let pbar_q = l2_normalize_rows(&matmul(&c_q, &c_k.transpose())?);
        labels_q = assign_to_nearest(&p_q, &pbar_q);
        repair_empty_blocks(&p_q, &pbar_q, &mut labels_q, k_q);
        c_q = mean_centroids(q, &labels_q, k_q);
    }

    Ok(CoClusterResult {
        query_partition: Partition::new(labels_q, c_q, k_q)?,
        key_partition: Partition::new(labels_k, c_k, k_k)?,
        iterations_run: i_max,
        seed,
    })
}

/// Keep a partition's labels but recompute centroids as block means of
/// `tokens`; used when clustering results are reused while tokens drift.
/// Blocks left empty by the stored labels keep their previous centroid.
pub fn recompute_centroids(partition: &Partition, tokens: &Matrix) -> Result<Partition> {
    if partition.labels.len() != tokens.rows() {
        return Err(Error::Shape(format!(
            "partition covers {} tokens, matrix has {}",
            partition.labels.len(),
            tokens.rows()
        )));
    }
    if partition.centroids.cols() != tokens.cols() {
        return Err(Error::Shape(format!(
            "centroids have {} columns, tokens have {}",
            partition.centroids.cols(),
            tokens.cols()
        )));
    }
    let mut counts = vec![0usize; partition.k];
    for &l in &partition.labels {
        counts[l] += 1;
    }
    let fresh = mean_centroids(tokens, &partition.labels, partition.k);
    let dim = tokens.cols();
    let mut data = Vec::with_capacity(partition.k * dim);
    for b in 0..partition.k {
        let source = if counts[b] > 0 { &fresh } else { &partition.centroids };
        data.extend_from_slice(source.row(b));
    }
    Partition::new(partition.labels.clone(), Matrix::new(partition.k, dim, data)?, partition.k)
}

/// Lloyd's K-means in raw token space with the same seeding, tie-break and
/// empty-block repair conventions as [`cocluster`].
pub fn kmeans(tokens: &Matrix, k: usize, iters: usize, seed: u64) -> Result<Partition> {
    if k == 0 || k > tokens.rows() {
        return Err(Error::Argument(format!(
            "k = {k} must lie in [1, {}]",
            tokens.rows()
        )));
    }
    if iters == 0 {
        return Err(Error::Argument("iters must be >= 1".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut centroids = sample_distinct_rows(&mut rng, tokens, k);
    let mut labels = vec![0usize; tokens.rows()];
    for _ in 0..iters {
        labels = assign_to_nearest(tokens, &centroids);
        repair_empty_blocks(tokens, &centroids, &mut labels, k);
        centroids = mean_centroids(tokens, &labels, k);
    }
    Partition::new(labels, centroids, k)
}

/// Normalized mutual information between two labelings, with entropies
/// averaged arithmetically. Returns 1 when both labelings are constant and
/// 0 when exactly one is.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "labelings have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("labelings must be nonempty".into()));
    }
    let n = a.len() as f64;
    let mut count_a: BTreeMap<usize, f64> = BTreeMap::new();
    let mut count_b: BTreeMap<usize, f64> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *count_a.entry(x).or_insert(0.0) += 1.0;
        *count_b.entry(y).or_insert(0.0) += 1.0;
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
    }
    let entropy = |counts: &BTreeMap<usize, f64>| -> f64 {
        -counts
            .values()
            .map(|c| {
                let p = c / n;
                p * p.ln()
            })
            .sum::<f64>()
    };
    let h_a = entropy(&count_a);
    let h_b = entropy(&count_b);
    if h_a == 0.0 && h_b == 0.0 {
        return Ok(1.0);
    }
    if h_a == 0.0 || h_b == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let p = c / n;
        mi += p * (p / (count_a[&x] / n * count_b[&y] / n)).ln();
    }
    Ok((mi / (0.5 * (h_a + h_b))).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = StdRng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Two tight groups of `per_group` tokens around +anchor and -anchor.
    fn two_group_tokens(seed: u64, per_group: usize, anchor: &[f64], spread: f64) -> Matrix {
        let mut rng = StdRng::seed_from_u64(seed);
        let dim = anchor.len();
        Matrix::from_fn(2 * per_group, dim, |i, j| {
            let sign = if i < per_group { 1.0 } else { -1.0 };
            sign * anchor[j] + spread * rng.random_range(-1.0..1.0)
        })
        .unwrap()
    }

    /// Canonical form of a partition: sorted blocks of sorted token indices.
    fn canonical(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
        let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            blocks[l].push(i);
        }
        blocks.retain(|b| !b.is_empty());
        blocks.sort();
        blocks
    }

    #[test]
    fn cocluster_singleton_blocks() {
        let q = random_matrix(1, 6, 3);
        let k = random_matrix(2, 6, 3);
        let res = cocluster(&q, &k, 6, 6, 2, 42).unwrap();
        for (side, tokens) in [(&res.query_partition, &q), (&res.key_partition, &k)] {
            let mut seen = vec![false; 6];
            for (i, &l) in side.labels.iter().enumerate() {
                assert!(!seen[l], "block {l} holds two tokens");
                seen[l] = true;
                assert_eq!(side.centroids.row(l), tokens.row(i), "centroid differs from token {i}");
            }
        }
    }

    #[test]
    fn cocluster_recovers_separated_groups_and_matches_brute_force() {
        let anchor = [2.0, 0.5, -1.0];
        let q = two_group_tokens(3, 4, &anchor, 0.05);
        let k = two_group_tokens(4, 4, &anchor, 0.05);
        let res = cocluster(&q, &k, 2, 2, 2, 7).unwrap();
        let truth = canonical(&[0, 0, 0, 0, 1, 1, 1, 1], 2);
        assert_eq!(canonical(&res.key_partition.labels, 2), truth);
        assert_eq!(canonical(&res.query_partition.labels, 2), truth);

        // Brute-force oracle: enumerate all 2-partitions of the 8 keys and
        // minimize within-block scatter of normalized affinity rows against
        // the ground-truth query group means.
        let mut cq = vec![vec![0.0; 3]; 2];
        for i in 0..8 {
            let g = if i < 4 { 0 } else { 1 };
            for j in 0..3 {
                cq[g][j] += q.get(i, j) / 4.0;
            }
        }
        let cq = Matrix::from_rows(&cq).unwrap();
        let affinity = l2_normalize_rows(&matmul(&k, &cq.transpose()).unwrap());
        let mut best_mask = 0u32;
        let mut best_scatter = f64::INFINITY;
        for mask in 1..128u32 {
            // bit i => key i in block 1; key 7 pinned to block 0 to halve the space
            let blocks: Vec<Vec<usize>> = {
                let mut b = vec![Vec::new(), Vec::new()];
                for i in 0..8 {
                    b[usize::from(mask >> i & 1 == 1)].push(i);
                }
                b
            };
            if blocks.iter().any(Vec::is_empty) {
                continue;
            }
            let mut scatter = 0.0;
            for block in &blocks {
                let mut mean = vec![0.0; 2];
                for &i in block {
                    for (m, &v) in mean.iter_mut().zip(affinity.row(i)) {
                        *m += v / block.len() as f64;
                    }
                }
                for &i in block {
                    scatter += sq_dist(affinity.row(i), &mean);
                }
            }
            if scatter < best_scatter {
                best_scatter = scatter;
                best_mask = mask;
            }
        }
        let oracle_labels: Vec<usize> =
            (0..8).map(|i| usize::from(best_mask >> i & 1 == 1)).collect();
        assert_eq!(canonical(&oracle_labels, 2), truth, "oracle optimum is the planted split");
    }

    #[test]
    fn cocluster_rejects_bad_arguments() {
        let q = random_matrix(5, 4, 2);
        let k = random_matrix(6, 4, 2);
        assert!(cocluster(&q, &k, 5, 2, 2, 0).is_err());
        assert!(cocluster(&q, &k, 2, 5, 2, 0).is_err());
        assert!(cocluster(&q, &k, 2, 2, 0, 0).is_err());
    }

    #[test]
    fn cocluster_is_deterministic() {
        let q = random_matrix(7, 20, 4);
        let k = random_matrix(8, 24, 4);
        let a = cocluster(&q, &k, 4, 5, 2, 123).unwrap();
        let b = cocluster(&q, &k, 4, 5, 2, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cocluster_centroids_equal_member_means() {
        let q = random_matrix(9, 20, 4);
        let k = random_matrix(10, 24, 4);
        let res = cocluster(&q, &k, 4, 5, 3, 11).unwrap();
        for (side, tokens) in [(&res.query_partition, &q), (&res.key_partition, &k)] {
            for b in 0..side.k {
                let members: Vec<usize> =
                    (0..tokens.rows()).filter(|&i| side.labels[i] == b).collect();
                assert!(!members.is_empty(), "block {b} empty after repair");
                for j in 0..tokens.cols() {
                    let mean: f64 =
                        members.iter().map(|&i| tokens.get(i, j)).sum::<f64>() / members.len() as f64;
                    assert!((side.centroids.get(b, j) - mean).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn key_partition_depends_on_anchor_query() {
        // Four keys whose optimal pairing flips with the query direction.
        let keys = Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, -1.0],
            vec![-1.0, 1.0],
        ])
        .unwrap();
        let q1 = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q2 = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let res1 = cocluster(&q1, &keys, 1, 2, 2, 5).unwrap();
        let res2 = cocluster(&q2, &keys, 1, 2, 2, 5).unwrap();
        let p1 = canonical(&res1.key_partition.labels, 2);
        let p2 = canonical(&res2.key_partition.labels, 2);
        assert_ne!(p1, p2, "key partition should follow the anchoring query");
        assert_eq!(p1, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(p2, vec![vec![0, 3], vec![1, 2]]);
    }

    #[test]
    fn kmeans_singleton_blocks() {
        let t = random_matrix(12, 5, 3);
        let part = kmeans(&t, 5, 2, 9).unwrap();
        let mut seen = vec![false; 5];
        for (i, &l) in part.labels.iter().enumerate() {
            assert!(!seen[l]);
            seen[l] = true;
            assert_eq!(part.centroids.row(l), t.row(i));
        }
    }

    #[test]
    fn kmeans_recovers_separated_groups() {
        let t = two_group_tokens(13, 4, &[3.0, -1.0, 0.5], 0.05);
        let part = kmeans(&t, 2, 4, 17).unwrap();
        assert_eq!(canonical(&part.labels, 2), canonical(&[0, 0, 0, 0, 1, 1, 1, 1], 2));
    }

    #[test]
    fn kmeans_identical_tokens_repair_is_deterministic() {
        let t = Matrix::from_fn(6, 3, |_, _| 0.25).unwrap();
        let a = kmeans(&t, 2, 2, 3).unwrap();
        let b = kmeans(&t, 2, 2, 3).unwrap();
        assert_eq!(a, b);
        let counts = {
            let mut c = [0usize; 2];
            for &l in &a.labels {
                c[l] += 1;
            }
            c
        };
        assert!(counts.iter().all(|&c| c >= 1), "repair must populate both blocks");
    }

    #[test]
    fn kmeans_rejects_oversized_k() {
        let t = random_matrix(14, 3, 2);
        assert!(kmeans(&t, 4, 2, 0).is_err());
        assert!(kmeans(&t, 2, 0, 0).is_err());
    }

    #[test]
    fn nmi_identical_labelings() {
        assert_eq!(nmi(&[0, 1, 2, 0], &[0, 1, 2, 0]).unwrap(), 1.0);
    }

    #[test]
    fn nmi_invariant_to_relabeling() {
        let a = [0, 0, 1, 1, 2, 2];
        let b = [5, 5, 9, 9, 1, 1];
        assert!((nmi(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_independent_partitions() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn nmi_degenerate_cases() {
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert!(nmi(&[0, 1], &[0]).is_err());
    }

    proptest! {
        #[test]
        fn assignment_is_locally_optimal(
            n in 1usize..12,
            k in 1usize..5,
            vals in proptest::collection::vec(-5.0f64..5.0, 60),
        ) {
            prop_assume!(vals.len() >= n * 3 + k * 3);
            let points = Matrix::new(n, 3, vals[..n * 3].to_vec()).unwrap();
            let centroids = Matrix::new(k, 3, vals[n * 3..n * 3 + k * 3].to_vec()).unwrap();
            let labels = assign_to_nearest(&points, &centroids);
            for i in 0..n {
                let own = sq_dist(points.row(i), centroids.row(labels[i]));
                for b in 0..k {
                    prop_assert!(
                        own <= sq_dist(points.row(i), centroids.row(b)) + 1e-15,
                        "token {i} would prefer block {b}"
                    );
                }
            }
        }

        #[test]
        fn nmi_stays_in_unit_interval(
            labels in proptest::collection::vec(0usize..4, 2..40),
            other in proptest::collection::vec(0usize..4, 2..40),
        ) {
            let n = labels.len().min(other.len());
            let v = nmi(&labels[..n], &other[..n]).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
