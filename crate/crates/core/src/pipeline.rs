//! End-to-end harness: generate synthetic worlds to disk, profile them into
//! a schedule, run the two-stage sparse-attention pipeline over simulated
//! steps, and benchmark partitioners at matched block-pair budgets.
//!
//! Cells fan out over a worker pool, but every aggregation is order-fixed,
//! so reports are byte-identical at any worker count.

use crate::attention::{dense_attention, logits, project, LayerParams};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{
    matrix_to_bytes, parse_schedule_json, read_matrix, to_json_bytes, Manifest, PartitionFile,
};
use crate::metrics::{
    induced_budget, psnr, recall_at_budget, reference_pairs, serde_infinite_f64, RecallReport,
};
use crate::numerics::{softmax_rows, Matrix};
use crate::partitioning::{cocluster, kmeans, nmi, recompute_centroids, CoClusterResult};
use crate::profiling::{collect_densities, fit_schedule, CalibrationSet, SparsitySchedule};
use crate::selection::{block_recall, build_mask, coarse_estimate, select_rho};
use crate::synth::{cell_seed, cluster_seed, drift_seed, gen_cell, gen_stack, gen_tokens, input_seed, perturb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::PathBuf;

pub const SCHEDULE_FILE: &str = "schedule.json";
pub const REPORT_FILE: &str = "report.json";
pub const RECALL_FILE: &str = "recall.csv";
pub const SYNTH_FILE: &str = "synth.json";

fn weight_file(layer: usize, head: usize, which: &str) -> String {
    format!("weights/l{layer:02}_h{head:02}_{which}.svom")
}

fn calibration_file(index: usize) -> String {
    format!("calibration/input_{index:02}.svom")
}

/// Write stack weights, calibration inputs and the synth spec under the
/// output directory, recording every file in the manifest. Returns the
/// relative paths written.
pub fn run_gen(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    let mut manifest = Manifest::load(dir)?;
    let mut written = Vec::new();

    manifest.write_file(dir, SYNTH_FILE, &to_json_bytes(&cfg.synth)?, Some(cfg.synth.master_seed))?;
    written.push(SYNTH_FILE.to_string());

    for layer in 0..cfg.synth.layers {
        for head in 0..cfg.synth.heads_per_layer {
            let cell = gen_cell(&cfg.synth, layer, head)?;
            let seed = cell_seed(cfg.synth.master_seed, layer, head);
            for (which, w) in [("wq", &cell.w_q), ("wk", &cell.w_k)] {
                let rel = weight_file(layer, head, which);
                manifest.write_file(dir, &rel, &matrix_to_bytes(w), Some(seed))?;
                written.push(rel);
            }
        }
    }
    for index in 0..cfg.calibration_inputs {
        let tokens = gen_tokens(&cfg.synth, index as u64)?;
        let rel = calibration_file(index);
        manifest.write_file(
            dir,
            &rel,
            &matrix_to_bytes(&tokens),
            Some(input_seed(cfg.synth.master_seed, index as u64)),
        )?;
        written.push(rel);
    }
    manifest.save(dir)?;
    Ok(written)
}

/// Load the generated stack back from disk.
pub fn load_stack(cfg: &RunConfig) -> Result<Vec<LayerParams>> {
    let mut stack = Vec::new();
    for layer in 0..cfg.synth.layers {
        for head in 0..cfg.synth.heads_per_layer {
            let w_q = read_matrix(&cfg.output_dir.join(weight_file(layer, head, "wq")))?;
            let w_k = read_matrix(&cfg.output_dir.join(weight_file(layer, head, "wk")))?;
            stack.push(LayerParams::new(layer, head, cfg.synth.d, cfg.synth.d_prime, w_q, w_k)?);
        }
    }
    Ok(stack)
}

/// Load the generated calibration inputs back from disk.
pub fn load_calibration(cfg: &RunConfig) -> Result<CalibrationSet> {
    let mut inputs = Vec::with_capacity(cfg.calibration_inputs);
    for index in 0..cfg.calibration_inputs {
        inputs.push(read_matrix(&cfg.output_dir.join(calibration_file(index)))?);
    }
    CalibrationSet::new(inputs, cfg.synth.master_seed)
}

/// Profile the on-disk stack and calibration set into a schedule file.
pub fn run_profile(cfg: &RunConfig) -> Result<SparsitySchedule> {
    cfg.validate()?;
    let stack = load_stack(cfg)?;
    let cal = load_calibration(cfg)?;
    let samples = collect_densities(&stack, &cal, cfg.tau)?;
    let schedule = fit_schedule(&samples, cfg.alpha, cfg.tau)?;
    let mut manifest = Manifest::load(&cfg.output_dir)?;
    manifest.write_file(&cfg.output_dir, SCHEDULE_FILE, &to_json_bytes(&schedule)?, None)?;
    manifest.save(&cfg.output_dir)?;
    Ok(schedule)
}

/// Build the schedule without touching the filesystem.
pub fn build_schedule_in_memory(cfg: &RunConfig) -> Result<SparsitySchedule> {
    let stack = gen_stack(&cfg.synth)?;
    let mut inputs = Vec::with_capacity(cfg.calibration_inputs);
    for index in 0..cfg.calibration_inputs {
        inputs.push(gen_tokens(&cfg.synth, index as u64)?);
    }
    let cal = CalibrationSet::new(inputs, cfg.synth.master_seed)?;
    let samples = collect_densities(&stack, &cal, cfg.tau)?;
    fit_schedule(&samples, cfg.alpha, cfg.tau)
}

/// Use `schedule.json` when present, otherwise profile inline.
pub fn load_or_build_schedule(cfg: &RunConfig) -> Result<SparsitySchedule> {
    let path = cfg.output_dir.join(SCHEDULE_FILE);
    if path.exists() {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        return parse_schedule_json(&bytes);
    }
    build_schedule_in_memory(cfg)
}

/// One (layer, head, step) cell of the pipeline report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    /// Whether the clustering was reused from an earlier step.
    pub reused: bool,
    pub recall: f64,
    /// Schedule quantity that entered the keep-ratio rule.
    pub budget: f64,
    pub rho: f64,
    #[serde(with = "serde_infinite_f64")]
    pub psnr_db: f64,
    pub max_abs_err: f64,
    #[serde(with = "serde_infinite_f64")]
    pub rel_fro_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub cells: usize,
    #[serde(with = "serde_infinite_f64")]
    pub median_psnr_db: f64,
    #[serde(with = "serde_infinite_f64")]
    pub median_rel_fro_err: f64,
    pub median_recall: f64,
    pub median_rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub tau: f64,
    pub alpha: f64,
    pub theta: f64,
    pub rho_semantics: crate::selection::RhoSemantics,
    pub steps: usize,
    pub reuse_interval: usize,
    pub perturb_epsilon: f64,
    /// The simulated-drift disclaimer; no real denoising trajectory exists
    /// at this scale.
    pub drift_proxy: String,
    pub cells: Vec<CellReport>,
    pub aggregates: Aggregates,
}

/// Median of a nonempty list; infinities are legal, NaN is not expected.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

fn cell_context(layer: usize, head: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Contract(format!("layer {layer} head {head} step {step}: {e}"))
}

fn run_lane(
    cfg: &RunConfig,
    layer: &LayerParams,
    schedule: &SparsitySchedule,
    trajectory: &[Matrix],
) -> Result<Vec<CellReport>> {
    let entry = schedule.entry(layer.layer_id, layer.head_id).ok_or_else(|| {
        Error::Contract(format!(
            "schedule has no entry for layer {} head {}",
            layer.layer_id, layer.head_id
        ))
    })?;
    let mut reports = Vec::with_capacity(trajectory.len());
    let mut current: Option<CoClusterResult> = None;
    for (step, x) in trajectory.iter().enumerate() {
        let ctx = cell_context(layer.layer_id, layer.head_id, step);
        let (q, k) = project(x, layer).map_err(&ctx)?;
        let reused = step % cfg.reuse_interval != 0 && current.is_some();
        let result = if reused {
            let prev = current.take().expect("reused implies a stored clustering");
            CoClusterResult {
                query_partition: recompute_centroids(&prev.query_partition, &q).map_err(&ctx)?,
                key_partition: recompute_centroids(&prev.key_partition, &k).map_err(&ctx)?,
                ..prev
            }
        } else {
            let seed = cluster_seed(cfg.synth.master_seed, layer.layer_id, layer.head_id, step);
            cocluster(&q, &k, cfg.k_q, cfg.k_k, cfg.i_max, seed).map_err(&ctx)?
        };
        let est = coarse_estimate(&result, layer.d_prime).map_err(&ctx)?;
        let recall = block_recall(&est, cfg.tau).map_err(&ctx)?;
        let decision =
            select_rho(recall, entry, cfg.theta, cfg.rho_semantics, cfg.k_k).map_err(&ctx)?;
        let mut rho = decision.rho;
        if cfg.dense_layers.contains(&layer.layer_id) {
            rho = 1.0;
        }
        if let Some(forced) = cfg.rho_override {
            rho = forced;
        }
        let mask = build_mask(&est, rho).map_err(&ctx)?;
        // Tokens double as values; the desk model carries no value weights.
        let sparse =
            crate::selection::sparse_attention(&q, &k, x, &result, &mask).map_err(&ctx)?;
        let dense = dense_attention(&q, &k, x).map_err(&ctx)?;
        let quality = psnr(&dense, &sparse).map_err(&ctx)?;
        reports.push(CellReport {
            layer: layer.layer_id,
            head: layer.head_id,
            step,
            reused,
            recall,
            budget: decision.budget,
            rho,
            psnr_db: quality.psnr_db,
            max_abs_err: quality.max_abs_err,
            rel_fro_err: quality.rel_fro_err,
        });
        current = Some(result);
    }
    Ok(reports)
}

/// Run the two-stage pipeline for `steps` simulated steps on `workers`
/// threads and write `report.json`.
pub fn run_pipeline(cfg: &RunConfig, steps: usize, workers: usize) -> Result<PipelineReport> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Argument("steps must be >= 1".into()));
    }
    if workers == 0 {
        return Err(Error::Argument("workers must be >= 1".into()));
    }
    let schedule = load_or_build_schedule(cfg)?;
    let stack = gen_stack(&cfg.synth)?;

    let mut trajectory = Vec::with_capacity(steps);
    let mut x = gen_tokens(&cfg.synth, 0)?;
    for step in 0..steps {
        if step > 0 {
            x = perturb(
                &x,
                cfg.perturb_epsilon,
                drift_seed(cfg.synth.master_seed, step),
                cfg.synth.r_bound,
            )?;
        }
        trajectory.push(x.clone());
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Argument(format!("worker pool: {e}")))?;
    let lanes: Vec<Vec<CellReport>> = pool.install(|| {
        stack
            .par_iter()
            .map(|layer| run_lane(cfg, layer, &schedule, &trajectory))
            .collect::<Result<_>>()
    })?;
    let cells: Vec<CellReport> = lanes.into_iter().flatten().collect();

    let aggregates = Aggregates {
        cells: cells.len(),
        median_psnr_db: median(&cells.iter().map(|c| c.psnr_db).collect::<Vec<_>>()),
        median_rel_fro_err: median(&cells.iter().map(|c| c.rel_fro_err).collect::<Vec<_>>()),
        median_recall: median(&cells.iter().map(|c| c.recall).collect::<Vec<_>>()),
        median_rho: median(&cells.iter().map(|c| c.rho).collect::<Vec<_>>()),
    };
    let report = PipelineReport {
        tau: cfg.tau,
        alpha: cfg.alpha,
        theta: cfg.theta,
        rho_semantics: cfg.rho_semantics,
        steps,
        reuse_interval: cfg.reuse_interval,
        perturb_epsilon: cfg.perturb_epsilon,
        drift_proxy: "input drift simulated by seeded gaussian perturbation".to_string(),
        cells,
        aggregates,
    };
    let mut manifest = Manifest::load(&cfg.output_dir)?;
    manifest.write_file(&cfg.output_dir, REPORT_FILE, &to_json_bytes(&report)?, None)?;
    manifest.save(&cfg.output_dir)?;
    Ok(report)
}

/// Matched-budget comparison of co-clustering against independent K-means.
///
/// Per seed: one synthetic single-cell world, the dense attention map as
/// oracle, the top-mass reference set, both partitioners, and recall for
/// both at the K-means-induced block-pair budget.
pub fn run_bench_recall(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<RecallReport>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Argument("at least one seed required".into()));
    }
    let mut reports = Vec::with_capacity(seeds.len() * 2);
    for &seed in seeds {
        let spec = crate::synth::SynthSpec { master_seed: seed, ..cfg.synth.clone() };
        let layer = gen_cell(&spec, 0, 0)?;
        let tokens = gen_tokens(&spec, 0)?;
        let (q, k) = project(&tokens, &layer)?;
        let attn = softmax_rows(&logits(&q, &k, layer.d_prime)?);
        let reference = reference_pairs(&attn, cfg.mass_fraction)?;

        let base_seed = cluster_seed(seed, 0, 0, 0);
        let co = cocluster(&q, &k, cfg.k_q, cfg.k_k, cfg.i_max, base_seed)?;
        let km = CoClusterResult::from_partitions(
            kmeans(&q, cfg.k_q, cfg.i_max, crate::synth::fold_in(base_seed, 1))?,
            kmeans(&k, cfg.k_k, cfg.i_max, crate::synth::fold_in(base_seed, 2))?,
            cfg.i_max,
            base_seed,
        );
        let budget = induced_budget(&reference, &km)?;
        let est_co = coarse_estimate(&co, layer.d_prime)?;
        let est_km = coarse_estimate(&km, layer.d_prime)?;
        for (result, est, name) in
            [(&co, &est_co, "cocluster"), (&km, &est_km, "kmeans")]
        {
            let mut report = recall_at_budget(&attn, &reference, result, est, budget, name)?;
            // Report the world seed, not the derived clustering seed.
            report.seed = seed;
            reports.push(report);
        }
    }
    let csv = recall_reports_to_csv(seeds, &reports);
    let mut manifest = Manifest::load(&cfg.output_dir)?;
    manifest.write_file(&cfg.output_dir, RECALL_FILE, csv.as_bytes(), None)?;
    manifest.save(&cfg.output_dir)?;
    Ok(reports)
}

/// One CSV row per (seed, method).
pub fn recall_reports_to_csv(seeds: &[u64], reports: &[RecallReport]) -> String {
    let mut csv = String::from("seed,method,budget,covered_fraction,k_q,k_k\n");
    for (i, report) in reports.iter().enumerate() {
        let seed = seeds[i / 2];
        csv.push_str(&format!(
            "{seed},{},{},{},{},{}\n",
            report.method_name,
            report.budget_pairs,
            report.covered_fraction,
            report.k_q,
            report.k_k
        ));
    }
    csv
}

/// Similarity between clusterings before and after input drift, next to a
/// random-relabel baseline. Query- and key-side NMIs are averaged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReuseSimilarity {
    pub nmi: f64,
    pub baseline: f64,
}

pub fn reuse_similarity(cfg: &RunConfig, epsilon: f64, seed: u64) -> Result<ReuseSimilarity> {
    let spec = crate::synth::SynthSpec { master_seed: seed, ..cfg.synth.clone() };
    let layer = gen_cell(&spec, 0, 0)?;
    let x = gen_tokens(&spec, 0)?;
    let x_drifted = perturb(&x, epsilon, drift_seed(seed, 1), spec.r_bound)?;
    let (q1, k1) = project(&x, &layer)?;
    let (q2, k2) = project(&x_drifted, &layer)?;
    let cseed = cluster_seed(seed, 0, 0, 0);
    let before = cocluster(&q1, &k1, cfg.k_q, cfg.k_k, cfg.i_max, cseed)?;
    let after = cocluster(&q2, &k2, cfg.k_q, cfg.k_k, cfg.i_max, cseed)?;
    let sim_q = nmi(&before.query_partition.labels, &after.query_partition.labels)?;
    let sim_k = nmi(&before.key_partition.labels, &after.key_partition.labels)?;

    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(crate::synth::fold_in(cseed, 3));
    let random_q: Vec<usize> =
        (0..before.query_partition.labels.len()).map(|_| rng.random_range(0..cfg.k_q)).collect();
    let random_k: Vec<usize> =
        (0..before.key_partition.labels.len()).map(|_| rng.random_range(0..cfg.k_k)).collect();
    let base_q = nmi(&before.query_partition.labels, &random_q)?;
    let base_k = nmi(&before.key_partition.labels, &random_k)?;

    Ok(ReuseSimilarity { nmi: 0.5 * (sim_q + sim_k), baseline: 0.5 * (base_q + base_k) })
}

/// Resolved output path helper for commands that take relative names.
pub fn output_path(cfg: &RunConfig, rel: &str) -> PathBuf {
    cfg.output_dir.join(rel)
}

/// On-disk form of a co-clustering result (two partition files plus two
/// centroid matrices).
pub fn write_cocluster(
    cfg: &RunConfig,
    result: &CoClusterResult,
    prefix: &str,
) -> Result<Vec<String>> {
    let dir = &cfg.output_dir;
    let mut manifest = Manifest::load(dir)?;
    let mut written = Vec::new();
    for (side, part) in
        [("query", &result.query_partition), ("key", &result.key_partition)]
    {
        let labels_rel = format!("{prefix}_{side}_partition.json");
        let file = PartitionFile { k: part.k, labels: part.labels.clone(), seed: result.seed };
        manifest.write_file(dir, &labels_rel, &to_json_bytes(&file)?, Some(result.seed))?;
        written.push(labels_rel);
        let centroid_rel = format!("{prefix}_{side}_centroids.svom");
        manifest.write_file(dir, &centroid_rel, &matrix_to_bytes(&part.centroids), None)?;
        written.push(centroid_rel);
    }
    manifest.save(dir)?;
    Ok(written)
}
