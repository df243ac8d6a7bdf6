//! Command-line harness tying the pipeline together: generate synthetic
//! worlds, profile them into a sparsity schedule, cluster, select, attend,
//! benchmark partitioners and run the self-verification suite.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 I/O.

use blocksparse_core::attention::dense_attention;
use blocksparse_core::config::{parse_run_config_json, RunConfig};
use blocksparse_core::error::Error;
use blocksparse_core::io;
use blocksparse_core::metrics::psnr;
use blocksparse_core::partitioning::{cocluster, CoClusterResult};
use blocksparse_core::pipeline;
use blocksparse_core::selection::{block_recall, build_mask, coarse_estimate, select_rho};
use blocksparse_core::verify;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "blocksparse", version, about = "Block-sparse attention laboratory")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirror config keys; a --config file is merged first, flags win.
#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file merged under the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[arg(long = "kq", global = true)]
    k_q: Option<usize>,
    #[arg(long = "kk", global = true)]
    k_k: Option<usize>,
    #[arg(long = "imax", global = true)]
    i_max: Option<usize>,
    #[arg(long, global = true)]
    reuse_interval: Option<usize>,
    /// "as-written" or "density".
    #[arg(long, global = true)]
    rho_semantics: Option<String>,
    /// Master seed of the synthetic world.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Simulated per-step drift scale.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    calibration_inputs: Option<usize>,
    #[arg(long, global = true)]
    mass_fraction: Option<f64>,
    /// Comma-separated layer indices forced to dense attention.
    #[arg(long, global = true, value_delimiter = ',')]
    dense_layers: Option<Vec<usize>>,
    /// Fixed keep ratio applied to every cell, bypassing the rule.
    #[arg(long, global = true)]
    rho_override: Option<f64>,
    /// Token count of the synthetic world.
    #[arg(long, global = true)]
    n: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                parse_run_config_json(&bytes)?
            }
            None => base,
        };
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.theta {
            cfg.theta = v;
        }
        if let Some(v) = self.k_q {
            cfg.k_q = v;
        }
        if let Some(v) = self.k_k {
            cfg.k_k = v;
        }
        if let Some(v) = self.i_max {
            cfg.i_max = v;
        }
        if let Some(v) = self.reuse_interval {
            cfg.reuse_interval = v;
        }
        if let Some(v) = &self.rho_semantics {
            cfg.rho_semantics = v.parse()?;
        }
        if let Some(v) = self.seed {
            cfg.synth.master_seed = v;
        }
        if let Some(v) = self.epsilon {
            cfg.perturb_epsilon = v;
        }
        if let Some(v) = self.calibration_inputs {
            cfg.calibration_inputs = v;
        }
        if let Some(v) = self.mass_fraction {
            cfg.mass_fraction = v;
        }
        if let Some(v) = &self.dense_layers {
            cfg.dense_layers = v.clone();
        }
        if let Some(v) = self.rho_override {
            cfg.rho_override = Some(v);
        }
        if let Some(v) = self.n {
            cfg.synth.n = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write stack weights, calibration inputs and the manifest.
    Gen,
    /// Profile the generated stack into schedule.json.
    Profile,
    /// Co-cluster a query/key matrix pair into coupled block partitions.
    Cocluster {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        /// File-name prefix of the partition outputs.
        #[arg(long, default_value = "cocluster")]
        prefix: String,
    },
    /// Derive the keep ratio and block mask from a schedule and partitions.
    Select {
        #[arg(long, default_value = "cocluster")]
        prefix: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
    /// Run masked block-sparse attention and score it against the dense oracle.
    Attend {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        values: PathBuf,
        #[arg(long, default_value = "cocluster")]
        prefix: String,
        /// Mask file; defaults to mask.json in the output directory.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Run the full offline + online pipeline over simulated steps.
    Pipeline {
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Compare co-clustering against independent K-means at matched budgets.
    Bench {
        /// Comma-separated seeds; defaults to 0..=9.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the invariant checks; nonzero exit if any fails.
    Verify,
    /// Convert a matrix between the binary container and CSV.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Write the binary container with an f32 payload (version 2).
        #[arg(long)]
        f32: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Gen => {
            let cfg = cli.common.resolve(RunConfig::default())?;
            let written = pipeline::run_gen(&cfg)?;
            println!("wrote {} files under {}", written.len(), cfg.output_dir.display());
        }
        Command::Profile => {
            let cfg = cli.common.resolve(RunConfig::default())?;
            let schedule = pipeline::run_profile(&cfg)?;
            println!(
                "schedule: {} entries at tau={} alpha={} -> {}",
                schedule.entries.len(),
                schedule.tau,
                schedule.alpha,
                cfg.output_dir.join(pipeline::SCHEDULE_FILE).display()
            );
        }
        Command::Cocluster { queries, keys, prefix } => {
            let cfg = cli.common.resolve(RunConfig::default())?;
            let q = io::read_matrix(&queries)?;
            let k = io::read_matrix(&keys)?;
            let result =
                cocluster(&q, &k, cfg.k_q, cfg.k_k, cfg.i_max, cfg.synth.master_seed)?;
            let written = pipeline::write_cocluster(&cfg, &result, &prefix)?;
            println!("wrote {}", written.join(", "));
        }
        Command::Select { prefix, layer, head } => {
            let cfg = cli.common.resolve(RunConfig::default())?;
            let schedule = pipeline::load_or_build_schedule(&cfg)?;
            let entry = schedule.entry(layer, head).ok_or_else(|| {
                Error::Argument(format!("schedule has no entry for layer {layer} head {head}"))
            })?;
            let result = read_cocluster(&cfg, &prefix)?;
            let est = coarse_estimate(&result, cfg.synth.d_prime)?;
            let recall = block_recall(&est, cfg.tau)?;
            let decision =
                select_rho(recall, entry, cfg.theta, cfg.rho_semantics, result.key_partition.k)?;
            let mask = build_mask(&est, decision.rho)?;
            let mut manifest = io::Manifest::load(&cfg.output_dir)?;
            manifest.write_file(&cfg.output_dir, "mask.json", &io::to_json_bytes(&mask)?, None)?;
            manifest.write_file(
                &cfg.output_dir,
                "selection.json",
                &io::to_json_bytes(&decision)?,
                None,
            )?;
            manifest.save(&cfg.output_dir)?;
            println!(
                "recall={recall:.6} budget={:.6} rho={:.6} -> mask.json, selection.json",
                decision.budget, decision.rho
            );
        }
        Command::Attend { queries, keys, values, prefix, mask } => {
            let cfg = cli.common.resolve(RunConfig::default())?;
            let q = io::read_matrix(&queries)?;
            let k = io::read_matrix(&keys)?;
            let v = io::read_matrix(&values)?;
            let result = read_cocluster(&cfg, &prefix)?;
            let mask_path = mask.unwrap_or_else(|| cfg.output_dir.join("mask.json"));
            let mask_bytes = std::fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
            let mask = io::parse_mask_json(&mask_bytes)?;
            let sparse =
                blocksparse_core::selection::sparse_attention(&q, &k, &v, &result, &mask)?;
            let dense = dense_attention(&q, &k, &v)?;
            let quality = psnr(&dense, &sparse)?;
            let mut manifest = io::Manifest::load(&cfg.output_dir)?;
            manifest.write_file(
                &cfg.output_dir,
                "output.svom",
                &io::matrix_to_bytes(&sparse),
                None,
            )?;
            manifest.write_file(
                &cfg.output_dir,
                "quality.json",
                &io::to_json_bytes(&quality)?,
                None,
            )?;
            manifest.save(&cfg.output_dir)?;
            let psnr_text = if quality.psnr_db.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.4}", quality.psnr_db)
            };
            println!(
                "psnr_db={psnr_text} max_abs_err={:e} rel_fro_err={:e}",
                quality.max_abs_err, quality.rel_fro_err
            );
        }
        Command::Pipeline { steps, workers } => {
            let cfg = cli.common.resolve(RunConfig::default())?;
            let report = pipeline::run_pipeline(&cfg, steps, workers)?;
            let agg = &report.aggregates;
            let psnr_text = if agg.median_psnr_db.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.4}", agg.median_psnr_db)
            };
            println!(
                "{} cells: median psnr_db={psnr_text} rel_fro_err={:.6} recall={:.4} rho={:.4}",
                agg.cells, agg.median_rel_fro_err, agg.median_recall, agg.median_rho
            );
        }
        Command::Bench { seeds } => {
            let cfg = cli.common.resolve(RunConfig::recall_benchmark_default())?;
            let seeds = seeds.unwrap_or_else(|| (0..10).collect());
            let reports = pipeline::run_bench_recall(&cfg, &seeds)?;
            for pair in reports.chunks(2) {
                println!(
                    "seed {}: cocluster={:.4} kmeans={:.4} budget={}",
                    pair[0].seed, pair[0].covered_fraction, pair[1].covered_fraction,
                    pair[0].budget_pairs
                );
            }
            println!("-> {}", cfg.output_dir.join(pipeline::RECALL_FILE).display());
        }
        Command::Verify => {
            let cfg = cli.common.resolve(RunConfig::default())?;
            let outcome = verify::run_verify(&cfg)?;
            for check in &outcome.checks {
                println!("check {}: {}", check.name, if check.passed { "PASS" } else { "FAIL" });
            }
            if !outcome.passed {
                let failed: Vec<&str> = outcome
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.name.as_str())
                    .collect();
                eprintln!("failed checks: {}", failed.join(", "));
                return Ok(ExitCode::from(1));
            }
        }
        Command::Convert { input, output, f32: use_f32 } => {
            let matrix = match extension(&input) {
                "csv" => {
                    let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
                    io::parse_matrix_csv(&text)?
                }
                _ => io::read_matrix(&input)?,
            };
            match extension(&output) {
                "csv" => io::write_bytes(&output, io::matrix_to_csv(&matrix)?.as_bytes())?,
                _ if use_f32 => io::write_bytes(&output, &io::matrix_to_bytes_f32(&matrix))?,
                _ => io::write_bytes(&output, &io::matrix_to_bytes(&matrix))?,
            }
            println!("{} -> {} ({}x{})", input.display(), output.display(), matrix.rows(), matrix.cols());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn extension(path: &Path) -> &str {
    path.extension().and_then(|e| e.to_str()).unwrap_or("")
}

/// Load a co-clustering result written by the `cocluster` command.
fn read_cocluster(cfg: &RunConfig, prefix: &str) -> Result<CoClusterResult, Error> {
    let dir = &cfg.output_dir;
    let mut sides = Vec::with_capacity(2);
    let mut seed = 0;
    for side in ["query", "key"] {
        let labels_path = dir.join(format!("{prefix}_{side}_partition.json"));
        let bytes = std::fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let file = io::parse_partition_json(&bytes)?;
        seed = file.seed;
        let centroids = io::read_matrix(&dir.join(format!("{prefix}_{side}_centroids.svom")))?;
        sides.push(file.into_partition(centroids)?);
    }
    let key = sides.pop().expect("two sides");
    let query = sides.pop().expect("two sides");
    Ok(CoClusterResult::from_partitions(query, key, cfg.i_max, seed))
}
