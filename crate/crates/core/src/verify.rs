//! Self-verification harness: the invariant suites behind `verify`, shared
//! with the acceptance tests. Each check returns measured values so the
//! details file shows what was actually observed.

use crate::attention::{
    attention_density, dense_attention, logit_variance_direct, logit_variance_trace, logits,
    project, LayerParams,
};
use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::{psnr, recall_at_budget, reference_pairs};
use crate::numerics::{softmax_rows, Matrix};
use crate::partitioning::cocluster;
use crate::pipeline::median;
use crate::profiling::collect_densities;
use crate::selection::{block_recall, build_mask, coarse_estimate, sparse_attention, CoarseEstimate};
use crate::synth::{fold_in, gen_cell, gen_tokens, SynthSpec};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub details: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub passed: bool,
    pub checks: Vec<CheckReport>,
}

/// Alternative implementations injected by the harness self-test.
pub type TraceVarianceFn = dyn Fn(&Matrix, &LayerParams) -> Result<f64> + Sync;

#[derive(Default)]
pub struct VerifyOverrides<'a> {
    /// Replaces the closed-form variance inside the trace-identity check.
    pub trace_variance: Option<&'a TraceVarianceFn>,
}

fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).expect("finite entries")
}

fn random_layer(rng: &mut StdRng, d: usize, d_prime: usize) -> LayerParams {
    let scale = 1.0 / (d as f64).sqrt();
    let w_q = random_matrix(rng, d, d_prime).scale(scale).unwrap();
    let w_k = random_matrix(rng, d, d_prime).scale(scale).unwrap();
    LayerParams::new(0, 0, d, d_prime, w_q, w_k).expect("validated dims")
}

/// Trace-identity oracle: 50 random (input, layer) pairs at d = 32,
/// d' = 16, token counts cycling {16, 64, 256}; the direct row-variance
/// route must agree with the closed form to 1e-9 relative.
pub fn check_trace_identity(base_seed: u64, overrides: &VerifyOverrides) -> CheckReport {
    let mut rng = StdRng::seed_from_u64(fold_in(base_seed, 0x7244));
    let (d, d_prime) = (32, 16);
    let mut max_rel = 0.0f64;
    let mut failures = 0;
    for trial in 0..50 {
        let n = [16, 64, 256][trial % 3];
        let x = random_matrix(&mut rng, n, d);
        let layer = random_layer(&mut rng, d, d_prime);
        let direct = (|| -> Result<f64> {
            let (q, k) = project(&x, &layer)?;
            Ok(logit_variance_direct(&logits(&q, &k, d_prime)?))
        })()
        .expect("valid shapes");
        let trace = match overrides.trace_variance {
            Some(f) => f(&x, &layer),
            None => logit_variance_trace(&x, &layer),
        }
        .expect("valid shapes");
        let rel = (direct - trace).abs() / direct.max(1e-12);
        max_rel = max_rel.max(rel);
        if rel > 1e-9 {
            failures += 1;
        }
    }
    CheckReport {
        name: "trace_identity".into(),
        passed: failures == 0,
        details: json!({
            "pairs": 50,
            "max_relative_difference": max_rel,
            "tolerance": 1e-9,
            "failures": failures,
        }),
    }
}

/// Exactness: a full mask (rho = 1) must reproduce dense attention to
/// 1e-12 entrywise, with PSNR reported infinite.
pub fn check_exactness(base_seed: u64) -> CheckReport {
    let mut per_n = Vec::new();
    let mut passed = true;
    for &n in &[8usize, 64, 256] {
        let spec = SynthSpec {
            n,
            cluster_count: n.min(8),
            layers: 1,
            heads_per_layer: 1,
            layer_scales: vec![1.5],
            master_seed: fold_in(base_seed, n as u64),
            ..SynthSpec::default()
        };
        let layer = gen_cell(&spec, 0, 0).expect("valid spec");
        let x = gen_tokens(&spec, 0).expect("valid spec");
        let outcome = (|| -> Result<(f64, bool)> {
            let (q, k) = project(&x, &layer)?;
            let blocks = n.min(8) / 2;
            let result = cocluster(&q, &k, blocks, blocks, 2, spec.master_seed)?;
            let est = coarse_estimate(&result, layer.d_prime)?;
            let mask = build_mask(&est, 1.0)?;
            let sparse = sparse_attention(&q, &k, &x, &result, &mask)?;
            let dense = dense_attention(&q, &k, &x)?;
            let quality = psnr(&dense, &sparse)?;
            Ok((dense.max_abs_diff(&sparse)?, quality.psnr_db.is_infinite()))
        })();
        match outcome {
            Ok((max_diff, infinite)) => {
                let ok = max_diff <= 1e-12 && infinite;
                passed &= ok;
                per_n.push(json!({
                    "n": n,
                    "max_abs_diff": max_diff,
                    "psnr_infinite": infinite,
                    "passed": ok,
                }));
            }
            Err(e) => {
                passed = false;
                per_n.push(json!({"n": n, "error": e.to_string()}));
            }
        }
    }
    CheckReport {
        name: "exactness".into(),
        passed,
        details: json!({"tolerance": 1e-12, "cases": per_n}),
    }
}

/// Monotonicity suite: density and block recall in tau, mask nesting in
/// rho, recall in budget, and the median Frobenius error along the rho grid.
pub fn check_monotonicity(base_seed: u64) -> CheckReport {
    let spec = SynthSpec {
        n: 64,
        cluster_count: 8,
        layers: 1,
        heads_per_layer: 1,
        layer_scales: vec![2.0],
        master_seed: fold_in(base_seed, 0x6D6F),
        ..SynthSpec::default()
    };
    let layer = gen_cell(&spec, 0, 0).expect("valid spec");
    let x = gen_tokens(&spec, 0).expect("valid spec");
    let (q, k) = project(&x, &layer).expect("valid shapes");
    let attn = softmax_rows(&logits(&q, &k, layer.d_prime).expect("valid shapes"));
    let result = cocluster(&q, &k, 8, 8, 2, spec.master_seed).expect("valid arguments");
    let est = coarse_estimate(&result, layer.d_prime).expect("valid partitions");

    let taus: Vec<f64> = (1..=10).map(|t| t as f64 / 10.0).collect();
    let densities: Vec<f64> =
        taus.iter().map(|&t| attention_density(&attn, t).expect("stochastic rows")).collect();
    let density_ok = densities.windows(2).all(|w| w[1] >= w[0]);
    let recalls: Vec<f64> =
        taus.iter().map(|&t| block_recall(&est, t).expect("valid estimate")).collect();
    let recall_tau_ok = recalls.windows(2).all(|w| w[1] >= w[0]);

    let rho_grid = [0.25, 0.5, 0.75, 1.0];
    let masks: Vec<_> =
        rho_grid.iter().map(|&r| build_mask(&est, r).expect("valid rho")).collect();
    let nesting_ok = masks.windows(2).all(|pair| {
        pair[0]
            .selected
            .iter()
            .zip(&pair[1].selected)
            .all(|(small, large)| small.iter().all(|b| large.contains(b)))
    });

    let reference = reference_pairs(&attn, 0.5).expect("stochastic rows");
    let mut budget_fracs = Vec::new();
    for budget in 1..=(8 * 8) {
        budget_fracs.push(
            recall_at_budget(&attn, &reference, &result, &est, budget, "verify")
                .expect("valid budget")
                .covered_fraction,
        );
    }
    let budget_ok = budget_fracs.windows(2).all(|w| w[1] >= w[0]);

    // Median Frobenius error must not rise with rho (10 seeds).
    let mut errors_by_rho = vec![Vec::new(); rho_grid.len()];
    for seed in 0..10u64 {
        let s = SynthSpec { master_seed: fold_in(spec.master_seed, seed), ..spec.clone() };
        let xs = gen_tokens(&s, 0).expect("valid spec");
        let cell = gen_cell(&s, 0, 0).expect("valid spec");
        let (qs, ks) = project(&xs, &cell).expect("valid shapes");
        let res = cocluster(&qs, &ks, 8, 8, 2, s.master_seed).expect("valid arguments");
        let e = coarse_estimate(&res, cell.d_prime).expect("valid partitions");
        let dense = dense_attention(&qs, &ks, &xs).expect("valid shapes");
        for (slot, &rho) in rho_grid.iter().enumerate() {
            let mask = build_mask(&e, rho).expect("valid rho");
            let sparse = sparse_attention(&qs, &ks, &xs, &res, &mask).expect("valid mask");
            let diff: f64 = dense
                .data()
                .iter()
                .zip(sparse.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            errors_by_rho[slot].push(diff);
        }
    }
    let medians: Vec<f64> = errors_by_rho.iter().map(|v| median(v)).collect();
    let frobenius_ok = medians.windows(2).all(|w| w[1] <= w[0] + 1e-15);

    let passed = density_ok && recall_tau_ok && nesting_ok && budget_ok && frobenius_ok;
    CheckReport {
        name: "monotonicity".into(),
        passed,
        details: json!({
            "density_in_tau": {"passed": density_ok, "values": densities},
            "block_recall_in_tau": {"passed": recall_tau_ok, "values": recalls},
            "mask_nesting_in_rho": {"passed": nesting_ok},
            "recall_in_budget": {"passed": budget_ok},
            "median_frobenius_in_rho": {"passed": frobenius_ok, "medians": medians},
        }),
    }
}

/// Variance-proxy scaling: the median |V(X) - V(X_hat)| over 20 input pairs
/// must shrink at least 2x going from n = 128 to n = 2048 (the bound
/// predicts 4x).
pub fn check_stability_scaling(base_seed: u64) -> CheckReport {
    let (d, d_prime) = (32, 16);
    let layer_spec = SynthSpec {
        n: 16,
        d,
        d_prime,
        layers: 1,
        heads_per_layer: 1,
        layer_scales: vec![1.0],
        cluster_count: 16,
        master_seed: fold_in(base_seed, 0x7363),
        ..SynthSpec::default()
    };
    let layer = gen_cell(&layer_spec, 0, 0).expect("valid spec");
    let mut medians = Vec::new();
    for &n in &[128usize, 2048] {
        let mut diffs = Vec::with_capacity(20);
        for pair in 0..20u64 {
            // i.i.d. tokens: one planted center per token keeps sample
            // moments concentrating as n grows.
            let spec = SynthSpec {
                n,
                d,
                d_prime,
                layers: 1,
                heads_per_layer: 1,
                layer_scales: vec![1.0],
                r_bound: 1.0,
                cluster_count: n,
                cluster_noise: 0.1,
                master_seed: fold_in(layer_spec.master_seed, pair),
            };
            let x = gen_tokens(&spec, 0).expect("valid spec");
            let x_hat = gen_tokens(&spec, 1).expect("valid spec");
            let v = logit_variance_trace(&x, &layer).expect("valid shapes");
            let v_hat = logit_variance_trace(&x_hat, &layer).expect("valid shapes");
            diffs.push((v - v_hat).abs());
        }
        medians.push(median(&diffs));
    }
    let passed = medians[1] <= 0.5 * medians[0];
    CheckReport {
        name: "stability_scaling".into(),
        passed,
        details: json!({
            "median_at_128": medians[0],
            "median_at_2048": medians[1],
            "required_ratio": 0.5,
            "observed_ratio": medians[1] / medians[0],
        }),
    }
}

/// Layer heterogeneity and stability: per-layer mean densities must spread
/// at least 5x wider than the mean within-layer deviation, and the medians
/// must strictly follow the spectral scales.
pub fn check_heterogeneity(base_seed: u64) -> CheckReport {
    let spec = SynthSpec {
        n: 256,
        layers: 4,
        heads_per_layer: 1,
        layer_scales: vec![0.5, 1.0, 2.0, 4.0],
        cluster_count: 256,
        cluster_noise: 0.1,
        master_seed: fold_in(base_seed, 0x6865),
        ..SynthSpec::default()
    };
    let stack = crate::synth::gen_stack(&spec).expect("valid spec");
    let inputs: Vec<Matrix> =
        (0..10).map(|i| gen_tokens(&spec, i).expect("valid spec")).collect();
    let cal = crate::profiling::CalibrationSet::new(inputs, spec.master_seed).expect("nonempty");
    let samples = collect_densities(&stack, &cal, 0.8).expect("valid stack");

    let mut means = Vec::new();
    let mut stds = Vec::new();
    let mut medians = Vec::new();
    for layer in 0..spec.layers {
        let cell = &samples[&(layer, 0)];
        let fit = crate::numerics::gaussian_fit(cell).expect("nonempty samples");
        means.push(fit.mean);
        stds.push(fit.std);
        medians.push(median(cell));
    }
    let range = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - means.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_std = stds.iter().sum::<f64>() / stds.len() as f64;
    let spread_ok = range >= 5.0 * mean_std;
    // larger scale, sparser attention, lower density
    let ordering_ok = medians.windows(2).all(|w| w[1] < w[0]);
    CheckReport {
        name: "heterogeneity".into(),
        passed: spread_ok && ordering_ok,
        details: json!({
            "layer_scales": spec.layer_scales,
            "mean_density_per_layer": means,
            "std_per_layer": stds,
            "median_density_per_layer": medians,
            "between_layer_range": range,
            "mean_within_layer_std": mean_std,
            "required_spread_factor": 5.0,
            "spread_ok": spread_ok,
            "ordering_ok": ordering_ok,
        }),
    }
}

/// Run every check; the outcome passes only if all checks do.
pub fn run_all(cfg: &RunConfig, overrides: &VerifyOverrides) -> VerifyOutcome {
    let seed = cfg.synth.master_seed;
    let checks = vec![
        check_trace_identity(seed, overrides),
        check_exactness(seed),
        check_monotonicity(seed),
        check_stability_scaling(seed),
        check_heterogeneity(seed),
    ];
    VerifyOutcome { passed: checks.iter().all(|c| c.passed), checks }
}

/// Run all checks and write `details.json` into the output directory.
pub fn run_verify(cfg: &RunConfig) -> Result<VerifyOutcome> {
    cfg.validate()?;
    let outcome = run_all(cfg, &VerifyOverrides::default());
    let mut manifest = crate::io::Manifest::load(&cfg.output_dir)?;
    manifest.write_file(
        &cfg.output_dir,
        "details.json",
        &crate::io::to_json_bytes(&outcome)?,
        None,
    )?;
    manifest.save(&cfg.output_dir)?;
    Ok(outcome)
}

/// Placeholder-free accessor so integration tests can reuse one estimate.
pub fn sample_estimate(seed: u64) -> Result<CoarseEstimate> {
    let spec = SynthSpec {
        n: 32,
        cluster_count: 4,
        layers: 1,
        heads_per_layer: 1,
        layer_scales: vec![1.0],
        master_seed: seed,
        ..SynthSpec::default()
    };
    let layer = gen_cell(&spec, 0, 0)?;
    let x = gen_tokens(&spec, 0)?;
    let (q, k) = project(&x, &layer)?;
    let result = cocluster(&q, &k, 4, 4, 2, seed)?;
    coarse_estimate(&result, layer.d_prime)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_checks_pass() {
        let cfg = RunConfig::default();
        let outcome = run_all(&cfg, &VerifyOverrides::default());
        for check in &outcome.checks {
            assert!(check.passed, "{} failed: {}", check.name, check.details);
        }
        assert!(outcome.passed);
    }

    #[test]
    fn corrupted_trace_formula_fails_by_name() {
        let cfg = RunConfig::default();
        let corrupted: &TraceVarianceFn = &|x, layer| Ok(logit_variance_trace(x, layer)? + 0.125);
        let overrides = VerifyOverrides { trace_variance: Some(corrupted) };
        let outcome = run_all(&cfg, &overrides);
        assert!(!outcome.passed);
        let failing: Vec<&str> = outcome
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(failing, vec!["trace_identity"]);
    }
}
