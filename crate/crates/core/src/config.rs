//! Run configuration shared by every command: coverage and quantile levels,
//! block counts, the keep-ratio rule knobs, the synthetic-world spec and
//! the output directory.

use crate::error::{Error, Result};
use crate::selection::RhoSemantics;
use crate::synth::SynthSpec;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Cumulative-mass coverage target for densities and block recall.
    pub tau: f64,
    /// Quantile level of the conservative density estimate.
    pub alpha: f64,
    /// Sparsity threshold of the keep-ratio rule.
    pub theta: f64,
    pub k_q: usize,
    pub k_k: usize,
    /// Co-clustering iterations.
    pub i_max: usize,
    /// Steps between reclusterings in the pipeline.
    pub reuse_interval: usize,
    pub rho_semantics: RhoSemantics,
    /// Simulated per-step input drift scale (stands in for diffusion-step
    /// drift; no real denoising trajectory exists here).
    pub perturb_epsilon: f64,
    /// Calibration inputs drawn for profiling.
    pub calibration_inputs: usize,
    /// Layers always run dense regardless of the schedule.
    pub dense_layers: Vec<usize>,
    /// Force a fixed keep ratio across all cells, bypassing the rule.
    pub rho_override: Option<f64>,
    /// Top-mass fraction for the recall benchmark's reference set.
    pub mass_fraction: f64,
    pub synth: SynthSpec,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            alpha: 0.95,
            theta: 0.1,
            k_q: 16,
            k_k: 32,
            i_max: 2,
            reuse_interval: 20,
            rho_semantics: RhoSemantics::AsWritten,
            perturb_epsilon: 0.01,
            calibration_inputs: 10,
            dense_layers: Vec::new(),
            rho_override: None,
            mass_fraction: 0.5,
            synth: SynthSpec::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// The clustered single-layer setup the recall benchmark defaults to:
    /// 512 tokens in 8 planted clusters, 8 blocks per side.
    pub fn recall_benchmark_default() -> Self {
        Self {
            k_q: 8,
            k_k: 8,
            synth: SynthSpec {
                n: 512,
                cluster_count: 8,
                cluster_noise: 0.1,
                layers: 1,
                heads_per_layer: 1,
                layer_scales: vec![2.0],
                ..SynthSpec::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("alpha", self.alpha), ("theta", self.theta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Argument(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        // With alpha below 0.5 the "conservative" quantile would subtract
        // from the mean; the schedule derivation assumes it does not.
        if self.alpha < 0.5 {
            return Err(Error::Argument(format!("alpha = {} must be >= 0.5", self.alpha)));
        }
        if !(self.mass_fraction > 0.0 && self.mass_fraction <= 1.0) {
            return Err(Error::Argument(format!(
                "mass_fraction = {} must lie in (0, 1]",
                self.mass_fraction
            )));
        }
        if self.k_q == 0 || self.k_k == 0 || self.i_max == 0 || self.reuse_interval == 0 {
            return Err(Error::Argument(
                "k_q, k_k, i_max and reuse_interval must be >= 1".into(),
            ));
        }
        if self.calibration_inputs == 0 {
            return Err(Error::Argument("calibration_inputs must be >= 1".into()));
        }
        if !(self.perturb_epsilon >= 0.0 && self.perturb_epsilon.is_finite()) {
            return Err(Error::Argument(format!(
                "perturb_epsilon = {} must be >= 0",
                self.perturb_epsilon
            )));
        }
        if let Some(rho) = self.rho_override {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Argument(format!("rho_override = {rho} outside (0, 1]")));
            }
        }
        self.synth.validate()?;
        if self.k_q > self.synth.n || self.k_k > self.synth.n {
            return Err(Error::Argument(format!(
                "block counts ({}, {}) cannot exceed n = {}",
                self.k_q, self.k_k, self.synth.n
            )));
        }
        if let Some(bad) = self.dense_layers.iter().find(|l| **l >= self.synth.layers) {
            return Err(Error::Argument(format!(
                "dense layer {bad} out of range for {} layers",
                self.synth.layers
            )));
        }
        Ok(())
    }
}

/// Parse and validate a configuration from JSON bytes.
pub fn parse_run_config_json(bytes: &[u8]) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_slice(bytes)?;
    cfg.validate()?;
    Ok(cfg)
}
