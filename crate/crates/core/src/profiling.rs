//! Offline profiling: run calibration inputs through a layer stack, collect
//! per-(layer, head) attention-density samples, fit Gaussians and derive a
//! conservative sparsity schedule.

use crate::attention::{attention_density, logits, project, LayerParams};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_fit, normal_quantile, softmax_rows, Matrix};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Calibration inputs: each entry is an n x d token matrix. Token count may
/// vary between inputs; the model dimension may not.
#[derive(Clone, Debug)]
pub struct CalibrationSet {
    pub inputs: Vec<Matrix>,
    /// Seed the inputs were generated from, kept for provenance.
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(inputs: Vec<Matrix>, seed: u64) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Argument("calibration set needs at least one input".into()))?;
        let d = first.cols();
        if let Some((i, m)) = inputs.iter().enumerate().find(|(_, m)| m.cols() != d) {
            return Err(Error::Shape(format!(
                "calibration input {i} has d = {}, expected {d}",
                m.cols()
            )));
        }
        Ok(Self { inputs, seed })
    }
}

/// Calibrated density statistics and derived budget for one (layer, head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    #[serde(rename = "layer")]
    pub layer_id: usize,
    #[serde(rename = "head")]
    pub head_id: usize,
    pub mean: f64,
    pub std: f64,
    /// Conservative density estimate, clamped to at most 1.
    pub d_hat: f64,
    /// Derived budget: exactly 1 - d_hat.
    pub sparsity: f64,
    #[serde(rename = "samples")]
    pub sample_count: usize,
}

/// The offline product: per-(layer, head) density statistics at a fixed
/// coverage tau and quantile level alpha, sorted by (layer, head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub tau: f64,
    pub alpha: f64,
    pub entries: Vec<ScheduleEntry>,
}

impl SparsitySchedule {
    pub fn entry(&self, layer_id: usize, head_id: usize) -> Option<&ScheduleEntry> {
        self.entries.iter().find(|e| e.layer_id == layer_id && e.head_id == head_id)
    }

    /// Check invariants after deserializing from an untrusted source.
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Format(format!(
                "tau = {} and alpha = {} must lie in (0, 1)",
                self.tau, self.alpha
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert((e.layer_id, e.head_id)) {
                return Err(Error::Format(format!(
                    "duplicate schedule entry for layer {} head {}",
                    e.layer_id, e.head_id
                )));
            }
            if !(e.d_hat > 0.0 && e.d_hat <= 1.0) {
                return Err(Error::Format(format!("d_hat {} outside (0, 1]", e.d_hat)));
            }
            if !(e.sparsity >= 0.0 && e.sparsity < 1.0) {
                return Err(Error::Format(format!("sparsity {} outside [0, 1)", e.sparsity)));
            }
            if !e.mean.is_finite() || !e.std.is_finite() || e.std < 0.0 {
                return Err(Error::Format("non-finite or negative schedule statistics".into()));
            }
            if e.sample_count == 0 {
                return Err(Error::Format("schedule entry with zero samples".into()));
            }
        }
        Ok(())
    }
}

/// Density samples keyed by (layer, head); one sample per calibration input.
pub type DensitySamples = BTreeMap<(usize, usize), Vec<f64>>;

/// Run every calibration input through every (layer, head) cell and record
/// the attention density at coverage `tau`.
pub fn collect_densities(
    stack: &[LayerParams],
    cal: &CalibrationSet,
    tau: f64,
) -> Result<DensitySamples> {
    let mut samples: DensitySamples = BTreeMap::new();
    for layer in stack {
        let cell = samples.entry((layer.layer_id, layer.head_id)).or_default();
        for input in &cal.inputs {
            let (q, k) = project(input, layer)?;
            let attn = softmax_rows(&logits(&q, &k, layer.d_prime)?);
            cell.push(attention_density(&attn, tau)?);
        }
    }
    Ok(samples)
}

/// Fit a Gaussian per cell and derive the conservative schedule:
/// `d_hat = min(1, mean + z_alpha * std)`, `sparsity = 1 - d_hat`.
pub fn fit_schedule(samples: &DensitySamples, alpha: f64, tau: f64) -> Result<SparsitySchedule> {
    let z_alpha = normal_quantile(alpha)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Argument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (&(layer_id, head_id), cell) in samples {
        let fit = gaussian_fit(cell)?;
        let d_hat = (fit.mean + z_alpha * fit.std).min(1.0);
        entries.push(ScheduleEntry {
            layer_id,
            head_id,
            mean: fit.mean,
            std: fit.std,
            d_hat,
            sparsity: 1.0 - d_hat,
            sample_count: fit.sample_count,
        });
    }
    Ok(SparsitySchedule { tau, alpha, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_stack, gen_tokens, SynthSpec};

    fn one_cell_samples(values: &[f64]) -> DensitySamples {
        let mut m = DensitySamples::new();
        m.insert((0, 0), values.to_vec());
        m
    }

    #[test]
    fn collect_single_layer_single_input_matches_direct_density() {
        let spec = SynthSpec { layers: 1, heads_per_layer: 1, layer_scales: vec![2.0], ..SynthSpec::default() };
        let stack = gen_stack(&spec).unwrap();
        let x = gen_tokens(&spec, 0).unwrap();
        let cal = CalibrationSet::new(vec![x.clone()], 0).unwrap();
        let samples = collect_densities(&stack, &cal, 0.95).unwrap();
        assert_eq!(samples.len(), 1);
        let cell = &samples[&(0, 0)];
        assert_eq!(cell.len(), 1);

        let (q, k) = project(&x, &stack[0]).unwrap();
        let attn = softmax_rows(&logits(&q, &k, spec.d_prime).unwrap());
        assert_eq!(cell[0], attention_density(&attn, 0.95).unwrap());
    }

    #[test]
    fn collect_zero_weight_layer_gives_uniform_density() {
        let spec = SynthSpec {
            layers: 1,
            heads_per_layer: 1,
            layer_scales: vec![0.0],
            n: 64,
            ..SynthSpec::default()
        };
        let stack = gen_stack(&spec).unwrap();
        let cal = CalibrationSet::new(
            vec![gen_tokens(&spec, 0).unwrap(), gen_tokens(&spec, 1).unwrap()],
            0,
        )
        .unwrap();
        let tau = 0.95;
        let samples = collect_densities(&stack, &cal, tau).unwrap();
        let expected = (tau * 64.0).ceil() / 64.0;
        for s in &samples[&(0, 0)] {
            assert_eq!(*s, expected);
        }
    }

    #[test]
    fn collect_duplicated_input_duplicates_samples() {
        let spec = SynthSpec { layers: 1, heads_per_layer: 1, layer_scales: vec![1.5], ..SynthSpec::default() };
        let stack = gen_stack(&spec).unwrap();
        let x = gen_tokens(&spec, 0).unwrap();
        let cal = CalibrationSet::new(vec![x.clone(), x], 0).unwrap();
        let samples = collect_densities(&stack, &cal, 0.9).unwrap();
        let cell = &samples[&(0, 0)];
        assert_eq!(cell[0], cell[1]);
    }

    #[test]
    fn fit_constant_samples() {
        let schedule = fit_schedule(&one_cell_samples(&[0.3, 0.3, 0.3]), 0.9, 0.95).unwrap();
        let e = &schedule.entries[0];
        assert_eq!(e.d_hat, 0.3);
        assert_eq!(e.sparsity, 0.7);
        assert_eq!(e.sample_count, 3);
    }

    #[test]
    fn fit_two_samples_matches_quantile_oracle() {
        let schedule = fit_schedule(&one_cell_samples(&[0.2, 0.4]), 0.95, 0.95).unwrap();
        let e = &schedule.entries[0];
        assert!((e.mean - 0.3).abs() < 1e-12);
        assert!((e.std - 0.1).abs() < 1e-12);
        assert!((e.d_hat - 0.464485363).abs() < 1e-6);
        assert!((e.sparsity - 0.535514637).abs() < 1e-6);
    }

    #[test]
    fn fit_clamps_d_hat_to_one() {
        let schedule = fit_schedule(&one_cell_samples(&[0.9, 1.0]), 0.95, 0.95).unwrap();
        let e = &schedule.entries[0];
        assert_eq!(e.d_hat, 1.0);
        assert_eq!(e.sparsity, 0.0);
    }

    #[test]
    fn fit_rejects_empty_cell() {
        assert!(fit_schedule(&one_cell_samples(&[]), 0.95, 0.95).is_err());
    }

    #[test]
    fn raising_alpha_never_lowers_d_hat() {
        let samples = one_cell_samples(&[0.2, 0.3, 0.5]);
        let mut last = 0.0;
        for alpha in [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99] {
            let schedule = fit_schedule(&samples, alpha, 0.95).unwrap();
            let e = &schedule.entries[0];
            assert!(e.d_hat >= last, "alpha {alpha} lowered d_hat");
            assert!((e.sparsity - (1.0 - e.d_hat)).abs() < 1e-15);
            last = e.d_hat;
        }
    }

    #[test]
    fn raising_tau_never_lowers_samples() {
        let spec = SynthSpec { layers: 2, heads_per_layer: 2, layer_scales: vec![1.0, 3.0], n: 64, ..SynthSpec::default() };
        let stack = gen_stack(&spec).unwrap();
        let cal =
            CalibrationSet::new(vec![gen_tokens(&spec, 0).unwrap(), gen_tokens(&spec, 1).unwrap()], 0)
                .unwrap();
        let lo = collect_densities(&stack, &cal, 0.8).unwrap();
        let hi = collect_densities(&stack, &cal, 0.9).unwrap();
        for (cell, lo_samples) in &lo {
            for (a, b) in lo_samples.iter().zip(&hi[cell]) {
                assert!(b >= a, "cell {cell:?}: density dropped from {a} to {b} as tau rose");
            }
        }
    }

    #[test]
    fn schedule_entries_sorted_and_unique() {
        let spec = SynthSpec { n: 32, ..SynthSpec::default() };
        let stack = gen_stack(&spec).unwrap();
        let cal = CalibrationSet::new(vec![gen_tokens(&spec, 0).unwrap()], 0).unwrap();
        let samples = collect_densities(&stack, &cal, 0.95).unwrap();
        let schedule = fit_schedule(&samples, 0.95, 0.95).unwrap();
        schedule.validate().unwrap();
        let keys: Vec<_> = schedule.entries.iter().map(|e| (e.layer_id, e.head_id)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
        assert_eq!(keys.len(), spec.layers * spec.heads_per_layer);
    }

    #[test]
    fn schedule_json_uses_fixed_keys() {
        let schedule = fit_schedule(&one_cell_samples(&[0.25, 0.35]), 0.95, 0.95).unwrap();
        let json = serde_json::to_value(&schedule).unwrap();
        let entry = &json["entries"][0];
        for key in ["layer", "head", "mean", "std", "d_hat", "sparsity", "samples"] {
            assert!(entry.get(key).is_some(), "missing key {key}");
        }
        assert!(json.get("tau").is_some() && json.get("alpha").is_some());
    }

    #[test]
    fn calibration_set_rejects_mixed_dims_and_empty() {
        assert!(CalibrationSet::new(vec![], 0).is_err());
        let a = Matrix::zeros(4, 3);
        let b = Matrix::zeros(4, 2);
        assert!(CalibrationSet::new(vec![a, b], 0).is_err());
    }
}
