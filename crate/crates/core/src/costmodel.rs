//! Analytic latency model used by the scheduler and the engine.
//!
//! Encode and prefill scale Amdahl-style with the number of instances;
//! decode only benefits through the per-instance share of the batch.

use crate::types::ImageInput;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("parallelism must be at least one instance")]
    InvalidParallelism,
    #[error("no images to encode")]
    NothingToEncode,
    #[error("no instances assigned")]
    NoInstances,
    #[error("decode batch is empty")]
    EmptyBatch,
    #[error("cannot shrink a batch to zero instances")]
    CannotShrinkToZero,
    #[error("invalid cost profile: {0}")]
    InvalidProfile(String),
    #[error("cannot read cost profile {path}: {reason}")]
    Load { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillModel {
    Linear,
    /// Reserved for an attention-quadratic prefill cost; rejected by `validate`.
    Quadratic,
}

/// Calibration constants for one instance type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    /// Image tokens per second on one instance.
    pub encode_rate: f64,
    /// Prompt tokens per second on one instance.
    pub prefill_rate: f64,
    pub prefill_model: PrefillModel,
    /// Seconds per decode step at batch size 1.
    pub decode_base: f64,
    /// Seconds per step per additional request on the same instance.
    pub decode_batch_coeff: f64,
    /// Seconds per step per 1000 resident KV tokens on an instance.
    pub decode_kv_coeff: f64,
    /// Serial fraction for Amdahl scaling, in [0, 1).
    pub parallel_alpha: f64,
    /// KV tokens per second moved between instances.
    pub migration_bandwidth: f64,
    /// Informational only.
    pub kv_bytes_per_token: u64,
    /// Penalty factor on degradation in the preemption cost.
    pub penalty_w: f64,
    /// Per-instance decode batch share above which decode counts as bottlenecked.
    pub decode_batch_threshold: u32,
}

/// Work remaining in a batch that may lose an instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchLoad {
    Decode {
        batch_size: usize,
        resident_kv: u64,
        remaining_output: u64,
    },
    Prefill {
        tokens: u64,
    },
}

impl CostProfile {
    pub fn validate(&self) -> Result<(), CostError> {
        let positive = [
            ("encode_rate", self.encode_rate),
            ("prefill_rate", self.prefill_rate),
            ("decode_base", self.decode_base),
            ("migration_bandwidth", self.migration_bandwidth),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CostError::InvalidProfile(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("decode_batch_coeff", self.decode_batch_coeff),
            ("decode_kv_coeff", self.decode_kv_coeff),
            ("penalty_w", self.penalty_w),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CostError::InvalidProfile(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.parallel_alpha) {
            return Err(CostError::InvalidProfile(format!(
                "parallel_alpha must lie in [0, 1), got {}",
                self.parallel_alpha
            )));
        }
        if self.decode_batch_threshold == 0 {
            return Err(CostError::InvalidProfile("decode_batch_threshold must be positive".into()));
        }
        if self.prefill_model != PrefillModel::Linear {
            return Err(CostError::InvalidProfile("only the linear prefill model is implemented".into()));
        }
        Ok(())
    }

    /// Reads a profile from TOML (by default) or JSON (`.json` extension).
    pub fn load(path: &Path) -> Result<Self, CostError> {
        let load_err = |reason: String| CostError::Load { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let profile: CostProfile = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| load_err(e.to_string()))?
        };
        profile.validate()?;
        Ok(profile)
    }

    /// The calibration shipped in `profiles/default.toml`.
    pub fn default_calibration() -> Self {
        toml::from_str(include_str!("../../../profiles/default.toml")).expect("shipped profile parses")
    }

    pub fn parallel_speedup(&self, n: usize) -> Result<f64, CostError> {
        if n == 0 {
            return Err(CostError::InvalidParallelism);
        }
        let a = self.parallel_alpha;
        Ok(1.0 / (a + (1.0 - a) / n as f64))
    }

    pub fn encode_time(&self, images: &[ImageInput], n: usize) -> Result<f64, CostError> {
        if images.is_empty() {
            return Err(CostError::NothingToEncode);
        }
        let tokens: u64 = images.iter().map(|i| i.token_count).sum();
        self.encode_time_tokens(tokens, n)
    }

    pub fn encode_time_tokens(&self, image_tokens: u64, n: usize) -> Result<f64, CostError> {
        let s = self.parallel_speedup(n)?;
        Ok(image_tokens as f64 / self.encode_rate / s)
    }

    /// T(R, E) for a batch that needs `tokens` of prefill compute.
    pub fn prefill_time(&self, tokens: u64, n: usize) -> Result<f64, CostError> {
        if n == 0 {
            return Err(CostError::NoInstances);
        }
        let s = self.parallel_speedup(n)?;
        Ok(tokens as f64 / self.prefill_rate / s)
    }

    /// Seconds per decode step for a batch spread over `n` instances.
    pub fn decode_step_time(&self, batch_size: usize, n: usize, resident_kv: u64) -> Result<f64, CostError> {
        if n == 0 {
            return Err(CostError::NoInstances);
        }
        if batch_size == 0 {
            return Err(CostError::EmptyBatch);
        }
        let share = batch_size.div_ceil(n) as f64;
        let kv_per_instance = resident_kv as f64 / n as f64;
        Ok(self.decode_base + self.decode_batch_coeff * share + self.decode_kv_coeff * kv_per_instance / 1000.0)
    }

    /// M(e): time to move `kv_used` tokens off an instance.
    pub fn migration_cost(&self, kv_used: u64) -> f64 {
        kv_used as f64 / self.migration_bandwidth
    }

    /// L(B, E_reduced): added completion time when `batch` runs on
    /// `n_reduced` instances instead of `n_full`. Never negative.
    pub fn degradation(&self, batch: BatchLoad, n_full: usize, n_reduced: usize) -> Result<f64, CostError> {
        if n_reduced == 0 {
            return Err(CostError::CannotShrinkToZero);
        }
        if n_full == 0 {
            return Err(CostError::NoInstances);
        }
        let delta = match batch {
            BatchLoad::Decode { batch_size: 0, .. } => 0.0,
            BatchLoad::Decode { batch_size, resident_kv, remaining_output } => {
                let slower = self.decode_step_time(batch_size, n_reduced, resident_kv)?;
                let base = self.decode_step_time(batch_size, n_full, resident_kv)?;
                (slower - base) * remaining_output as f64
            }
            BatchLoad::Prefill { tokens } => self.prefill_time(tokens, n_reduced)? - self.prefill_time(tokens, n_full)?,
        };
        Ok(delta.max(0.0))
    }

    /// Largest prefill batch (in tokens) worth dispatching onto `n` instances:
    /// the smaller of the free KV slots and what the instances can prefill
    /// within `window` seconds.
    pub fn tipping_point(&self, n: usize, free_kv_slots: u64, window: f64) -> Result<u64, CostError> {
        if n == 0 {
            return Err(CostError::NoInstances);
        }
        Ok(free_kv_slots.min(self.compute_bound(n, window)?))
    }

    pub fn compute_bound(&self, n: usize, window: f64) -> Result<u64, CostError> {
        let tokens = self.prefill_rate * self.parallel_speedup(n)? * window;
        Ok(if tokens.is_finite() { tokens.floor() as u64 } else { u64::MAX })
    }
}

#[cfg(test)]
pub(crate) fn test_profile() -> CostProfile {
    CostProfile {
        encode_rate: 6516.0,
        prefill_rate: 1000.0,
        prefill_model: PrefillModel::Linear,
        decode_base: 0.02,
        decode_batch_coeff: 0.005,
        decode_kv_coeff: 0.0,
        parallel_alpha: 0.0,
        migration_bandwidth: 400_000.0,
        kv_bytes_per_token: 1024,
        penalty_w: 1.0,
        decode_batch_threshold: 8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ContentHash, Pixels};
    use proptest::prelude::*;

    fn with_alpha(alpha: f64) -> CostProfile {
        CostProfile { parallel_alpha: alpha, ..test_profile() }
    }

    fn table1_image(tokens: u64) -> ImageInput {
        ImageInput { hash: ContentHash::of("t1"), token_count: tokens, pixels: Pixels { width: 904, height: 904 } }
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(with_alpha(0.3).parallel_speedup(1).unwrap(), 1.0);
        assert_eq!(with_alpha(0.0).parallel_speedup(4).unwrap(), 4.0);
        assert!((with_alpha(0.2).parallel_speedup(4).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(with_alpha(0.2).parallel_speedup(0), Err(CostError::InvalidParallelism));
    }

    #[test]
    fn speedup_saturates_at_inverse_alpha() {
        let p = with_alpha(0.2);
        let s = p.parallel_speedup(1_000_000).unwrap();
        assert!((s - 5.0).abs() / 5.0 < 0.01);
        let mut prev = 0.0;
        for n in 1..200 {
            let s = p.parallel_speedup(n).unwrap();
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn encode_examples() {
        let p = test_profile();
        let img = [table1_image(6516)];
        assert!((p.encode_time(&img, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((p.encode_time(&img, 2).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(p.encode_time(&[], 1), Err(CostError::NothingToEncode));
    }

    #[test]
    fn default_calibration_encode_dominates_prefill() {
        let p = CostProfile::default_calibration();
        p.validate().unwrap();
        for tokens in [6516, 7410] {
            let enc = p.encode_time(&[table1_image(tokens)], 1).unwrap();
            let pre = p.prefill_time(tokens, 1).unwrap();
            assert!(enc > 5.0 * pre, "{tokens}: encode {enc} vs prefill {pre}");
        }
    }

    #[test]
    fn prefill_examples() {
        let p = test_profile();
        assert!((p.prefill_time(1000, 1).unwrap() - 1.0).abs() < 1e-12);
        let p2 = with_alpha(0.2);
        // 2.0 / (1 / (0.2 + 0.8 / 2)) = 1.2
        assert!((p2.prefill_time(2000, 2).unwrap() - 1.2).abs() < 1e-12);
        assert_eq!(p.prefill_time(10, 0), Err(CostError::NoInstances));
    }

    #[test]
    fn decode_examples() {
        let p = test_profile();
        assert!((p.decode_step_time(1, 1, 0).unwrap() - 0.025).abs() < 1e-12);
        assert_eq!(p.decode_step_time(0, 1, 0), Err(CostError::EmptyBatch));
        assert_eq!(p.decode_step_time(3, 0, 0), Err(CostError::NoInstances));
        let kv = CostProfile { decode_kv_coeff: 0.001, ..p };
        // 0.02 + 0.005 * 2 + 0.001 * (4000 / 2 / 1000)
        assert!((kv.decode_step_time(4, 2, 4000).unwrap() - 0.032).abs() < 1e-12);
    }

    #[test]
    fn migration_examples() {
        let p = test_profile();
        assert_eq!(p.migration_cost(0), 0.0);
        assert!((p.migration_cost(40_000) - 0.1).abs() < 1e-12);
        assert_eq!(p.migration_cost(80_000), 2.0 * p.migration_cost(40_000));
    }

    #[test]
    fn degradation_examples() {
        let p = test_profile();
        let one = BatchLoad::Decode { batch_size: 1, resident_kv: 0, remaining_output: 100 };
        assert_eq!(p.degradation(one, 2, 2).unwrap(), 0.0);
        // share stays 1 for a single request, so no step delta.
        assert_eq!(p.degradation(one, 2, 1).unwrap(), 0.0);
        // two requests: share 1 -> 2, step delta 0.005, 100 tokens left.
        let two = BatchLoad::Decode { batch_size: 2, resident_kv: 0, remaining_output: 100 };
        assert!((p.degradation(two, 2, 1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(p.degradation(two, 2, 0), Err(CostError::CannotShrinkToZero));
        let pre = BatchLoad::Prefill { tokens: 1000 };
        assert!((p.degradation(pre, 2, 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tipping_point_examples() {
        let p = test_profile();
        assert_eq!(p.tipping_point(1, 500, 2.0).unwrap(), 500);
        assert_eq!(p.tipping_point(1, 1_000_000, 2.0).unwrap(), 2000);
        assert_eq!(p.tipping_point(2, u64::MAX, 2.0).unwrap(), 4000);
        assert_eq!(p.tipping_point(0, 10, 1.0), Err(CostError::NoInstances));
    }

    /// Reference sweep: throughput-within-window over batch sizes of equal
    /// requests; the compute bound must admit exactly the argmax batch.
    #[test]
    fn tipping_point_is_argmax_of_throughput_within_window() {
        let p = with_alpha(0.1);
        let per_request = 450u64;
        for n in 1..=4 {
            for window in [0.5, 1.0, 3.0, 10.0] {
                let speedup = 1.0 / (0.1 + 0.9 / n as f64);
                let mut best = (0.0, 0u64);
                for k in 1..=64u64 {
                    let tokens = k * per_request;
                    let t = tokens as f64 / 1000.0 / speedup;
                    let thr = if t <= window { tokens as f64 / t } else { 0.0 };
                    // flat throughput: prefer the larger batch on ties
                    if thr > 0.0 && thr >= best.0 - 1e-9 {
                        best = (thr, k);
                    }
                }
                let budget = p.tipping_point(n, u64::MAX, window).unwrap();
                let admitted = (budget / per_request).min(64);
                assert_eq!(admitted, best.1, "n={n} window={window}");
            }
        }
    }

    #[test]
    fn quadratic_prefill_is_rejected() {
        let p = CostProfile { prefill_model: PrefillModel::Quadratic, ..test_profile() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn load_requires_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("p.json");
        std::fs::write(&full, serde_json::to_string(&test_profile()).unwrap()).unwrap();
        assert_eq!(CostProfile::load(&full).unwrap(), test_profile());
        let mut v = serde_json::to_value(test_profile()).unwrap();
        v.as_object_mut().unwrap().remove("penalty_w");
        let partial = dir.path().join("q.json");
        std::fs::write(&partial, v.to_string()).unwrap();
        assert!(matches!(CostProfile::load(&partial), Err(CostError::Load { .. })));
    }

    proptest! {
        #[test]
        fn adding_an_instance_never_slows_prefill(tokens in 1u64..1_000_000, n in 1usize..64, alpha in 0.0f64..0.99) {
            let p = with_alpha(alpha);
            prop_assert!(p.prefill_time(tokens, n + 1).unwrap() <= p.prefill_time(tokens, n).unwrap());
        }

        #[test]
        fn costs_are_non_negative(kv in 0u64..10_000_000, b in 0usize..256, out in 0u64..100_000, full in 1usize..16, cut in 0usize..16) {
            let p = test_profile();
            prop_assert!(p.migration_cost(kv) >= 0.0);
            let reduced = full.saturating_sub(cut).max(1);
            let l = p.degradation(BatchLoad::Decode { batch_size: b, resident_kv: kv, remaining_output: out }, full, reduced).unwrap();
            prop_assert!(l >= 0.0);
            let l = p.degradation(BatchLoad::Prefill { tokens: kv }, reduced, full).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn scaling_rates_scales_times(tokens in 1u64..1_000_000, n in 1usize..16, b in 1usize..128, exp in -3i32..4) {
            let c = 2f64.powi(exp);
            let p = with_alpha(0.15);
            let q = CostProfile {
                encode_rate: p.encode_rate * c,
                prefill_rate: p.prefill_rate * c,
                migration_bandwidth: p.migration_bandwidth * c,
                decode_base: p.decode_base / c,
                decode_batch_coeff: p.decode_batch_coeff / c,
                decode_kv_coeff: p.decode_kv_coeff / c,
                ..p.clone()
            };
            prop_assert_eq!(q.prefill_time(tokens, n).unwrap(), p.prefill_time(tokens, n).unwrap() / c);
            prop_assert_eq!(q.encode_time_tokens(tokens, n).unwrap(), p.encode_time_tokens(tokens, n).unwrap() / c);
            prop_assert_eq!(q.migration_cost(tokens), p.migration_cost(tokens) / c);
            prop_assert_eq!(q.decode_step_time(b, n, tokens).unwrap(), p.decode_step_time(b, n, tokens).unwrap() / c);
        }
    }
}
