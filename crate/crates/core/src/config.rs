//! Run configuration: which policy to simulate and its knobs.

use crate::cache::CacheConfig;
use crate::partition::{SplitPreset, StaticLayout};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Load { path: String, reason: String },
    #[error("invalid run config: {0}")]
    Invalid(String),
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Elastic multimodal scheduling.
    Emp,
    /// Every instance runs encode, prefill and decode for its own requests.
    Coupled,
    /// Fixed groups with fixed stage roles and KV transfer from prefill to decode.
    StaticDecoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub policy: PolicyKind,
    pub instances: usize,
    /// KV slots per instance, in tokens.
    pub kv_capacity: u64,
    pub unicache: bool,
    pub nonblocking: bool,
    /// Modality-level elasticity: balancer moves and cross-group borrowing.
    pub elastic: bool,
    /// Group sizes (and stage sizes for the static baseline).
    pub layout: Option<StaticLayout>,
    /// Overrides the cost profile's penalty weight.
    pub w: Option<f64>,
    /// Allows preempting busy instances and migrating their KV.
    pub preemption: bool,
    pub balancer_window: f64,
    /// Seconds of prefill compute a dispatched batch may carry.
    pub prefill_window: f64,
    /// Most instances a single encode job may use; unlimited when unset.
    pub encode_parallel_cap: Option<usize>,
    /// Model weights in units of one instance's memory.
    pub model_footprint: f64,
    pub cache: CacheConfig,
    /// Checks KV conservation and capacity after every event.
    pub check_invariants: bool,
    pub event_log: bool,
    pub audit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            policy: PolicyKind::Emp,
            instances: 8,
            kv_capacity: 400_000,
            unicache: true,
            nonblocking: true,
            elastic: true,
            layout: None,
            w: None,
            preemption: true,
            balancer_window: 60.0,
            prefill_window: 1.0,
            encode_parallel_cap: None,
            model_footprint: 1.0,
            cache: CacheConfig::default(),
            check_invariants: false,
            event_log: false,
            audit: false,
        }
    }
}

impl RunConfig {
    /// Named variants accepted on the command line.
    pub fn named(name: &str) -> Result<Self, ConfigError> {
        let base = RunConfig::default();
        let emp_static = |p| RunConfig { elastic: false, layout: Some(StaticLayout::preset(p, base.instances)), ..base.clone() };
        Ok(match name {
            "emp" | "full" => base,
            "emp-off" => RunConfig { unicache: false, nonblocking: false, ..base },
            "unicache" => RunConfig { nonblocking: false, ..base },
            "emp-static-text" => emp_static(SplitPreset::TextDominant),
            "emp-static-equal" => emp_static(SplitPreset::Equal),
            "emp-static-mm" => emp_static(SplitPreset::MultimodalDominant),
            "coupled" => RunConfig { policy: PolicyKind::Coupled, unicache: false, nonblocking: false, elastic: false, ..base },
            "static-decoupled" => {
                RunConfig { policy: PolicyKind::StaticDecoupled, unicache: false, elastic: false, preemption: false, ..base }
            }
            _ => return Err(ConfigError::UnknownPolicy(name.to_string())),
        })
    }

    pub const NAMES: [&'static str; 9] = [
        "emp",
        "full",
        "emp-off",
        "unicache",
        "emp-static-text",
        "emp-static-equal",
        "emp-static-mm",
        "coupled",
        "static-decoupled",
    ];

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let err = |reason: String| ConfigError::Load { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| err(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Group layout in effect: the configured one or an even split.
    pub fn effective_layout(&self) -> StaticLayout {
        self.layout.unwrap_or_else(|| StaticLayout::even(self.instances))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.instances == 0 {
            return bad("instances must be positive");
        }
        if self.kv_capacity == 0 {
            return bad("kv_capacity must be positive");
        }
        if !(self.prefill_window > 0.0) || !(self.balancer_window > 0.0) {
            return bad("windows must be positive");
        }
        if self.encode_parallel_cap == Some(0) {
            return bad("encode_parallel_cap must be positive");
        }
        if self.w.is_some_and(|w| !(w >= 0.0 && w.is_finite())) {
            return bad("w must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.cache.image_fraction) {
            return bad("cache.image_fraction must lie in [0, 1]");
        }
        if self.model_footprint > 1.0 {
            return bad("model_footprint above one instance is not simulated");
        }
        if self.policy != PolicyKind::Coupled {
            let l = self.effective_layout();
            if l.total() != self.instances {
                return bad("layout does not cover every instance");
            }
            if l.text.total() == 0 || l.multimodal.total() == 0 {
                return bad("each modality group needs at least one instance");
            }
            if self.policy == PolicyKind::StaticDecoupled {
                if l.text.prefill == 0 || l.text.decode == 0 || l.multimodal.prefill == 0 || l.multimodal.decode == 0 {
                    return bad("static layout needs prefill and decode instances in both groups");
                }
                if self.nonblocking && l.multimodal.encode == 0 {
                    return bad("non-blocking static layout needs encode instances");
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_variants_validate() {
        for n in RunConfig::NAMES {
            RunConfig::named(n).unwrap().validate().unwrap();
        }
        assert!(matches!(RunConfig::named("vllm"), Err(ConfigError::UnknownPolicy(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::named("emp-static-mm").unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn rejects_uncovered_layout() {
        let c = RunConfig { layout: Some(StaticLayout::even(6)), ..RunConfig::default() };
        assert!(c.validate().is_err());
    }
}
