//! Deterministic discrete-event simulation of an instance cluster serving a
//! trace under one scheduling policy.

mod ledger;
mod sim;

pub use ledger::{Entry, KvLedger};
pub use sim::run;

use crate::cache::CacheStats;
use crate::config::ConfigError;
use crate::costmodel::CostError;
use crate::partition::{PolicyDecision, ScaleDecision};
use crate::types::{GroupId, InstanceId, Modality, RequestId, Stage, TraceError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("invalid trace: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidTrace(Vec<TraceError>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("request {id} needs {tokens} KV slots but an instance holds {capacity}")]
    RequestTooLarge { id: RequestId, tokens: u64, capacity: u64 },
    #[error("deadlock at t={time}: {pending} requests unfinished\n{dump}")]
    DeadlockDetected { time: f64, pending: usize, dump: String },
    #[error("invariant violated at t={time}: {what}")]
    InvariantViolated { time: f64, what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RequestArrival,
    EncodeDone,
    PrefillDone,
    DecodeStep,
    MigrationDone,
    SchedulerTick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub requests: Vec<RequestId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub batch: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub instances: Vec<InstanceId>,
}

/// Outcome of one request. TTFT = queue_wait + encode + migration + prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub modality: Modality,
    pub priority_hint: bool,
    pub group: GroupId,
    pub arrival_time: f64,
    pub first_token_time: f64,
    pub completion_time: f64,
    pub total_input_len: u64,
    pub output_len: u64,
    pub queue_wait: f64,
    pub encode: f64,
    pub migration: f64,
    pub prefill: f64,
    /// Image tokens accounted for, whether encoded or served from cache.
    pub encoded_tokens: u64,
    pub prefilled_tokens: u64,
    pub decoded_tokens: u64,
    /// Image tokens actually run through the encoder.
    pub encode_computed: u64,
    /// Input tokens actually prefilled after prefix reuse.
    pub prefill_computed: u64,
}

impl RequestRecord {
    pub fn ttft(&self) -> f64 {
        self.first_token_time - self.arrival_time
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub forced_preemptions: u64,
    pub opportunistic_preemptions: u64,
    pub migrations: u64,
    pub migrated_tokens: u64,
    pub scale_up_idle: u64,
    pub scale_up_intra: u64,
    pub scale_up_inter: u64,
    pub shrinks: u64,
    pub reactive_borrows: u64,
    pub balancer_moves: u64,
    pub encode_jobs: u64,
    pub prefill_batches: u64,
    pub decode_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuditRecord {
    Tick(PolicyDecision),
    Scale { time: f64, group: GroupId, decision: ScaleDecision },
    Rebalance { time: f64, targets: BTreeMap<GroupId, usize>, moved: Vec<(InstanceId, GroupId, GroupId)> },
    Borrow { time: f64, needy: GroupId, instance: InstanceId, from: GroupId, stage: Stage },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    /// In trace order.
    pub records: Vec<RequestRecord>,
    pub counters: Counters,
    pub cache: CacheStats,
    pub makespan: f64,
    /// Busy seconds per instance.
    pub busy: Vec<f64>,
    pub events: Vec<EventRecord>,
    pub audit: Vec<AuditRecord>,
}

impl SimOutput {
    /// Busy fraction of the cluster over the makespan.
    pub fn utilization(&self) -> f64 {
        if self.makespan <= 0.0 || self.busy.is_empty() {
            return 0.0;
        }
        self.busy.iter().sum::<f64>() / (self.busy.len() as f64 * self.makespan)
    }
}
