//! Stage-level decisions inside a modality group: FCFS dispatch, prefill
//! instance allocation with preemption, decode auto-scaling, parallelism
//! layout, and the static layouts used by the baselines.

use crate::balancer::{reactive_scale, GroupView};
use crate::costmodel::{BatchLoad, CostError, CostProfile};
use crate::types::{GroupId, InstanceId, RequestId, Stage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("cost model: {0}")]
    Cost(#[from] CostError),
    #[error("model footprint {footprint} needs {needed} instances, only {granted} granted")]
    FootprintTooLarge { footprint: f64, needed: usize, granted: usize },
}

/// A batch that would lose the candidate instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Victim {
    pub load: BatchLoad,
    pub n_instances: usize,
    /// Per affected request: output length for decode, input length for prefill.
    pub norm_lens: Vec<u64>,
    /// Free KV slots on the batch's other instances.
    pub spare_elsewhere: u64,
}

/// An instance that could be reassigned.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub instance: InstanceId,
    pub group: GroupId,
    pub unused_slots: u64,
    pub kv_capacity: u64,
    /// Materialized KV that must migrate off.
    pub kv_used: u64,
    /// Reserved slots that must be re-reserved elsewhere.
    pub kv_reserved: u64,
    pub victim: Option<Victim>,
}

impl Candidate {
    pub fn idle(instance: InstanceId, group: GroupId, kv_capacity: u64) -> Self {
        Candidate { instance, group, unused_slots: kv_capacity, kv_capacity, kv_used: 0, kv_reserved: 0, victim: None }
    }

    /// The victim batch keeps at least one instance and can absorb the KV.
    pub fn is_legal(&self) -> bool {
        match &self.victim {
            None => true,
            Some(v) => v.n_instances >= 2 && v.spare_elsewhere >= self.kv_used + self.kv_reserved,
        }
    }
}

/// Σ_{r ∈ victim} (M(e) + w·L(victim, E − e)) / len(r). Infinite when illegal.
pub fn preemption_cost(profile: &CostProfile, c: &Candidate, w: f64) -> f64 {
    if !c.is_legal() {
        return f64::INFINITY;
    }
    let m = profile.migration_cost(c.kv_used);
    match &c.victim {
        None => m,
        Some(v) => {
            let l = profile.degradation(v.load, v.n_instances, v.n_instances - 1).expect("legal victim keeps an instance");
            v.norm_lens.iter().map(|&len| (m + w * l) / len.max(1) as f64).sum()
        }
    }
}

/// Prefill gain of adding one instance to `n_current`:
/// Σ_{r} (T(R, E) − T(R, E ∪ e)) / r.input_len.
pub fn gain_prefill(profile: &CostProfile, batch_tokens: u64, input_lens: &[u64], n_current: usize) -> Result<f64, CostError> {
    if input_lens.is_empty() {
        return Ok(0.0);
    }
    if n_current == 0 {
        return Ok(f64::INFINITY);
    }
    let delta = profile.prefill_time(batch_tokens, n_current)? - profile.prefill_time(batch_tokens, n_current + 1)?;
    Ok(input_lens.iter().map(|&len| delta / len.max(1) as f64).sum())
}

/// Cost of pulling `e_max` out of a decode batch for prefill.
pub fn cost_prefill_preempt(profile: &CostProfile, e_max: &Candidate, w: f64) -> f64 {
    preemption_cost(profile, e_max, w)
}

/// Decode scale-up gain: Σ_{r ∈ B_d} (AvgLat_d − T(B_d, E_d ∪ e)) / r.output_len.
pub fn gain_decode(
    profile: &CostProfile,
    avg_lat: f64,
    batch_size: usize,
    resident_kv: u64,
    n_current: usize,
    output_lens: &[u64],
) -> Result<f64, CostError> {
    if batch_size == 0 {
        return Ok(0.0);
    }
    let t = profile.decode_step_time(batch_size, n_current + 1, resident_kv)?;
    Ok(output_lens.iter().map(|&len| (avg_lat - t) / len.max(1) as f64).sum())
}

/// Cost of taking `e` (from a prefill batch or another group) for decode.
pub fn cost_decode_candidate(profile: &CostProfile, e: &Candidate, w: f64) -> f64 {
    preemption_cost(profile, e, w)
}

/// Exponentially-weighted mean decode step time over roughly 32 ticks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AvgLatTracker {
    value: Option<f64>,
}

impl AvgLatTracker {
    const ALPHA: f64 = 2.0 / 33.0;

    pub fn observe(&mut self, step_time: f64) {
        self.value = Some(match self.value {
            None => step_time,
            Some(v) => v + Self::ALPHA * (step_time - v),
        });
    }

    pub fn get(&self) -> Option<f64> {
        self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedRequest {
    pub id: RequestId,
    /// KV slots the request will hold.
    pub kv_tokens: u64,
    /// Prefill tokens left after cache hits.
    pub compute_tokens: u64,
    pub priority_hint: bool,
}

/// FCFS admission with priority-hinted requests first. Stops at the first
/// request that overflows free slots or the token budget. The head request
/// is admitted past the budget if it fits in memory, so an oversized request
/// cannot starve.
pub fn dispatch(queue: &[QueuedRequest], free_kv_slots: u64, tipping_budget: u64) -> Vec<RequestId> {
    let order = queue.iter().filter(|q| q.priority_hint).chain(queue.iter().filter(|q| !q.priority_hint));
    let mut out = Vec::new();
    let (mut kv, mut tokens) = (0u64, 0u64);
    for q in order {
        if kv + q.kv_tokens > free_kv_slots {
            break;
        }
        if !out.is_empty() && tokens + q.compute_tokens > tipping_budget {
            break;
        }
        kv += q.kv_tokens;
        tokens += q.compute_tokens;
        out.push(q.id);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceSlots {
    pub id: InstanceId,
    pub group: GroupId,
    pub kv_capacity: u64,
    pub kv_used: u64,
    pub kv_reserved: u64,
}

impl InstanceSlots {
    pub fn unused(&self) -> u64 {
        self.kv_capacity.saturating_sub(self.kv_used + self.kv_reserved)
    }
}

/// A running decode batch as seen by the prefill allocator.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeBatchView {
    pub id: u64,
    pub instances: Vec<InstanceSlots>,
    pub load: BatchLoad,
    pub output_lens: Vec<u64>,
}

impl DecodeBatchView {
    pub fn candidate(&self, idx: usize) -> Candidate {
        let e = &self.instances[idx];
        let spare = self.instances.iter().enumerate().filter(|&(i, _)| i != idx).map(|(_, s)| s.unused()).sum();
        Candidate {
            instance: e.id,
            group: e.group,
            unused_slots: e.unused(),
            kv_capacity: e.kv_capacity,
            kv_used: e.kv_used,
            kv_reserved: e.kv_reserved,
            victim: Some(Victim {
                load: self.load,
                n_instances: self.instances.len(),
                norm_lens: self.output_lens.clone(),
                spare_elsewhere: spare,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillItem {
    pub id: RequestId,
    pub compute_tokens: u64,
    pub kv_tokens: u64,
    pub input_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreemptionRecord {
    pub instance: InstanceId,
    pub from_batch: u64,
    /// Required to fit the batch in memory; bypasses the gain-cost test.
    pub forced: bool,
    pub gain: f64,
    pub cost: f64,
    pub migrate_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrefillAllocation {
    pub admitted: Vec<RequestId>,
    /// Requests cut from the tail because memory could not be found.
    pub dropped: Vec<RequestId>,
    pub instances: Vec<InstanceId>,
    pub preemptions: Vec<PreemptionRecord>,
}

fn best_candidate(batches: &[DecodeBatchView]) -> Option<(usize, usize, Candidate)> {
    let mut best: Option<(usize, usize, Candidate)> = None;
    for (b, batch) in batches.iter().enumerate() {
        for i in 0..batch.instances.len() {
            let c = batch.candidate(i);
            if !c.is_legal() {
                continue;
            }
            let better = match &best {
                None => true,
                Some((_, _, cur)) => (c.unused_slots, std::cmp::Reverse(c.instance)) > (cur.unused_slots, std::cmp::Reverse(cur.instance)),
            };
            if better {
                best = Some((b, i, c));
            }
        }
    }
    best
}

fn try_allocate(
    profile: &CostProfile,
    items: &[PrefillItem],
    idle: &[InstanceSlots],
    decode: &[DecodeBatchView],
    w: f64,
) -> Option<PrefillAllocation> {
    let kv_needed: u64 = items.iter().map(|r| r.kv_tokens).sum();
    let compute: u64 = items.iter().map(|r| r.compute_tokens).sum();
    let lens: Vec<u64> = items.iter().map(|r| r.input_len).collect();
    let mut batches = decode.to_vec();
    let mut chosen: Vec<InstanceId> = idle.iter().map(|s| s.id).collect();
    let mut slots: u64 = idle.iter().map(|s| s.unused()).sum();
    let mut preemptions = Vec::new();
    let mut take = |batches: &mut Vec<DecodeBatchView>, b: usize, i: usize, c: &Candidate, forced: bool, gain: f64, cost: f64| {
        preemptions.push(PreemptionRecord {
            instance: c.instance,
            from_batch: batches[b].id,
            forced,
            gain,
            cost,
            migrate_tokens: c.kv_used,
        });
        // The victim's survivors absorb the moved KV.
        let mut moving = c.kv_used + c.kv_reserved;
        batches[b].instances.remove(i);
        for s in batches[b].instances.iter_mut() {
            let put = s.unused().min(moving);
            s.kv_used += put;
            moving -= put;
        }
    };
    while slots < kv_needed {
        let (b, i, c) = best_candidate(&batches)?;
        let gain = gain_prefill(profile, compute, &lens, chosen.len()).unwrap_or(f64::INFINITY);
        let cost = preemption_cost(profile, &c, w);
        take(&mut batches, b, i, &c, true, gain, cost);
        slots += c.kv_capacity;
        chosen.push(c.instance);
    }
    while let Some((b, i, c)) = best_candidate(&batches) {
        let gain = gain_prefill(profile, compute, &lens, chosen.len()).unwrap_or(0.0);
        let cost = preemption_cost(profile, &c, w);
        if !(gain > cost) {
            break;
        }
        take(&mut batches, b, i, &c, false, gain, cost);
        chosen.push(c.instance);
    }
    Some(PrefillAllocation { admitted: items.iter().map(|r| r.id).collect(), dropped: Vec::new(), instances: chosen, preemptions })
}

/// Assigns every idle instance, then memory-forced preemptions, then
/// opportunistic preemptions of the decode instance with the most unused
/// slots while gain exceeds cost. If memory cannot be found, the FCFS tail
/// is dropped and the allocation retried.
pub fn allocate_prefill(
    profile: &CostProfile,
    items: &[PrefillItem],
    idle: &[InstanceSlots],
    decode: &[DecodeBatchView],
    w: f64,
) -> PrefillAllocation {
    for keep in (1..=items.len()).rev() {
        if let Some(mut a) = try_allocate(profile, &items[..keep], idle, decode, w) {
            a.dropped = items[keep..].iter().map(|r| r.id).collect();
            return a;
        }
    }
    PrefillAllocation { dropped: items.iter().map(|r| r.id).collect(), ..Default::default() }
}

/// A decode batch as seen by the auto-scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeScaleInput<'a> {
    pub group: GroupId,
    pub batch_size: usize,
    pub resident_kv: u64,
    pub output_lens: &'a [u64],
    pub avg_lat: f64,
    /// Instances in the order they joined the batch.
    pub instances: &'a [InstanceId],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScaleDecision {
    None,
    UpIdle { instance: InstanceId },
    UpIntra { instance: InstanceId, gain: f64, cost: f64 },
    UpInter { instance: InstanceId, gain: f64, cost: f64 },
    Shrink { instance: InstanceId },
}

/// Decode scaling. Above the per-instance threshold: an idle same-group
/// instance if any, else the better positive net of the intra-group prefill
/// candidate and the reactive inter-group candidate. Below half the
/// threshold: release the newest instance.
pub fn autoscale_decode(
    profile: &CostProfile,
    d: &DecodeScaleInput,
    idle_same_group: &[InstanceId],
    intra: &[Candidate],
    foreign: &[Candidate],
    groups: &[GroupView],
    w: f64,
) -> Result<ScaleDecision, CostError> {
    let n = d.instances.len();
    if n == 0 || d.batch_size == 0 {
        return Ok(ScaleDecision::None);
    }
    let share = d.batch_size as f64 / n as f64;
    let threshold = profile.decode_batch_threshold as f64;
    if share < threshold / 2.0 && n > 1 {
        return Ok(ScaleDecision::Shrink { instance: *d.instances.last().expect("n > 1") });
    }
    if share <= threshold {
        return Ok(ScaleDecision::None);
    }
    if let Some(&instance) = idle_same_group.iter().min() {
        return Ok(ScaleDecision::UpIdle { instance });
    }
    let gain = gain_decode(profile, d.avg_lat, d.batch_size, d.resident_kv, n, d.output_lens)?;
    let intra = intra
        .iter()
        .filter(|c| c.is_legal())
        .max_by(|a, b| a.unused_slots.cmp(&b.unused_slots).then(b.instance.cmp(&a.instance)))
        .map(|c| (c.instance, preemption_cost(profile, c, w)));
    let inter = reactive_scale(d.group, groups, foreign, gain, profile, w);
    let intra_net = intra.map(|(_, cost)| gain - cost).unwrap_or(f64::NEG_INFINITY);
    let inter_net = inter.chosen.map(|_| gain - inter.cost).unwrap_or(f64::NEG_INFINITY);
    if intra_net <= 0.0 && inter_net <= 0.0 {
        return Ok(ScaleDecision::None);
    }
    Ok(if inter_net > intra_net {
        ScaleDecision::UpInter { instance: inter.chosen.expect("positive net"), gain, cost: inter.cost }
    } else {
        let (instance, cost) = intra.expect("positive net");
        ScaleDecision::UpIntra { instance, gain, cost }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub stage: Stage,
    pub tp_size: usize,
    pub dp_sets: usize,
    /// Instances left over from TP packing, returned to idle.
    pub returned: usize,
}

/// Data parallelism first; tensor-parallel sets only when the model does not
/// fit one instance, sized to the smallest even count that holds it.
/// `model_footprint` is in units of one instance's memory.
pub fn choose_parallelism(stage: Stage, instance_count: usize, model_footprint: f64) -> Result<ParallelPlan, PartitionError> {
    let tp = if model_footprint <= 1.0 {
        1
    } else {
        let t = model_footprint.ceil() as usize;
        t + t % 2
    };
    if instance_count < tp || instance_count == 0 {
        return Err(PartitionError::FootprintTooLarge { footprint: model_footprint, needed: tp, granted: instance_count });
    }
    Ok(ParallelPlan { stage, tp_size: tp, dp_sets: instance_count / tp, returned: instance_count % tp })
}

/// Fixed stage sizes for one modality group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSplit {
    pub encode: usize,
    pub prefill: usize,
    pub decode: usize,
}

impl StageSplit {
    /// Even split over the stages the group runs; remainders go to earlier stages.
    pub fn even(n: usize, with_encode: bool) -> Self {
        if with_encode {
            let (b, r) = (n / 3, n % 3);
            StageSplit { encode: b + (r > 0) as usize, prefill: b + (r > 1) as usize, decode: b }
        } else {
            StageSplit { encode: 0, prefill: n - n / 2, decode: n / 2 }
        }
    }

    pub fn total(&self) -> usize {
        self.encode + self.prefill + self.decode
    }
}

/// Static partition of the cluster into a text-only and a multimodal group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticLayout {
    pub text: StageSplit,
    pub multimodal: StageSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPreset {
    TextDominant,
    Equal,
    MultimodalDominant,
}

impl StaticLayout {
    pub fn with_groups(n_text: usize, n_mm: usize) -> Self {
        StaticLayout { text: StageSplit::even(n_text, false), multimodal: StageSplit::even(n_mm, true) }
    }

    /// Half the instances per group, stages split evenly inside each.
    pub fn even(n: usize) -> Self {
        Self::with_groups(n / 2, n - n / 2)
    }

    /// 5:3, 4:4 and 3:5 text:multimodal shares of `n`.
    pub fn preset(p: SplitPreset, n: usize) -> Self {
        let text = match p {
            SplitPreset::TextDominant => (n * 5).div_ceil(8),
            SplitPreset::Equal => n / 2,
            SplitPreset::MultimodalDominant => n * 3 / 8,
        };
        Self::with_groups(text, n - text)
    }

    pub fn total(&self) -> usize {
        self.text.total() + self.multimodal.total()
    }
}

/// One tick's decisions for a group, recorded for the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub time: f64,
    pub group: GroupId,
    pub dispatched: Vec<RequestId>,
    pub prefill_instances: Vec<InstanceId>,
    pub preemptions: Vec<PreemptionRecord>,
    pub scale_ops: Vec<ScaleDecision>,
}
