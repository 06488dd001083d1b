//! Modality-level instance management: burst-tolerance maximin allocation,
//! reactive cross-group borrowing and the arrival-load estimator.

use crate::costmodel::CostProfile;
use crate::partition::{preemption_cost, Candidate};
use crate::types::{GroupId, InstanceId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BalancerError {
    #[error("group {0} has no average requirement")]
    UndefinedTolerance(GroupId),
    #[error("{total} instances cannot cover {needed} active groups")]
    InsufficientInstances { total: usize, needed: usize },
}

/// Demand summary of one modality group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupDemand {
    pub id: GroupId,
    pub avg_required: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub counts: BTreeMap<GroupId, usize>,
    pub unassigned: usize,
    /// Minimum burst tolerance over groups with positive demand.
    pub min_bt: Option<f64>,
    /// Group chosen at each greedy step, in order.
    pub steps: Vec<GroupId>,
}

impl AllocationPlan {
    pub fn total(&self) -> usize {
        self.counts.values().sum::<usize>() + self.unassigned
    }
}

pub fn burst_tolerance(avg_required: u32, n_assigned: usize) -> Result<f64, BalancerError> {
    if avg_required == 0 {
        return Err(BalancerError::UndefinedTolerance(0));
    }
    Ok(n_assigned as f64 / avg_required as f64)
}

/// Greedy maximin: each instance goes to the group with the lowest current
/// burst tolerance, ties to the lower id. Zero-demand groups get nothing
/// while any group has positive demand; otherwise every instance stays unassigned.
pub fn proactive_allocate(groups: &[GroupDemand], total_instances: usize) -> Result<AllocationPlan, BalancerError> {
    let mut active: Vec<GroupDemand> = groups.iter().copied().filter(|g| g.avg_required > 0).collect();
    active.sort_by_key(|g| g.id);
    if total_instances < active.len() {
        return Err(BalancerError::InsufficientInstances { total: total_instances, needed: active.len() });
    }
    let mut counts: BTreeMap<GroupId, usize> = groups.iter().map(|g| (g.id, 0)).collect();
    if active.is_empty() {
        return Ok(AllocationPlan { counts, unassigned: total_instances, min_bt: None, steps: Vec::new() });
    }
    let mut steps = Vec::with_capacity(total_instances);
    for _ in 0..total_instances {
        // Compare n_i / a_i exactly via cross-multiplication.
        let g = *active
            .iter()
            .min_by(|a, b| {
                let lhs = counts[&a.id] as u64 * b.avg_required as u64;
                let rhs = counts[&b.id] as u64 * a.avg_required as u64;
                lhs.cmp(&rhs).then(a.id.cmp(&b.id))
            })
            .expect("non-empty");
        *counts.get_mut(&g.id).expect("present") += 1;
        steps.push(g.id);
    }
    let min_bt = active.iter().map(|g| counts[&g.id] as f64 / g.avg_required as f64).fold(f64::INFINITY, f64::min);
    Ok(AllocationPlan { counts, unassigned: 0, min_bt: Some(min_bt), steps })
}

/// Group-level context for reactive scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupView {
    pub id: GroupId,
    pub instances: usize,
    pub live_requests: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoPreemptReason {
    NoPreemptableInstance,
    CostExceedsGain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactiveDecision {
    pub chosen: Option<InstanceId>,
    pub cost: f64,
    pub reason: Option<NoPreemptReason>,
}

/// Picks the cheapest foreign instance to lend to `needy`, or none if every
/// legal candidate costs more than `gain`. A group with live requests never
/// drops below one instance.
pub fn reactive_scale(
    needy: GroupId,
    groups: &[GroupView],
    candidates: &[Candidate],
    gain: f64,
    profile: &CostProfile,
    w: f64,
) -> ReactiveDecision {
    let view: BTreeMap<GroupId, &GroupView> = groups.iter().map(|g| (g.id, g)).collect();
    let legal = |c: &&Candidate| {
        c.group != needy
            && view.get(&c.group).is_some_and(|g| g.instances > 1 || g.live_requests == 0)
            && c.is_legal()
    };
    let best = candidates
        .iter()
        .filter(legal)
        .map(|c| (preemption_cost(profile, c, w), c.instance))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    match best {
        None => ReactiveDecision { chosen: None, cost: f64::INFINITY, reason: Some(NoPreemptReason::NoPreemptableInstance) },
        Some((cost, id)) if cost <= gain => ReactiveDecision { chosen: Some(id), cost, reason: None },
        Some((cost, _)) => ReactiveDecision { chosen: None, cost, reason: Some(NoPreemptReason::CostExceedsGain) },
    }
}

/// Sliding-window estimate of instance demand from arrivals, each weighted
/// by its single-instance service seconds.
#[derive(Debug, Clone)]
pub struct LoadEstimator {
    window: f64,
    peak_window: f64,
    samples: VecDeque<(f64, f64)>,
    peak: u32,
}

impl LoadEstimator {
    pub fn new(window: f64) -> Self {
        LoadEstimator { window, peak_window: window / 6.0, samples: VecDeque::new(), peak: 0 }
    }

    pub fn record(&mut self, time: f64, service_seconds: f64) {
        self.samples.push_back((time, service_seconds));
        self.expire(time);
        let recent = self.rate_since(time, self.peak_window);
        self.peak = self.peak.max(recent);
    }

    fn expire(&mut self, now: f64) {
        while self.samples.front().is_some_and(|&(t, _)| t < now - self.window) {
            self.samples.pop_front();
        }
    }

    fn rate_since(&self, now: f64, span: f64) -> u32 {
        let start = now - span;
        let work: f64 = self.samples.iter().rev().take_while(|&&(t, _)| t >= start).map(|&(_, s)| s).sum();
        if work <= 0.0 {
            return 0;
        }
        // Early in a run only the elapsed time is observable.
        let denom = span.min(now.max(1.0));
        ((work / denom).ceil() as u32).max(1)
    }

    /// Average instances required over the window; 0 without recent arrivals.
    pub fn avg_required(&mut self, now: f64) -> u32 {
        self.expire(now);
        self.rate_since(now, self.window)
    }

    /// Highest short-window requirement seen so far.
    pub fn peak_required(&self) -> u32 {
        self.peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{test_profile, BatchLoad};
    use crate::partition::Victim;

    fn plan(reqs: &[u32], n: usize) -> AllocationPlan {
        let groups: Vec<GroupDemand> = reqs.iter().enumerate().map(|(i, &a)| GroupDemand { id: i, avg_required: a }).collect();
        proactive_allocate(&groups, n).unwrap()
    }

    #[test]
    fn burst_tolerance_examples() {
        assert_eq!(burst_tolerance(2, 6).unwrap(), 3.0);
        assert_eq!(burst_tolerance(5, 5).unwrap(), 1.0);
        assert_eq!(burst_tolerance(3, 0).unwrap(), 0.0);
        assert!(burst_tolerance(0, 3).is_err());
    }

    #[test]
    fn allocation_examples() {
        let p = plan(&[2, 4], 12);
        assert_eq!(p.counts, BTreeMap::from([(0, 4), (1, 8)]));
        assert_eq!(p.min_bt, Some(2.0));
        assert_eq!(plan(&[3], 7).counts[&0], 7);
        assert_eq!(plan(&[2, 2], 5).counts, BTreeMap::from([(0, 3), (1, 2)]));
    }

    #[test]
    fn zero_demand_groups_and_shortage() {
        let p = plan(&[0, 3], 4);
        assert_eq!(p.counts, BTreeMap::from([(0, 0), (1, 4)]));
        let p = plan(&[0, 0], 4);
        assert_eq!(p.unassigned, 4);
        assert_eq!(p.total(), 4);
        let g = [GroupDemand { id: 0, avg_required: 1 }, GroupDemand { id: 1, avg_required: 1 }];
        assert_eq!(proactive_allocate(&g, 1), Err(BalancerError::InsufficientInstances { total: 1, needed: 2 }));
    }

    fn decode_victim(kv_used: u64, n: usize) -> Candidate {
        Candidate {
            instance: 0,
            group: 1,
            unused_slots: 100_000 - kv_used,
            kv_capacity: 100_000,
            kv_used,
            kv_reserved: 0,
            victim: Some(Victim {
                load: BatchLoad::Decode { batch_size: 4, resident_kv: 4000, remaining_output: 100 },
                n_instances: n,
                norm_lens: vec![100, 200],
                spare_elsewhere: 1_000_000,
            }),
        }
    }

    #[test]
    fn reactive_prefers_idle_then_cheaper_migration() {
        let prof = test_profile();
        let groups = [GroupView { id: 0, instances: 2, live_requests: 3 }, GroupView { id: 1, instances: 3, live_requests: 3 }];
        let idle = Candidate::idle(7, 1, 100_000);
        let busy = Candidate { instance: 2, ..decode_victim(10_000, 2) };
        let d = reactive_scale(0, &groups, &[busy.clone(), idle], 1.0, &prof, 1.0);
        assert_eq!((d.chosen, d.cost), (Some(7), 0.0));

        let a = Candidate { instance: 3, ..decode_victim(10_000, 2) };
        let b = Candidate { instance: 2, ..decode_victim(40_000, 2) };
        let d = reactive_scale(0, &groups, &[b, a], 10.0, &prof, 1.0);
        assert_eq!(d.chosen, Some(3));
    }

    #[test]
    fn reactive_respects_group_minimum_and_gain() {
        let prof = test_profile();
        let groups = [GroupView { id: 0, instances: 1, live_requests: 3 }, GroupView { id: 1, instances: 1, live_requests: 2 }];
        let d = reactive_scale(0, &groups, &[Candidate::idle(1, 1, 1000)], 1.0, &prof, 1.0);
        assert_eq!((d.chosen, d.reason), (None, Some(NoPreemptReason::NoPreemptableInstance)));
        let groups = [GroupView { id: 0, instances: 1, live_requests: 3 }, GroupView { id: 1, instances: 3, live_requests: 2 }];
        let d = reactive_scale(0, &groups, &[decode_victim(10_000, 2)], 0.0, &prof, 1.0);
        assert_eq!((d.chosen, d.reason), (None, Some(NoPreemptReason::CostExceedsGain)));
    }

    #[test]
    fn estimator_tracks_window() {
        let mut est = LoadEstimator::new(60.0);
        assert_eq!(est.avg_required(0.0), 0);
        for i in 0..120 {
            est.record(i as f64 * 0.5, 1.5);
        }
        // 120 arrivals * 1.5 s over the last 60 s ≈ 3 busy instances.
        assert_eq!(est.avg_required(60.0), 3);
        assert!(est.peak_required() >= 3);
        assert_eq!(est.avg_required(200.0), 0);
    }
}
