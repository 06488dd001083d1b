use super::ledger::{KvLedger, Rix};
use super::{AuditRecord, Counters, EngineError, EventKind, EventRecord, RequestRecord, SimOutput};
use crate::balancer::{proactive_allocate, reactive_scale, GroupDemand, GroupView, LoadEstimator};
use crate::cache::{CacheStats, PrefixHandle, UnifiedCache};
use crate::config::{PolicyKind, RunConfig};
use crate::costmodel::{BatchLoad, CostProfile};
use crate::partition::{
    allocate_prefill, autoscale_decode, choose_parallelism, dispatch, AvgLatTracker, Candidate, DecodeBatchView,
    DecodeScaleInput, InstanceSlots, PolicyDecision, PrefillItem, QueuedRequest, ScaleDecision, Victim,
};
use crate::types::{validate_trace, ContentHash, GroupId, InstanceId, Modality, Request, Stage};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

const TEXT: GroupId = 0;
const MM: GroupId = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrival(Rix),
    EncodeDone(u64),
    PrefillDone(u64, u32),
    DecodeStep(u64, u32),
    MigrationDone(u64),
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Job {
    Idle,
    Encode(u64),
    Prefill(u64),
    Decode(u64),
}

#[derive(Debug)]
struct Inst {
    id: InstanceId,
    group: GroupId,
    /// Stage role pinned by the static baseline.
    fixed: Option<Stage>,
    job: Job,
    cap: u64,
    busy_since: Option<f64>,
    busy_total: f64,
    /// Coupled replica: its own queue and decode batch.
    queue: VecDeque<Rix>,
    decode: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pending,
    Encoding,
    Ready,
    Prefilling,
    Decoding,
    Done,
}

#[derive(Debug)]
struct Live {
    group: GroupId,
    phase: Phase,
    images_looked_up: bool,
    uncached_image_tokens: u64,
    /// Own encode job not yet finished.
    encode_pending: bool,
    /// Images this request waits on because another request is encoding them.
    waiting_on: u32,
    waited: bool,
    encode_start: f64,
    encode_end: f64,
    dispatch_at: f64,
    prefill_start: f64,
    /// Fraction of the prefill batch's run spent encoding (blocking mode).
    encode_share: f64,
    first_token: Option<f64>,
    completion: Option<f64>,
    compute_tokens: u64,
    matched: u64,
    handle: Option<PrefixHandle>,
    decoded: u64,
    pause: u32,
    encoded_tokens: u64,
    prefilled_tokens: u64,
    encode_computed: u64,
}

struct EncodeJob {
    req: Rix,
    instances: Vec<InstanceId>,
    tokens: u64,
}

struct PrefillBatch {
    group: GroupId,
    instances: Vec<InstanceId>,
    reqs: Vec<Rix>,
    /// Remaining work in single-instance seconds.
    work: f64,
    start: f64,
    last: f64,
    epoch: u32,
}

struct DecodeBatch {
    group: GroupId,
    instances: Vec<InstanceId>,
    reqs: BTreeSet<Rix>,
    step: Option<(Vec<Rix>, f64)>,
    epoch: u32,
    lat: AvgLatTracker,
    stalled: bool,
}

struct Group {
    encode_wait: VecDeque<Rix>,
    /// Images queued or running in an encode job: owner and waiters.
    inflight: BTreeMap<ContentHash, (Rix, Vec<Rix>)>,
    ready: VecDeque<Rix>,
    decode: Option<u64>,
    estimator: LoadEstimator,
    cache: UnifiedCache,
}

struct Sim<'a> {
    trace: &'a [Request],
    cfg: &'a RunConfig,
    prof: &'a CostProfile,
    w: f64,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    tick_pending: bool,
    live: Vec<Live>,
    insts: Vec<Inst>,
    ledger: KvLedger,
    groups: Vec<Group>,
    encodes: BTreeMap<u64, EncodeJob>,
    prefills: BTreeMap<u64, PrefillBatch>,
    decodes: BTreeMap<u64, DecodeBatch>,
    migrations: BTreeMap<u64, Vec<Rix>>,
    next_id: u64,
    rr: usize,
    completed: usize,
    counters: Counters,
    events: Vec<EventRecord>,
    audit: Vec<AuditRecord>,
}

/// Simulates `trace` to completion. `_seed` is accepted for stochastic
/// policies; every shipped policy is deterministic.
pub fn run(trace: &[Request], cfg: &RunConfig, prof: &CostProfile, _seed: u64) -> Result<SimOutput, EngineError> {
    if trace.is_empty() {
        return Err(EngineError::EmptyTrace);
    }
    validate_trace(trace).map_err(EngineError::InvalidTrace)?;
    cfg.validate()?;
    prof.validate()?;
    choose_parallelism(Stage::Prefill, cfg.instances, cfg.model_footprint)
        .map_err(|e| EngineError::InvariantViolated { time: 0.0, what: e.to_string() })?;
    for r in trace {
        let tokens = r.total_input_len() + r.output_len;
        if tokens > cfg.kv_capacity {
            return Err(EngineError::RequestTooLarge { id: r.id, tokens, capacity: cfg.kv_capacity });
        }
    }
    let mut sim = Sim::new(trace, cfg, prof);
    sim.run_loop()?;
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(trace: &'a [Request], cfg: &'a RunConfig, prof: &'a CostProfile) -> Self {
        let n_groups = if cfg.policy == PolicyKind::Coupled { 1 } else { 2 };
        let layout = cfg.effective_layout();
        let mut insts = Vec::with_capacity(cfg.instances);
        for id in 0..cfg.instances {
            let (group, fixed) = match cfg.policy {
                PolicyKind::Coupled => (TEXT, None),
                PolicyKind::Emp => (if id < layout.text.total() { TEXT } else { MM }, None),
                PolicyKind::StaticDecoupled => {
                    let (g, k) = if id < layout.text.total() { (TEXT, id) } else { (MM, id - layout.text.total()) };
                    let split = if g == TEXT { layout.text } else { layout.multimodal };
                    let stage = if k < split.encode {
                        Stage::Encode
                    } else if k < split.encode + split.prefill {
                        Stage::Prefill
                    } else {
                        Stage::Decode
                    };
                    (g, Some(stage))
                }
            };
            insts.push(Inst {
                id,
                group,
                fixed,
                job: Job::Idle,
                cap: cfg.kv_capacity,
                busy_since: None,
                busy_total: 0.0,
                queue: VecDeque::new(),
                decode: None,
            });
        }
        let groups = (0..n_groups)
            .map(|_| Group {
                encode_wait: VecDeque::new(),
                inflight: BTreeMap::new(),
                ready: VecDeque::new(),
                decode: None,
                estimator: LoadEstimator::new(cfg.balancer_window),
                cache: UnifiedCache::new(cfg.cache),
            })
            .collect();
        let live = trace
            .iter()
            .map(|_| Live {
                group: TEXT,
                phase: Phase::Pending,
                images_looked_up: false,
                uncached_image_tokens: 0,
                encode_pending: false,
                waiting_on: 0,
                waited: false,
                encode_start: 0.0,
                encode_end: 0.0,
                dispatch_at: 0.0,
                prefill_start: 0.0,
                encode_share: 0.0,
                first_token: None,
                completion: None,
                compute_tokens: 0,
                matched: 0,
                handle: None,
                decoded: 0,
                pause: 0,
                encoded_tokens: 0,
                prefilled_tokens: 0,
                encode_computed: 0,
            })
            .collect();
        Sim {
            trace,
            cfg,
            prof,
            w: cfg.w.unwrap_or(prof.penalty_w),
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            tick_pending: false,
            live,
            insts,
            ledger: KvLedger::default(),
            groups,
            encodes: BTreeMap::new(),
            prefills: BTreeMap::new(),
            decodes: BTreeMap::new(),
            migrations: BTreeMap::new(),
            next_id: 0,
            rr: 0,
            completed: 0,
            counters: Counters::default(),
            events: Vec::new(),
            audit: Vec::new(),
        }
    }

    fn push(&mut self, time: f64, ev: Ev) {
        debug_assert!(time >= self.now && time.is_finite());
        self.seq += 1;
        self.heap.push(Reverse((time.to_bits(), self.seq, ev)));
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn run_loop(&mut self) -> Result<(), EngineError> {
        for (i, r) in self.trace.iter().enumerate() {
            self.push(r.arrival_time, Ev::Arrival(i));
        }
        while let Some(Reverse((bits, seq, ev))) = self.heap.pop() {
            let t = f64::from_bits(bits);
            if t < self.now {
                return Err(EngineError::InvariantViolated { time: t, what: "event time went backwards".into() });
            }
            self.now = t;
            if self.cfg.event_log {
                let rec = self.describe(seq, ev);
                self.events.push(rec);
            }
            match ev {
                Ev::Arrival(r) => self.on_arrival(r),
                Ev::EncodeDone(j) => self.on_encode_done(j),
                Ev::PrefillDone(b, epoch) => self.on_prefill_done(b, epoch)?,
                Ev::DecodeStep(b, epoch) => self.on_decode_step(b, epoch)?,
                Ev::MigrationDone(m) => self.on_migration_done(m)?,
                Ev::Tick => {
                    self.tick_pending = false;
                    self.schedule()?;
                }
            }
            if ev != Ev::Tick && !self.tick_pending {
                self.tick_pending = true;
                self.push(self.now, Ev::Tick);
            }
            if self.cfg.check_invariants {
                self.check_invariants()?;
            }
        }
        if self.completed < self.trace.len() {
            return Err(EngineError::DeadlockDetected {
                time: self.now,
                pending: self.trace.len() - self.completed,
                dump: self.dump(),
            });
        }
        Ok(())
    }

    fn describe(&self, seq: u64, ev: Ev) -> EventRecord {
        let id = |r: Rix| self.trace[r].id;
        let (kind, requests, batch, instances) = match ev {
            Ev::Arrival(r) => (EventKind::RequestArrival, vec![id(r)], None, vec![]),
            Ev::EncodeDone(j) => {
                let job = &self.encodes[&j];
                (EventKind::EncodeDone, vec![id(job.req)], Some(j), job.instances.clone())
            }
            Ev::PrefillDone(b, _) => match self.prefills.get(&b) {
                Some(p) => (EventKind::PrefillDone, p.reqs.iter().map(|&r| id(r)).collect(), Some(b), p.instances.clone()),
                None => (EventKind::PrefillDone, vec![], Some(b), vec![]),
            },
            Ev::DecodeStep(b, _) => match self.decodes.get(&b) {
                Some(d) => (
                    EventKind::DecodeStep,
                    d.step.as_ref().map(|s| s.0.iter().map(|&r| id(r)).collect()).unwrap_or_default(),
                    Some(b),
                    d.instances.clone(),
                ),
                None => (EventKind::DecodeStep, vec![], Some(b), vec![]),
            },
            Ev::MigrationDone(m) => {
                (EventKind::MigrationDone, self.migrations[&m].iter().map(|&r| id(r)).collect(), Some(m), vec![])
            }
            Ev::Tick => (EventKind::SchedulerTick, vec![], None, vec![]),
        };
        EventRecord { time: self.now, seq, kind, requests, batch, instances }
    }

    fn dump(&self) -> String {
        let mut s = String::new();
        for i in &self.insts {
            s.push_str(&format!(
                "instance {} group {} job {:?} used {} reserved {}\n",
                i.id,
                i.group,
                i.job,
                self.ledger.used(i.id),
                self.ledger.reserved(i.id)
            ));
        }
        for (g, grp) in self.groups.iter().enumerate() {
            s.push_str(&format!(
                "group {g}: encode_wait {} ready {} decode {:?}\n",
                grp.encode_wait.len(),
                grp.ready.len(),
                grp.decode
            ));
        }
        let stuck: Vec<_> = self.live.iter().enumerate().filter(|(_, l)| l.phase != Phase::Done).take(10).map(|(r, l)| (self.trace[r].id, l.phase)).collect();
        s.push_str(&format!("first unfinished: {stuck:?}"));
        s
    }

    fn set_job(&mut self, i: InstanceId, job: Job) {
        let inst = &mut self.insts[i];
        match (inst.job == Job::Idle, job == Job::Idle) {
            (true, false) => inst.busy_since = Some(self.now),
            (false, true) => {
                inst.busy_total += self.now - inst.busy_since.take().unwrap_or(self.now);
            }
            _ => {}
        }
        inst.job = job;
    }

    fn unused(&self, i: InstanceId) -> u64 {
        self.insts[i].cap.saturating_sub(self.ledger.used(i) + self.ledger.reserved(i))
    }

    fn slots(&self, i: InstanceId) -> InstanceSlots {
        InstanceSlots {
            id: i,
            group: self.insts[i].group,
            kv_capacity: self.insts[i].cap,
            kv_used: self.ledger.used(i),
            kv_reserved: self.ledger.reserved(i),
        }
    }

    fn idle_in(&self, g: GroupId, stage: Option<Stage>) -> Vec<InstanceId> {
        self.insts.iter().filter(|i| i.group == g && i.job == Job::Idle && (stage.is_none() || i.fixed == stage)).map(|i| i.id).collect()
    }

    fn group_size(&self, g: GroupId) -> usize {
        self.insts.iter().filter(|i| i.group == g).count()
    }

    fn live_in(&self, g: GroupId) -> usize {
        self.live.iter().filter(|l| l.group == g && l.phase != Phase::Pending && l.phase != Phase::Done).count()
    }

    fn group_views(&self) -> Vec<GroupView> {
        (0..self.groups.len()).map(|g| GroupView { id: g, instances: self.group_size(g), live_requests: self.live_in(g) }).collect()
    }

    /// Seconds one instance would spend serving `r` end to end.
    fn service_seconds(&self, r: &Request) -> f64 {
        let p = self.prof;
        let thr = p.decode_batch_threshold as usize;
        let encode = if r.images.is_empty() { 0.0 } else { p.encode_time_tokens(r.image_tokens(), 1).unwrap_or(0.0) };
        let prefill = p.prefill_time(r.total_input_len(), 1).unwrap_or(0.0);
        let decode = p.decode_step_time(thr, 1, 0).unwrap_or(0.0) * r.output_len as f64 / thr as f64;
        encode + prefill + decode
    }

    fn on_arrival(&mut self, r: Rix) {
        let req = &self.trace[r];
        let mm = req.modality == Modality::Multimodal;
        let g = match self.cfg.policy {
            PolicyKind::Coupled => TEXT,
            PolicyKind::Emp => {
                if mm || req.priority_hint {
                    MM
                } else {
                    TEXT
                }
            }
            PolicyKind::StaticDecoupled => {
                if mm {
                    MM
                } else {
                    TEXT
                }
            }
        };
        self.live[r].group = g;
        let demand = self.service_seconds(req);
        self.groups[g].estimator.record(self.now, demand);
        if self.cfg.policy == PolicyKind::Coupled {
            let replica = self.rr % self.insts.len();
            self.rr += 1;
            self.insts[replica].queue.push_back(r);
            self.live[r].phase = Phase::Ready;
            return;
        }
        if mm && self.cfg.nonblocking {
            let uncached = self.lookup_images(r);
            let l = &mut self.live[r];
            if uncached > 0 || l.waiting_on > 0 {
                l.phase = Phase::Encoding;
                l.encode_start = self.now;
                if uncached > 0 {
                    l.encode_pending = true;
                    self.groups[g].encode_wait.push_back(r);
                }
                return;
            }
            self.finish_images(r);
        }
        self.live[r].phase = Phase::Ready;
        self.groups[g].ready.push_back(r);
    }

    /// Moves a non-blocking request on once its own encode and every
    /// encode it waits on have finished.
    fn try_ready(&mut self, r: Rix) {
        let l = &self.live[r];
        if l.phase != Phase::Encoding || l.encode_pending || l.waiting_on > 0 {
            return;
        }
        self.finish_images(r);
        let l = &mut self.live[r];
        l.encode_end = self.now;
        l.phase = Phase::Ready;
        let g = l.group;
        self.groups[g].ready.push_back(r);
    }

    /// Image-pool lookup; returns the tokens that still need encoding.
    fn lookup_images(&mut self, r: Rix) -> u64 {
        let req = &self.trace[r];
        let g = self.live[r].group;
        let mut uncached = 0;
        // Non-blocking encodes are tracked while in flight so a second
        // request with the same image waits instead of encoding it again.
        let track = self.cfg.unicache && self.cfg.nonblocking;
        for img in &req.images {
            let mut hit = self.cfg.unicache && self.groups[g].cache.images.lookup(img.hash, self.now).is_some();
            if !hit && track {
                if let Some((owner, waiters)) = self.groups[g].inflight.get_mut(&img.hash) {
                    hit = true;
                    if *owner != r && !waiters.contains(&r) {
                        waiters.push(r);
                        self.live[r].waiting_on += 1;
                        self.live[r].waited = true;
                    }
                } else {
                    self.groups[g].inflight.insert(img.hash, (r, Vec::new()));
                }
            }
            let stats = &mut self.groups[g].cache.stats;
            if hit {
                stats.image_hits += 1;
                stats.encode_tokens_saved += img.token_count;
                stats.bytes_saved += img.token_count * self.prof.kv_bytes_per_token;
            } else {
                if self.cfg.unicache {
                    stats.image_misses += 1;
                }
                uncached += img.token_count;
            }
        }
        self.live[r].images_looked_up = true;
        self.live[r].uncached_image_tokens = uncached;
        uncached
    }

    /// Accounts the request's images as encoded and caches them.
    fn finish_images(&mut self, r: Rix) {
        let req = &self.trace[r];
        let g = self.live[r].group;
        if self.cfg.unicache {
            for img in &req.images {
                let bytes = img.token_count * self.prof.kv_bytes_per_token;
                self.groups[g].cache.images.insert(img.hash, img.token_count, bytes, self.now);
            }
        }
        let l = &mut self.live[r];
        l.encoded_tokens = req.image_tokens();
        l.encode_computed = l.uncached_image_tokens;
    }

    fn start_encode(&mut self, r: Rix, instances: Vec<InstanceId>) {
        let id = self.fresh_id();
        let tokens = self.live[r].uncached_image_tokens;
        let dur = self.prof.encode_time_tokens(tokens, instances.len()).expect("non-empty instance set");
        for &i in &instances {
            self.set_job(i, Job::Encode(id));
        }
        self.live[r].encode_start = self.now;
        self.encodes.insert(id, EncodeJob { req: r, instances, tokens });
        self.counters.encode_jobs += 1;
        self.push(self.now + dur, Ev::EncodeDone(id));
    }

    fn on_encode_done(&mut self, j: u64) {
        let job = &self.encodes[&j];
        let (r, instances) = (job.req, job.instances.clone());
        debug_assert_eq!(job.tokens, self.live[r].uncached_image_tokens);
        for i in instances {
            self.set_job(i, Job::Idle);
        }
        let g = self.live[r].group;
        let owned: Vec<ContentHash> =
            self.groups[g].inflight.iter().filter(|(_, (owner, _))| *owner == r).map(|(&h, _)| h).collect();
        if self.cfg.unicache {
            for img in &self.trace[r].images {
                let bytes = img.token_count * self.prof.kv_bytes_per_token;
                self.groups[g].cache.images.insert(img.hash, img.token_count, bytes, self.now);
            }
        }
        self.live[r].encode_pending = false;
        self.try_ready(r);
        for h in owned {
            let (_, waiters) = self.groups[g].inflight.remove(&h).expect("listed");
            for w in waiters {
                self.live[w].waiting_on -= 1;
                self.try_ready(w);
            }
        }
    }

    /// Compute tokens a queued request is expected to need, before prefix reuse.
    fn compute_estimate(&self, r: Rix) -> u64 {
        let req = &self.trace[r];
        let mut est = req.total_input_len();
        if req.modality == Modality::Multimodal && !self.cfg.nonblocking {
            let img = if self.live[r].images_looked_up { self.live[r].uncached_image_tokens } else { req.image_tokens() };
            est += (img as f64 * self.prof.prefill_rate / self.prof.encode_rate).ceil() as u64;
        }
        est
    }

    fn queued(&self, queue: &VecDeque<Rix>) -> Vec<QueuedRequest> {
        queue
            .iter()
            .map(|&r| {
                let req = &self.trace[r];
                QueuedRequest {
                    id: r as u64,
                    kv_tokens: req.total_input_len() + req.output_len,
                    compute_tokens: self.compute_estimate(r),
                    priority_hint: req.priority_hint && self.cfg.policy == PolicyKind::Emp,
                }
            })
            .collect()
    }

    /// Reserves each request's full KV footprint across `on`, most free first.
    fn reserve_on(&mut self, reqs: &[Rix], on: &[InstanceId]) -> Result<(), EngineError> {
        for &r in reqs {
            let req = &self.trace[r];
            let mut need = req.total_input_len() + req.output_len;
            let mut order: Vec<(u64, InstanceId)> = on.iter().map(|&i| (self.unused(i), i)).collect();
            order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for (free, i) in order {
                let take = free.min(need);
                self.ledger.reserve(i, r, take);
                need -= take;
                if need == 0 {
                    break;
                }
            }
            if need > 0 {
                return Err(EngineError::InvariantViolated { time: self.now, what: format!("no KV room for request {}", req.id) });
            }
        }
        Ok(())
    }

    /// Creates a prefill batch on `instances`, starting at `start`.
    fn start_prefill(&mut self, g: GroupId, reqs: Vec<Rix>, instances: Vec<InstanceId>, start: f64) -> u64 {
        let id = self.fresh_id();
        let blocking = !self.cfg.nonblocking;
        let mut enc_work = 0.0;
        let mut pre_work = 0.0;
        for &r in &reqs {
            let req = &self.trace[r];
            if blocking && req.modality == Modality::Multimodal && !self.live[r].images_looked_up {
                self.lookup_images(r);
            }
            let total = req.total_input_len();
            let mut matched = 0;
            if self.cfg.unicache && self.cfg.policy != PolicyKind::Coupled {
                let seq = req.unified_sequence();
                let cache = &mut self.groups[g].cache;
                let h = cache.prefixes.match_prefix(&seq, self.now);
                cache.stats.prefix_lookups += 1;
                if h.matched > 0 {
                    cache.stats.prefix_hits += 1;
                }
                matched = h.matched.min(total - 1);
                cache.stats.prefix_tokens_matched += matched;
                cache.stats.bytes_saved += matched * self.prof.kv_bytes_per_token;
                self.live[r].handle = Some(h);
            }
            let l = &mut self.live[r];
            l.matched = matched;
            l.compute_tokens = total - matched;
            l.phase = Phase::Prefilling;
            l.dispatch_at = self.now;
            l.prefill_start = start;
            if blocking && req.modality == Modality::Multimodal {
                enc_work += l.uncached_image_tokens as f64 / self.prof.encode_rate;
            }
            pre_work += l.compute_tokens as f64 / self.prof.prefill_rate;
        }
        let share = if enc_work + pre_work > 0.0 { enc_work / (enc_work + pre_work) } else { 0.0 };
        for &r in &reqs {
            self.live[r].encode_share = share;
        }
        for &i in &instances {
            self.set_job(i, Job::Prefill(id));
        }
        let work = enc_work + pre_work;
        let finish = start + work / self.prof.parallel_speedup(instances.len()).expect("non-empty");
        self.prefills.insert(id, PrefillBatch { group: g, instances, reqs, work, start, last: start, epoch: 0, });
        self.counters.prefill_batches += 1;
        self.push(finish, Ev::PrefillDone(id, 0));
        id
    }

    fn on_prefill_done(&mut self, b: u64, epoch: u32) -> Result<(), EngineError> {
        if self.prefills.get(&b).is_none_or(|p| p.epoch != epoch) {
            return Ok(());
        }
        let batch = self.prefills.remove(&b).expect("checked");
        let g = batch.group;
        let mut transfer = 0u64;
        for &r in &batch.reqs {
            let req = &self.trace[r];
            let input = req.total_input_len();
            let got = self.ledger.materialize(r, input);
            if got != input {
                return Err(EngineError::InvariantViolated { time: self.now, what: format!("request {} lacks KV reservation", req.id) });
            }
            if !self.cfg.nonblocking && req.modality == Modality::Multimodal {
                self.finish_images(r);
            }
            if let Some(h) = self.live[r].handle.take() {
                let seq = req.unified_sequence();
                let cache = &mut self.groups[g].cache;
                cache.prefixes.insert_prefix(&seq, input, self.now);
                cache.prefixes.release(h).map_err(|e| EngineError::InvariantViolated { time: self.now, what: e.to_string() })?;
            }
            let l = &mut self.live[r];
            l.first_token = Some(self.now);
            l.prefilled_tokens = l.matched + l.compute_tokens;
            l.phase = Phase::Decoding;
            transfer += input;
        }
        match self.cfg.policy {
            PolicyKind::Emp => {
                let db = match self.groups[g].decode {
                    Some(db) => db,
                    None => {
                        let id = self.new_decode(g, vec![]);
                        self.groups[g].decode = Some(id);
                        id
                    }
                };
                for &i in &batch.instances {
                    self.set_job(i, Job::Decode(db));
                }
                let d = self.decodes.get_mut(&db).expect("exists");
                d.instances.extend(&batch.instances);
                d.reqs.extend(&batch.reqs);
                self.kick(db)?;
            }
            PolicyKind::Coupled => {
                let i = batch.instances[0];
                let db = match self.insts[i].decode {
                    Some(db) => db,
                    None => {
                        let id = self.new_decode(g, vec![i]);
                        self.insts[i].decode = Some(id);
                        id
                    }
                };
                self.set_job(i, Job::Decode(db));
                let d = self.decodes.get_mut(&db).expect("exists");
                d.reqs.extend(&batch.reqs);
                d.stalled = false;
                self.kick(db)?;
            }
            PolicyKind::StaticDecoupled => {
                for &i in &batch.instances {
                    self.set_job(i, Job::Idle);
                }
                let db = self.sd_decode_batch(g);
                self.decodes.get_mut(&db).expect("exists").reqs.extend(&batch.reqs);
                // KV crosses from the prefill to the decode instances.
                self.start_migration(batch.reqs.iter().map(|&r| (r, 1)).collect(), transfer);
                self.kick(db)?;
            }
        }
        Ok(())
    }

    fn new_decode(&mut self, g: GroupId, instances: Vec<InstanceId>) -> u64 {
        let id = self.fresh_id();
        self.decodes.insert(
            id,
            DecodeBatch { group: g, instances, reqs: BTreeSet::new(), step: None, epoch: 0, lat: AvgLatTracker::default(), stalled: false },
        );
        id
    }

    fn sd_decode_batch(&mut self, g: GroupId) -> u64 {
        if let Some(db) = self.groups[g].decode {
            return db;
        }
        let inst: Vec<InstanceId> = self.insts.iter().filter(|i| i.group == g && i.fixed == Some(Stage::Decode)).map(|i| i.id).collect();
        let db = self.new_decode(g, inst.clone());
        for i in inst {
            self.set_job(i, Job::Decode(db));
        }
        self.groups[g].decode = Some(db);
        db
    }

    /// Pauses the given requests for the time needed to move `tokens`.
    fn start_migration(&mut self, reqs: Vec<(Rix, u64)>, tokens: u64) -> f64 {
        let reqs: Vec<Rix> = reqs.into_iter().filter(|&(_, t)| t > 0).map(|(r, _)| r).collect();
        if tokens == 0 || reqs.is_empty() {
            return 0.0;
        }
        let id = self.fresh_id();
        for &r in &reqs {
            self.live[r].pause += 1;
        }
        self.migrations.insert(id, reqs);
        self.counters.migrations += 1;
        self.counters.migrated_tokens += tokens;
        let dur = self.prof.migration_cost(tokens);
        self.push(self.now + dur, Ev::MigrationDone(id));
        dur
    }

    fn on_migration_done(&mut self, m: u64) -> Result<(), EngineError> {
        let reqs = self.migrations.get(&m).cloned().unwrap_or_default();
        let mut batches = BTreeSet::new();
        for r in reqs {
            self.live[r].pause -= 1;
            if let Some(db) = self.decode_of(r) {
                batches.insert(db);
            }
        }
        if !self.cfg.event_log {
            self.migrations.remove(&m);
        }
        for db in batches {
            self.kick(db)?;
        }
        Ok(())
    }

    fn decode_of(&self, r: Rix) -> Option<u64> {
        self.decodes.iter().find(|(_, d)| d.reqs.contains(&r)).map(|(&id, _)| id)
    }

    fn resident(&self, d: &DecodeBatch) -> u64 {
        d.instances.iter().map(|&i| self.ledger.used(i)).sum()
    }

    /// Starts the next decode step if none is in flight.
    fn kick(&mut self, db: u64) -> Result<(), EngineError> {
        let d = &self.decodes[&db];
        if d.step.is_some() || d.stalled || d.instances.is_empty() {
            return Ok(());
        }
        let active: Vec<Rix> = d.reqs.iter().copied().filter(|&r| self.live[r].pause == 0).collect();
        if active.is_empty() {
            return Ok(());
        }
        let resident = match self.cfg.policy {
            PolicyKind::StaticDecoupled | PolicyKind::Emp | PolicyKind::Coupled => self.resident(d),
        };
        let t = self.prof.decode_step_time(active.len(), d.instances.len(), resident)?;
        let d = self.decodes.get_mut(&db).expect("exists");
        d.epoch += 1;
        d.step = Some((active, t));
        let epoch = d.epoch;
        if self.cfg.policy == PolicyKind::Coupled {
            let i = d.instances[0];
            self.set_job(i, Job::Decode(db));
        }
        self.push(self.now + t, Ev::DecodeStep(db, epoch));
        Ok(())
    }

    fn on_decode_step(&mut self, db: u64, epoch: u32) -> Result<(), EngineError> {
        let Some(d) = self.decodes.get_mut(&db) else { return Ok(()) };
        if d.epoch != epoch {
            return Ok(());
        }
        let (active, t) = d.step.take().expect("step in flight");
        d.lat.observe(t);
        self.counters.decode_steps += 1;
        for r in active {
            if !self.decodes[&db].reqs.contains(&r) {
                continue;
            }
            if self.ledger.materialize(r, 1) != 1 {
                return Err(EngineError::InvariantViolated { time: self.now, what: format!("request {} decoded past its reservation", self.trace[r].id) });
            }
            let l = &mut self.live[r];
            l.decoded += 1;
            if l.decoded == self.trace[r].output_len {
                l.completion = Some(self.now);
                l.phase = Phase::Done;
                self.ledger.release(r);
                self.completed += 1;
                self.decodes.get_mut(&db).expect("exists").reqs.remove(&r);
            }
        }
        let d = &self.decodes[&db];
        let g = d.group;
        if d.reqs.is_empty() {
            let instances = d.instances.clone();
            self.decodes.remove(&db);
            match self.cfg.policy {
                PolicyKind::Coupled => self.insts[instances[0]].decode = None,
                _ => self.groups[g].decode = None,
            }
            for i in instances {
                self.set_job(i, Job::Idle);
            }
            return Ok(());
        }
        if self.cfg.policy == PolicyKind::Coupled {
            let i = d.instances[0];
            if !self.insts[i].queue.is_empty() {
                // Waiting prefill takes the replica at the step boundary.
                self.decodes.get_mut(&db).expect("exists").stalled = true;
                self.set_job(i, Job::Idle);
                return Ok(());
            }
        }
        self.kick(db)
    }

    fn schedule(&mut self) -> Result<(), EngineError> {
        match self.cfg.policy {
            PolicyKind::Coupled => self.coupled_tick(),
            PolicyKind::StaticDecoupled => {
                for g in 0..self.groups.len() {
                    self.static_tick(g)?;
                }
                Ok(())
            }
            PolicyKind::Emp => self.emp_tick(),
        }
    }

    // ---- coupled ----

    fn coupled_tick(&mut self) -> Result<(), EngineError> {
        for i in 0..self.insts.len() {
            if self.insts[i].job != Job::Idle {
                continue;
            }
            let queue = self.queued(&self.insts[i].queue);
            let free = self.unused(i);
            let budget = self.prof.tipping_point(1, free, self.cfg.prefill_window)?;
            let picked: Vec<Rix> = dispatch(&queue, free, budget).into_iter().map(|r| r as Rix).collect();
            if picked.is_empty() {
                if let Some(db) = self.insts[i].decode {
                    self.decodes.get_mut(&db).expect("exists").stalled = false;
                    self.kick(db)?;
                }
                continue;
            }
            self.insts[i].queue.retain(|r| !picked.contains(r));
            self.reserve_on(&picked, &[i])?;
            self.start_prefill(TEXT, picked, vec![i], self.now);
        }
        Ok(())
    }

    // ---- static decoupled ----

    fn assign_encoders(&mut self, g: GroupId, mut idle: Vec<InstanceId>, reserve: usize) {
        let waiting = self.groups[g].encode_wait.len();
        let avail = idle.len().saturating_sub(reserve);
        let jobs = waiting.min(avail);
        if jobs == 0 {
            return;
        }
        let per = (avail / jobs).clamp(1, self.cfg.encode_parallel_cap.unwrap_or(usize::MAX));
        for _ in 0..jobs {
            let r = self.groups[g].encode_wait.pop_front().expect("counted");
            let take: Vec<InstanceId> = idle.drain(..per).collect();
            self.start_encode(r, take);
        }
    }

    fn static_tick(&mut self, g: GroupId) -> Result<(), EngineError> {
        if self.cfg.nonblocking {
            let idle = self.idle_in(g, Some(Stage::Encode));
            self.assign_encoders(g, idle, 0);
        }
        let idle = self.idle_in(g, Some(Stage::Prefill));
        if idle.is_empty() || self.groups[g].ready.is_empty() {
            return Ok(());
        }
        let decoders: Vec<InstanceId> = self.insts.iter().filter(|i| i.group == g && i.fixed == Some(Stage::Decode)).map(|i| i.id).collect();
        let decode_free: u64 = decoders.iter().map(|&i| self.unused(i)).sum();
        let prefill_free: u64 = idle.iter().map(|&i| self.unused(i)).sum();
        let free = decode_free.min(prefill_free);
        let budget = self.prof.tipping_point(idle.len(), free, self.cfg.prefill_window)?;
        let queue = self.queued(&self.groups[g].ready);
        let picked: Vec<Rix> = dispatch(&queue, free, budget).into_iter().map(|r| r as Rix).collect();
        if picked.is_empty() {
            return Ok(());
        }
        self.groups[g].ready.retain(|r| !picked.contains(r));
        self.reserve_on(&picked, &decoders)?;
        self.start_prefill(g, picked, idle, self.now);
        Ok(())
    }

    // ---- elastic ----

    fn emp_tick(&mut self) -> Result<(), EngineError> {
        if self.cfg.elastic {
            self.rebalance();
        }
        for g in 0..self.groups.len() {
            self.shrink_decode(g)?;
        }
        if self.cfg.nonblocking {
            for g in 0..self.groups.len() {
                self.emp_encode(g);
            }
        }
        for g in 0..self.groups.len() {
            self.emp_prefill(g)?;
        }
        for g in 0..self.groups.len() {
            self.scale_decode(g)?;
        }
        Ok(())
    }

    /// Moves idle instances toward the burst-tolerance maximin plan.
    fn rebalance(&mut self) {
        let now = self.now;
        let demands: Vec<GroupDemand> = (0..self.groups.len())
            .map(|g| GroupDemand { id: g, avg_required: self.groups[g].estimator.avg_required(now) })
            .collect();
        let Ok(plan) = proactive_allocate(&demands, self.insts.len()) else { return };
        if plan.min_bt.is_none() {
            return;
        }
        let mut targets = plan.counts.clone();
        for g in 0..self.groups.len() {
            if targets[&g] == 0 {
                let (&big, _) = targets.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).expect("groups");
                *targets.get_mut(&big).expect("present") -= 1;
                *targets.get_mut(&g).expect("present") += 1;
            }
        }
        let mut moved = Vec::new();
        for src in 0..self.groups.len() {
            let mut idle = self.idle_in(src, None);
            while self.group_size(src) > targets[&src] && self.group_size(src) > 1 {
                let Some(i) = idle.pop() else { break };
                let Some(dst) = (0..self.groups.len()).find(|&d| self.group_size(d) < targets[&d]) else { break };
                self.insts[i].group = dst;
                moved.push((i, src, dst));
            }
        }
        if !moved.is_empty() {
            self.counters.balancer_moves += moved.len() as u64;
            if self.cfg.audit {
                self.audit.push(AuditRecord::Rebalance { time: now, targets, moved });
            }
        }
    }

    /// Lends an idle instance of another group to `g`, if one is free.
    fn borrow_idle(&mut self, g: GroupId, stage: Stage) -> Option<InstanceId> {
        if !self.cfg.elastic {
            return None;
        }
        let cands: Vec<Candidate> = self
            .insts
            .iter()
            .filter(|i| i.group != g && i.job == Job::Idle)
            .map(|i| Candidate::idle(i.id, i.group, i.cap))
            .collect();
        let d = reactive_scale(g, &self.group_views(), &cands, f64::INFINITY, self.prof, self.w);
        let i = d.chosen?;
        let from = self.insts[i].group;
        self.insts[i].group = g;
        self.counters.reactive_borrows += 1;
        if self.cfg.audit {
            self.audit.push(AuditRecord::Borrow { time: self.now, needy: g, instance: i, from, stage });
        }
        Some(i)
    }

    fn emp_encode(&mut self, g: GroupId) {
        if self.groups[g].encode_wait.is_empty() {
            return;
        }
        let prefill_running = self.prefills.values().any(|p| p.group == g);
        let reserve = usize::from(!self.groups[g].ready.is_empty() && !prefill_running);
        let mut idle = self.idle_in(g, None);
        while idle.len() < reserve + self.groups[g].encode_wait.len() {
            match self.borrow_idle(g, Stage::Encode) {
                Some(i) => idle.push(i),
                None => break,
            }
        }
        self.assign_encoders(g, idle, reserve);
    }

    fn decode_view(&self, db: u64) -> DecodeBatchView {
        let d = &self.decodes[&db];
        let remaining: Vec<u64> = d.reqs.iter().map(|&r| self.trace[r].output_len - self.live[r].decoded).collect();
        let mean_remaining = if remaining.is_empty() { 0 } else { remaining.iter().sum::<u64>().div_ceil(remaining.len() as u64) };
        DecodeBatchView {
            id: db,
            instances: d.instances.iter().map(|&i| self.slots(i)).collect(),
            load: BatchLoad::Decode { batch_size: d.reqs.len(), resident_kv: self.resident(d), remaining_output: mean_remaining },
            output_lens: d.reqs.iter().map(|&r| self.trace[r].output_len).collect(),
        }
    }

    /// Takes `i` out of its decode batch, moving its KV to the batch's other
    /// instances. Returns the migration delay, or `None` if it cannot move.
    fn detach_decode(&mut self, i: InstanceId, db: u64) -> Option<f64> {
        let others: Vec<(InstanceId, u64)> =
            self.decodes[&db].instances.iter().filter(|&&o| o != i).map(|&o| (o, self.unused(o))).collect();
        if others.is_empty() {
            return None;
        }
        let moved = self.ledger.evacuate(i, &others)?;
        let tokens = moved.values().sum();
        self.decodes.get_mut(&db).expect("exists").instances.retain(|&o| o != i);
        self.set_job(i, Job::Idle);
        Some(self.start_migration(moved.into_iter().collect(), tokens))
    }

    /// Takes `i` out of a running prefill batch; the rest finish the work.
    fn detach_prefill(&mut self, i: InstanceId, b: u64) -> bool {
        let p = &self.prefills[&b];
        let others: Vec<(InstanceId, u64)> = p.instances.iter().filter(|&&o| o != i).map(|&o| (o, self.unused(o))).collect();
        if others.is_empty() || self.ledger.evacuate(i, &others).is_none() {
            return false;
        }
        let now = self.now;
        let prof = self.prof;
        let p = self.prefills.get_mut(&b).expect("exists");
        let n_old = p.instances.len();
        let from = p.last.max(p.start);
        if now > from {
            p.work = (p.work - (now - from) * prof.parallel_speedup(n_old).expect("n > 0")).max(0.0);
            p.last = now;
        }
        p.instances.retain(|&o| o != i);
        p.epoch += 1;
        let finish = p.start.max(now) + p.work / prof.parallel_speedup(p.instances.len()).expect("n > 0");
        let epoch = p.epoch;
        self.set_job(i, Job::Idle);
        self.push(finish, Ev::PrefillDone(b, epoch));
        true
    }

    fn emp_prefill(&mut self, g: GroupId) -> Result<(), EngineError> {
        if self.groups[g].ready.is_empty() {
            return Ok(());
        }
        let prefill_running = self.prefills.values().any(|p| p.group == g);
        let mut idle = self.idle_in(g, None);
        let db = self.groups[g].decode;
        let views: Vec<DecodeBatchView> = match db {
            Some(db) if self.cfg.preemption => vec![self.decode_view(db)],
            _ => vec![],
        };
        if idle.is_empty() {
            if prefill_running {
                return Ok(());
            }
            let preemptable = views.iter().any(|v| v.instances.len() > 1);
            if !preemptable {
                match self.borrow_idle(g, Stage::Prefill) {
                    Some(i) => idle.push(i),
                    None => return Ok(()),
                }
            }
        }
        let idle_slots: Vec<InstanceSlots> = idle.iter().map(|&i| self.slots(i)).collect();
        let free: u64 = idle_slots.iter().map(|s| s.unused()).sum::<u64>()
            + views.iter().flat_map(|v| &v.instances).map(|s| s.unused()).sum::<u64>();
        let budget = self.prof.tipping_point(idle.len().max(1), free, self.cfg.prefill_window)?;
        let queue = self.queued(&self.groups[g].ready);
        let picked = dispatch(&queue, free, budget);
        if picked.is_empty() {
            return Ok(());
        }
        let items: Vec<PrefillItem> = picked
            .iter()
            .map(|&r| {
                let q = queue.iter().find(|q| q.id == r).expect("from queue");
                PrefillItem { id: r, compute_tokens: q.compute_tokens, kv_tokens: q.kv_tokens, input_len: self.trace[r as Rix].total_input_len() }
            })
            .collect();
        let alloc = allocate_prefill(self.prof, &items, &idle_slots, &views, self.w);
        if alloc.admitted.is_empty() {
            return Ok(());
        }
        let mut delay: f64 = 0.0;
        for p in &alloc.preemptions {
            let db = db.expect("preemption implies a decode batch");
            let d = self.detach_decode(p.instance, db).ok_or_else(|| EngineError::InvariantViolated {
                time: self.now,
                what: format!("preempted instance {} could not migrate", p.instance),
            })?;
            delay = delay.max(d);
            if p.forced {
                self.counters.forced_preemptions += 1;
            } else {
                self.counters.opportunistic_preemptions += 1;
            }
        }
        let admitted: Vec<Rix> = alloc.admitted.iter().map(|&r| r as Rix).collect();
        self.groups[g].ready.retain(|r| !admitted.contains(r));
        self.reserve_on(&admitted, &alloc.instances)?;
        let ids: Vec<u64> = admitted.iter().map(|&r| self.trace[r].id).collect();
        self.start_prefill(g, admitted, alloc.instances.clone(), self.now + delay);
        if self.cfg.audit {
            self.audit.push(AuditRecord::Tick(PolicyDecision {
                time: self.now,
                group: g,
                dispatched: ids,
                prefill_instances: alloc.instances,
                preemptions: alloc.preemptions,
                scale_ops: vec![],
            }));
        }
        Ok(())
    }

    fn shrink_decode(&mut self, g: GroupId) -> Result<(), EngineError> {
        let Some(db) = self.groups[g].decode else { return Ok(()) };
        if !self.cfg.preemption {
            return Ok(());
        }
        let thr = self.prof.decode_batch_threshold as f64;
        loop {
            let d = &self.decodes[&db];
            let n = d.instances.len();
            if n <= 1 || d.reqs.len() as f64 / n as f64 >= thr / 2.0 {
                return Ok(());
            }
            let last = *d.instances.last().expect("n > 1");
            if self.detach_decode(last, db).is_none() {
                return Ok(());
            }
            self.counters.shrinks += 1;
            if self.cfg.audit {
                self.audit.push(AuditRecord::Scale { time: self.now, group: g, decision: ScaleDecision::Shrink { instance: last } });
            }
        }
    }

    fn prefill_candidate(&self, i: InstanceId, b: u64) -> Candidate {
        let p = &self.prefills[&b];
        let spare = p.instances.iter().filter(|&&o| o != i).map(|&o| self.unused(o)).sum();
        let tokens = (p.work * self.prof.prefill_rate).ceil() as u64;
        Candidate {
            instance: i,
            group: self.insts[i].group,
            unused_slots: self.unused(i),
            kv_capacity: self.insts[i].cap,
            kv_used: self.ledger.used(i),
            kv_reserved: self.ledger.reserved(i),
            victim: Some(Victim {
                load: BatchLoad::Prefill { tokens },
                n_instances: p.instances.len(),
                norm_lens: p.reqs.iter().map(|&r| self.trace[r].total_input_len()).collect(),
                spare_elsewhere: spare,
            }),
        }
    }

    fn candidate_for(&self, i: InstanceId) -> Option<Candidate> {
        let inst = &self.insts[i];
        match inst.job {
            Job::Idle => Some(Candidate::idle(i, inst.group, inst.cap)),
            Job::Prefill(b) if self.cfg.preemption => Some(self.prefill_candidate(i, b)),
            Job::Decode(db) if self.cfg.preemption => {
                let v = self.decode_view(db);
                let idx = v.instances.iter().position(|s| s.id == i)?;
                Some(v.candidate(idx))
            }
            _ => None,
        }
    }

    fn scale_decode(&mut self, g: GroupId) -> Result<(), EngineError> {
        let Some(db) = self.groups[g].decode else { return Ok(()) };
        let d = &self.decodes[&db];
        let n = d.instances.len();
        let size = d.reqs.len();
        if n == 0 || (size as f64 / n as f64) <= self.prof.decode_batch_threshold as f64 {
            return Ok(());
        }
        let resident = self.resident(d);
        let avg_lat = match d.lat.get() {
            Some(v) => v,
            None => self.prof.decode_step_time(size, n, resident)?,
        };
        let output_lens: Vec<u64> = d.reqs.iter().map(|&r| self.trace[r].output_len).collect();
        let order = d.instances.clone();
        let idle_same = self.idle_in(g, None);
        let intra: Vec<Candidate> = if self.cfg.preemption {
            self.insts
                .iter()
                .filter(|i| i.group == g)
                .filter_map(|i| match i.job {
                    Job::Prefill(b) => Some(self.prefill_candidate(i.id, b)),
                    _ => None,
                })
                .collect()
        } else {
            vec![]
        };
        let foreign: Vec<Candidate> = if self.cfg.elastic {
            self.insts.iter().filter(|i| i.group != g).filter_map(|i| self.candidate_for(i.id)).collect()
        } else {
            vec![]
        };
        let input = DecodeScaleInput { group: g, batch_size: size, resident_kv: resident, output_lens: &output_lens, avg_lat, instances: &order };
        let decision = autoscale_decode(self.prof, &input, &idle_same, &intra, &foreign, &self.group_views(), self.w)?;
        let joined = match decision {
            ScaleDecision::None | ScaleDecision::Shrink { .. } => None,
            ScaleDecision::UpIdle { instance } => {
                self.counters.scale_up_idle += 1;
                Some(instance)
            }
            ScaleDecision::UpIntra { instance, .. } => {
                let Job::Prefill(b) = self.insts[instance].job else { unreachable!("intra candidates are prefilling") };
                if !self.detach_prefill(instance, b) {
                    return Ok(());
                }
                self.counters.scale_up_intra += 1;
                Some(instance)
            }
            ScaleDecision::UpInter { instance, .. } => {
                let ok = match self.insts[instance].job {
                    Job::Idle => true,
                    Job::Prefill(b) => self.detach_prefill(instance, b),
                    Job::Decode(other) => self.detach_decode(instance, other).is_some(),
                    Job::Encode(_) => false,
                };
                if !ok {
                    return Ok(());
                }
                let from = self.insts[instance].group;
                self.insts[instance].group = g;
                self.counters.scale_up_inter += 1;
                self.counters.reactive_borrows += 1;
                if self.cfg.audit {
                    self.audit.push(AuditRecord::Borrow { time: self.now, needy: g, instance, from, stage: Stage::Decode });
                }
                Some(instance)
            }
        };
        if let Some(i) = joined {
            self.set_job(i, Job::Decode(db));
            self.decodes.get_mut(&db).expect("exists").instances.push(i);
            if self.cfg.audit {
                self.audit.push(AuditRecord::Scale { time: self.now, group: g, decision });
            }
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<(), EngineError> {
        let fail = |what: String| Err(EngineError::InvariantViolated { time: self.now, what });
        if let Err(e) = self.ledger.check() {
            return fail(e);
        }
        for i in &self.insts {
            if self.ledger.used(i.id) + self.ledger.reserved(i.id) > i.cap {
                return fail(format!("instance {} over capacity", i.id));
            }
        }
        let mut expected_used = 0;
        for (r, l) in self.live.iter().enumerate() {
            let req = &self.trace[r];
            let (used, reserved) = match l.phase {
                Phase::Prefilling => (0, req.total_input_len() + req.output_len),
                Phase::Decoding => {
                    let u = req.total_input_len() + l.decoded;
                    (u, req.total_input_len() + req.output_len - u)
                }
                _ => (0, 0),
            };
            if (l.phase == Phase::Prefilling || l.phase == Phase::Decoding)
                && (self.ledger.request_used(r) != used || self.ledger.request_reserved(r) != reserved) {
                    return fail(format!(
                        "request {} holds {}+{} KV, expected {used}+{reserved}",
                        req.id,
                        self.ledger.request_used(r),
                        self.ledger.request_reserved(r)
                    ));
                }
            expected_used += used;
        }
        if self.ledger.total_used() != expected_used {
            return fail(format!("KV not conserved: {} resident vs {} produced", self.ledger.total_used(), expected_used));
        }
        Ok(())
    }

    fn finish(mut self) -> SimOutput {
        let end = self.now;
        for i in 0..self.insts.len() {
            if self.insts[i].job != Job::Idle {
                self.set_job(i, Job::Idle);
            }
        }
        let records = self
            .trace
            .iter()
            .zip(&self.live)
            .map(|(req, l)| {
                let first = l.first_token.expect("completed");
                let ttft = first - req.arrival_time;
                let run = first - l.prefill_start;
                let blocking_encode = run * l.encode_share;
                let encode = if self.cfg.nonblocking && req.modality == Modality::Multimodal && (l.encode_computed > 0 || l.waited) {
                    l.encode_end - l.encode_start
                } else {
                    blocking_encode
                };
                let prefill = run - blocking_encode;
                let migration = l.prefill_start - l.dispatch_at;
                RequestRecord {
                    id: req.id,
                    modality: req.modality,
                    priority_hint: req.priority_hint,
                    group: l.group,
                    arrival_time: req.arrival_time,
                    first_token_time: first,
                    completion_time: l.completion.expect("completed"),
                    total_input_len: req.total_input_len(),
                    output_len: req.output_len,
                    queue_wait: ttft - encode - migration - prefill,
                    encode,
                    migration,
                    prefill,
                    encoded_tokens: l.encoded_tokens,
                    prefilled_tokens: l.prefilled_tokens,
                    decoded_tokens: l.decoded,
                    encode_computed: l.encode_computed,
                    prefill_computed: l.compute_tokens,
                }
            })
            .collect();
        let mut cache = CacheStats::default();
        for g in &self.groups {
            cache.merge(&g.cache.stats());
        }
        SimOutput {
            records,
            counters: self.counters,
            cache,
            makespan: end,
            busy: self.insts.iter().map(|i| i.busy_total).collect(),
            events: self.events,
            audit: self.audit,
        }
    }
}
