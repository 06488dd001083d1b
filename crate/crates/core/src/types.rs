//! Domain types shared by every other module.
//!
//! Everything here is a plain value: construction, validation and a few
//! derived quantities, nothing stateful.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use thiserror::Error;

pub type RequestId = u64;
pub type InstanceId = usize;
pub type GroupId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    TextOnly,
    Multimodal,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::TextOnly => f.write_str("text_only"),
            Modality::Multimodal => f.write_str("multimodal"),
        }
    }
}

/// 128-bit digest identifying an image (or a shared prompt prefix).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub u128);

impl ContentHash {
    /// Digest of an identity string: the first 16 bytes of its SHA-256.
    pub fn of(identity: &str) -> Self {
        let digest = Sha256::digest(identity.as_bytes());
        let mut bytes = [0u8; 16];
        bytes.copy_from_slice(&digest[..16]);
        ContentHash(u128::from_be_bytes(bytes))
    }

    fn low64(self) -> u64 {
        self.0 as u64 ^ (self.0 >> 64) as u64
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:032x}", self.0))
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u128::from_str_radix(&s, 16)
            .map(ContentHash)
            .map_err(|e| serde::de::Error::custom(format!("bad content hash {s:?}: {e}")))
    }
}

/// Image resolution, serialized as `[width, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Pixels {
    pub width: u32,
    pub height: u32,
}

impl From<[u32; 2]> for Pixels {
    fn from([width, height]: [u32; 2]) -> Self {
        Pixels { width, height }
    }
}

impl From<Pixels> for [u32; 2] {
    fn from(p: Pixels) -> Self {
        [p.width, p.height]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInput {
    pub hash: ContentHash,
    pub token_count: u64,
    pub pixels: Pixels,
}

/// A system prompt shared between requests; occupies the head of the text tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedPrefix {
    pub hash: ContentHash,
    pub len: u64,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One inference job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival_time: f64,
    pub modality: Modality,
    pub text_input_len: u64,
    #[serde(default)]
    pub images: Vec<ImageInput>,
    pub output_len: u64,
    /// Text-only dialogue that belongs with a multimodal conversation; it is
    /// served by the multimodal group and jumps that group's FCFS queue.
    #[serde(default, skip_serializing_if = "is_false")]
    pub priority_hint: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_prefix: Option<SharedPrefix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_time: Option<f64>,
}

impl Request {
    pub fn text_only(id: RequestId, arrival_time: f64, text_input_len: u64, output_len: u64) -> Self {
        Request {
            id,
            arrival_time,
            modality: Modality::TextOnly,
            text_input_len,
            images: Vec::new(),
            output_len,
            priority_hint: false,
            shared_prefix: None,
            first_token_time: None,
            completion_time: None,
        }
    }

    pub fn multimodal(
        id: RequestId,
        arrival_time: f64,
        text_input_len: u64,
        images: Vec<ImageInput>,
        output_len: u64,
    ) -> Self {
        Request {
            modality: Modality::Multimodal,
            images,
            ..Request::text_only(id, arrival_time, text_input_len, output_len)
        }
    }

    pub fn image_tokens(&self) -> u64 {
        self.images.iter().map(|i| i.token_count).sum()
    }

    pub fn total_input_len(&self) -> u64 {
        self.text_input_len + self.image_tokens()
    }

    /// Token identities of the unified sequence: image tokens in request
    /// order followed by text tokens (shared prefix first, then private text).
    pub fn unified_sequence(&self) -> Vec<u64> {
        let mut seq = Vec::with_capacity(self.total_input_len() as usize);
        for img in &self.images {
            let base = img.hash.low64();
            seq.extend((0..img.token_count).map(|i| mix64(base ^ 0x1a6e, i)));
        }
        let shared = self
            .shared_prefix
            .map(|p| p.len.min(self.text_input_len))
            .unwrap_or(0);
        if let Some(p) = self.shared_prefix {
            let base = p.hash.low64();
            seq.extend((0..shared).map(|i| mix64(base ^ 0x7e47, i)));
        }
        let private = mix64(0x9e37_79b9_7f4a_7c15, self.id);
        seq.extend((shared..self.text_input_len).map(|i| mix64(private, i)));
        seq
    }
}

/// splitmix64 finalizer over a (seed, index) pair.
fn mix64(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub type Trace = Vec<Request>;

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
pub enum TraceError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("request {id}: arrival {at} precedes previous arrival {prev}")]
    NonMonotoneArrivals { id: RequestId, prev: f64, at: f64 },
    #[error("request {id}: arrival time {at} is not a finite non-negative number")]
    InvalidArrival { id: RequestId, at: f64 },
    #[error("request {id}: modality does not match image list")]
    ModalityMismatch { id: RequestId },
    #[error("request {id}: output_len must be at least 1")]
    ZeroOutputLen { id: RequestId },
    #[error("request {id}: image {hash} has zero tokens")]
    ZeroImageTokens { id: RequestId, hash: String },
    #[error("request {id}: image {hash} disagrees with an earlier image of the same hash")]
    InconsistentImage { id: RequestId, hash: String },
    #[error("request {id}: shared prefix longer than text input")]
    PrefixTooLong { id: RequestId },
    #[error("request id {id} appears more than once")]
    DuplicateId { id: RequestId },
}

/// Checks every request invariant; returns all violations found.
pub fn validate_trace(trace: &[Request]) -> Result<(), Vec<TraceError>> {
    if trace.is_empty() {
        return Err(vec![TraceError::EmptyTrace]);
    }
    let mut errors = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut images: BTreeMap<ContentHash, (u64, Pixels)> = BTreeMap::new();
    let mut prev: Option<f64> = None;
    for r in trace {
        if !seen_ids.insert(r.id) {
            errors.push(TraceError::DuplicateId { id: r.id });
        }
        if !r.arrival_time.is_finite() || r.arrival_time < 0.0 {
            errors.push(TraceError::InvalidArrival { id: r.id, at: r.arrival_time });
        } else {
            if let Some(p) = prev {
                if r.arrival_time < p {
                    errors.push(TraceError::NonMonotoneArrivals { id: r.id, prev: p, at: r.arrival_time });
                }
            }
            prev = Some(r.arrival_time);
        }
        if (r.modality == Modality::Multimodal) == r.images.is_empty() {
            errors.push(TraceError::ModalityMismatch { id: r.id });
        }
        if r.output_len == 0 {
            errors.push(TraceError::ZeroOutputLen { id: r.id });
        }
        if let Some(p) = r.shared_prefix {
            if p.len > r.text_input_len {
                errors.push(TraceError::PrefixTooLong { id: r.id });
            }
        }
        for img in &r.images {
            if img.token_count == 0 {
                errors.push(TraceError::ZeroImageTokens { id: r.id, hash: img.hash.to_string() });
            }
            match images.get(&img.hash) {
                Some(&(tokens, px)) if tokens != img.token_count || px != img.pixels => {
                    errors.push(TraceError::InconsistentImage { id: r.id, hash: img.hash.to_string() });
                }
                Some(_) => {}
                None => {
                    images.insert(img.hash, (img.token_count, img.pixels));
                }
            }
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageRole {
    Encode,
    Prefill,
    Decode,
    Idle,
}

/// A simulated GPU.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElasticInstance {
    pub id: InstanceId,
    pub group: GroupId,
    pub stage_role: StageRole,
    pub kv_capacity: u64,
    pub kv_used: u64,
    /// Slots promised to resident requests (future decode growth, in-flight
    /// prefill output, inbound migrations). Not part of `kv_used`.
    pub kv_reserved: u64,
    pub busy_until: f64,
    pub resident_requests: BTreeSet<RequestId>,
}

impl ElasticInstance {
    pub fn new(id: InstanceId, group: GroupId, kv_capacity: u64) -> Self {
        ElasticInstance {
            id,
            group,
            stage_role: StageRole::Idle,
            kv_capacity,
            kv_used: 0,
            kv_reserved: 0,
            busy_until: 0.0,
            resident_requests: BTreeSet::new(),
        }
    }

    pub fn unused_slots(&self) -> u64 {
        self.kv_capacity.saturating_sub(self.kv_used + self.kv_reserved)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.kv_used + self.kv_reserved > self.kv_capacity {
            return Err(format!(
                "instance {}: used {} + reserved {} exceeds capacity {}",
                self.id, self.kv_used, self.kv_reserved, self.kv_capacity
            ));
        }
        if self.stage_role == StageRole::Idle && !self.resident_requests.is_empty() {
            return Err(format!("instance {}: idle with resident requests", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityGroup {
    pub id: GroupId,
    pub modality: Modality,
    pub instances: BTreeSet<InstanceId>,
    /// Requests ready for prefill, kept in arrival order.
    pub pending_queue: VecDeque<RequestId>,
    pub avg_required: u32,
    pub peak_required: u32,
}

impl ModalityGroup {
    pub fn new(id: GroupId, modality: Modality) -> Self {
        ModalityGroup {
            id,
            modality,
            instances: BTreeSet::new(),
            pending_queue: VecDeque::new(),
            avg_required: 0,
            peak_required: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encode,
    Prefill,
    Decode,
}

impl From<Stage> for StageRole {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Encode => StageRole::Encode,
            Stage::Prefill => StageRole::Prefill,
            Stage::Decode => StageRole::Decode,
        }
    }
}

/// A set of requests executing one stage on a set of instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageBatch {
    pub stage: Stage,
    pub requests: BTreeSet<RequestId>,
    pub instances: BTreeSet<InstanceId>,
}

impl StageBatch {
    pub fn check(&self, roles: impl Fn(InstanceId) -> StageRole) -> Result<(), String> {
        if !self.requests.is_empty() && self.instances.is_empty() {
            return Err(format!("{:?} batch has requests but no instances", self.stage));
        }
        if let Some(i) = self.instances.iter().find(|&&i| roles(i) != self.stage.into()) {
            return Err(format!("instance {i} does not hold role {:?}", self.stage));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SloError {
    #[error("SLO scale {0} must be at least 1")]
    ScaleBelowOne(f64),
    #[error("light-load latency must be strictly positive, got input {0} output {1}")]
    NonPositive(f64, f64),
}

/// Latency targets: 10x the light-load normalized latency, times a scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloConfig {
    pub light_load_latency_input: f64,
    pub light_load_latency_output: f64,
    pub scale: f64,
}

pub const SLO_LIGHT_LOAD_MULTIPLIER: f64 = 10.0;

impl SloConfig {
    pub fn new(light_in: f64, light_out: f64, scale: f64) -> Result<Self, SloError> {
        if !(scale >= 1.0) {
            return Err(SloError::ScaleBelowOne(scale));
        }
        if !(light_in > 0.0 && light_out > 0.0) {
            return Err(SloError::NonPositive(light_in, light_out));
        }
        Ok(SloConfig {
            light_load_latency_input: light_in,
            light_load_latency_output: light_out,
            scale,
        })
    }

    /// No latency constraint at all.
    pub fn unbounded() -> Self {
        SloConfig {
            light_load_latency_input: f64::INFINITY,
            light_load_latency_output: f64::INFINITY,
            scale: 1.0,
        }
    }

    pub fn with_scale(self, scale: f64) -> Result<Self, SloError> {
        if !(scale >= 1.0) {
            return Err(SloError::ScaleBelowOne(scale));
        }
        Ok(SloConfig { scale, ..self })
    }

    pub fn slo_input(&self) -> f64 {
        SLO_LIGHT_LOAD_MULTIPLIER * self.light_load_latency_input * self.scale
    }

    pub fn slo_output(&self) -> f64 {
        SLO_LIGHT_LOAD_MULTIPLIER * self.light_load_latency_output * self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(tag: &str, tokens: u64) -> ImageInput {
        ImageInput { hash: ContentHash::of(tag), token_count: tokens, pixels: Pixels { width: 904, height: 904 } }
    }

    #[test]
    fn single_text_request_is_valid() {
        let trace = vec![Request::text_only(0, 0.0, 10, 5)];
        assert_eq!(validate_trace(&trace), Ok(()));
    }

    #[test]
    fn multimodal_without_images_is_rejected() {
        let mut r = Request::text_only(3, 0.0, 10, 5);
        r.modality = Modality::Multimodal;
        let errs = validate_trace(&[r]).unwrap_err();
        assert_eq!(errs, vec![TraceError::ModalityMismatch { id: 3 }]);
    }

    #[test]
    fn text_request_with_images_is_rejected() {
        let mut r = Request::text_only(3, 0.0, 10, 5);
        r.images.push(image("a", 10));
        assert!(matches!(validate_trace(&[r]).unwrap_err()[0], TraceError::ModalityMismatch { id: 3 }));
    }

    #[test]
    fn decreasing_arrivals_are_rejected() {
        let trace = vec![Request::text_only(0, 5.0, 10, 5), Request::text_only(1, 3.0, 10, 5)];
        let errs = validate_trace(&trace).unwrap_err();
        assert!(matches!(errs[0], TraceError::NonMonotoneArrivals { id: 1, .. }));
    }

    #[test]
    fn empty_trace_is_rejected() {
        assert_eq!(validate_trace(&[]), Err(vec![TraceError::EmptyTrace]));
    }

    #[test]
    fn all_violations_are_reported() {
        let mut bad = Request::multimodal(1, 1.0, 4, vec![image("x", 0)], 0);
        bad.shared_prefix = Some(SharedPrefix { hash: ContentHash::of("p"), len: 9 });
        let errs = validate_trace(&[Request::text_only(1, 2.0, 1, 1), bad]).unwrap_err();
        assert_eq!(errs.len(), 5, "{errs:?}");
    }

    #[test]
    fn same_hash_must_mean_same_image() {
        let a = Request::multimodal(0, 0.0, 1, vec![image("x", 6516)], 1);
        let b = Request::multimodal(1, 0.0, 1, vec![image("x", 7410)], 1);
        assert!(matches!(validate_trace(&[a, b]).unwrap_err()[0], TraceError::InconsistentImage { id: 1, .. }));
    }

    #[test]
    fn slo_is_ten_times_light_load() {
        let slo = SloConfig::new(0.002, 0.03, 2.0).unwrap();
        assert!((slo.slo_input() - 0.04).abs() < 1e-12);
        assert!((slo.slo_output() - 0.6).abs() < 1e-12);
        assert!(SloConfig::new(0.002, 0.03, 0.5).is_err());
        assert!(SloConfig::new(0.0, 0.03, 1.0).is_err());
    }

    #[test]
    fn content_hash_round_trips_as_hex() {
        let h = ContentHash::of("img-1");
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s.len(), 34);
        assert_eq!(serde_json::from_str::<ContentHash>(&s).unwrap(), h);
    }

    #[test]
    fn unified_sequence_puts_images_first_and_shares_prefixes() {
        let mut a = Request::multimodal(0, 0.0, 6, vec![image("x", 3)], 1);
        let mut b = Request::multimodal(1, 0.0, 6, vec![image("x", 3)], 1);
        let p = SharedPrefix { hash: ContentHash::of("sys"), len: 4 };
        a.shared_prefix = Some(p);
        b.shared_prefix = Some(p);
        let (sa, sb) = (a.unified_sequence(), b.unified_sequence());
        assert_eq!(sa.len(), 9);
        assert_eq!(sa[..7], sb[..7]);
        assert_ne!(sa[7..], sb[7..]);
    }

    fn arb_request() -> impl Strategy<Value = Request> {
        (
            0u64..1000,
            0.0f64..1e4,
            0u64..4096,
            prop::collection::vec((0u32..50, 1u64..8000), 0..4),
            1u64..2048,
            any::<bool>(),
        )
            .prop_map(|(id, t, text, imgs, out, hint)| {
                let images: Vec<ImageInput> =
                    imgs.iter().map(|&(tag, tok)| image(&format!("{tag}-{tok}"), tok)).collect();
                let mut r = if images.is_empty() {
                    Request::text_only(id, t, text, out)
                } else {
                    Request::multimodal(id, t, text, images, out)
                };
                r.priority_hint = hint;
                r
            })
    }

    proptest! {
        #[test]
        fn total_input_is_additive_over_images(r in arb_request()) {
            let expected = r.text_input_len + r.images.iter().map(|i| i.token_count).sum::<u64>();
            prop_assert_eq!(r.total_input_len(), expected);
            prop_assert_eq!(r.unified_sequence().len() as u64, expected);
        }

        #[test]
        fn request_json_round_trip(r in arb_request()) {
            let line = serde_json::to_string(&r).unwrap();
            let back: Request = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
