//! Workload traces: Poisson generation over dataset profiles, burst
//! injection, and JSON-lines trace files.

use crate::types::{validate_trace, ContentHash, ImageInput, Modality, Pixels, Request, SharedPrefix, Trace, TraceError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid trace: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<TraceError>),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("unknown dataset profile {0:?}")]
    UnknownProfile(String),
}

/// Log-normal length distribution, rounded and clamped to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub mu: f64,
    pub sigma: f64,
    pub min: u64,
    pub max: u64,
}

impl LengthDist {
    pub fn fixed(v: u64) -> Self {
        LengthDist { mu: (v as f64).ln(), sigma: 0.0, min: v, max: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> u64 {
        let x = if self.sigma > 0.0 {
            LogNormal::new(self.mu, self.sigma).expect("validated").sample(rng)
        } else {
            self.mu.exp()
        };
        (x.round() as u64).clamp(self.min, self.max)
    }

    pub fn mean_estimate(&self) -> f64 {
        (self.mu + self.sigma * self.sigma / 2.0).exp().clamp(self.min as f64, self.max as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageChoice {
    pub token_count: u64,
    pub width: u32,
    pub height: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountChoice {
    pub count: u32,
    pub weight: f64,
}

/// Statistical shape of a request stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetProfile {
    pub name: String,
    pub text_len: LengthDist,
    pub output_len: LengthDist,
    pub multimodal_fraction: f64,
    pub images_per_request: Vec<CountChoice>,
    pub image_tokens: Vec<ImageChoice>,
    /// Probability that an image repeats a recently seen one.
    pub duplicate_image_rate: f64,
    /// How many recent distinct images a duplicate is drawn from.
    pub duplicate_window: usize,
    /// Probability that the text starts with one of the shared system prompts.
    pub duplicate_prefix_rate: f64,
    pub shared_prompts: usize,
    pub shared_prompt_len: LengthDist,
    /// Fraction of text-only requests that belong to a multimodal dialogue.
    pub priority_hint_rate: f64,
}

impl DatasetProfile {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Profile(format!("{}: {m}", self.name)));
        for (n, p) in [
            ("multimodal_fraction", self.multimodal_fraction),
            ("duplicate_image_rate", self.duplicate_image_rate),
            ("duplicate_prefix_rate", self.duplicate_prefix_rate),
            ("priority_hint_rate", self.priority_hint_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{n} must lie in [0, 1], got {p}"));
            }
        }
        for (n, d) in [("text_len", self.text_len), ("output_len", self.output_len), ("shared_prompt_len", self.shared_prompt_len)] {
            if !(d.sigma >= 0.0 && d.mu.is_finite()) || d.min > d.max {
                return bad(format!("{n} is not a valid distribution"));
            }
        }
        if self.output_len.min == 0 {
            return bad("output_len.min must be at least 1".into());
        }
        if self.multimodal_fraction > 0.0 {
            if self.images_per_request.iter().all(|c| c.weight <= 0.0 || c.count == 0) {
                return bad("images_per_request needs a positive choice".into());
            }
            if self.image_tokens.iter().all(|c| c.weight <= 0.0) || self.image_tokens.iter().any(|c| c.token_count == 0) {
                return bad("image_tokens needs positive-token choices with weight".into());
            }
        }
        if self.duplicate_prefix_rate > 0.0 && self.shared_prompts == 0 {
            return bad("duplicate_prefix_rate needs at least one shared prompt".into());
        }
        Ok(())
    }

    /// Short prompts with many high-resolution images.
    pub fn sharegpt4o_like() -> Self {
        DatasetProfile {
            name: "sharegpt4o-like".into(),
            text_len: LengthDist { mu: 4.6, sigma: 0.8, min: 4, max: 4096 },
            output_len: LengthDist { mu: 5.0, sigma: 0.6, min: 1, max: 2048 },
            multimodal_fraction: 0.6,
            images_per_request: vec![CountChoice { count: 1, weight: 0.85 }, CountChoice { count: 2, weight: 0.15 }],
            image_tokens: vec![
                ImageChoice { token_count: 7410, width: 904, height: 904, weight: 0.4 },
                ImageChoice { token_count: 6516, width: 904, height: 904, weight: 0.3 },
                ImageChoice { token_count: 3600, width: 640, height: 640, weight: 0.3 },
            ],
            duplicate_image_rate: 0.2,
            duplicate_window: 64,
            duplicate_prefix_rate: 0.3,
            shared_prompts: 8,
            shared_prompt_len: LengthDist { mu: 4.6, sigma: 0.3, min: 16, max: 512 },
            priority_hint_rate: 0.1,
        }
    }

    /// Long text prompts with fewer, lower-resolution images.
    pub fn visualwebinstruct_like() -> Self {
        DatasetProfile {
            name: "visualwebinstruct-like".into(),
            text_len: LengthDist { mu: 6.4, sigma: 0.7, min: 16, max: 8192 },
            output_len: LengthDist { mu: 5.4, sigma: 0.6, min: 1, max: 2048 },
            multimodal_fraction: 0.5,
            images_per_request: vec![CountChoice { count: 1, weight: 1.0 }],
            image_tokens: vec![
                ImageChoice { token_count: 1600, width: 448, height: 448, weight: 0.5 },
                ImageChoice { token_count: 3600, width: 640, height: 640, weight: 0.3 },
                ImageChoice { token_count: 6516, width: 904, height: 904, weight: 0.2 },
            ],
            duplicate_image_rate: 0.1,
            duplicate_window: 64,
            duplicate_prefix_rate: 0.3,
            shared_prompts: 8,
            shared_prompt_len: LengthDist { mu: 5.3, sigma: 0.3, min: 32, max: 1024 },
            priority_hint_rate: 0.1,
        }
    }

    /// A blend of both shipped profiles with heavy image and prompt reuse.
    pub fn mixed_duplicate_heavy() -> Self {
        let a = Self::sharegpt4o_like();
        let b = Self::visualwebinstruct_like();
        let mut image_tokens: Vec<ImageChoice> =
            a.image_tokens.iter().chain(&b.image_tokens).map(|c| ImageChoice { weight: c.weight / 2.0, ..*c }).collect();
        image_tokens.sort_by_key(|c| c.token_count);
        image_tokens.dedup_by(|x, y| {
            if x.token_count == y.token_count {
                y.weight += x.weight;
                true
            } else {
                false
            }
        });
        DatasetProfile {
            name: "mixed-duplicate-heavy".into(),
            text_len: LengthDist { mu: 5.5, sigma: 1.0, min: 4, max: 8192 },
            output_len: LengthDist { mu: 5.2, sigma: 0.6, min: 1, max: 2048 },
            multimodal_fraction: 0.55,
            images_per_request: a.images_per_request,
            image_tokens,
            duplicate_image_rate: 0.6,
            duplicate_window: 16,
            duplicate_prefix_rate: 0.7,
            shared_prompts: 4,
            shared_prompt_len: LengthDist { mu: 5.5, sigma: 0.3, min: 32, max: 1024 },
            priority_hint_rate: 0.1,
        }
    }

    pub fn builtin(name: &str) -> Result<Self, WorkloadError> {
        match name {
            "sharegpt4o-like" => Ok(Self::sharegpt4o_like()),
            "visualwebinstruct-like" => Ok(Self::visualwebinstruct_like()),
            "mixed-duplicate-heavy" => Ok(Self::mixed_duplicate_heavy()),
            _ => Err(WorkloadError::UnknownProfile(name.to_string())),
        }
    }

    /// A builtin name, or a TOML/JSON profile file.
    pub fn resolve(name_or_path: &str) -> Result<Self, WorkloadError> {
        if let Ok(p) = Self::builtin(name_or_path) {
            return Ok(p);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(WorkloadError::UnknownProfile(name_or_path.to_string()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|source| WorkloadError::Io { path: name_or_path.to_string(), source })?;
        let profile: DatasetProfile = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| WorkloadError::Profile(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| WorkloadError::Profile(e.to_string()))?
        };
        profile.validate()?;
        Ok(profile)
    }
}

/// A window in which the arrival rate of one modality (or all) is multiplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstSpec {
    pub start_time: f64,
    pub duration: f64,
    pub rate_multiplier: f64,
    /// `None` targets every modality.
    pub modality_target: Option<Modality>,
}

impl BurstSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.duration > 0.0) || !(self.rate_multiplier >= 1.0) || !(self.start_time >= 0.0) {
            return Err(WorkloadError::Profile(format!("invalid burst {self:?}")));
        }
        Ok(())
    }

    fn applies(&self, modality: Modality, t: f64) -> bool {
        self.modality_target.is_none_or(|m| m == modality) && t >= self.start_time && t < self.start_time + self.duration
    }
}

fn pick<T: Copy>(rng: &mut impl Rng, items: &[T], weight: impl Fn(&T) -> f64) -> T {
    let total: f64 = items.iter().map(&weight).sum();
    let mut x = rng.random::<f64>() * total;
    for it in items {
        x -= weight(it);
        if x < 0.0 {
            return *it;
        }
    }
    *items.iter().rfind(|i| weight(i) > 0.0).expect("validated weights")
}

/// Poisson arrivals of one modality with piecewise-constant rate.
fn arrivals(rng: &mut ChaCha8Rng, base_rate: f64, horizon: f64, modality: Modality, bursts: &[BurstSpec]) -> Vec<f64> {
    let mut out = Vec::new();
    if base_rate <= 0.0 {
        return out;
    }
    let mut edges: Vec<f64> = bursts.iter().flat_map(|b| [b.start_time, b.start_time + b.duration]).collect();
    edges.push(horizon);
    edges.retain(|e| *e > 0.0 && *e <= horizon);
    edges.sort_by(f64::total_cmp);
    let rate_at = |t: f64| {
        bursts.iter().filter(|b| b.applies(modality, t)).fold(base_rate, |r, b| r * b.rate_multiplier)
    };
    let mut t = 0.0;
    while t < horizon {
        let rate = rate_at(t);
        let next_edge = edges.iter().copied().find(|&e| e > t).unwrap_or(horizon);
        let gap = Exp::new(rate).expect("positive rate").sample(rng);
        if t + gap >= next_edge {
            // Memoryless: restart the clock at the rate change.
            t = next_edge;
            continue;
        }
        t += gap;
        out.push(t);
    }
    out
}

/// Generates a trace with Poisson arrivals at `qps` over `[0, horizon)`.
pub fn generate(profile: &DatasetProfile, qps: f64, horizon: f64, seed: u64, bursts: &[BurstSpec]) -> Result<Trace, WorkloadError> {
    profile.validate()?;
    if !(qps > 0.0) || !(horizon > 0.0) {
        return Err(WorkloadError::Profile(format!("qps and horizon must be positive (qps={qps}, horizon={horizon})")));
    }
    for b in bursts {
        b.validate()?;
    }
    let stream = |n: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(n);
        r
    };
    let mm = qps * profile.multimodal_fraction;
    let text = qps - mm;
    let mut times: Vec<(f64, Modality)> = arrivals(&mut stream(1), text, horizon, Modality::TextOnly, bursts)
        .into_iter()
        .map(|t| (t, Modality::TextOnly))
        .chain(arrivals(&mut stream(2), mm, horizon, Modality::Multimodal, bursts).into_iter().map(|t| (t, Modality::Multimodal)))
        .collect();
    times.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut rng = stream(3);
    let prompts: Vec<SharedPrefix> = (0..profile.shared_prompts)
        .map(|i| SharedPrefix {
            hash: ContentHash::of(&format!("prompt-{seed}-{i}")),
            len: profile.shared_prompt_len.sample(&mut rng),
        })
        .collect();
    let mut recent: Vec<ImageInput> = Vec::new();
    let mut image_counter = 0u64;
    let mut trace = Vec::with_capacity(times.len());
    for (id, (t, modality)) in times.into_iter().enumerate() {
        let mut text_len = profile.text_len.sample(&mut rng);
        let output_len = profile.output_len.sample(&mut rng).max(1);
        let mut req = match modality {
            Modality::TextOnly => {
                let mut r = Request::text_only(id as u64, t, text_len, output_len);
                r.priority_hint = rng.random::<f64>() < profile.priority_hint_rate;
                r
            }
            Modality::Multimodal => {
                let n = pick(&mut rng, &profile.images_per_request, |c| c.weight).count.max(1);
                let images = (0..n)
                    .map(|_| {
                        if !recent.is_empty() && rng.random::<f64>() < profile.duplicate_image_rate {
                            recent[rng.random_range(0..recent.len())].clone()
                        } else {
                            let c = pick(&mut rng, &profile.image_tokens, |c| c.weight);
                            image_counter += 1;
                            let img = ImageInput {
                                hash: ContentHash::of(&format!("image-{seed}-{image_counter}")),
                                token_count: c.token_count,
                                pixels: Pixels { width: c.width, height: c.height },
                            };
                            recent.push(img.clone());
                            if recent.len() > profile.duplicate_window.max(1) {
                                recent.remove(0);
                            }
                            img
                        }
                    })
                    .collect();
                Request::multimodal(id as u64, t, text_len, images, output_len)
            }
        };
        if !prompts.is_empty() && rng.random::<f64>() < profile.duplicate_prefix_rate {
            let p = prompts[rng.random_range(0..prompts.len())];
            text_len += p.len;
            req.text_input_len = text_len;
            req.shared_prefix = Some(p);
        }
        trace.push(req);
    }
    Ok(trace)
}

pub fn write_trace_to(trace: &[Request], out: impl Write) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_trace(trace: &[Request], path: &Path) -> Result<(), WorkloadError> {
    let io = |source| WorkloadError::Io { path: path.display().to_string(), source };
    let f = std::fs::File::create(path).map_err(io)?;
    write_trace_to(trace, f).map_err(io)
}

/// Parses JSON lines; blank lines are skipped. Does not validate.
pub fn parse_trace(input: impl BufRead) -> Result<Trace, WorkloadError> {
    let mut trace = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| WorkloadError::Parse { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Request =
            serde_json::from_str(&line).map_err(|e| WorkloadError::Parse { line: i + 1, message: e.to_string() })?;
        trace.push(r);
    }
    Ok(trace)
}

/// Reads and validates a JSON-lines trace file.
pub fn load_trace(path: &Path) -> Result<Trace, WorkloadError> {
    let f = std::fs::File::open(path).map_err(|source| WorkloadError::Io { path: path.display().to_string(), source })?;
    let trace = parse_trace(BufReader::new(f))?;
    validate_trace(&trace).map_err(WorkloadError::Invalid)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_count_within_three_sigma() {
        let trace = generate(&DatasetProfile::sharegpt4o_like(), 2.0, 1000.0, 7, &[]).unwrap();
        let n = trace.len() as f64;
        assert!((n - 2000.0).abs() <= 3.0 * 2000f64.sqrt(), "count {n}");
        validate_trace(&trace).unwrap();
    }

    #[test]
    fn no_multimodal_fraction_means_text_only() {
        let p = DatasetProfile { multimodal_fraction: 0.0, ..DatasetProfile::sharegpt4o_like() };
        let trace = generate(&p, 3.0, 200.0, 1, &[]).unwrap();
        assert!(!trace.is_empty());
        assert!(trace.iter().all(|r| r.modality == Modality::TextOnly && r.images.is_empty()));
    }

    #[test]
    fn full_duplicate_rate_reuses_one_image() {
        let p = DatasetProfile {
            duplicate_image_rate: 1.0,
            multimodal_fraction: 1.0,
            ..DatasetProfile::sharegpt4o_like()
        };
        let trace = generate(&p, 2.0, 100.0, 3, &[]).unwrap();
        let first = trace[0].images[0].hash;
        assert!(trace.iter().flat_map(|r| &r.images).all(|i| i.hash == first));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let p = DatasetProfile::visualwebinstruct_like();
        assert_eq!(generate(&p, 1.5, 300.0, 11, &[]).unwrap(), generate(&p, 1.5, 300.0, 11, &[]).unwrap());
        assert_ne!(generate(&p, 1.5, 300.0, 11, &[]).unwrap(), generate(&p, 1.5, 300.0, 12, &[]).unwrap());
    }

    #[test]
    fn burst_raises_targeted_rate() {
        let p = DatasetProfile::sharegpt4o_like();
        let burst = BurstSpec { start_time: 400.0, duration: 200.0, rate_multiplier: 3.0, modality_target: Some(Modality::Multimodal) };
        let trace = generate(&p, 2.0, 1000.0, 5, &[burst]).unwrap();
        let count = |lo: f64, hi: f64, m: Modality| {
            trace.iter().filter(|r| r.modality == m && r.arrival_time >= lo && r.arrival_time < hi).count() as f64
        };
        let base_rate: f64 = 2.0 * 0.6;
        let inside = count(400.0, 600.0, Modality::Multimodal) / 200.0;
        let expected_base = base_rate * 200.0;
        // burst window count must exceed the baseline expectation by more than 3 sigma
        assert!(inside * 200.0 > expected_base + 3.0 * expected_base.sqrt(), "inside rate {inside}");
        // text stream unaffected
        let text_inside = count(400.0, 600.0, Modality::TextOnly);
        let text_expected: f64 = 2.0 * 0.4 * 200.0;
        assert!((text_inside - text_expected).abs() <= 3.0 * text_expected.sqrt());
    }

    #[test]
    fn shipped_profiles_contrast() {
        let s = DatasetProfile::sharegpt4o_like();
        let v = DatasetProfile::visualwebinstruct_like();
        assert!(v.text_len.mean_estimate() > s.text_len.mean_estimate());
        let mean_img = |p: &DatasetProfile| {
            let w: f64 = p.image_tokens.iter().map(|c| c.weight).sum();
            p.image_tokens.iter().map(|c| c.token_count as f64 * c.weight).sum::<f64>() / w
        };
        assert!(mean_img(&s) > mean_img(&v));
        let trace = generate(&s, 2.0, 500.0, 2, &[]).unwrap();
        let mean = |m: Modality| {
            let xs: Vec<f64> = trace.iter().filter(|r| r.modality == m).map(|r| r.total_input_len() as f64).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean(Modality::Multimodal) > mean(Modality::TextOnly));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let trace = generate(&DatasetProfile::mixed_duplicate_heavy(), 1.0, 120.0, 9, &[]).unwrap();
        write_trace(&trace, &path).unwrap();
        assert_eq!(load_trace(&path).unwrap(), trace);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let trace = generate(&DatasetProfile::sharegpt4o_like(), 1.0, 60.0, 9, &[]).unwrap();
        let mut text = String::new();
        for (i, r) in trace.iter().take(10).enumerate() {
            if i == 6 {
                text.push_str("{\"id\": oops}\n");
            } else {
                text.push_str(&serde_json::to_string(r).unwrap());
                text.push('\n');
            }
        }
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_trace(&path), Err(WorkloadError::Parse { line: 7, .. })));
    }

    #[test]
    fn invalid_trace_is_surfaced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut r = Request::text_only(0, 0.0, 5, 5);
        r.modality = Modality::Multimodal;
        write_trace(&[r], &path).unwrap();
        match load_trace(&path) {
            Err(WorkloadError::Invalid(errs)) => assert_eq!(errs, vec![TraceError::ModalityMismatch { id: 0 }]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_profile_is_rejected() {
        let p = DatasetProfile { duplicate_image_rate: 1.5, ..DatasetProfile::sharegpt4o_like() };
        assert!(generate(&p, 1.0, 10.0, 0, &[]).is_err());
        assert!(matches!(DatasetProfile::resolve("nope"), Err(WorkloadError::UnknownProfile(_))));
    }
}
