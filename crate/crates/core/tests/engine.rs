use mmsim::config::{PolicyKind, RunConfig};
use mmsim::costmodel::CostProfile;
use mmsim::engine::{run, EngineError};
use mmsim::types::{ContentHash, ImageInput, Modality, Pixels, Request};
use mmsim::workload::{generate, DatasetProfile};

fn profile() -> CostProfile {
    CostProfile::default_calibration()
}

fn checked(name: &str) -> RunConfig {
    RunConfig { check_invariants: true, ..RunConfig::named(name).unwrap() }
}

fn image(tag: &str, tokens: u64) -> ImageInput {
    ImageInput { hash: ContentHash::of(tag), token_count: tokens, pixels: Pixels { width: 448, height: 448 } }
}

#[test]
fn single_text_request_matches_closed_form() {
    let p = profile();
    let trace = vec![Request::text_only(0, 1.0, 1600, 3)];
    for (name, idle) in [("coupled", 1), ("emp-static-equal", 4), ("emp", 7)] {
        let out = run(&trace, &checked(name), &p, 0).unwrap();
        let r = &out.records[0];
        let prefill = p.prefill_time(1600, idle).unwrap();
        assert!((r.ttft() - prefill).abs() < 1e-9, "{name}: ttft {} vs {prefill}", r.ttft());
        assert_eq!((r.prefilled_tokens, r.decoded_tokens), (1600, 3));
        assert!(r.queue_wait.abs() < 1e-9 && r.encode == 0.0 && r.migration == 0.0);
    }
    let out = run(&trace, &checked("coupled"), &p, 0).unwrap();
    let r = &out.records[0];
    let mut t = r.first_token_time;
    for k in 0..3 {
        t += p.decode_step_time(1, 1, 1600 + k).unwrap();
    }
    assert!((r.completion_time - t).abs() < 1e-9);
}

#[test]
fn single_output_token_completes_after_one_step() {
    let p = profile();
    let out = run(&[Request::text_only(0, 0.0, 10, 1)], &checked("emp"), &p, 0).unwrap();
    let r = &out.records[0];
    assert!(r.completion_time > r.first_token_time);
    assert_eq!(out.counters.decode_steps, 1);
}

#[test]
fn static_transfer_costs_one_migration() {
    let p = CostProfile { migration_bandwidth: 400_000.0, ..profile() };
    let trace = vec![Request::text_only(0, 0.0, 40_000, 1)];
    let out = run(&trace, &checked("static-decoupled"), &p, 0).unwrap();
    assert_eq!(out.counters.migrated_tokens, 40_000);
    let r = &out.records[0];
    let expect = r.first_token_time + 0.1 + p.decode_step_time(1, 2, 40_000).unwrap();
    assert!((r.completion_time - expect).abs() < 1e-9, "{} vs {expect}", r.completion_time);
}

#[test]
fn coupled_prefill_waits_for_inline_encode() {
    let p = profile();
    let trace = vec![Request::multimodal(0, 0.0, 100, vec![image("a", 2800)], 2)];
    let out = run(&trace, &checked("coupled"), &p, 0).unwrap();
    let r = &out.records[0];
    assert!((r.encode - 1.0).abs() < 1e-9, "encode {}", r.encode);
    assert!((r.prefill - p.prefill_time(2900, 1).unwrap()).abs() < 1e-9);
    assert_eq!((r.encoded_tokens, r.encode_computed), (2800, 2800));
}

#[test]
fn nonblocking_encode_precedes_prefill() {
    let p = profile();
    let trace = vec![Request::multimodal(0, 0.0, 100, vec![image("a", 2800)], 2)];
    let out = run(&trace, &checked("emp"), &p, 0).unwrap();
    let r = &out.records[0];
    assert!(r.encode > 0.0 && r.encode < 1.0, "encode should use several instances: {}", r.encode);
    assert!((r.ttft() - r.encode - r.prefill - r.queue_wait - r.migration).abs() < 1e-9);
}

#[test]
fn repeated_image_hits_the_cache() {
    let p = profile();
    let trace = vec![
        Request::multimodal(0, 0.0, 50, vec![image("a", 1000)], 2),
        Request::multimodal(1, 5.0, 60, vec![image("a", 1000)], 2),
    ];
    let out = run(&trace, &checked("emp"), &p, 0).unwrap();
    assert_eq!(out.records[1].encode_computed, 0);
    assert_eq!(out.records[1].encoded_tokens, 1000);
    assert!(out.records[1].prefill_computed < 1060);
    assert_eq!(out.cache.image_hits, 1);
}

#[test]
fn empty_and_oversized_traces_fail() {
    let p = profile();
    assert!(matches!(run(&[], &checked("emp"), &p, 0), Err(EngineError::EmptyTrace)));
    let big = vec![Request::text_only(0, 0.0, 400_000, 1)];
    assert!(matches!(run(&big, &checked("emp"), &p, 0), Err(EngineError::RequestTooLarge { .. })));
}

fn mixed_trace(qps: f64, horizon: f64, seed: u64) -> Vec<Request> {
    generate(&DatasetProfile::mixed_duplicate_heavy(), qps, horizon, seed, &[]).unwrap()
}

#[test]
fn every_policy_finishes_a_mixed_trace_with_invariants() {
    let p = profile();
    let trace = mixed_trace(6.0, 40.0, 3);
    for name in RunConfig::NAMES {
        let cfg = RunConfig { audit: true, event_log: true, ..checked(name) };
        let out = run(&trace, &cfg, &p, 0).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(out.records.len(), trace.len());
        for (r, q) in out.records.iter().zip(&trace) {
            assert_eq!(r.decoded_tokens, q.output_len, "{name}");
            assert_eq!(r.prefilled_tokens, q.total_input_len(), "{name}");
            if q.modality == Modality::Multimodal {
                assert_eq!(r.encoded_tokens, q.image_tokens(), "{name}");
            }
            assert!(r.first_token_time >= r.arrival_time && r.completion_time > r.first_token_time);
            assert!(r.queue_wait > -1e-9, "{name}: negative queue wait {}", r.queue_wait);
        }
        assert!(out.utilization() <= 1.0 + 1e-9);
        let times: Vec<f64> = out.events.iter().map(|e| e.time).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn runs_are_deterministic() {
    let p = profile();
    let trace = mixed_trace(8.0, 30.0, 11);
    let cfg = RunConfig { event_log: true, audit: true, ..RunConfig::named("emp").unwrap() };
    let a = serde_json::to_string(&run(&trace, &cfg, &p, 1).unwrap()).unwrap();
    let b = serde_json::to_string(&run(&trace, &cfg, &p, 1).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn static_baseline_idles_half_the_cluster_on_text() {
    let p = profile();
    let trace: Vec<Request> = (0..200).map(|i| Request::text_only(i, i as f64 * 0.05, 800, 40)).collect();
    let cfg = checked("static-decoupled");
    assert_eq!(cfg.policy, PolicyKind::StaticDecoupled);
    let out = run(&trace, &cfg, &p, 0).unwrap();
    assert!(out.utilization() <= 0.5, "utilization {}", out.utilization());
}
