use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mmsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmsim")).args(args).output().expect("spawn mmsim")
}

fn ok(args: &[&str]) -> Vec<u8> {
    let out = mmsim(args);
    assert!(out.status.success(), "mmsim {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn profile() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../profiles/default.toml")
}

fn gen(dir: &Path, qps: &str, seed: &str) -> PathBuf {
    let p = dir.join(format!("trace-{qps}-{seed}.jsonl"));
    ok(&["gen-trace", "--qps", qps, "--horizon", "20", "--seed", seed, "--out", p.to_str().unwrap()]);
    p
}

#[test]
fn gen_trace_is_reproducible_jsonl() {
    let a = ok(&["gen-trace", "--qps", "2", "--horizon", "10", "--seed", "4"]);
    let b = ok(&["gen-trace", "--qps", "2", "--horizon", "10", "--seed", "4"]);
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.lines().count() > 0);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("arrival_time").is_some() && v.get("output_len").is_some());
    }
}

#[test]
fn repeated_simulate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path(), "1.5", "9");
    let prof = profile();
    let run = || {
        ok(&["simulate", "--trace", trace.to_str().unwrap(), "--policy", "emp", "--profile", prof.to_str().unwrap(), "--seed", "1"])
    };
    let first = run();
    assert_eq!(first, run());
    let rep: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(rep["schema_version"], 1);
    assert_eq!(rep["empty"], false);
}

#[test]
fn simulate_writes_report_and_request_csv() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path(), "1", "2");
    let (json, csv) = (dir.path().join("r.json"), dir.path().join("r.csv"));
    ok(&[
        "simulate",
        "--trace",
        trace.to_str().unwrap(),
        "--policy",
        "coupled",
        "--slo-ref",
        "0.001,0.02",
        "--out",
        json.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let n = rep["completed"].as_u64().unwrap() as usize;
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().next().unwrap(), "id,modality,ttft,norm_input,norm_output,queue_wait,encode,migration,prefill");
    assert_eq!(table.lines().count(), n + 1);
    assert!(rep["slo"].is_object());

    let text = String::from_utf8(ok(&["report", "--report", json.to_str().unwrap()])).unwrap();
    assert!(text.contains("completed") && text.contains("ttft"));
    assert_eq!(ok(&["report", "--report", json.to_str().unwrap(), "--format", "csv"]), std::fs::read(&csv).unwrap());
}

#[test]
fn qps_sweep_has_one_row_per_point() {
    let out = String::from_utf8(ok(&["sweep", "--qps", "1:10:1", "--horizon", "8"])).unwrap();
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 11);
    assert!(rows[0].starts_with("series,qps,completed,mean_ttft"));
    let qps: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(qps, ["1", "2", "3", "4", "5", "6", "7", "8", "9", "10"]);
}

#[test]
fn penalty_and_slo_sweeps() {
    let out = String::from_utf8(ok(&["sweep", "--w", "0,1,10", "--policies", "emp,coupled", "--horizon", "8"])).unwrap();
    assert_eq!(out.lines().count(), 7);
    assert!(out.starts_with("series,w,qps,completed"));
    let out = String::from_utf8(ok(&[
        "sweep", "--slo-scales", "1,2", "--policies", "coupled", "--horizon", "10", "--range", "0.5:2", "--seeds", "2",
    ]))
    .unwrap();
    assert_eq!(out.lines().next().unwrap(), "series,slo_scale,max_qps,probes,lower_bound_failed");
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn optimization_ablation_is_three_series() {
    let out =
        String::from_utf8(ok(&["compare", "--ablation", "emp-off,unicache,full", "--qps", "1:3:1", "--horizon", "10"])).unwrap();
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    let mut series: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    series.dedup();
    assert_eq!(series, ["emp-off", "unicache", "full"]);
}

#[test]
fn figures_and_report_merge() {
    let dir = tempfile::tempdir().unwrap();
    let lat = String::from_utf8(ok(&["compare", "--figure", "latency", "--qps", "1:2:1", "--horizon", "8"])).unwrap();
    assert_eq!(lat.lines().count(), 1 + 3 * 2);
    let alloc = String::from_utf8(ok(&[
        "compare", "--figure", "allocation", "--slo-scales", "2", "--horizon", "10", "--range", "0.5:1.5",
    ]))
    .unwrap();
    assert_eq!(alloc.lines().count(), 1 + 4);

    let trace = gen(dir.path(), "1", "5");
    let mut reports = Vec::new();
    for policy in ["emp", "coupled"] {
        let p = dir.path().join(format!("{policy}.json"));
        ok(&["simulate", "--trace", trace.to_str().unwrap(), "--policy", policy, "--out", p.to_str().unwrap()]);
        reports.push(p.to_str().unwrap().to_string());
    }
    let merged = String::from_utf8(ok(&["compare", "--reports", &reports.join(",")])).unwrap();
    assert!(merged.starts_with("report,completed,mean_ttft"));
    assert_eq!(merged.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mmsim(&["simulate", "--trace", "/nonexistent.jsonl"]).status.code(), Some(2));
    assert_eq!(mmsim(&["sweep", "--no-such-flag"]).status.code(), Some(2));
    let trace = gen(dir.path(), "1", "1");
    assert_eq!(mmsim(&["simulate", "--trace", trace.to_str().unwrap(), "--policy", "nope"]).status.code(), Some(2));
    assert_eq!(mmsim(&["sweep", "--qps", "3:1:1"]).status.code(), Some(2));

    // Every request is larger than one instance's KV capacity.
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, "policy = \"emp\"\nkv_capacity = 8\n").unwrap();
    let out = mmsim(&["simulate", "--trace", trace.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"schema_version\": 99}").unwrap();
    assert_eq!(mmsim(&["report", "--report", bad.to_str().unwrap()]).status.code(), Some(2));
}
