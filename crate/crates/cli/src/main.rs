#![allow(clippy::neg_cmp_op_on_partial_ord)]

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmsim::config::RunConfig;
use mmsim::costmodel::CostProfile;
use mmsim::engine::EngineError;
use mmsim::experiments::{
    self, calibrate_slo, penalty_sweep, qps_sweep, slo_scale_sweep, ExperimentError, Scenario, Series,
    ALLOCATION_ABLATION, BASELINES, OPTIMIZATION_ABLATION,
};
use mmsim::metrics::{MetricsReport, SCHEMA_VERSION};
use mmsim::types::{Modality, SloConfig};
use mmsim::workload::{self, BurstSpec, DatasetProfile};
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Failure classes, mapped to exit codes 2 and 3.
#[derive(Debug)]
enum Fail {
    Config(String),
    Sim(String),
}

impl From<EngineError> for Fail {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::EmptyTrace | EngineError::InvalidTrace(_) | EngineError::Config(_) | EngineError::Cost(_) => {
                Fail::Config(e.to_string())
            }
            _ => Fail::Sim(e.to_string()),
        }
    }
}

impl From<ExperimentError> for Fail {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Engine(e) => e.into(),
            ExperimentError::Csv(e) => Fail::Sim(e.to_string()),
            e => Fail::Config(e.to_string()),
        }
    }
}

fn config<E: std::fmt::Display>(e: E) -> Fail {
    Fail::Config(e.to_string())
}

fn output<E: std::fmt::Display>(e: E) -> Fail {
    Fail::Sim(format!("writing output: {e}"))
}

#[derive(Parser)]
#[command(name = "mmsim", version, about = "Simulate elastic multimodal LLM serving on a model cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSONL request trace.
    GenTrace(GenTraceArgs),
    /// Run one trace under one policy and emit a report.
    Simulate(SimulateArgs),
    /// Run a grid of loads, penalty weights or SLO scales.
    Sweep(SweepArgs),
    /// Run a comparison study, or merge saved reports into one table.
    Compare(CompareArgs),
    /// Summarize a saved report.
    Report(ReportArgs),
}

#[derive(Args)]
struct WorkloadArgs {
    /// Builtin dataset profile name, or a TOML/JSON profile file.
    #[arg(long, default_value = "sharegpt4o-like")]
    dataset: String,
    /// Trace length in seconds.
    #[arg(long, default_value_t = 120.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Rate burst as start:duration:multiplier[:text|multimodal]; repeatable.
    #[arg(long = "burst")]
    bursts: Vec<String>,
}

impl WorkloadArgs {
    fn scenario(&self) -> Result<Scenario, Fail> {
        let dataset = DatasetProfile::resolve(&self.dataset).map_err(config)?;
        if !(self.horizon > 0.0) {
            return Err(Fail::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        let bursts = self.bursts.iter().map(|b| parse_burst(b)).collect::<Result<_, _>>()?;
        Ok(Scenario { dataset, horizon: self.horizon, seed: self.seed, bursts })
    }
}

#[derive(Args)]
struct GenTraceArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long)]
    qps: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Named configuration; ignored when --config is given.
    #[arg(long, default_value = "emp")]
    policy: String,
    /// Run configuration file (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cost profile file; the shipped default calibration when omitted.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the penalty weight.
    #[arg(long)]
    w: Option<f64>,
    /// Light-load normalized latencies IN,OUT used as the SLO reference.
    #[arg(long)]
    slo_ref: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    slo_scale: f64,
    #[arg(long)]
    check_invariants: bool,
    /// Report JSON file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-request CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Comma-separated configuration names.
    #[arg(long, default_value = "emp")]
    policies: String,
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Load grid as start:end:step (inclusive).
    #[arg(long, group = "grid")]
    qps: Option<String>,
    /// Comma-separated penalty weights, run at --at-qps.
    #[arg(long, group = "grid")]
    w: Option<String>,
    /// Comma-separated SLO scales; each cell is a max-throughput search.
    #[arg(long, group = "grid")]
    slo_scales: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    at_qps: f64,
    /// Search range lo:hi for max-throughput searches.
    #[arg(long, default_value = "0.1:8")]
    range: String,
    /// Average each search probe over this many seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    /// Mean TTFT versus load for the three baselines.
    Latency,
    /// Max QPS under SLO versus SLO scale for the three baselines.
    Throughput,
    /// Dynamic versus static group splits on a bursty trace.
    Allocation,
    /// Cache and non-blocking encode switched on in turn.
    Optimization,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, conflicts_with_all = ["ablation", "reports"])]
    figure: Option<Figure>,
    /// Comma-separated configurations for a latency-versus-load ablation.
    #[arg(long, conflicts_with = "reports")]
    ablation: Option<String>,
    /// Comma-separated report files to merge.
    #[arg(long)]
    reports: Option<String>,
    /// Dataset; each study has its own default.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value_t = 120.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Load grid start:end:step; each study has its own default.
    #[arg(long)]
    qps: Option<String>,
    #[arg(long, default_value = "1,2,3,4,5")]
    slo_scales: String,
    #[arg(long, default_value = "0.1:8")]
    range: String,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Sim(m)) => {
            eprintln!("simulation error: {m}");
            ExitCode::from(3)
        }
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Fail> {
    match path {
        Some(p) => Ok(Box::new(io::BufWriter::new(File::create(p).map_err(|e| output(format!("{}: {e}", p.display())))?))),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64, Fail> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Fail::Config(format!("bad {what} {s:?}")))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, Fail> {
    s.split(',').map(|x| parse_f64(x, what)).collect()
}

/// `start:end:step`, inclusive of `end` up to rounding.
fn parse_grid(s: &str) -> Result<Vec<f64>, Fail> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, step] = parts[..] else { return Err(Fail::Config(format!("grid {s:?} is not start:end:step"))) };
    let (a, b, step) = (parse_f64(a, "grid start")?, parse_f64(b, "grid end")?, parse_f64(step, "grid step")?);
    if !(step > 0.0) || b < a {
        return Err(Fail::Config(format!("grid {s:?} is empty")));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect())
}

fn parse_range(s: &str) -> Result<(f64, f64), Fail> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| Fail::Config(format!("range {s:?} is not lo:hi")))?;
    let (lo, hi) = (parse_f64(lo, "range")?, parse_f64(hi, "range")?);
    if !(lo > 0.0 && hi >= lo) {
        return Err(Fail::Config(format!("range {s:?} must satisfy 0 < lo <= hi")));
    }
    Ok((lo, hi))
}

fn parse_burst(s: &str) -> Result<BurstSpec, Fail> {
    let parts: Vec<&str> = s.split(':').collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(Fail::Config(format!("burst {s:?} is not start:duration:multiplier[:modality]")));
    }
    let modality_target = match parts.get(3).copied() {
        None | Some("all") => None,
        Some("text") | Some("text_only") => Some(Modality::TextOnly),
        Some("mm") | Some("multimodal") => Some(Modality::Multimodal),
        Some(m) => return Err(Fail::Config(format!("unknown burst modality {m:?}"))),
    };
    let b = BurstSpec {
        start_time: parse_f64(parts[0], "burst start")?,
        duration: parse_f64(parts[1], "burst duration")?,
        rate_multiplier: parse_f64(parts[2], "burst multiplier")?,
        modality_target,
    };
    b.validate().map_err(config)?;
    Ok(b)
}

fn load_profile(path: Option<&Path>) -> Result<CostProfile, Fail> {
    match path {
        Some(p) => CostProfile::load(p).map_err(config),
        None => Ok(CostProfile::default_calibration()),
    }
}

fn series_list(names: &str) -> Result<Vec<Series>, Fail> {
    names.split(',').map(|n| Series::named(n.trim()).map_err(config)).collect()
}

fn seed_list(base: u64, k: u64) -> Result<Vec<u64>, Fail> {
    if k == 0 {
        return Err(Fail::Config("--seeds must be at least 1".into()));
    }
    Ok((0..k).map(|i| base + i).collect())
}

fn gen_trace(a: GenTraceArgs) -> Result<(), Fail> {
    let trace = a.workload.scenario()?.trace(a.qps).map_err(config)?;
    match &a.out {
        Some(p) => workload::write_trace(&trace, p).map_err(output),
        None => workload::write_trace_to(&trace, io::stdout().lock()).map_err(output),
    }
}

pub const REQUEST_COLUMNS: [&str; 9] =
    ["id", "modality", "ttft", "norm_input", "norm_output", "queue_wait", "encode", "migration", "prefill"];

fn write_requests_csv(rep: &MetricsReport, out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REQUEST_COLUMNS)?;
    for r in &rep.requests {
        w.write_record([
            r.id.to_string(),
            r.modality.to_string(),
            r.ttft.to_string(),
            r.norm_input.to_string(),
            r.norm_output.to_string(),
            r.queue_wait.to_string(),
            r.encode.to_string(),
            r.migration.to_string(),
            r.prefill.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), Fail> {
    let trace = workload::load_trace(&a.trace).map_err(config)?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(config)?,
        None => RunConfig::named(&a.policy).map_err(config)?,
    };
    if a.w.is_some() {
        cfg.w = a.w;
    }
    cfg.check_invariants |= a.check_invariants;
    let prof = load_profile(a.profile.as_deref())?;
    let slo = match &a.slo_ref {
        Some(s) => {
            let v = parse_list(s, "SLO reference")?;
            let [i, o] = v[..] else { return Err(Fail::Config("--slo-ref takes IN,OUT".into())) };
            Some(SloConfig::new(i, o, a.slo_scale).map_err(config)?)
        }
        None => None,
    };
    let rep = experiments::simulate(&trace, &cfg, &prof, slo, a.seed)?;
    let mut out = sink(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &rep).map_err(output)?;
    writeln!(out).map_err(output)?;
    out.flush().map_err(output)?;
    if let Some(p) = &a.csv {
        write_requests_csv(&rep, sink(Some(p))?).map_err(output)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Fail> {
    let scenario = a.workload.scenario()?;
    let series = series_list(&a.policies)?;
    let prof = load_profile(a.profile.as_deref())?;
    let out = sink(a.out.as_deref())?;
    if let Some(g) = &a.qps {
        let rows = qps_sweep(&scenario, &series, &parse_grid(g)?, &prof, None)?;
        experiments::write_latency_csv(&rows, out).map_err(output)
    } else if let Some(ws) = &a.w {
        let rows = penalty_sweep(&scenario, &series, &parse_list(ws, "w")?, a.at_qps, &prof)?;
        experiments::write_penalty_csv(&rows, out).map_err(output)
    } else if let Some(scales) = &a.slo_scales {
        let base = calibrate_slo(&scenario, &prof, 1.0)?;
        let seeds = seed_list(scenario.seed, a.seeds)?;
        let rows = slo_scale_sweep(&scenario, &series, &parse_list(scales, "SLO scale")?, &prof, &base, parse_range(&a.range)?, &seeds)?;
        experiments::write_throughput_csv(&rows, out).map_err(output)
    } else {
        Err(Fail::Config("sweep needs one of --qps, --w or --slo-scales".into()))
    }
}

pub const MERGE_COLUMNS: [&str; 9] = [
    "report",
    "completed",
    "mean_ttft",
    "p90_ttft",
    "p90_norm_input",
    "p90_norm_output",
    "throughput_rps",
    "slo_attainment",
    "utilization",
];

fn read_report(path: &Path) -> Result<MetricsReport, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| Fail::Config(format!("{}: {e}", path.display())))?;
    let rep: MetricsReport = serde_json::from_str(&text).map_err(|e| Fail::Config(format!("{}: {e}", path.display())))?;
    if rep.schema_version != SCHEMA_VERSION {
        return Err(Fail::Config(format!("{}: schema version {} (expected {SCHEMA_VERSION})", path.display(), rep.schema_version)));
    }
    Ok(rep)
}

fn merge_reports(paths: &str, out: impl Write) -> Result<(), Fail> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MERGE_COLUMNS).map_err(output)?;
    for p in paths.split(',') {
        let rep = read_report(Path::new(p.trim()))?;
        w.write_record([
            p.trim().to_string(),
            rep.completed.to_string(),
            rep.ttft.mean.to_string(),
            rep.ttft.p90.to_string(),
            rep.norm_input.p90.to_string(),
            rep.norm_output.p90.to_string(),
            rep.throughput_rps.to_string(),
            rep.slo_attainment.to_string(),
            rep.utilization.to_string(),
        ])
        .map_err(output)?;
    }
    w.flush().map_err(output)
}

fn compare(a: CompareArgs) -> Result<(), Fail> {
    let out = sink(a.out.as_deref())?;
    if let Some(paths) = &a.reports {
        return merge_reports(paths, out);
    }
    let (figure, names) = match (a.figure, &a.ablation) {
        (Some(f), _) => {
            let names: &[&str] = match f {
                Figure::Latency | Figure::Throughput => &BASELINES,
                Figure::Allocation => &ALLOCATION_ABLATION,
                Figure::Optimization => &OPTIMIZATION_ABLATION,
            };
            (f, names.join(","))
        }
        (None, Some(list)) => (Figure::Optimization, list.clone()),
        (None, None) => return Err(Fail::Config("compare needs --figure, --ablation or --reports".into())),
    };
    let default_dataset = match figure {
        Figure::Optimization => "mixed-duplicate-heavy",
        _ => "sharegpt4o-like",
    };
    let dataset = DatasetProfile::resolve(a.dataset.as_deref().unwrap_or(default_dataset)).map_err(config)?;
    if !(a.horizon > 0.0) {
        return Err(Fail::Config(format!("horizon must be positive, got {}", a.horizon)));
    }
    let scenario = match figure {
        Figure::Allocation => Scenario::bursty(dataset, a.horizon, a.seed),
        _ => Scenario::new(dataset, a.horizon, a.seed),
    };
    let series = series_list(&names)?;
    let prof = load_profile(a.profile.as_deref())?;
    match figure {
        Figure::Latency | Figure::Optimization => {
            let default_grid = if matches!(figure, Figure::Latency) { "0.5:5:0.5" } else { "1:6:1" };
            let grid = parse_grid(a.qps.as_deref().unwrap_or(default_grid))?;
            let rows = qps_sweep(&scenario, &series, &grid, &prof, None)?;
            experiments::write_latency_csv(&rows, out).map_err(output)
        }
        Figure::Throughput | Figure::Allocation => {
            let base = calibrate_slo(&scenario, &prof, 1.0)?;
            let seeds = seed_list(a.seed, a.seeds)?;
            let scales = parse_list(&a.slo_scales, "SLO scale")?;
            let rows = slo_scale_sweep(&scenario, &series, &scales, &prof, &base, parse_range(&a.range)?, &seeds)?;
            experiments::write_throughput_csv(&rows, out).map_err(output)
        }
    }
}

fn report(a: ReportArgs) -> Result<(), Fail> {
    let rep = read_report(&a.report)?;
    let mut out = io::stdout().lock();
    match a.format {
        ReportFormat::Csv => write_requests_csv(&rep, out).map_err(output),
        ReportFormat::Text => {
            let lines = if rep.empty {
                vec!["empty run: no requests completed".to_string()]
            } else {
                vec![
                    format!("completed      {}", rep.completed),
                    format!("makespan       {:.3} s", rep.makespan),
                    format!(
                        "ttft           mean {:.4}  p50 {:.4}  p90 {:.4}  p99 {:.4}",
                        rep.ttft.mean, rep.ttft.p50, rep.ttft.p90, rep.ttft.p99
                    ),
                    format!("ttft text      mean {:.4}  p90 {:.4}", rep.ttft_text.mean, rep.ttft_text.p90),
                    format!("ttft mm        mean {:.4}  p90 {:.4}", rep.ttft_multimodal.mean, rep.ttft_multimodal.p90),
                    format!("norm input     mean {:.6}  p90 {:.6}", rep.norm_input.mean, rep.norm_input.p90),
                    format!("norm output    mean {:.6}  p90 {:.6}", rep.norm_output.mean, rep.norm_output.p90),
                    format!("throughput     {:.3} req/s  {:.1} tok/s", rep.throughput_rps, rep.throughput_tps),
                    format!("utilization    {:.3}", rep.utilization),
                    format!("slo            attainment {:.3}  meets {}", rep.slo_attainment, rep.meets_slo),
                    format!(
                        "cache          image hits {}  misses {}  prefix hits {}/{}",
                        rep.cache.image_hits, rep.cache.image_misses, rep.cache.prefix_hits, rep.cache.prefix_lookups
                    ),
                    format!(
                        "preemptions    forced {}  opportunistic {}  migrations {}",
                        rep.counters.forced_preemptions, rep.counters.opportunistic_preemptions, rep.counters.migrations
                    ),
                ]
            };
            for l in lines {
                writeln!(out, "{l}").map_err(output)?;
            }
            Ok(())
        }
    }
}
