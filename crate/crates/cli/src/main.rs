//! `wctm`: run, simulate, evaluate and calibrate shift monitors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::{json, Value};

use wctm::conformal::score_abs_residual;
use wctm::evaluation::{seed_list, simulate};
use wctm::metrics::{median, rolling_coverage, rolling_median, MetricsReport, RunSummary};
use wctm::records::{self, LogWriter};
use wctm::simulator::{Scenario, PRESETS};
use wctm::{Error, LabeledPoint, Monitor, MonitorConfig, StepOutcome};

const TRACE_WINDOW: usize = 100;

#[derive(Parser, Debug)]
#[command(
    name = "wctm",
    version,
    about = "Shift monitoring with weighted conformal test martingales"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monitor a labelled event stream.
    Run(RunArgs),
    /// Run the monitor on synthetic shift scenarios.
    Simulate(SimulateArgs),
    /// Recompute metrics from one or more run logs.
    Eval(EvalArgs),
    /// Build an initial monitor state from calibration data.
    Calibrate(CalibrateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineKind {
    /// Unweighted conformal test martingale.
    Ctm,
}

#[derive(Args, Debug)]
struct MonitorFlags {
    /// Flat TOML monitor config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a comparison baseline alongside the monitor.
    #[arg(long, value_enum)]
    baseline: Option<BaselineKind>,
    /// Use conservative (u = 1) p-values instead of randomized ones.
    #[arg(long)]
    conservative_p: bool,
    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl MonitorFlags {
    fn resolve(&self) -> Result<MonitorConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))
                    .map_err(Failure::Config)?;
                MonitorConfig::from_toml(&text).map_err(Failure::from)?
            }
            None => MonitorConfig::default(),
        };
        self.apply(&mut cfg);
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut MonitorConfig) {
        if self.baseline.is_some() {
            cfg.baseline = true;
        }
        if self.conservative_p {
            cfg.conservative = true;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
    }

    fn any_set(&self) -> bool {
        self.config.is_some()
            || self.baseline.is_some()
            || self.conservative_p
            || self.seed.is_some()
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Event stream (.csv or .jsonl) with x_0.., prediction, label.
    #[arg(long)]
    input: PathBuf,
    /// Labelled calibration data (.csv or .jsonl).
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    calibration: Option<PathBuf>,
    /// Continue from a saved monitor state instead of calibrating.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the monitor state here after the stream.
    #[arg(long)]
    save_state: Option<PathBuf>,
    /// Known changepoint, used for delay and coverage splits in the report.
    #[arg(long)]
    changepoint: Option<u64>,
    /// Output directory for log.jsonl, traces.csv and report.json.
    #[arg(long, default_value = "wctm-out")]
    out: PathBuf,
    #[command(flatten)]
    monitor: MonitorFlags,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Preset name or path to a scenario TOML file.
    #[arg(long, default_value = "none")]
    scenario: String,
    /// Number of independent runs.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Override the scenario's changepoint.
    #[arg(long)]
    changepoint: Option<u64>,
    /// Override the scenario's stream length.
    #[arg(long)]
    horizon: Option<u64>,
    /// Also write each run's log as log-<seed>.jsonl.
    #[arg(long)]
    logs: bool,
    /// Also write each generated stream as events-<seed>.csv / calibration-<seed>.csv.
    #[arg(long)]
    export: bool,
    #[arg(long, default_value = "wctm-out")]
    out: PathBuf,
    #[command(flatten)]
    monitor: MonitorFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run logs written by `wctm run` or `wctm simulate --logs`.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    changepoint: Option<u64>,
    /// Treat the shift as harmful when classifying alarms.
    #[arg(long)]
    harmful: bool,
    /// Threshold used to read baseline alarms from the logs.
    #[arg(long, default_value_t = 100.0)]
    c_alarm: f64,
    /// Write report.json here; prints to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Labelled calibration data (.csv or .jsonl).
    #[arg(long)]
    input: PathBuf,
    /// Output directory for monitor.state and calibration.json.
    #[arg(long, default_value = "wctm-out")]
    out: PathBuf,
    #[command(flatten)]
    monitor: MonitorFlags,
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.into()),
            other => Failure::Data(other.into()),
        }
    }
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Calibrate(a) => calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, err) = match &f {
                Failure::Config(e) => ("configuration error", e),
                Failure::Data(e) => ("data error", e),
            };
            eprintln!("wctm: {kind}: {err:#}");
            ExitCode::from(f.code())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(data)
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(data)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let (mut monitor, calibration_source) = match (&args.resume, &args.calibration) {
        (Some(state), _) => {
            if args.monitor.any_set() {
                return Err(Failure::Config(anyhow!(
                    "--resume takes its config from the saved state; drop --config/--baseline/--conservative-p/--seed"
                )));
            }
            let bytes = fs::read(state)
                .with_context(|| format!("reading {}", state.display()))
                .map_err(data)?;
            (Monitor::restore(&bytes)?, json!({ "resumed_from": state }))
        }
        (None, Some(cal)) => {
            let cfg = args.monitor.resolve()?;
            cfg.validate()?;
            let points = records::read_labeled(cal)
                .with_context(|| format!("reading calibration {}", cal.display()))
                .map_err(data)?;
            let n = points.len();
            (
                Monitor::new(cfg, &points)?,
                json!({ "file": cal, "points": n }),
            )
        }
        (None, None) => unreachable!("clap requires --calibration or --resume"),
    };
    let events = records::read_events(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))
        .map_err(data)?;
    // A resumed monitor expects the stream to continue where it stopped.
    let offset = monitor.time();
    create_dir(&args.out)?;

    let mut log = LogWriter::create(&args.out.join("log.jsonl"))?;
    let mut pairs = Vec::with_capacity(events.len());
    let mut halted_at = None;
    for mut event in events {
        event.index += offset;
        match monitor.observe(&event) {
            Ok(outcome) => {
                log.append(&event, &outcome)?;
                pairs.push((event, outcome));
            }
            Err(Error::Halted(t)) => {
                halted_at = Some(t);
                warn!("monitor halted after alarm at t={t}; remaining events skipped");
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    log.finish()?;
    if let Some(path) = &args.save_state {
        fs::write(path, monitor.snapshot()?)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(data)?;
    }

    let outcomes: Vec<StepOutcome> = pairs.iter().map(|(_, o)| o.clone()).collect();
    let cfg = monitor.config().clone();
    let summary = RunSummary::from_outcomes(cfg.seed, &outcomes, args.changepoint, cfg.c_alarm);
    let metrics = MetricsReport::aggregate(
        std::slice::from_ref(&summary),
        args.changepoint,
        args.changepoint.is_some(),
        cfg.baseline,
    );
    let traces = BTreeMap::from([(cfg.seed, outcomes.clone())]);
    records::write_traces(&args.out.join("traces.csv"), &traces)?;

    let alarms: Vec<_> = outcomes
        .iter()
        .flat_map(|o| o.alarms.iter().copied())
        .collect();
    let verdicts: Vec<_> = outcomes.iter().filter_map(|o| o.verdict).collect();
    let (coverage_trace, width_trace) = traces_of(&outcomes);
    let report = json!({
        "command": "run",
        "config": cfg,
        "input": args.input,
        "calibration": calibration_source,
        "events_processed": outcomes.len(),
        "halted_at": halted_at,
        "adaptation_time": monitor.adaptation_time(),
        "summary": summary,
        "metrics": metrics,
        "alarms": alarms,
        "verdicts": verdicts,
        "coverage_trace": coverage_trace,
        "width_trace": width_trace,
        "wealth_traces": {
            "wctm": outcomes.iter().map(|o| o.wealth_w).collect::<Vec<_>>(),
            "x_ctm": outcomes.iter().map(|o| o.wealth_x).collect::<Vec<_>>(),
            "baseline": cfg.baseline.then(|| outcomes.iter().map(|o| o.baseline_wealth).collect::<Vec<_>>()),
        },
    });
    write_json(&args.out.join("report.json"), &report)?;

    println!(
        "processed {} events; first alarm: {}; adaptation: {}; final WCTM wealth {:.4e}",
        outcomes.len(),
        fmt_time(summary.first_alarm),
        fmt_time(monitor.adaptation_time()),
        summary.final_wealth_w
    );
    Ok(())
}

fn fmt_time(t: Option<u64>) -> String {
    t.map_or_else(|| "none".into(), |t| format!("t={t}"))
}

/// Rolling coverage and rolling median interval width.
fn traces_of(outcomes: &[StepOutcome]) -> (Vec<f64>, Vec<Option<f64>>) {
    let covered: Vec<bool> = outcomes.iter().map(|o| o.covered).collect();
    let widths: Vec<f64> = outcomes.iter().map(|o| o.interval.width()).collect();
    let width = rolling_median(&widths, TRACE_WINDOW)
        .into_iter()
        .map(|w| w.is_finite().then_some(w))
        .collect();
    (rolling_coverage(&covered, TRACE_WINDOW), width)
}

fn load_scenario(spec: &str) -> Result<Scenario, Failure> {
    if PRESETS.contains(&spec) {
        return Ok(Scenario::preset(spec)?);
    }
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "toml") {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading scenario {}", path.display()))
            .map_err(Failure::Config)?;
        return Ok(Scenario::from_toml(&text)?);
    }
    Err(Failure::Config(anyhow!(
        "unknown scenario {spec:?}; presets: {}",
        PRESETS.join(", ")
    )))
}

fn simulate_cmd(args: &SimulateArgs) -> Result<(), Failure> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(cp) = args.changepoint {
        scenario.changepoint = cp;
    }
    if let Some(h) = args.horizon {
        scenario.horizon = h;
    }
    scenario.validate()?;
    let cfg = args.monitor.resolve()?;
    if args.seeds == 0 {
        return Err(Failure::Config(anyhow!("--seeds must be at least 1")));
    }
    create_dir(&args.out)?;

    let seeds = seed_list(&scenario, args.seeds);
    info!("simulating {} runs of {}", seeds.len(), scenario.name);
    let result = simulate(&scenario, &seeds, &cfg, true)?;

    let mut traces = BTreeMap::new();
    for run in &result.runs {
        let outcomes = run.outcomes.as_ref().expect("outcomes kept");
        traces.insert(run.summary.seed, outcomes.clone());
    }
    if args.logs || args.export {
        for seed in &seeds {
            let stream = scenario.generate(*seed)?;
            if args.export {
                records::write_events_csv(
                    &args.out.join(format!("events-{seed}.csv")),
                    &stream.events,
                )?;
                records::write_labeled_csv(
                    &args.out.join(format!("calibration-{seed}.csv")),
                    &stream.calibration,
                )?;
            }
            if args.logs {
                let mut log = LogWriter::create(&args.out.join(format!("log-{seed}.jsonl")))?;
                for (event, outcome) in stream.events.iter().zip(&traces[seed]) {
                    log.append(event, outcome)?;
                }
                log.finish()?;
            }
        }
    }
    records::write_traces(&args.out.join("traces.csv"), &traces)?;

    let summaries: Vec<&RunSummary> = result.runs.iter().map(|r| &r.summary).collect();
    let per_run: Vec<_> = traces.values().map(|o| traces_of(o)).collect();
    let report = json!({
        "command": "simulate",
        "scenario": scenario,
        "config": cfg,
        "seeds": seeds,
        "metrics": result.report,
        "runs": summaries,
        "coverage_trace": mean_trace(per_run.iter().map(|(c, _)| c.iter().map(|v| Some(*v)).collect())),
        "width_trace": mean_trace(per_run.iter().map(|(_, w)| w.clone())),
    });
    write_json(&args.out.join("report.json"), &report)?;

    let m = &result.report;
    println!(
        "{}: {} runs; WCTM alarm rate {:.2} (unnecessary {}, missed {}), mean delay {}",
        scenario.name,
        m.runs,
        m.wctm.alarm_rate,
        m.wctm.unnecessary_alarms,
        m.wctm.missed_alarms,
        m.wctm
            .add
            .map_or_else(|| "n/a".into(), |d| format!("{:.1}", d.mean)),
    );
    if let Some(b) = &m.baseline {
        println!("baseline CTM alarm rate {:.2}", b.alarm_rate);
    }
    Ok(())
}

/// Pointwise mean over runs, skipping missing values.
fn mean_trace(traces: impl Iterator<Item = Vec<Option<f64>>>) -> Vec<Option<f64>> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for trace in traces {
        if sums.len() < trace.len() {
            sums.resize(trace.len(), (0.0, 0));
        }
        for (acc, v) in sums.iter_mut().zip(trace) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }
    sums.into_iter()
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect()
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    if args.c_alarm.is_nan() || args.c_alarm <= 1.0 {
        return Err(Failure::Config(anyhow!("--c-alarm must exceed 1")));
    }
    let mut summaries = Vec::with_capacity(args.input.len());
    let mut with_baseline = false;
    for (i, path) in args.input.iter().enumerate() {
        let outcomes: Vec<StepOutcome> = records::read_log(path)
            .with_context(|| format!("reading log {}", path.display()))
            .map_err(data)?
            .into_iter()
            .map(|(_, o)| o)
            .collect();
        with_baseline |= outcomes.iter().any(|o| o.baseline_wealth.is_some());
        summaries.push(RunSummary::from_outcomes(
            i as u64,
            &outcomes,
            args.changepoint,
            args.c_alarm,
        ));
    }
    let metrics =
        MetricsReport::aggregate(&summaries, args.changepoint, args.harmful, with_baseline);
    let report = json!({
        "command": "eval",
        "logs": args.input,
        "changepoint": args.changepoint,
        "metrics": metrics,
        "runs": summaries,
    });
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            write_json(&dir.join("report.json"), &report)?;
        }
        None => {
            let text = serde_json::to_string_pretty(&report).map_err(data)?;
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(data(e)),
                _ => {}
            }
        }
    }
    Ok(())
}

fn calibrate(args: &CalibrateArgs) -> Result<(), Failure> {
    let cfg = args.monitor.resolve()?;
    cfg.validate()?;
    let points: Vec<LabeledPoint> = records::read_labeled(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))
        .map_err(data)?;
    let monitor = Monitor::new(cfg.clone(), &points)?;
    create_dir(&args.out)?;
    let state = args.out.join("monitor.state");
    fs::write(&state, monitor.snapshot()?)
        .with_context(|| format!("writing {}", state.display()))
        .map_err(data)?;

    let scores = points
        .iter()
        .map(|p| score_abs_residual(p.prediction, p.label))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    let summary = json!({
        "command": "calibrate",
        "config": cfg,
        "input": args.input,
        "points": points.len(),
        "dim": points[0].features.len(),
        "residual_scores": {
            "median": median(&scores),
            "q90": quantile(0.9),
            "max": sorted.last(),
        },
        "state": state,
    });
    write_json(&args.out.join("calibration.json"), &summary)?;
    println!(
        "calibrated on {} points; state written to {}",
        points.len(),
        state.display()
    );
    Ok(())
}
