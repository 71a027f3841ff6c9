//! Running monitors over streams and simulated scenarios.

use rayon::prelude::*;

use crate::density_ratio::EstimatorMode;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, RunSummary};
use crate::monitor::{LabeledPoint, Monitor, MonitorConfig, StepOutcome, StreamEvent};
use crate::simulator::Scenario;

/// Processes a whole stream, stopping early if the monitor halts.
pub fn run_stream(
    config: &MonitorConfig,
    calibration: &[LabeledPoint],
    events: &[StreamEvent],
) -> Result<Vec<StepOutcome>> {
    let mut monitor = Monitor::new(config.clone(), calibration)?;
    let mut outcomes = Vec::with_capacity(events.len());
    for e in events {
        match monitor.observe(e) {
            Ok(o) => outcomes.push(o),
            Err(Error::Halted(_)) => break,
            Err(err) => return Err(err),
        }
    }
    Ok(outcomes)
}

/// One simulated run: its summary and, when requested, every outcome.
#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub summary: RunSummary,
    pub outcomes: Option<Vec<StepOutcome>>,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub runs: Vec<SimulatedRun>,
    pub report: MetricsReport,
}

/// Seeds used for `n` runs of a scenario.
pub fn seed_list(scenario: &Scenario, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| scenario.seed.wrapping_add(i))
        .collect()
}

/// Runs the monitor on `seeds.len()` independent streams in parallel.
///
/// Each run uses its seed for both stream generation and the monitor's
/// randomizers. An oracle-mode config picks up the scenario's analytic ratio.
pub fn simulate(
    scenario: &Scenario,
    seeds: &[u64],
    config: &MonitorConfig,
    keep_outcomes: bool,
) -> Result<SimulationResult> {
    scenario.validate()?;
    config.validate().or_else(|e| match e {
        // the oracle ratio is filled in per run below
        Error::Config(_)
            if config.estimator == EstimatorMode::Oracle && config.oracle_ratio.is_none() =>
        {
            Ok(())
        }
        other => Err(other),
    })?;
    let mut runs = seeds
        .par_iter()
        .map(|seed| {
            let stream = scenario.generate(*seed)?;
            let mut cfg = MonitorConfig {
                seed: *seed,
                ..config.clone()
            };
            if cfg.estimator == EstimatorMode::Oracle && cfg.oracle_ratio.is_none() {
                cfg.oracle_ratio = Some(stream.oracle_ratio.clone().ok_or_else(|| {
                    Error::Config(format!("scenario {} has no oracle ratio", scenario.name))
                })?);
            }
            let outcomes = run_stream(&cfg, &stream.calibration, &stream.events)?;
            let summary =
                RunSummary::from_outcomes(*seed, &outcomes, Some(stream.changepoint), cfg.c_alarm);
            Ok(SimulatedRun {
                summary,
                outcomes: keep_outcomes.then_some(outcomes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    runs.sort_by_key(|r| r.summary.seed);
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let report = MetricsReport::aggregate(
        &summaries,
        Some(scenario.changepoint),
        scenario.kind.is_harmful(),
        config.baseline,
    );
    Ok(SimulationResult { runs, report })
}
