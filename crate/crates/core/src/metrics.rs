//! Detection-delay bookkeeping, per-run summaries and cross-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::monitor::{StepOutcome, VerdictKind};

/// Bucketed alarm times relative to a known changepoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AddSummary {
    /// Mean of `alarm - changepoint` over runs alarming at or after the
    /// changepoint; `None` when there are no such runs.
    pub add: Option<f64>,
    pub detected: usize,
    /// Runs that alarmed before the changepoint.
    pub unnecessary: usize,
    /// Runs that never alarmed.
    pub missed: usize,
}

pub fn compute_add(alarm_times: &[Option<u64>], changepoint: u64) -> AddSummary {
    let mut delays = Vec::new();
    let (mut unnecessary, mut missed) = (0, 0);
    for a in alarm_times {
        match a {
            Some(t) if *t >= changepoint => delays.push((t - changepoint) as f64),
            Some(_) => unnecessary += 1,
            None => missed += 1,
        }
    }
    let add = (!delays.is_empty()).then(|| delays.iter().sum::<f64>() / delays.len() as f64);
    AddSummary {
        add,
        detected: delays.len(),
        unnecessary,
        missed,
    }
}

/// Median of the finite-or-infinite values; `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, stderr, n })
    }
}

/// Outcome of one monitored stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub events: u64,
    pub first_alarm: Option<u64>,
    pub baseline_alarm: Option<u64>,
    pub adaptation_time: Option<u64>,
    /// Verdict attached to the first WCTM alarm.
    pub alarm_verdict: Option<VerdictKind>,
    pub coverage_pre: Option<f64>,
    pub coverage_post: Option<f64>,
    pub median_width_pre: Option<f64>,
    pub median_width_post: Option<f64>,
    pub final_wealth_w: f64,
    pub final_wealth_x: f64,
}

impl RunSummary {
    /// Summarizes outcomes; `changepoint` splits pre/post statistics (the
    /// whole run counts as pre-change when absent).
    pub fn from_outcomes(
        seed: u64,
        outcomes: &[StepOutcome],
        changepoint: Option<u64>,
        c_alarm: f64,
    ) -> Self {
        let first_alarm_outcome = outcomes.iter().find(|o| {
            o.alarms
                .iter()
                .any(|a| a.procedure == crate::changepoint::Procedure::Ville)
        });
        let baseline_alarm = outcomes
            .iter()
            .find(|o| o.baseline_wealth.is_some_and(|w| w >= c_alarm))
            .map(|o| o.t);
        let cp = changepoint.unwrap_or(u64::MAX);
        let (pre, post): (Vec<&StepOutcome>, Vec<&StepOutcome>) =
            outcomes.iter().partition(|o| o.t < cp);
        let coverage = |v: &[&StepOutcome]| {
            (!v.is_empty()).then(|| v.iter().filter(|o| o.covered).count() as f64 / v.len() as f64)
        };
        let width =
            |v: &[&StepOutcome]| median(&v.iter().map(|o| o.interval.width()).collect::<Vec<_>>());
        Self {
            seed,
            events: outcomes.len() as u64,
            first_alarm: first_alarm_outcome.map(|o| o.t),
            baseline_alarm,
            adaptation_time: outcomes.iter().find(|o| o.adapted).map(|o| o.t),
            alarm_verdict: first_alarm_outcome.and_then(|o| o.verdict.map(|v| v.kind)),
            coverage_pre: coverage(&pre),
            coverage_post: coverage(&post),
            median_width_pre: width(&pre),
            median_width_post: width(&post),
            final_wealth_w: outcomes.last().map_or(1.0, |o| o.wealth_w),
            final_wealth_x: outcomes.last().map_or(1.0, |o| o.wealth_x),
        }
    }
}

/// Alarm statistics for one martingale across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmStats {
    pub runs: usize,
    pub alarmed_runs: usize,
    pub alarm_rate: f64,
    pub add: Option<Estimate>,
    pub unnecessary_alarms: usize,
    pub missed_alarms: usize,
}

impl AlarmStats {
    /// With `harmful = false` every alarm is unnecessary; otherwise alarms
    /// are bucketed around the changepoint.
    pub fn from_alarms(alarms: &[Option<u64>], changepoint: Option<u64>, harmful: bool) -> Self {
        let runs = alarms.len();
        let alarmed_runs = alarms.iter().filter(|a| a.is_some()).count();
        let alarm_rate = if runs == 0 {
            0.0
        } else {
            alarmed_runs as f64 / runs as f64
        };
        match (changepoint, harmful) {
            (Some(cp), true) => {
                let s = compute_add(alarms, cp);
                let delays: Vec<f64> = alarms
                    .iter()
                    .flatten()
                    .filter(|t| **t >= cp)
                    .map(|t| (t - cp) as f64)
                    .collect();
                Self {
                    runs,
                    alarmed_runs,
                    alarm_rate,
                    add: Estimate::of(&delays),
                    unnecessary_alarms: s.unnecessary,
                    missed_alarms: s.missed,
                }
            }
            _ => Self {
                runs,
                alarmed_runs,
                alarm_rate,
                add: None,
                unnecessary_alarms: alarmed_runs,
                missed_alarms: 0,
            },
        }
    }
}

/// Aggregate over runs. Independent of run order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: usize,
    pub changepoint: Option<u64>,
    pub harmful: bool,
    pub wctm: AlarmStats,
    pub baseline: Option<AlarmStats>,
    /// Share of alarmed runs per verdict at the first alarm.
    pub verdicts: Vec<(VerdictKind, usize)>,
    pub adapted_runs: usize,
    pub coverage_pre: Option<Estimate>,
    pub coverage_post: Option<Estimate>,
    pub median_width_pre: Option<f64>,
    pub median_width_post: Option<f64>,
}

impl MetricsReport {
    pub fn aggregate(
        runs: &[RunSummary],
        changepoint: Option<u64>,
        harmful: bool,
        with_baseline: bool,
    ) -> Self {
        let mut runs: Vec<&RunSummary> = runs.iter().collect();
        runs.sort_by_key(|r| r.seed);
        let alarms: Vec<Option<u64>> = runs.iter().map(|r| r.first_alarm).collect();
        let baseline = with_baseline.then(|| {
            let b: Vec<Option<u64>> = runs.iter().map(|r| r.baseline_alarm).collect();
            AlarmStats::from_alarms(&b, changepoint, harmful)
        });
        let kinds = [
            VerdictKind::NoShift,
            VerdictKind::BenignAdapted,
            VerdictKind::ExtremeCovariateShift,
            VerdictKind::ConceptShift,
        ];
        let verdicts = kinds
            .iter()
            .map(|k| {
                (
                    *k,
                    runs.iter().filter(|r| r.alarm_verdict == Some(*k)).count(),
                )
            })
            .filter(|(_, c)| *c > 0)
            .collect();
        let collect = |f: fn(&RunSummary) -> Option<f64>| {
            runs.iter().filter_map(|r| f(r)).collect::<Vec<f64>>()
        };
        Self {
            runs: runs.len(),
            changepoint,
            harmful,
            wctm: AlarmStats::from_alarms(&alarms, changepoint, harmful),
            baseline,
            verdicts,
            adapted_runs: runs.iter().filter(|r| r.adaptation_time.is_some()).count(),
            coverage_pre: Estimate::of(&collect(|r| r.coverage_pre)),
            coverage_post: Estimate::of(&collect(|r| r.coverage_post)),
            median_width_pre: median(&collect(|r| r.median_width_pre)),
            median_width_post: median(&collect(|r| r.median_width_post)),
        }
    }

    pub fn verdict_count(&self, kind: VerdictKind) -> usize {
        self.verdicts
            .iter()
            .find(|(k, _)| *k == kind)
            .map_or(0, |(_, c)| *c)
    }
}

/// Rolling mean of a 0/1 coverage indicator over `window` events.
pub fn rolling_coverage(covered: &[bool], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(covered.len());
    let mut hits = 0usize;
    for (i, c) in covered.iter().enumerate() {
        hits += usize::from(*c);
        if i >= window {
            hits -= usize::from(covered[i - window]);
        }
        out.push(hits as f64 / (i + 1).min(window) as f64);
    }
    out
}

/// Rolling median of interval widths over `window` events.
pub fn rolling_median(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| median(&values[(i + 1).saturating_sub(window)..=i]).expect("nonempty window"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_examples() {
        assert_eq!(compute_add(&[Some(620)], 500).add, Some(120.0));
        assert_eq!(compute_add(&[Some(520), Some(560)], 500).add, Some(40.0));
        let s = compute_add(&[Some(450), None, Some(700)], 500);
        assert_eq!(
            s,
            AddSummary {
                add: Some(200.0),
                detected: 1,
                unnecessary: 1,
                missed: 1
            }
        );
        let empty = compute_add(&[], 500);
        assert_eq!(empty.add, None);
        assert_eq!((empty.unnecessary, empty.missed), (0, 0));
    }

    #[test]
    fn alarm_at_changepoint_counts_as_detection() {
        assert_eq!(compute_add(&[Some(500)], 500).add, Some(0.0));
    }

    #[test]
    fn benign_alarms_are_all_unnecessary() {
        let s = AlarmStats::from_alarms(&[Some(900), None, Some(100)], Some(500), false);
        assert_eq!(
            (s.unnecessary_alarms, s.missed_alarms, s.alarmed_runs),
            (2, 0, 2)
        );
        assert!(s.add.is_none());
    }

    #[test]
    fn rolling_helpers() {
        assert_eq!(
            rolling_coverage(&[true, false, true, true], 2),
            vec![1.0, 0.5, 0.5, 1.0]
        );
        assert_eq!(
            rolling_median(&[3.0, 1.0, 2.0, f64::INFINITY], 3),
            vec![3.0, 2.0, 2.0, 2.0]
        );
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn aggregation_ignores_run_order() {
        let mk = |seed, alarm| RunSummary {
            seed,
            events: 10,
            first_alarm: alarm,
            baseline_alarm: None,
            adaptation_time: None,
            alarm_verdict: alarm.map(|_| VerdictKind::ConceptShift),
            coverage_pre: Some(0.9),
            coverage_post: Some(0.8 + seed as f64 / 100.0),
            median_width_pre: Some(1.0),
            median_width_post: Some(seed as f64),
            final_wealth_w: 1.0,
            final_wealth_x: 1.0,
        };
        let runs = vec![mk(1, Some(510)), mk(2, None), mk(3, Some(530))];
        let mut reversed = runs.clone();
        reversed.reverse();
        let a = MetricsReport::aggregate(&runs, Some(500), true, true);
        let b = MetricsReport::aggregate(&reversed, Some(500), true, true);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.wctm.add.unwrap().mean, 20.0);
        assert_eq!(a.verdict_count(VerdictKind::ConceptShift), 2);
    }
}
