//! Alarm rules on top of a wealth process `M_t` with `M_0 = 1`.
//!
//! * Ville: alarm once `M_t >= c`; false-alarm probability at most `1/c`.
//! * Shiryaev-Roberts: multistage alarm on `sum_{i=tau}^{t-1} M_t / M_i >= c`.
//! * CUSUM: multistage alarm on `max_{tau <= i < t} M_t / M_i >= c`.
//!
//! The two multistage rules keep scalar accumulators only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Ville,
    Sr,
    Cusum,
}

/// One fired alarm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub procedure: Procedure,
    pub time: u64,
    pub statistic: f64,
    pub threshold: f64,
}

/// What a multistage procedure does after it fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlarmPolicy {
    /// Stop processing the stream.
    Halt,
    /// Start a new stage at the alarm time.
    #[default]
    ResetAndContinue,
    /// Record the alarm but keep the current stage running.
    LogOnly,
}

fn check_threshold(c: f64) -> Result<()> {
    if c > 1.0 && c.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "alarm threshold {c} must be a finite value above 1"
        )))
    }
}

fn check_wealth(m: f64) -> Result<()> {
    if m > 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "wealth {m} must be positive and finite"
        )))
    }
}

/// `M_t >= c`.
pub fn ville_alarm(wealth: f64, c: f64) -> Result<bool> {
    check_threshold(c)?;
    Ok(wealth >= c)
}

/// Shiryaev-Roberts accumulator.
///
/// `reciprocal_sum` holds `sum_{i=stage_start}^{t-1} 1/M_i`; the statistic at
/// time `t` is `M_t` times that sum, evaluated before `1/M_t` joins it. A fresh
/// state already contains `1/M_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrState {
    reciprocal_sum: CompensatedSum,
    pub stage_start: u64,
    pub stage: u32,
    pub time: u64,
}

impl Default for SrState {
    fn default() -> Self {
        let mut reciprocal_sum = CompensatedSum::new();
        reciprocal_sum.add(1.0);
        Self {
            reciprocal_sum,
            stage_start: 0,
            stage: 1,
            time: 0,
        }
    }
}

impl SrState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reciprocal_sum(&self) -> f64 {
        self.reciprocal_sum.value()
    }

    /// Feeds `M_t`, returning the statistic and whether it reached `c`.
    pub fn update(&mut self, wealth: f64, c: f64, policy: AlarmPolicy) -> Result<(f64, bool)> {
        check_threshold(c)?;
        check_wealth(wealth)?;
        self.time += 1;
        let statistic = wealth * self.reciprocal_sum.value();
        let alarm = statistic >= c;
        if alarm && policy != AlarmPolicy::LogOnly {
            self.reciprocal_sum = CompensatedSum::new();
            self.stage += 1;
            self.stage_start = self.time;
        }
        self.reciprocal_sum.add(1.0 / wealth);
        Ok((statistic, alarm))
    }
}

/// CUSUM accumulator: the running minimum of `M_i` over the current stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CusumState {
    pub min_wealth: f64,
    pub stage_start: u64,
    pub time: u64,
}

impl Default for CusumState {
    fn default() -> Self {
        Self {
            min_wealth: 1.0,
            stage_start: 0,
            time: 0,
        }
    }
}

impl CusumState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, wealth: f64, c: f64, policy: AlarmPolicy) -> Result<(f64, bool)> {
        check_threshold(c)?;
        check_wealth(wealth)?;
        self.time += 1;
        let statistic = wealth / self.min_wealth;
        let alarm = statistic >= c;
        if alarm && policy != AlarmPolicy::LogOnly {
            self.min_wealth = wealth;
            self.stage_start = self.time;
        } else if wealth < self.min_wealth {
            self.min_wealth = wealth;
        }
        Ok((statistic, alarm))
    }
}
