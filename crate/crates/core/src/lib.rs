//! Weighted conformal test martingales for monitoring deployed predictors
//! under distribution shift.

pub mod betting;
pub mod changepoint;
pub mod conformal;
pub mod density_ratio;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod metrics;
pub mod monitor;
pub mod numeric;
pub mod records;
pub mod simulator;

pub use error::{Error, Result};
pub use monitor::{
    LabeledPoint, Monitor, MonitorConfig, StepOutcome, StreamEvent, Verdict, VerdictKind,
};
