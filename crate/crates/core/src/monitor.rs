//! Per-event monitoring state machine.
//!
//! Two composite-jumper martingales run side by side:
//!
//! * the X-CTM, a standard CTM on a nearest-neighbour feature score, which
//!   only looks at inputs and decides when to start adapting;
//! * the WCTM on absolute-residual scores. It behaves as a standard CTM over
//!   a growing calibration set until the X-CTM first reaches `c_adapt`; from
//!   then on the calibration set is frozen and p-values are reweighted by an
//!   online density-ratio estimate.
//!
//! Alarms on the WCTM (Ville, Shiryaev-Roberts, CUSUM) are combined with the
//! X-CTM wealth into a root-cause verdict.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::betting::{CompositeJumper, DEFAULT_JUMP_RATES};
use crate::changepoint::{AlarmPolicy, AlarmRecord, CusumState, Procedure, SrState};
use crate::conformal::{
    penalized_weighted_p_value, prediction_interval, quantile_descending, score_abs_residual,
    standard_p_value, weighted_quantile, CalibrationSet, NearestNeighborScorer, PValue,
    PredictionInterval, Standardizer, WeightVector,
};
use crate::density_ratio::{AnalyticRatio, EstimatorMode, RatioConfig, RatioEstimator};
use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &str = "WATCHSNAP";
const SNAPSHOT_VERSION: u32 = 1;

/// One observation: inputs, the deployed model's prediction and the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    /// 1-based position in the stream.
    pub index: u64,
    pub features: Vec<f64>,
    pub prediction: f64,
    pub label: f64,
}

/// A labelled calibration example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub features: Vec<f64>,
    pub prediction: f64,
    pub label: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictKind {
    NoShift,
    BenignAdapted,
    ExtremeCovariateShift,
    ConceptShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub wealth_x: f64,
    pub wealth_w: f64,
    pub time: u64,
}

/// Decision table combining the WCTM alarm with the X-CTM evidence.
pub fn root_cause(wealth_x: f64, wctm_alarmed: bool, c_adapt: f64, adapted: bool) -> VerdictKind {
    match (wctm_alarmed, wealth_x >= c_adapt, adapted) {
        (true, true, _) => VerdictKind::ExtremeCovariateShift,
        (true, false, _) => VerdictKind::ConceptShift,
        (false, _, true) => VerdictKind::BenignAdapted,
        (false, _, false) => VerdictKind::NoShift,
    }
}

/// Monitor settings. Flat so it maps one-to-one onto a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub alpha: f64,
    /// Ville threshold for WCTM alarms.
    pub c_alarm: f64,
    /// X-CTM threshold that starts adaptation.
    pub c_adapt: f64,
    /// Threshold for the Shiryaev-Roberts and CUSUM statistics.
    pub c_changepoint: f64,
    pub jump_rates: Vec<f64>,
    pub alarm_policy: AlarmPolicy,
    /// Restart the WCTM betting state after each Ville alarm.
    pub reset_martingale_on_alarm: bool,
    /// Use `u = 1` instead of a uniform tie-breaking randomizer.
    pub conservative: bool,
    /// Run an unweighted standard CTM alongside for comparison.
    pub baseline: bool,
    pub estimator: EstimatorMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub buffer_size: usize,
    pub hidden: usize,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Analytic ratio for `estimator = "oracle"`, on raw features.
    pub oracle_ratio: Option<AnalyticRatio>,
    pub seed: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        let ratio = RatioConfig::default();
        Self {
            alpha: 0.1,
            c_alarm: 100.0,
            c_adapt: 10.0,
            c_changepoint: 10_000.0,
            jump_rates: DEFAULT_JUMP_RATES.to_vec(),
            alarm_policy: AlarmPolicy::default(),
            reset_martingale_on_alarm: false,
            conservative: false,
            baseline: false,
            estimator: ratio.mode,
            learning_rate: ratio.learning_rate,
            epochs: ratio.epochs,
            buffer_size: ratio.buffer_size,
            hidden: ratio.hidden,
            clip_min: ratio.clip_min,
            clip_max: ratio.clip_max,
            oracle_ratio: None,
            seed: 0,
        }
    }
}

impl MonitorConfig {
    /// Parses a flat TOML config; missing keys take their defaults.
    /// Validation is left to the caller since some keys are filled in later.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn ratio_config(&self) -> RatioConfig {
        RatioConfig {
            mode: self.estimator,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            buffer_size: self.buffer_size,
            hidden: self.hidden,
            clip_min: self.clip_min,
            clip_max: self.clip_max,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        for (name, c) in [
            ("c_alarm", self.c_alarm),
            ("c_adapt", self.c_adapt),
            ("c_changepoint", self.c_changepoint),
        ] {
            if !(c > 1.0 && c.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {c} must be a finite value above 1"
                )));
            }
        }
        CompositeJumper::new(&self.jump_rates)?;
        self.ratio_config().validate()?;
        if self.estimator == EstimatorMode::Oracle && self.oracle_ratio.is_none() {
            return Err(Error::Config(
                "estimator = \"oracle\" requires oracle_ratio".into(),
            ));
        }
        Ok(())
    }
}

/// Everything reported for one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub t: u64,
    pub p_x: PValue,
    pub p_z: PValue,
    pub wealth_x: f64,
    pub wealth_w: f64,
    pub sr_statistic: f64,
    pub cusum_statistic: f64,
    pub interval: PredictionInterval,
    pub covered: bool,
    pub test_weight: f64,
    pub adapted: bool,
    pub alarms: Vec<AlarmRecord>,
    pub verdict: Option<Verdict>,
    pub baseline_p: Option<f64>,
    pub baseline_wealth: Option<f64>,
}

/// Calibration data after adaptation, sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrozenCalibration {
    scores: CalibrationSet,
    desc_scores: Vec<f64>,
    /// Features in the estimator's input space, same order as `desc_scores`.
    inputs: Vec<Vec<f64>>,
}

impl FrozenCalibration {
    fn new(cal: &CalibrationSet, estimator: &RatioEstimator) -> Result<Self> {
        let mut order: Vec<usize> = (0..cal.len()).collect();
        order.sort_by(|a, b| cal.scores()[*b].total_cmp(&cal.scores()[*a]));
        let desc_scores: Vec<f64> = order.iter().map(|i| cal.scores()[*i]).collect();
        let inputs = order
            .iter()
            .map(|i| estimator.standardizer().apply(&cal.features()[*i]))
            .collect::<Result<Vec<_>>>()?;
        let mut scores = CalibrationSet::from_scores(desc_scores.clone())?;
        scores.freeze();
        Ok(Self {
            scores,
            desc_scores,
            inputs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Baseline {
    calibration: CalibrationSet,
    jumper: CompositeJumper,
    alarmed: bool,
}

/// Streaming monitor for one event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    config: MonitorConfig,
    t: u64,
    rng: ChaCha8Rng,
    dim: usize,
    nn: NearestNeighborScorer,
    standardizer: Standardizer,
    x_calibration: CalibrationSet,
    calibration: CalibrationSet,
    frozen: Option<FrozenCalibration>,
    ratio: Option<RatioEstimator>,
    t_ad: Option<u64>,
    xctm: CompositeJumper,
    wctm: CompositeJumper,
    sr: SrState,
    cusum: CusumState,
    ville_fired: bool,
    first_alarm: Option<u64>,
    halted: bool,
    baseline: Option<Baseline>,
}

impl Monitor {
    /// Builds a monitor from an initial labelled calibration set.
    ///
    /// The initial inputs are split alternately into the X-CTM's
    /// nearest-neighbour reference set and its calibration scores, so X
    /// scores of calibration and test points are exchangeable under the null.
    pub fn new(config: MonitorConfig, calibration: &[LabeledPoint]) -> Result<Self> {
        config.validate()?;
        if calibration.len() < 2 {
            return Err(Error::InvalidInput(
                "need at least two calibration points".into(),
            ));
        }
        let dim = calibration[0].features.len();
        if dim == 0 {
            return Err(Error::InvalidInput(
                "feature vectors must be nonempty".into(),
            ));
        }
        for (i, p) in calibration.iter().enumerate() {
            check_point(&p.features, p.prediction, p.label, dim).map_err(|e| match e {
                Error::InvalidInput(m) => {
                    Error::InvalidInput(format!("calibration point {i}: {m}"))
                }
                other => other,
            })?;
        }
        let features: Vec<Vec<f64>> = calibration.iter().map(|p| p.features.clone()).collect();
        let standardizer = Standardizer::fit(&features)?;
        let reference: Vec<Vec<f64>> = features.iter().step_by(2).cloned().collect();
        let nn = NearestNeighborScorer::new(standardizer.clone(), &reference)?;
        let x_scores = features
            .iter()
            .skip(1)
            .step_by(2)
            .map(|x| nn.score(x))
            .collect::<Result<Vec<_>>>()?;
        let x_calibration = CalibrationSet::from_scores(x_scores)?;
        let scores = calibration
            .iter()
            .map(|p| score_abs_residual(p.prediction, p.label))
            .collect::<Result<Vec<_>>>()?;
        let calibration = CalibrationSet::new(scores, features)?;
        if let Some(r) = &config.oracle_ratio {
            if r.tilt.max_feature().is_some_and(|f| f >= dim) {
                return Err(Error::Config(
                    "oracle ratio reads a feature beyond the input dimension".into(),
                ));
            }
        }
        let baseline = config.baseline.then(|| Baseline {
            calibration: calibration.clone(),
            jumper: CompositeJumper::new(&config.jump_rates).expect("validated"),
            alarmed: false,
        });
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            xctm: CompositeJumper::new(&config.jump_rates)?,
            wctm: CompositeJumper::new(&config.jump_rates)?,
            config,
            t: 0,
            dim,
            nn,
            standardizer,
            x_calibration,
            calibration,
            frozen: None,
            ratio: None,
            t_ad: None,
            sr: SrState::new(),
            cusum: CusumState::new(),
            ville_fired: false,
            first_alarm: None,
            halted: false,
            baseline,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    /// Index of the last processed event.
    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn adaptation_time(&self) -> Option<u64> {
        self.t_ad
    }

    /// Time of the first Ville alarm on the WCTM.
    pub fn first_alarm(&self) -> Option<u64> {
        self.first_alarm
    }

    pub fn calibration_len(&self) -> usize {
        self.calibration.len()
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn wealth_w(&self) -> f64 {
        self.wctm.wealth()
    }

    pub fn wealth_x(&self) -> f64 {
        self.xctm.wealth()
    }

    pub fn ratio_estimator(&self) -> Option<&RatioEstimator> {
        self.ratio.as_ref()
    }

    /// Processes the next event.
    pub fn observe(&mut self, event: &StreamEvent) -> Result<StepOutcome> {
        if self.halted {
            return Err(Error::Halted(self.first_alarm.unwrap_or(self.t)));
        }
        if event.index != self.t + 1 {
            return Err(Error::Sequencing {
                expected: self.t + 1,
                got: event.index,
            });
        }
        check_point(&event.features, event.prediction, event.label, self.dim)?;
        let score = score_abs_residual(event.prediction, event.label)?;
        let u_x: f64 = self.rng.random();
        let u_z: f64 = self.rng.random();
        let (u_x, u_z) = if self.config.conservative {
            (1.0, 1.0)
        } else {
            (u_x, u_z)
        };
        let t = event.index;
        self.t = t;

        // X-CTM
        let x_score = self.nn.score(&event.features)?;
        let p_x = standard_p_value(&self.x_calibration, x_score, u_x)?;
        self.xctm.step(p_x.value);
        let wealth_x = self.xctm.wealth();

        let mut adaptation_started = false;
        if self.t_ad.is_none() && wealth_x >= self.config.c_adapt {
            self.start_adaptation(t)?;
            adaptation_started = true;
        }
        if !self.x_calibration.is_frozen() {
            self.x_calibration.push(x_score, Vec::new())?;
        }

        // WCTM p-value and the interval from the same weights.
        let (p_z, quantile, test_weight) = match (&self.frozen, &self.ratio) {
            (Some(frozen), Some(ratio)) => {
                let test_input = ratio.standardizer().apply(&event.features)?;
                let weights = ratio.conformal_weights_standardized(&frozen.inputs, &test_input)?;
                let mut scores = Vec::with_capacity(frozen.desc_scores.len() + 1);
                scores.extend_from_slice(&frozen.desc_scores);
                scores.push(score);
                let p = penalized_weighted_p_value(&scores, &weights, self.config.alpha, u_z)?;
                let q = if weights.is_uniform() {
                    weighted_quantile(&frozen.scores, &weights, self.config.alpha)?
                } else {
                    quantile_descending(&frozen.desc_scores, &weights.to_vec(), self.config.alpha)
                };
                (p, q, weights.test_weight())
            }
            _ => {
                let p = standard_p_value(&self.calibration, score, u_z)?;
                let weights = WeightVector::uniform(self.calibration.len() + 1)?;
                let q = weighted_quantile(&self.calibration, &weights, self.config.alpha)?;
                (p, q, weights.test_weight())
            }
        };
        self.wctm.step(p_z.value);
        let wealth_w = self.wctm.wealth();

        // Alarms.
        let mut alarms = Vec::new();
        let mut ville_alarm = false;
        if !self.ville_fired && wealth_w >= self.config.c_alarm {
            ville_alarm = true;
            self.ville_fired = true;
            self.first_alarm.get_or_insert(t);
            alarms.push(AlarmRecord {
                procedure: Procedure::Ville,
                time: t,
                statistic: wealth_w,
                threshold: self.config.c_alarm,
            });
        }
        let c_cp = self.config.c_changepoint;
        let (sr_statistic, sr_alarm) = self.sr.update(wealth_w, c_cp, self.config.alarm_policy)?;
        if sr_alarm {
            alarms.push(AlarmRecord {
                procedure: Procedure::Sr,
                time: t,
                statistic: sr_statistic,
                threshold: c_cp,
            });
        }
        let (cusum_statistic, cusum_alarm) =
            self.cusum
                .update(wealth_w, c_cp, self.config.alarm_policy)?;
        if cusum_alarm {
            alarms.push(AlarmRecord {
                procedure: Procedure::Cusum,
                time: t,
                statistic: cusum_statistic,
                threshold: c_cp,
            });
        }

        // Learn from the new target input, or grow the calibration set.
        if let Some(ratio) = &mut self.ratio {
            ratio.observe_target(&event.features)?;
        } else {
            self.calibration.push(score, event.features.clone())?;
        }

        let (baseline_p, baseline_wealth) = match &mut self.baseline {
            Some(b) => {
                let p = standard_p_value(&b.calibration, score, u_z)?;
                b.jumper.step(p.value);
                b.calibration.push(score, Vec::new())?;
                let w = b.jumper.wealth();
                if !b.alarmed && w >= self.config.c_alarm {
                    b.alarmed = true;
                }
                (Some(p.value), Some(w))
            }
            None => (None, None),
        };

        let interval = prediction_interval(event.prediction, quantile);
        let verdict = (ville_alarm || adaptation_started).then(|| Verdict {
            kind: root_cause(
                wealth_x,
                ville_alarm,
                self.config.c_adapt,
                self.t_ad.is_some(),
            ),
            wealth_x,
            wealth_w,
            time: t,
        });

        if ville_alarm && self.config.reset_martingale_on_alarm {
            self.wctm = CompositeJumper::new(&self.config.jump_rates)?;
            self.ville_fired = false;
        }
        if !alarms.is_empty() && self.config.alarm_policy == AlarmPolicy::Halt {
            self.halted = true;
        }

        Ok(StepOutcome {
            t,
            p_x,
            p_z,
            wealth_x,
            wealth_w,
            sr_statistic,
            cusum_statistic,
            interval,
            covered: interval.contains(event.label),
            test_weight,
            adapted: self.t_ad.is_some(),
            alarms,
            verdict,
            baseline_p,
            baseline_wealth,
        })
    }

    fn start_adaptation(&mut self, t: u64) -> Result<()> {
        self.t_ad = Some(t);
        self.x_calibration.freeze();
        self.calibration.freeze();
        let ratio_config = self.config.ratio_config();
        let mut estimator = match &self.config.oracle_ratio {
            Some(r) if self.config.estimator == EstimatorMode::Oracle => {
                RatioEstimator::oracle(ratio_config, Standardizer::identity(self.dim), r.clone())?
            }
            _ => RatioEstimator::new(ratio_config, self.standardizer.clone())?,
        };
        // The source buffer is a random subset of the frozen calibration, so
        // points observed just before adaptation (possibly already shifted)
        // are not over-represented.
        let n = self.calibration.len();
        let k = self.config.buffer_size.min(n);
        let mut subset_rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0f5a_3b1e);
        let mut picked = sample(&mut subset_rng, n, k).into_vec();
        picked.sort_unstable();
        let source: Vec<Vec<f64>> = picked
            .iter()
            .map(|i| self.calibration.features()[*i].clone())
            .collect();
        estimator.add_source(&source)?;
        self.frozen = Some(FrozenCalibration::new(&self.calibration, &estimator)?);
        self.ratio = Some(estimator);
        Ok(())
    }

    /// Versioned, checksummed snapshot of the complete state.
    pub fn snapshot(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_vec(self)
            .map_err(|e| Error::InvalidState(format!("cannot serialize monitor: {e}")))?;
        let digest = hex::encode(Sha256::digest(&body));
        let mut out = format!("{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION} {digest}\n").into_bytes();
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Restore("missing snapshot header".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Restore("header is not UTF-8".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(SNAPSHOT_MAGIC) {
            return Err(Error::Restore("not a monitor snapshot".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Restore("missing snapshot version".into()))?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Restore(format!(
                "unsupported snapshot version {version}"
            )));
        }
        let digest = parts
            .next()
            .ok_or_else(|| Error::Restore("missing checksum".into()))?;
        let body = &bytes[newline + 1..];
        if hex::encode(Sha256::digest(body)) != digest {
            return Err(Error::Restore("checksum mismatch".into()));
        }
        let monitor: Monitor = serde_json::from_slice(body)
            .map_err(|e| Error::Restore(format!("malformed snapshot body: {e}")))?;
        monitor
            .config
            .validate()
            .map_err(|e| Error::Restore(e.to_string()))?;
        Ok(monitor)
    }
}

fn check_point(features: &[f64], prediction: f64, label: f64, dim: usize) -> Result<()> {
    if features.len() != dim {
        return Err(Error::InvalidInput(format!(
            "expected {dim} features, got {}",
            features.len()
        )));
    }
    if features
        .iter()
        .chain([&prediction, &label])
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidInput(
            "non-finite feature, prediction or label".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn point(rng: &mut ChaCha8Rng, shift: f64) -> LabeledPoint {
        let n = Normal::new(0.0, 1.0).unwrap();
        let x = n.sample(rng) + shift;
        LabeledPoint {
            features: vec![x],
            prediction: x,
            label: x + 0.5 * n.sample(rng),
        }
    }

    fn stream(
        seed: u64,
        len: u64,
        shift_at: u64,
        shift: f64,
    ) -> (Vec<LabeledPoint>, Vec<StreamEvent>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cal = (0..200).map(|_| point(&mut rng, 0.0)).collect();
        let events = (1..=len)
            .map(|t| {
                let p = point(&mut rng, if t >= shift_at { shift } else { 0.0 });
                StreamEvent {
                    index: t,
                    features: p.features,
                    prediction: p.prediction,
                    label: p.label,
                }
            })
            .collect();
        (cal, events)
    }

    #[test]
    fn root_cause_table() {
        assert_eq!(
            root_cause(150.0, true, 100.0, true),
            VerdictKind::ExtremeCovariateShift
        );
        assert_eq!(
            root_cause(2.0, true, 100.0, false),
            VerdictKind::ConceptShift
        );
        assert_eq!(
            root_cause(150.0, false, 100.0, true),
            VerdictKind::BenignAdapted
        );
        assert_eq!(root_cause(2.0, false, 100.0, false), VerdictKind::NoShift);
    }

    #[test]
    fn rejects_out_of_order_events() {
        let (cal, events) = stream(1, 3, 10, 0.0);
        let mut m = Monitor::new(MonitorConfig::default(), &cal).unwrap();
        assert!(matches!(
            m.observe(&events[1]),
            Err(Error::Sequencing {
                expected: 1,
                got: 2
            })
        ));
        m.observe(&events[0]).unwrap();
        assert!(m.observe(&events[0]).is_err());
    }

    #[test]
    fn rejects_bad_config_and_inputs() {
        let (cal, _) = stream(1, 1, 10, 0.0);
        let bad = MonitorConfig {
            c_alarm: 1.0,
            ..MonitorConfig::default()
        };
        assert!(matches!(Monitor::new(bad, &cal), Err(Error::Config(_))));
        let oracle = MonitorConfig {
            estimator: EstimatorMode::Oracle,
            ..MonitorConfig::default()
        };
        assert!(matches!(Monitor::new(oracle, &cal), Err(Error::Config(_))));
        let mut m = Monitor::new(MonitorConfig::default(), &cal).unwrap();
        let e = StreamEvent {
            index: 1,
            features: vec![1.0, 2.0],
            prediction: 0.0,
            label: 0.0,
        };
        assert!(matches!(m.observe(&e), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pre_adaptation_matches_standard_ctm() {
        let (cal, events) = stream(4, 400, 1000, 0.0);
        let config = MonitorConfig {
            baseline: true,
            c_adapt: 1e12,
            ..MonitorConfig::default()
        };
        let mut m = Monitor::new(config, &cal).unwrap();
        for e in &events {
            let out = m.observe(e).unwrap();
            assert_eq!(out.p_z.value.to_bits(), out.baseline_p.unwrap().to_bits());
            assert_eq!(
                out.wealth_w.to_bits(),
                out.baseline_wealth.unwrap().to_bits()
            );
        }
    }

    #[test]
    fn constant_ratio_matches_uniform_frozen_calibration() {
        let (cal, events) = stream(5, 600, 100, 2.5);
        let flat = AnalyticRatio {
            tilt: crate::features::FeatureFn::Constant { value: 1.0 },
            lambda: 0.3,
            log_normalizer: 0.0,
        };
        let config = MonitorConfig {
            estimator: EstimatorMode::Oracle,
            oracle_ratio: Some(flat),
            ..MonitorConfig::default()
        };
        let mut m = Monitor::new(config, &cal).unwrap();
        let mut outs = Vec::new();
        for e in &events {
            outs.push(m.observe(e).unwrap());
        }
        let t_ad = m
            .adaptation_time()
            .expect("a 2.5 sd input shift triggers adaptation");
        // independent replay: standard p-values against the frozen calibration
        let mut frozen: Vec<f64> = cal.iter().map(|p| (p.label - p.prediction).abs()).collect();
        frozen.extend(
            events[..t_ad as usize - 1]
                .iter()
                .map(|e| (e.label - e.prediction).abs()),
        );
        let mut jumper = CompositeJumper::default();
        let mut unfrozen = CalibrationSet::from_scores(
            cal.iter().map(|p| (p.label - p.prediction).abs()).collect(),
        )
        .unwrap();
        for (e, out) in events.iter().zip(&outs) {
            let s = (e.label - e.prediction).abs();
            let p = if e.index < t_ad {
                let p = standard_p_value(&unfrozen, s, out.p_z.u).unwrap().value;
                unfrozen.push(s, Vec::new()).unwrap();
                p
            } else {
                let gt = frozen.iter().filter(|v| **v > s).count() as f64;
                let eq = frozen.iter().filter(|v| **v == s).count() as f64 + 1.0;
                (gt + out.p_z.u * eq) / (frozen.len() + 1) as f64
            };
            jumper.step(p);
            assert_eq!(out.p_z.value.to_bits(), p.to_bits(), "t={}", e.index);
            assert_eq!(out.wealth_w.to_bits(), jumper.wealth().to_bits());
        }
    }

    #[test]
    fn snapshot_round_trip_and_corruption() {
        let (cal, events) = stream(6, 300, 100, 2.0);
        let mut a = Monitor::new(
            MonitorConfig {
                baseline: true,
                ..MonitorConfig::default()
            },
            &cal,
        )
        .unwrap();
        for e in &events[..150] {
            a.observe(e).unwrap();
        }
        let snap = a.snapshot().unwrap();
        let mut b = Monitor::restore(&snap).unwrap();
        assert_eq!(a, b);
        for e in &events[150..] {
            let oa = serde_json::to_string(&a.observe(e).unwrap()).unwrap();
            let ob = serde_json::to_string(&b.observe(e).unwrap()).unwrap();
            assert_eq!(oa, ob);
        }

        let mut corrupt = snap.clone();
        let last = corrupt.len() - 5;
        corrupt[last] ^= 0x01;
        assert!(matches!(Monitor::restore(&corrupt), Err(Error::Restore(_))));
        let mut wrong_version = snap.clone();
        wrong_version[10] = b'9';
        assert!(matches!(
            Monitor::restore(&wrong_version),
            Err(Error::Restore(_))
        ));
        assert!(matches!(
            Monitor::restore(b"garbage"),
            Err(Error::Restore(_))
        ));
    }

    #[test]
    fn halt_policy_stops_the_stream() {
        let (cal, mut events) = stream(7, 400, 1000, 0.0);
        for e in events.iter_mut().skip(50) {
            e.label += 4.0;
        }
        let config = MonitorConfig {
            alarm_policy: AlarmPolicy::Halt,
            ..MonitorConfig::default()
        };
        let mut m = Monitor::new(config, &cal).unwrap();
        let mut halted_at = None;
        for e in &events {
            match m.observe(e) {
                Ok(out) if !out.alarms.is_empty() => {
                    let v = out.verdict.expect("alarm carries a verdict");
                    assert_eq!(v.kind, VerdictKind::ConceptShift);
                    halted_at = Some(e.index);
                }
                Ok(_) => {}
                Err(Error::Halted(_)) => break,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(halted_at.is_some());
        assert!(m.is_halted());
    }

    #[test]
    fn reset_flag_restarts_wealth() {
        let (cal, mut events) = stream(8, 600, 1000, 0.0);
        for e in events.iter_mut().skip(50) {
            e.label += 4.0;
        }
        let config = MonitorConfig {
            reset_martingale_on_alarm: true,
            ..MonitorConfig::default()
        };
        let mut m = Monitor::new(config, &cal).unwrap();
        let villes: usize = events
            .iter()
            .map(|e| {
                m.observe(e)
                    .unwrap()
                    .alarms
                    .iter()
                    .filter(|a| a.procedure == Procedure::Ville)
                    .count()
            })
            .sum();
        assert!(villes >= 2, "{villes}");
    }
}
