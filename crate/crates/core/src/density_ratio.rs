//! Online density-ratio estimation by probabilistic classification.
//!
//! A classifier separates source inputs (the frozen calibration features)
//! from target inputs (test features seen since adaptation began). Its
//! logit carries the fixed prior offset `ln(n_target / n_source)`, so the
//! learned part `f(x)` is directly the log density ratio:
//!
//! ```text
//! ratio(x) = P(target|x) / (1 - P(target|x)) * n_source / n_target = exp(f(x))
//! ```
//!
//! Predictions are clipped to `[clip_min, clip_max]`.

use std::collections::VecDeque;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{Standardizer, WeightVector};
use crate::error::{Error, Result};
use crate::features::FeatureFn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    #[default]
    Logistic,
    Mlp,
    /// Analytic ratio supplied by the caller (simulations and tests).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioConfig {
    pub mode: EstimatorMode,
    pub learning_rate: f64,
    /// SGD passes over the replay buffers per arriving target point.
    pub epochs: usize,
    /// Capacity of each replay buffer.
    pub buffer_size: usize,
    pub hidden: usize,
    pub clip_min: f64,
    pub clip_max: f64,
    pub seed: u64,
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::Logistic,
            learning_rate: 0.01,
            epochs: 1,
            buffer_size: 256,
            hidden: 32,
            clip_min: 0.05,
            clip_max: 20.0,
            seed: 0,
        }
    }
}

impl RatioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.buffer_size == 0 {
            return Err(Error::Config("replay buffer size must be positive".into()));
        }
        if self.mode == EstimatorMode::Mlp && self.hidden == 0 {
            return Err(Error::Config("MLP hidden width must be positive".into()));
        }
        if !(self.clip_min > 0.0
            && self.clip_min <= 1.0
            && self.clip_max >= 1.0
            && self.clip_max.is_finite())
        {
            return Err(Error::Config(format!(
                "clip bounds ({}, {}) must satisfy 0 < min <= 1 <= max < inf",
                self.clip_min, self.clip_max
            )));
        }
        Ok(())
    }
}

/// Analytic ratio `exp(lambda * h(z) - log_normalizer)` on standardized
/// features `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRatio {
    pub tilt: FeatureFn,
    pub lambda: f64,
    pub log_normalizer: f64,
}

impl AnalyticRatio {
    pub fn log_ratio(&self, z: &[f64]) -> f64 {
        self.lambda * self.tilt.eval(z) - self.log_normalizer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Model {
    Logistic {
        weights: Vec<f64>,
        bias: f64,
    },
    Mlp {
        hidden_w: Vec<Vec<f64>>,
        hidden_b: Vec<f64>,
        out_w: Vec<f64>,
        out_b: f64,
    },
    Oracle {
        ratio: AnalyticRatio,
    },
}

impl Model {
    /// Learned log-ratio `f(z)`.
    fn log_ratio(&self, z: &[f64]) -> f64 {
        match self {
            Model::Logistic { weights, bias } => bias + dot(weights, z),
            Model::Mlp {
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            } => {
                let mut acc = *out_b;
                for ((row, b), w) in hidden_w.iter().zip(hidden_b).zip(out_w) {
                    acc += w * (b + dot(row, z)).tanh();
                }
                acc
            }
            Model::Oracle { ratio } => ratio.log_ratio(z),
        }
    }

    /// One SGD step on the logistic loss with logit `offset + f(z)`.
    fn sgd_step(&mut self, z: &[f64], label: f64, offset: f64, lr: f64) {
        match self {
            Model::Logistic { weights, bias } => {
                let g = sigmoid(offset + *bias + dot(weights, z)) - label;
                for (w, x) in weights.iter_mut().zip(z) {
                    *w -= lr * g * x;
                }
                *bias -= lr * g;
            }
            Model::Mlp {
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            } => {
                let act: Vec<f64> = hidden_w
                    .iter()
                    .zip(hidden_b.iter())
                    .map(|(row, b)| (b + dot(row, z)).tanh())
                    .collect();
                let f = *out_b + dot(out_w, &act);
                let g = sigmoid(offset + f) - label;
                for (k, a) in act.iter().enumerate() {
                    let back = g * out_w[k] * (1.0 - a * a);
                    out_w[k] -= lr * g * a;
                    for (w, x) in hidden_w[k].iter_mut().zip(z) {
                        *w -= lr * back * x;
                    }
                    hidden_b[k] -= lr * back;
                }
                *out_b -= lr * g;
            }
            Model::Oracle { .. } => {}
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `clip(p / (1 - p) * prior_factor, clip_min, clip_max)`.
pub fn ratio_from_probability(
    p_target: f64,
    prior_factor: f64,
    clip_min: f64,
    clip_max: f64,
) -> f64 {
    let odds = if p_target >= 1.0 {
        f64::INFINITY
    } else {
        p_target / (1.0 - p_target)
    };
    (odds * prior_factor).clamp(clip_min, clip_max)
}

/// Online density-ratio estimator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimator {
    config: RatioConfig,
    standardizer: Standardizer,
    model: Model,
    source: VecDeque<Vec<f64>>,
    target: VecDeque<Vec<f64>>,
    steps: u64,
}

impl RatioEstimator {
    /// A fresh learned estimator (`ratio == 1` everywhere until fitted).
    pub fn new(config: RatioConfig, standardizer: Standardizer) -> Result<Self> {
        config.validate()?;
        let dim = standardizer.dim();
        let model = match config.mode {
            EstimatorMode::Logistic => Model::Logistic {
                weights: vec![0.0; dim],
                bias: 0.0,
            },
            EstimatorMode::Mlp => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let bound = 1.0 / (dim.max(1) as f64).sqrt();
                let hidden_w = (0..config.hidden)
                    .map(|_| (0..dim).map(|_| rng.random_range(-bound..bound)).collect())
                    .collect();
                let hidden_b = (0..config.hidden)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let out_bound = 1.0 / (config.hidden as f64).sqrt();
                // small output layer so a fresh network starts near ratio 1
                let out_w = (0..config.hidden)
                    .map(|_| 0.01 * rng.random_range(-out_bound..out_bound))
                    .collect();
                Model::Mlp {
                    hidden_w,
                    hidden_b,
                    out_w,
                    out_b: 0.0,
                }
            }
            EstimatorMode::Oracle => {
                return Err(Error::Config(
                    "oracle mode requires an analytic ratio; use RatioEstimator::oracle".into(),
                ))
            }
        };
        Ok(Self {
            config,
            standardizer,
            model,
            source: VecDeque::new(),
            target: VecDeque::new(),
            steps: 0,
        })
    }

    pub fn oracle(
        config: RatioConfig,
        standardizer: Standardizer,
        ratio: AnalyticRatio,
    ) -> Result<Self> {
        let config = RatioConfig {
            mode: EstimatorMode::Oracle,
            ..config
        };
        config.validate()?;
        Ok(Self {
            config,
            standardizer,
            model: Model::Oracle { ratio },
            source: VecDeque::new(),
            target: VecDeque::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &RatioConfig {
        &self.config
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn buffer_sizes(&self) -> (usize, usize) {
        (self.source.len(), self.target.len())
    }

    /// `n_source / n_target` over the replay buffers (1 while either is empty).
    pub fn prior_factor(&self) -> f64 {
        let (s, t) = self.buffer_sizes();
        if s == 0 || t == 0 {
            1.0
        } else {
            s as f64 / t as f64
        }
    }

    fn prior_offset(&self) -> f64 {
        self.prior_factor().recip().ln()
    }

    /// Classifier probability that `x` (raw units) came from the target domain.
    pub fn probability_target(&self, x: &[f64]) -> Result<f64> {
        let z = self.standardizer.apply(x)?;
        Ok(sigmoid(self.prior_offset() + self.model.log_ratio(&z)))
    }

    /// Clipped ratio for raw features.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let z = self.standardizer.apply(x)?;
        Ok(self.predict_standardized(&z))
    }

    /// Clipped ratio for already-standardized features.
    pub fn predict_standardized(&self, z: &[f64]) -> f64 {
        self.model
            .log_ratio(z)
            .exp()
            .clamp(self.config.clip_min, self.config.clip_max)
    }

    /// Appends source examples (raw units), keeping the most recent
    /// `buffer_size`.
    pub fn add_source(&mut self, xs: &[Vec<f64>]) -> Result<()> {
        for x in xs {
            let z = self.standardizer.apply(x)?;
            push_bounded(&mut self.source, z, self.config.buffer_size);
        }
        Ok(())
    }

    /// Records a new target input and runs the configured passes over the
    /// replay buffers.
    pub fn observe_target(&mut self, x: &[f64]) -> Result<()> {
        let z = self.standardizer.apply(x)?;
        push_bounded(&mut self.target, z, self.config.buffer_size);
        for _ in 0..self.config.epochs {
            self.replay_epoch();
        }
        Ok(())
    }

    fn replay_epoch(&mut self) {
        if matches!(self.model, Model::Oracle { .. }) {
            return;
        }
        let offset = self.prior_offset();
        let lr = self.config.learning_rate;
        let (ns, nt) = (self.source.len(), self.target.len());
        // Interleave the two buffers by relative position so neither class is
        // visited in one block at the end of the pass.
        let (mut i, mut j) = (0, 0);
        while i < ns || j < nt {
            let take_source = j >= nt || (i < ns && (i * nt) <= (j * ns));
            if take_source {
                self.model.sgd_step(&self.source[i], 0.0, offset, lr);
                i += 1;
            } else {
                self.model.sgd_step(&self.target[j], 1.0, offset, lr);
                j += 1;
            }
            self.steps += 1;
        }
    }

    /// One SGD pass over labelled examples (raw units), in the given order.
    /// Examples are not added to the replay buffers.
    pub fn fit_update(&mut self, examples: &[(Vec<f64>, Domain)]) -> Result<()> {
        let standardized = examples
            .iter()
            .map(|(x, d)| Ok((self.standardizer.apply(x)?, *d)))
            .collect::<Result<Vec<_>>>()?;
        let offset = self.prior_offset();
        for (z, d) in standardized {
            let label = if d == Domain::Target { 1.0 } else { 0.0 };
            self.model
                .sgd_step(&z, label, offset, self.config.learning_rate);
            self.steps += 1;
        }
        Ok(())
    }

    /// Normalized conformal weights over calibration points plus the test
    /// point, all given as standardized features.
    pub fn conformal_weights_standardized(
        &self,
        cal: &[Vec<f64>],
        test: &[f64],
    ) -> Result<WeightVector> {
        let raw: Vec<f64> = cal
            .iter()
            .map(|z| self.predict_standardized(z))
            .chain(std::iter::once(self.predict_standardized(test)))
            .collect();
        weights_from_ratios(&raw)
    }

    /// Normalized conformal weights for raw calibration and test features.
    pub fn conformal_weights(
        &self,
        cal_features: &[Vec<f64>],
        test_feature: &[f64],
    ) -> Result<WeightVector> {
        let cal = cal_features
            .iter()
            .map(|x| self.standardizer.apply(x))
            .collect::<Result<Vec<_>>>()?;
        let test = self.standardizer.apply(test_feature)?;
        self.conformal_weights_standardized(&cal, &test)
    }
}

fn push_bounded(buf: &mut VecDeque<Vec<f64>>, z: Vec<f64>, cap: usize) {
    if buf.len() == cap {
        buf.pop_front();
    }
    buf.push_back(z);
}

/// `w_i = r_i / sum_j r_j` over calibration ratios followed by the test ratio.
/// Degenerate all-zero ratios fall back to uniform weights.
pub fn weights_from_ratios(raw: &[f64]) -> Result<WeightVector> {
    if raw.iter().all(|r| *r == 0.0) && !raw.is_empty() {
        warn!("all density ratios are zero; falling back to uniform conformal weights");
        return WeightVector::uniform(raw.len());
    }
    WeightVector::normalize(raw)
}

/// Conformal weights from an arbitrary ratio function (oracle mode for tests).
pub fn conformal_weights_with<F>(
    ratio: F,
    cal_features: &[Vec<f64>],
    test_feature: &[f64],
) -> Result<WeightVector>
where
    F: Fn(&[f64]) -> f64,
{
    let raw: Vec<f64> = cal_features
        .iter()
        .map(|x| ratio(x))
        .chain(std::iter::once(ratio(test_feature)))
        .collect();
    weights_from_ratios(&raw)
}
