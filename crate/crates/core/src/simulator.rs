//! Synthetic streams with a known changepoint.
//!
//! Inputs are standard Gaussian; the first input plays the role of an
//! "age"-like covariate. Labels follow
//!
//! ```text
//! y = intercept + slopes . x + kink * max(0, x_0 - kink_at)^2 + noise * exp(growth * x_0) * eps
//! ```
//!
//! and the monitored model is ordinary least squares on a training sample, so
//! it is accurate where the source has mass and wrong far in the upper tail.
//! After the changepoint, covariate shifts resample a finite holdout pool with
//! probability proportional to `exp(lambda * h(x))`; concept shifts add
//! `delta * h(x)` to the label.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density_ratio::AnalyticRatio;
use crate::error::{Error, Result};
use crate::features::FeatureFn;
use crate::monitor::{LabeledPoint, StreamEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    None,
    BenignCovariate,
    ExtremeCovariate,
    Concept,
}

impl ScenarioKind {
    /// Whether an alarm after the changepoint is the desired outcome.
    pub fn is_harmful(self) -> bool {
        matches!(self, ScenarioKind::ExtremeCovariate | ScenarioKind::Concept)
    }

    pub fn is_covariate(self) -> bool {
        matches!(
            self,
            ScenarioKind::BenignCovariate | ScenarioKind::ExtremeCovariate
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    pub dim: usize,
    /// First post-change event index.
    pub changepoint: u64,
    pub horizon: u64,
    pub n_train: usize,
    pub n_calibration: usize,
    pub pool_size: usize,
    pub tilt_lambda: f64,
    pub tilt: FeatureFn,
    pub intercept: f64,
    pub slopes: Vec<f64>,
    pub kink: f64,
    pub kink_at: f64,
    pub noise: f64,
    pub noise_growth: f64,
    pub concept_delta: f64,
    pub concept_map: FeatureFn,
    pub seed: u64,
}

pub const PRESETS: [&str; 7] = [
    "none",
    "fig1a",
    "fig1b",
    "fig1c",
    "meps-like",
    "superconductivity-like",
    "bike-like",
];

impl Scenario {
    fn base(name: &str, kind: ScenarioKind, dim: usize) -> Self {
        let mut slopes = vec![0.0; dim];
        slopes[0] = 1.0;
        for (j, s) in slopes.iter_mut().enumerate().skip(1) {
            *s = 0.5 / j as f64;
        }
        Self {
            name: name.to_string(),
            kind,
            dim,
            changepoint: 500,
            horizon: 3000,
            n_train: 1000,
            n_calibration: 2000,
            pool_size: 20_000,
            tilt_lambda: 0.0,
            tilt: FeatureFn::coordinate(dim, 0, false),
            intercept: 0.0,
            slopes,
            kink: 3.0,
            kink_at: 2.0,
            noise: 0.5,
            noise_growth: 0.15,
            concept_delta: 0.0,
            concept_map: FeatureFn::Constant { value: 1.0 },
            seed: 0,
        }
    }

    /// Named scenario presets.
    pub fn preset(name: &str) -> Result<Self> {
        let s = match name {
            "none" => Self::base(name, ScenarioKind::None, 1),
            // Shift toward small inputs, where the label noise is low. A large
            // calibration set keeps the weighted effective sample size high
            // once it is frozen.
            "fig1a" => Self {
                tilt_lambda: 1.5,
                n_calibration: 6000,
                tilt: FeatureFn::coordinate(1, 0, true),
                ..Self::base(name, ScenarioKind::BenignCovariate, 1)
            },
            // shift into the far upper tail, where the model is wrong
            "fig1b" => Self {
                tilt_lambda: 3.5,
                tilt: FeatureFn::coordinate(1, 0, false),
                ..Self::base(name, ScenarioKind::ExtremeCovariate, 1)
            },
            "fig1c" => Self {
                concept_delta: 2.0,
                concept_map: FeatureFn::Constant { value: 1.0 },
                ..Self::base(name, ScenarioKind::Concept, 1)
            },
            "meps-like" => Self {
                tilt_lambda: 5.0,
                tilt: FeatureFn::Linear {
                    weights: vec![-0.2, 0.1, 0.0, 0.0],
                    bias: 0.0,
                },
                ..Self::base(name, ScenarioKind::BenignCovariate, 4)
            },
            "superconductivity-like" => Self {
                tilt_lambda: 2.5,
                tilt: FeatureFn::Linear {
                    weights: vec![-0.4, 0.0, 0.2, 0.0, 0.0, 0.0],
                    bias: 0.0,
                },
                ..Self::base(name, ScenarioKind::BenignCovariate, 6)
            },
            "bike-like" => Self {
                tilt_lambda: 5.0,
                tilt: FeatureFn::Linear {
                    weights: vec![-0.2, 0.0, 0.1],
                    bias: 0.0,
                },
                ..Self::base(name, ScenarioKind::BenignCovariate, 3)
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario preset {other:?}; known presets: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(s)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario file: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.slopes.len() != self.dim {
            return fail(format!(
                "slopes must have one entry per input (dim {})",
                self.dim
            ));
        }
        if self.changepoint < 1 || self.horizon < 1 {
            return fail("changepoint and horizon must be at least 1".into());
        }
        if self.n_train <= self.dim || self.n_calibration < 2 || self.pool_size == 0 {
            return fail("training, calibration and pool sizes are too small".into());
        }
        if !(self.tilt_lambda >= 0.0 && self.tilt_lambda.is_finite()) {
            return fail(format!(
                "tilt lambda {} must be finite and nonnegative",
                self.tilt_lambda
            ));
        }
        for f in [&self.tilt, &self.concept_map] {
            if f.max_feature().is_some_and(|k| k >= self.dim) {
                return fail("feature function reads beyond the input dimension".into());
            }
            if let FeatureFn::Linear { weights, .. } = f {
                if weights.len() != self.dim {
                    return fail("linear feature function has the wrong length".into());
                }
            }
        }
        let numbers = [
            self.intercept,
            self.kink,
            self.kink_at,
            self.noise,
            self.noise_growth,
            self.concept_delta,
        ];
        if numbers.iter().chain(&self.slopes).any(|v| !v.is_finite()) || self.noise < 0.0 {
            return fail("label model parameters must be finite, noise nonnegative".into());
        }
        Ok(())
    }

    fn draw_features(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Noise-free part of the label model.
    pub fn mean_label(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.slopes.iter().zip(x).map(|(b, v)| b * v).sum();
        let excess = (x[0] - self.kink_at).max(0.0);
        self.intercept + lin + self.kink * excess * excess
    }

    pub fn noise_scale(&self, x: &[f64]) -> f64 {
        self.noise * (self.noise_growth * x[0]).exp()
    }

    fn draw_label(&self, x: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        let eps: f64 = rng.sample(StandardNormal);
        self.mean_label(x) + self.noise_scale(x) * eps
    }

    /// IID `(features, label)` pairs from the source distribution.
    pub fn sample_source(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(Vec<f64>, f64)>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Config("sample size must be at least 1".into()));
        }
        Ok((0..n)
            .map(|_| {
                let x = self.draw_features(rng);
                let y = self.draw_label(&x, rng);
                (x, y)
            })
            .collect())
    }

    /// Post-change label under this scenario's concept map.
    pub fn apply_concept_shift(&self, x: &[f64], y: f64) -> f64 {
        if self.kind == ScenarioKind::Concept {
            y + self.concept_delta * self.concept_map.eval(x)
        } else {
            y
        }
    }

    /// Exact density ratio of tilted-pool resampling relative to uniform pool
    /// resampling: `exp(lambda h(x)) / mean_pool exp(lambda h)`.
    pub fn oracle_ratio(&self, pool: &[Vec<f64>]) -> Result<AnalyticRatio> {
        if !self.kind.is_covariate() {
            return Err(Error::Config(format!(
                "scenario {:?} has no covariate-shift ratio",
                self.kind
            )));
        }
        if pool.is_empty() {
            return Err(Error::InvalidInput("empty resampling pool".into()));
        }
        let logits: Vec<f64> = pool
            .iter()
            .map(|x| self.tilt_lambda * self.tilt.eval(x))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = logits.iter().map(|l| (l - max).exp()).sum::<f64>() / pool.len() as f64;
        Ok(AnalyticRatio {
            tilt: self.tilt.clone(),
            lambda: self.tilt_lambda,
            log_normalizer: max + mean.ln(),
        })
    }

    /// Generates the calibration set and event stream for one seed.
    pub fn generate(&self, seed: u64) -> Result<SimulatedStream> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = self.sample_source(self.n_train, &mut rng)?;
        let model = LinearModel::fit(&train)?;
        let calibration = self
            .sample_source(self.n_calibration, &mut rng)?
            .into_iter()
            .map(|(x, y)| LabeledPoint {
                prediction: model.predict(&x),
                features: x,
                label: y,
            })
            .collect();
        let pool: Vec<(Vec<f64>, f64)> = if self.kind.is_covariate() {
            self.sample_source(self.pool_size, &mut rng)?
        } else {
            Vec::new()
        };
        let pool_x: Vec<Vec<f64>> = pool.iter().map(|(x, _)| x.clone()).collect();
        let sampler = if self.kind.is_covariate() {
            Some(TiltedSampler::new(&pool_x, &self.tilt, self.tilt_lambda)?)
        } else {
            None
        };
        let mut events = Vec::with_capacity(self.horizon as usize);
        for t in 1..=self.horizon {
            let post = t >= self.changepoint;
            let (x, y) = match (&sampler, post) {
                (Some(s), true) => pool[s.draw(&mut rng)].clone(),
                _ => {
                    let x = self.draw_features(&mut rng);
                    let y = self.draw_label(&x, &mut rng);
                    let y = if post {
                        self.apply_concept_shift(&x, y)
                    } else {
                        y
                    };
                    (x, y)
                }
            };
            events.push(StreamEvent {
                index: t,
                prediction: model.predict(&x),
                features: x,
                label: y,
            });
        }
        let oracle_ratio = if self.kind.is_covariate() {
            Some(self.oracle_ratio(&pool_x)?)
        } else {
            None
        };
        Ok(SimulatedStream {
            calibration,
            events,
            changepoint: self.changepoint,
            oracle_ratio,
        })
    }
}

/// Calibration data and events for one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStream {
    pub calibration: Vec<LabeledPoint>,
    pub events: Vec<StreamEvent>,
    pub changepoint: u64,
    pub oracle_ratio: Option<AnalyticRatio>,
}

/// Ordinary least squares with an intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn fit(data: &[(Vec<f64>, f64)]) -> Result<Self> {
        let dim = data.first().map(|(x, _)| x.len()).unwrap_or(0);
        if data.len() <= dim {
            return Err(Error::InvalidInput(
                "too few training points for least squares".into(),
            ));
        }
        let design = DMatrix::from_fn(data.len(), dim + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                data[i].0[j - 1]
            }
        });
        let target = DVector::from_iterator(data.len(), data.iter().map(|(_, y)| *y));
        let beta = design
            .svd(true, true)
            .solve(&target, 1e-12)
            .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
        Ok(Self {
            intercept: beta[0],
            coefficients: beta.iter().skip(1).copied().collect(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }
}

/// Index probabilities `exp(lambda h(x_i)) / sum_j exp(lambda h(x_j))`,
/// computed with the maximum subtracted.
pub fn tilt_probabilities(pool: &[Vec<f64>], h: &FeatureFn, lambda: f64) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty resampling pool".into()));
    }
    if !lambda.is_finite() {
        return Err(Error::InvalidInput(format!(
            "tilt lambda {lambda} is not finite"
        )));
    }
    let logits: Vec<f64> = pool.iter().map(|x| lambda * h.eval(x)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// One tilted draw from `pool`; returns the chosen index.
pub fn tilted_sample(
    pool: &[Vec<f64>],
    h: &FeatureFn,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    Ok(TiltedSampler::new(pool, h, lambda)?.draw(rng))
}

/// Repeated tilted draws from a fixed pool.
#[derive(Debug, Clone)]
pub struct TiltedSampler {
    index: WeightedIndex<f64>,
}

impl TiltedSampler {
    pub fn new(pool: &[Vec<f64>], h: &FeatureFn, lambda: f64) -> Result<Self> {
        let probs = tilt_probabilities(pool, h, lambda)?;
        let index =
            WeightedIndex::new(&probs).map_err(|e| Error::Numeric(format!("tilt weights: {e}")))?;
        Ok(Self { index })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        self.index.sample(rng)
    }
}
