//! Jumper betting strategies that turn a stream of p-values into a
//! nonnegative test-martingale wealth process.
//!
//! Each simple jumper keeps one capital per bet `eps in {-1, 0, +1}`. Before
//! every bet a fraction `J` of the total wealth is redistributed evenly over
//! the three bets; the composite jumper averages simple jumpers over a grid
//! of jump rates. Strategies only ever see past p-values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jump rates averaged by [`CompositeJumper::default`].
pub const DEFAULT_JUMP_RATES: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

const RESCALE_HIGH: f64 = 1e300;
const RESCALE_LOW: f64 = 1e-300;

/// A bet direction in the betting space `{-1, 0, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BettingEpsilon {
    /// Bets on small p-values.
    Down,
    /// Does not bet.
    Flat,
    /// Bets on large p-values.
    Up,
}

impl BettingEpsilon {
    pub const ALL: [BettingEpsilon; 3] = [
        BettingEpsilon::Down,
        BettingEpsilon::Flat,
        BettingEpsilon::Up,
    ];

    pub fn value(self) -> f64 {
        match self {
            BettingEpsilon::Down => -1.0,
            BettingEpsilon::Flat => 0.0,
            BettingEpsilon::Up => 1.0,
        }
    }
}

/// `1 + eps (p - 1/2)`, a density on `[0, 1]` with values in `[0.5, 1.5]`.
pub fn betting_function(epsilon: BettingEpsilon, p: f64) -> f64 {
    1.0 + epsilon.value() * (p - 0.5)
}

/// Simple jumper with jump rate `J`.
///
/// Capitals are stored relative to a power-of-two scale `2^scale_exp`, which
/// only moves away from zero when the wealth leaves `[1e-300, 1e300]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleJumper {
    jump_rate: f64,
    capitals: [f64; 3],
    wealth: f64,
    scale_exp: i32,
}

impl SimpleJumper {
    pub fn new(jump_rate: f64) -> Result<Self> {
        if !(jump_rate > 0.0 && jump_rate <= 1.0) {
            return Err(Error::Config(format!(
                "jump rate {jump_rate} outside (0, 1]"
            )));
        }
        Ok(Self {
            jump_rate,
            capitals: [1.0 / 3.0; 3],
            wealth: 1.0,
            scale_exp: 0,
        })
    }

    pub fn jump_rate(&self) -> f64 {
        self.jump_rate
    }

    /// Jump, then bet on `p`.
    pub fn step(&mut self, p: f64) {
        debug_assert!((0.0..=1.0).contains(&p), "p-value {p} outside [0, 1]");
        let p = p.clamp(0.0, 1.0);
        let share = self.wealth / 3.0;
        if self.jump_rate >= 1.0 {
            // Full redistribution: the three bets integrate to 3, so wealth is unchanged.
            for (c, eps) in self.capitals.iter_mut().zip(BettingEpsilon::ALL) {
                *c = share * betting_function(eps, p);
            }
            return;
        }
        let keep = 1.0 - self.jump_rate;
        for (c, eps) in self.capitals.iter_mut().zip(BettingEpsilon::ALL) {
            *c = (keep * *c + self.jump_rate * share) * betting_function(eps, p);
        }
        self.wealth = self.capitals.iter().sum();
        self.rescale();
    }

    fn rescale(&mut self) {
        if self.wealth > RESCALE_HIGH || (self.wealth < RESCALE_LOW && self.wealth > 0.0) {
            let k = self.wealth.log2().floor() as i32;
            let factor = 2f64.powi(-k);
            for c in &mut self.capitals {
                *c *= factor;
            }
            self.wealth *= factor;
            self.scale_exp += k;
        }
    }

    /// Wealth ratio `M_t / M_0`, saturating at `f64::MAX`.
    pub fn wealth(&self) -> f64 {
        unscale(self.wealth, self.scale_exp)
    }

    pub fn log_wealth(&self) -> f64 {
        self.wealth.ln() + self.scale_exp as f64 * std::f64::consts::LN_2
    }

    /// Capitals on `(Down, Flat, Up)` in true units.
    pub fn capitals(&self) -> [f64; 3] {
        self.capitals.map(|c| unscale(c, self.scale_exp))
    }

    fn is_unscaled(&self) -> bool {
        self.scale_exp == 0
    }
}

fn unscale(v: f64, exp: i32) -> f64 {
    if exp == 0 {
        return v;
    }
    let scaled = v * 2f64.powi(exp.clamp(-1074, 1023));
    if exp.abs() <= 1023 && scaled.is_finite() && scaled > 0.0 {
        scaled
    } else {
        let log = v.ln() + exp as f64 * std::f64::consts::LN_2;
        log.exp().min(f64::MAX)
    }
}

/// Arithmetic mean of simple jumpers over a grid of jump rates.
///
/// With `J = 1` in the grid that component is identically one, so the
/// composite wealth never falls below `1 / grid_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeJumper {
    components: Vec<SimpleJumper>,
}

impl CompositeJumper {
    pub fn new(jump_rates: &[f64]) -> Result<Self> {
        if jump_rates.is_empty() {
            return Err(Error::Config(
                "composite jumper needs at least one jump rate".into(),
            ));
        }
        let components = jump_rates
            .iter()
            .map(|j| SimpleJumper::new(*j))
            .collect::<Result<_>>()?;
        Ok(Self { components })
    }

    pub fn components(&self) -> &[SimpleJumper] {
        &self.components
    }

    pub fn step(&mut self, p: f64) {
        for c in &mut self.components {
            c.step(p);
        }
    }

    /// Mean component wealth, saturating at `f64::MAX`.
    pub fn wealth(&self) -> f64 {
        if self.components.iter().all(SimpleJumper::is_unscaled) {
            let total: f64 = self.components.iter().map(|c| c.wealth).sum();
            return total / self.components.len() as f64;
        }
        self.log_wealth().exp().min(f64::MAX)
    }

    pub fn log_wealth(&self) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(SimpleJumper::log_wealth)
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        max + s.ln() - (self.components.len() as f64).ln()
    }
}

impl Default for CompositeJumper {
    fn default() -> Self {
        Self::new(&DEFAULT_JUMP_RATES).expect("default jump rates are valid")
    }
}
