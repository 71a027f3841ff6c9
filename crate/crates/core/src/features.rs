//! Scalar functions of a feature vector, used for tilting, concept maps and
//! analytic density ratios. Serializable so scenarios and snapshots can carry
//! them.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureFn {
    /// `bias + weights . z`
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
    /// `|z[feature] - center|`
    AbsDeviation {
        feature: usize,
        center: f64,
    },
    Constant {
        value: f64,
    },
}

impl FeatureFn {
    /// `z[feature]` (or `-z[feature]` when `negate`).
    pub fn coordinate(dim: usize, feature: usize, negate: bool) -> Self {
        let mut weights = vec![0.0; dim];
        weights[feature] = if negate { -1.0 } else { 1.0 };
        FeatureFn::Linear { weights, bias: 0.0 }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            FeatureFn::Linear { weights, bias } => {
                bias + weights.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
            }
            FeatureFn::AbsDeviation { feature, center } => (z[*feature] - center).abs(),
            FeatureFn::Constant { value } => *value,
        }
    }

    /// Largest feature index the function reads, if any.
    pub fn max_feature(&self) -> Option<usize> {
        match self {
            FeatureFn::Linear { weights, .. } => weights.len().checked_sub(1),
            FeatureFn::AbsDeviation { feature, .. } => Some(*feature),
            FeatureFn::Constant { .. } => None,
        }
    }
}
