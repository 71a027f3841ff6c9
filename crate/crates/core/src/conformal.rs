//! Nonconformity scores, standard and weighted conformal p-values, weighted
//! quantiles and the prediction intervals they induce.
//!
//! All p-value routines follow the randomized tie-breaking convention: the
//! test point always ties with itself, so the sum over "equal" scores includes
//! the test score's own weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// Absolute tolerance on the total mass of a [`WeightVector`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Largest point count accepted by [`oracle_weights_bruteforce`].
pub const ORACLE_MAX_POINTS: usize = 8;

/// `|label - prediction|`.
pub fn score_abs_residual(prediction: f64, label: f64) -> Result<f64> {
    if !prediction.is_finite() || !label.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite residual inputs (prediction={prediction}, label={label})"
        )));
    }
    Ok((label - prediction).abs())
}

/// One-minus-probability score for classifiers, `1 - p(y | x)`.
pub fn score_one_minus_prob(prob_of_label: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&prob_of_label) {
        return Err(Error::InvalidInput(format!(
            "class probability {prob_of_label} outside [0, 1]"
        )));
    }
    Ok(1.0 - prob_of_label)
}

/// Euclidean distance from `x` to its nearest neighbour in `reference`.
///
/// Coordinates are used as given; see [`NearestNeighborScorer`] for the
/// standardized variant the monitor uses.
pub fn score_nn_distance(x: &[f64], reference: &[Vec<f64>]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidState(
            "empty nearest-neighbour reference set".into(),
        ));
    }
    let mut best = f64::INFINITY;
    for r in reference {
        if r.len() != x.len() {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: point has {} features, reference has {}",
                x.len(),
                r.len()
            )));
        }
        let d2: f64 = r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best {
            best = d2;
        }
    }
    Ok(best.sqrt())
}

/// Per-feature z-scoring with statistics frozen at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits means and (population) standard deviations; zero-variance
    /// features get a unit scale.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::InvalidState("cannot fit a standardizer on no data".into()))?;
        let dim = first.len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in features {
            if row.len() != dim {
                return Err(Error::InvalidInput("ragged feature rows".into()));
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in features {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "expected {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }
}

/// Nearest-neighbour feature score against a fixed, standardized reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestNeighborScorer {
    standardizer: Standardizer,
    reference: Vec<Vec<f64>>,
}

impl NearestNeighborScorer {
    /// `reference` is given in raw feature units.
    pub fn new(standardizer: Standardizer, reference: &[Vec<f64>]) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::InvalidState(
                "empty nearest-neighbour reference set".into(),
            ));
        }
        let reference = reference
            .iter()
            .map(|r| standardizer.apply(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            standardizer,
            reference,
        })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let z = self.standardizer.apply(x)?;
        score_nn_distance(&z, &self.reference)
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }
}

/// Calibration scores (with their feature vectors), optionally frozen.
///
/// A sorted copy of the scores is maintained so that uniform-weight p-values
/// and quantiles cost `O(log n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    scores: Vec<f64>,
    features: Vec<Vec<f64>>,
    sorted: Vec<f64>,
    frozen: bool,
}

impl CalibrationSet {
    pub fn new(scores: Vec<f64>, features: Vec<Vec<f64>>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput(
                "calibration set must be nonempty".into(),
            ));
        }
        if scores.len() != features.len() {
            return Err(Error::InvalidInput(format!(
                "{} calibration scores but {} feature rows",
                scores.len(),
                features.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite calibration score {bad}"
            )));
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            scores,
            features,
            sorted,
            frozen: false,
        })
    }

    /// Scores only; feature rows are empty.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        let features = vec![Vec::new(); scores.len()];
        Self::new(scores, features)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn sorted_scores(&self) -> &[f64] {
        &self.sorted
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn push(&mut self, score: f64, features: Vec<f64>) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidState("calibration set is frozen".into()));
        }
        if !score.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite calibration score {score}"
            )));
        }
        let at = self.sorted.partition_point(|v| *v <= score);
        self.sorted.insert(at, score);
        self.scores.push(score);
        self.features.push(features);
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Counts of calibration scores strictly greater than and equal to `v`.
    fn rank_counts(&self, v: f64) -> (usize, usize) {
        let le = self.sorted.partition_point(|s| *s <= v);
        let lt = self.sorted.partition_point(|s| *s < v);
        (self.sorted.len() - le, le - lt)
    }
}

/// Normalized nonnegative weights over `n` calibration points plus one test
/// point (always the last entry).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    repr: WeightRepr,
}

#[derive(Debug, Clone, PartialEq)]
enum WeightRepr {
    /// `1/len` everywhere; evaluated through the counting path.
    Uniform(usize),
    Explicit(Vec<f64>),
}

impl WeightVector {
    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidWeights(
                "weight vector must be nonempty".into(),
            ));
        }
        Ok(Self {
            repr: WeightRepr::Uniform(len),
        })
    }

    /// Validates already-normalized weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights(
                "weight vector must be nonempty".into(),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "weight {w} is negative or non-finite"
            )));
        }
        let total: f64 = weights.iter().copied().collect::<CompensatedSum>().value();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidWeights(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self {
            repr: WeightRepr::Explicit(weights),
        })
    }

    /// Normalizes nonnegative raw masses. If every entry is equal the result
    /// is the uniform vector, so constant ratios reduce to standard p-values.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidWeights(
                "weight vector must be nonempty".into(),
            ));
        }
        if let Some(w) = raw.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "raw weight {w} is negative or non-finite"
            )));
        }
        if raw.iter().all(|w| *w == raw[0]) && raw[0] > 0.0 {
            return Self::uniform(raw.len());
        }
        let total = raw.iter().copied().collect::<CompensatedSum>().value();
        if total <= 0.0 {
            return Err(Error::InvalidWeights(
                "raw weights have zero total mass".into(),
            ));
        }
        Ok(Self {
            repr: WeightRepr::Explicit(raw.iter().map(|w| w / total).collect()),
        })
    }

    pub fn len(&self) -> usize {
        match &self.repr {
            WeightRepr::Uniform(n) => *n,
            WeightRepr::Explicit(w) => w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.repr, WeightRepr::Uniform(_))
    }

    pub fn get(&self, i: usize) -> f64 {
        match &self.repr {
            WeightRepr::Uniform(n) => 1.0 / *n as f64,
            WeightRepr::Explicit(w) => w[i],
        }
    }

    /// Weight on the test point.
    pub fn test_weight(&self) -> f64 {
        self.get(self.len() - 1)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// A conformal p-value together with the randomizer that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PValue {
    pub value: f64,
    pub u: f64,
    /// True when the noninformativeness penalty replaced the randomized value.
    pub penalized: bool,
}

fn check_u(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "tie-breaking randomizer {u} outside [0, 1]"
        )))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("alpha {alpha} outside (0, 1)")))
    }
}

/// Randomized conformal p-value over `n` calibration scores plus the test
/// score: `(#{v_i > v} + u * #{v_i = v}) / (n + 1)`, the test point tying
/// with itself.
pub fn standard_p_value(cal: &CalibrationSet, test_score: f64, u: f64) -> Result<PValue> {
    check_u(u)?;
    if !test_score.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite test score {test_score}"
        )));
    }
    let (gt, eq) = cal.rank_counts(test_score);
    Ok(PValue {
        value: counting_p_value(gt, eq + 1, cal.len() + 1, u),
        u,
        penalized: false,
    })
}

fn counting_p_value(gt: usize, eq: usize, total: usize, u: f64) -> f64 {
    (gt as f64 + u * eq as f64) / total as f64
}

/// Weighted conformal p-value `sum_i w_i [1{v_i > v_test} + u 1{v_i = v_test}]`.
///
/// `scores` holds the calibration scores followed by the test score, and
/// `test_index` must address that last entry.
pub fn weighted_p_value(
    scores: &[f64],
    weights: &WeightVector,
    test_index: usize,
    u: f64,
) -> Result<PValue> {
    check_u(u)?;
    let (gt_mass, eq_mass) = weighted_masses(scores, weights, test_index)?;
    let value = match gt_mass {
        Mass::Counts { gt, eq, total } => counting_p_value(gt, eq, total, u),
        Mass::Weighted { gt } => gt + u * eq_mass,
    };
    Ok(PValue {
        value: value.clamp(0.0, 1.0),
        u,
        penalized: false,
    })
}

/// Weighted p-value that penalizes noninformative prediction sets: when the
/// test weight reaches `alpha` the set is the whole label space, and the
/// derandomized (`u = 0`) value is returned instead.
pub fn penalized_weighted_p_value(
    scores: &[f64],
    weights: &WeightVector,
    alpha: f64,
    u: f64,
) -> Result<PValue> {
    check_alpha(alpha)?;
    let test_index = scores.len().saturating_sub(1);
    if weights.test_weight() < alpha {
        weighted_p_value(scores, weights, test_index, u)
    } else {
        check_u(u)?;
        let p = weighted_p_value(scores, weights, test_index, 0.0)?;
        Ok(PValue {
            value: p.value,
            u,
            penalized: true,
        })
    }
}

enum Mass {
    Counts { gt: usize, eq: usize, total: usize },
    Weighted { gt: f64 },
}

fn weighted_masses(
    scores: &[f64],
    weights: &WeightVector,
    test_index: usize,
) -> Result<(Mass, f64)> {
    if scores.is_empty() || test_index + 1 != scores.len() {
        return Err(Error::InvalidInput(
            "test_index must address the last score".into(),
        ));
    }
    if weights.len() != scores.len() {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {} scores",
            weights.len(),
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {bad}")));
    }
    let v = scores[test_index];
    match &weights.repr {
        WeightRepr::Uniform(total) => {
            let gt = scores.iter().filter(|s| **s > v).count();
            let eq = scores.iter().filter(|s| **s == v).count();
            Ok((
                Mass::Counts {
                    gt,
                    eq,
                    total: *total,
                },
                0.0,
            ))
        }
        WeightRepr::Explicit(w) => {
            let mut gt = CompensatedSum::new();
            let mut eq = CompensatedSum::new();
            for (s, wi) in scores.iter().zip(w) {
                if *s > v {
                    gt.add(*wi);
                } else if *s == v {
                    eq.add(*wi);
                }
            }
            Ok((Mass::Weighted { gt: gt.value() }, eq.value()))
        }
    }
}

/// A (1 - alpha) quantile of a weighted score distribution that places the
/// test weight on `+infinity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantile {
    Finite(f64),
    Infinite,
}

impl Quantile {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Quantile::Infinite)
    }
}

/// Smallest calibration score whose cumulative weight reaches `1 - alpha`
/// under `sum_i w_i delta_{v_i} + w_test delta_{+inf}`.
///
/// The comparison is carried out on the upper tail (`w_test` plus the mass
/// strictly above a candidate must not exceed `alpha`), which is the same
/// mass the conservative p-value sums. A test weight above `alpha` always
/// yields [`Quantile::Infinite`].
pub fn weighted_quantile(
    cal: &CalibrationSet,
    weights: &WeightVector,
    alpha: f64,
) -> Result<Quantile> {
    check_alpha(alpha)?;
    let n = cal.len();
    if weights.len() != n + 1 {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {} calibration scores plus test",
            weights.len(),
            n
        )));
    }
    match &weights.repr {
        WeightRepr::Uniform(total) => Ok(uniform_quantile(cal.sorted_scores(), *total, alpha)),
        WeightRepr::Explicit(w) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, b| cal.scores[*b].total_cmp(&cal.scores[*a]));
            Ok(explicit_quantile(&cal.scores, w, &order, alpha))
        }
    }
}

fn uniform_quantile(sorted: &[f64], total: usize, alpha: f64) -> Quantile {
    let mut answer = Quantile::Infinite;
    let mut i = sorted.len();
    // Walk distinct values from the top; `above` counts scores strictly greater.
    while i > 0 {
        let v = sorted[i - 1];
        let above = sorted.len() - i;
        if (above + 1) as f64 / total as f64 <= alpha {
            answer = Quantile::Finite(v);
        } else {
            break;
        }
        while i > 0 && sorted[i - 1] == v {
            i -= 1;
        }
    }
    answer
}

/// `order` lists calibration indices by descending score.
fn explicit_quantile(scores: &[f64], w: &[f64], order: &[usize], alpha: f64) -> Quantile {
    let test_w = w[w.len() - 1];
    let mut tail = CompensatedSum::new();
    tail.add(test_w);
    let mut answer = Quantile::Infinite;
    let mut k = 0;
    while k < order.len() {
        let v = scores[order[k]];
        if tail.value() <= alpha {
            answer = Quantile::Finite(v);
        } else {
            break;
        }
        while k < order.len() && scores[order[k]] == v {
            tail.add(w[order[k]]);
            k += 1;
        }
    }
    answer
}

/// Weighted quantile for calibration scores already in descending order,
/// with weights given in that same order (test weight last).
pub(crate) fn quantile_descending(desc_scores: &[f64], w: &[f64], alpha: f64) -> Quantile {
    let order: Vec<usize> = (0..desc_scores.len()).collect();
    explicit_quantile(desc_scores, w, &order, alpha)
}

/// Prediction interval in label units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    #[serde(with = "nullable_float")]
    pub lower: f64,
    #[serde(with = "nullable_float")]
    pub upper: f64,
    /// False when the interval is the whole real line.
    pub informative: bool,
}

impl PredictionInterval {
    pub fn contains(&self, label: f64) -> bool {
        !self.informative || (self.lower <= label && label <= self.upper)
    }

    pub fn width(&self) -> f64 {
        if self.informative {
            self.upper - self.lower
        } else {
            f64::INFINITY
        }
    }
}

/// Inverts the absolute-residual score: `[prediction - q, prediction + q]`.
pub fn prediction_interval(prediction: f64, q: Quantile) -> PredictionInterval {
    match q {
        Quantile::Finite(q) => PredictionInterval {
            lower: prediction - q,
            upper: prediction + q,
            informative: true,
        },
        Quantile::Infinite => PredictionInterval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            informative: false,
        },
    }
}

/// Infinite bounds serialize as `null`.
mod nullable_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Exact oracle weights by enumerating orderings of `points`.
///
/// `joint_density` receives the points in sequence order. Position
/// `points.len() - 1` is the test slot; the returned weight for index `i` is
/// the probability that point `i` occupies it. Positions listed in
/// `fixed_positions` are held in place (the restricted-permutation variant).
pub fn oracle_weights_bruteforce<T, F>(
    joint_density: F,
    points: &[T],
    fixed_positions: &[usize],
) -> Result<WeightVector>
where
    F: Fn(&[&T]) -> f64,
{
    let m = points.len();
    if m > ORACLE_MAX_POINTS {
        return Err(Error::ComplexityGuard {
            points: m,
            max: ORACLE_MAX_POINTS,
        });
    }
    if m == 0 {
        return Err(Error::InvalidInput("no points to permute".into()));
    }
    if fixed_positions.iter().any(|p| *p >= m - 1) {
        return Err(Error::InvalidInput(
            "fixed positions must precede the test slot".into(),
        ));
    }
    let free: Vec<usize> = (0..m).filter(|p| !fixed_positions.contains(p)).collect();
    let mut perm = free.clone();
    let mut numer = vec![CompensatedSum::new(); m];
    let mut denom = CompensatedSum::new();
    let mut ordering: Vec<usize> = (0..m).collect();

    let mut visit = |perm: &[usize]| {
        for (slot, idx) in free.iter().zip(perm) {
            ordering[*slot] = *idx;
        }
        let seq: Vec<&T> = ordering.iter().map(|i| &points[*i]).collect();
        let f = joint_density(&seq);
        numer[ordering[m - 1]].add(f);
        denom.add(f);
    };

    // Heap's algorithm over the free positions.
    let k = perm.len();
    let mut c = vec![0usize; k];
    visit(&perm);
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }

    let total = denom.value();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Numeric(
            "joint density has no mass on any ordering".into(),
        ));
    }
    WeightVector::from_weights(numer.iter().map(|s| s.value() / total).collect())
}
