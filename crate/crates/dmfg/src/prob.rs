//! Probability, policy, and distance primitives shared by every other module.
//!
//! The central object is [`Distribution`]: a probability vector on a finite
//! support, used both for mean fields over states and for mean action
//! distributions built from one-hot encodings. All values are immutable after
//! construction and safe to share across workers.

use thiserror::Error;

/// Absolute tolerance inside which constructed weights must sum to 1.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Sums within this distance of 1 are silently renormalized; beyond it the
/// constructor rejects, so float drift is absorbed without masking logic bugs.
pub const RENORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ProbError {
    #[error("weights must be non-negative, got {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, too far from 1 to renormalize")]
    BadSum { sum: f64 },
    #[error("distribution support may not be empty")]
    EmptySupport,
    #[error("non-finite entry {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("support sizes differ: {left} vs {right}")]
    SupportMismatch { left: usize, right: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("action index {action} out of range for {action_count} actions")]
    ActionOutOfRange { action: usize, action_count: usize },
    #[error("no actions observed in the neighbourhood")]
    EmptyNeighborhood,
}

/// A probability vector on a finite support.
///
/// Invariants: every weight is >= 0 and the weights sum to 1 within
/// [`SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    weights: Vec<f64>,
}

impl Distribution {
    /// Builds a distribution, renormalizing small float drift.
    ///
    /// Weights with magnitude below 1e-12 of a negative value are clamped to
    /// zero; anything more negative is rejected.
    pub fn new(weights: Vec<f64>) -> Result<Self, ProbError> {
        if weights.is_empty() {
            return Err(ProbError::EmptySupport);
        }
        let mut weights = weights;
        for (i, w) in weights.iter_mut().enumerate() {
            if !w.is_finite() {
                return Err(ProbError::NonFinite { index: i, value: *w });
            }
            if *w < 0.0 {
                if *w > -1e-12 {
                    *w = 0.0;
                } else {
                    return Err(ProbError::NegativeWeight { index: i, value: *w });
                }
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() >= RENORM_TOLERANCE {
            return Err(ProbError::BadSum { sum });
        }
        if (sum - 1.0).abs() > 0.0 {
            for w in &mut weights {
                *w /= sum;
            }
        }
        Ok(Self { weights })
    }

    /// Uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs a non-empty support");
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Point mass on outcome `index`.
    pub fn delta(n: usize, index: usize) -> Self {
        assert!(index < n, "delta index out of range");
        let mut weights = vec![0.0; n];
        weights[index] = 1.0;
        Self { weights }
    }

    pub fn support_size(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, index: usize) -> f64 {
        self.weights[index]
    }

    /// Zero-pads the support on the right; mass is unchanged.
    pub fn padded(&self, support_size: usize) -> Self {
        assert!(support_size >= self.weights.len());
        let mut weights = self.weights.clone();
        weights.resize(support_size, 0.0);
        Self { weights }
    }

    /// Samples an outcome index using the caller's RNG.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen::<f64>();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }
}

/// One row of action values Q(s, ·) for a single state.
#[derive(Debug, Clone, PartialEq)]
pub struct QRow {
    values: Vec<f64>,
}

impl QRow {
    pub fn new(values: Vec<f64>) -> Result<Self, ProbError> {
        if values.is_empty() {
            return Err(ProbError::EmptySupport);
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(ProbError::NonFinite { index: i, value: *v });
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Index of the maximal value, ties broken toward the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-state action distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePolicy {
    rows: Vec<Distribution>,
}

impl DiscretePolicy {
    pub fn new(rows: Vec<Distribution>) -> Result<Self, ProbError> {
        if rows.is_empty() {
            return Err(ProbError::EmptySupport);
        }
        let width = rows[0].support_size();
        for r in &rows {
            if r.support_size() != width {
                return Err(ProbError::SupportMismatch {
                    left: width,
                    right: r.support_size(),
                });
            }
        }
        Ok(Self { rows })
    }

    /// Deterministic policy: at each state, all mass on the given action.
    pub fn deterministic(actions: &[usize], action_count: usize) -> Self {
        let rows = actions
            .iter()
            .map(|&a| Distribution::delta(action_count, a))
            .collect();
        Self { rows }
    }

    /// Uniform policy over `action_count` actions at each of `state_count` states.
    pub fn uniform(state_count: usize, action_count: usize) -> Self {
        Self {
            rows: vec![Distribution::uniform(action_count); state_count],
        }
    }

    pub fn state_count(&self) -> usize {
        self.rows.len()
    }

    pub fn action_count(&self) -> usize {
        self.rows[0].support_size()
    }

    pub fn row(&self, state: usize) -> &Distribution {
        &self.rows[state]
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.rows[state].get(action)
    }
}

/// Boltzmann (softmax) policy over a row of action values.
///
/// The exponent is `+temperature * q`: larger `temperature` concentrates mass
/// on the argmax, smaller flattens toward uniform. Computed with
/// max-subtraction so |q| up to ~700 cannot overflow.
pub fn boltzmann_policy(q: &QRow, temperature: f64) -> Result<Distribution, ProbError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(ProbError::BadTemperature(temperature));
    }
    let max = q.max();
    let exps: Vec<f64> = q
        .values()
        .iter()
        .map(|v| (temperature * (v - max)).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(Distribution {
        weights: exps.into_iter().map(|e| e / sum).collect(),
    })
}

/// L1 distance between two distributions on the same support.
pub fn l1_distance(a: &Distribution, b: &Distribution) -> Result<f64, ProbError> {
    if a.support_size() != b.support_size() {
        return Err(ProbError::SupportMismatch {
            left: a.support_size(),
            right: b.support_size(),
        });
    }
    Ok(a.weights
        .iter()
        .zip(&b.weights)
        .map(|(x, y)| (x - y).abs())
        .sum())
}

/// Total-variation distance: half the L1 distance.
///
/// This is the Wasserstein-1 distance under the unit discrete metric, the
/// form in which Lipschitz constants of the model are estimated.
pub fn tv_distance(a: &Distribution, b: &Distribution) -> Result<f64, ProbError> {
    Ok(0.5 * l1_distance(a, b)?)
}

/// Empirical mean of one-hot encoded actions.
///
/// An empty list is not an error in the usual sense: it signals an empty
/// neighbourhood, and the caller substitutes its previous estimate.
pub fn one_hot_mean(actions: &[usize], action_count: usize) -> Result<Distribution, ProbError> {
    if actions.is_empty() {
        return Err(ProbError::EmptyNeighborhood);
    }
    let mut weights = vec![0.0; action_count];
    for &a in actions {
        if a >= action_count {
            return Err(ProbError::ActionOutOfRange {
                action: a,
                action_count,
            });
        }
        weights[a] += 1.0;
    }
    let n = actions.len() as f64;
    for w in &mut weights {
        *w /= n;
    }
    Ok(Distribution { weights })
}
