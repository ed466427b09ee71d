//! Exact finite-state solver for the decentralized mean field operator.
//!
//! A [`TabularInstance`] is a finite game from one agent's perspective: the
//! transition and reward callbacks both depend on the mean field. The joint
//! operator pairs a Bellman-optimality backup on the Q-table ([`apply_h1`])
//! with one step of mean-field propagation under the greedy maximizer
//! ([`apply_h2`]). Iterating the pair from (Q = 0, mu0) drives it to a fixed
//! point whose greedy policy and mean field form a decentralized mean field
//! equilibrium; [`verify_dmfe`] checks both halves of that claim directly.
//!
//! Also here: discounted occupancy measures, their Markov reduction
//! ([`markovize`]), and empirical Lipschitz / contraction diagnostics.

pub mod instances;

use crate::prob::{l1_distance, tv_distance, DiscretePolicy, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("mean field has {got} states, instance has {want}")]
    StateMismatch { got: usize, want: usize },
    #[error("policy shape {states}x{actions} does not match instance {want_states}x{want_actions}")]
    PolicyMismatch {
        states: usize,
        actions: usize,
        want_states: usize,
        want_actions: usize,
    },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("instance file parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

type TransitionFn = dyn Fn(usize, usize, &Distribution) -> Distribution + Send + Sync;
type RewardFn = dyn Fn(usize, usize, &Distribution) -> f64 + Send + Sync;

/// A finite decentralized mean field game for a single representative agent.
///
/// Transitions and rewards are callbacks so the mean-field dependence is
/// unrestricted; [`instances`] ships a congestion family used throughout the
/// tests and the CLI.
pub struct TabularInstance {
    state_count: usize,
    action_count: usize,
    transition: Box<TransitionFn>,
    reward: Box<RewardFn>,
    discount: f64,
    r_max: f64,
    initial_mean_field: Distribution,
}

impl TabularInstance {
    pub fn new(
        state_count: usize,
        action_count: usize,
        transition: Box<TransitionFn>,
        reward: Box<RewardFn>,
        discount: f64,
        r_max: f64,
        initial_mean_field: Distribution,
    ) -> Self {
        assert!(state_count > 0 && action_count > 0);
        assert!((0.0..1.0).contains(&discount), "discount must be in [0,1)");
        assert!(r_max > 0.0);
        assert_eq!(initial_mean_field.support_size(), state_count);
        Self {
            state_count,
            action_count,
            transition,
            reward,
            discount,
            r_max,
            initial_mean_field,
        }
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn initial_mean_field(&self) -> &Distribution {
        &self.initial_mean_field
    }

    pub fn transition(&self, s: usize, a: usize, mu: &Distribution) -> Distribution {
        (self.transition)(s, a, mu)
    }

    pub fn reward(&self, s: usize, a: usize, mu: &Distribution) -> f64 {
        (self.reward)(s, a, mu)
    }

    /// Upper bound on any discounted return: R_max / (1 - beta).
    pub fn value_bound(&self) -> f64 {
        self.r_max / (1.0 - self.discount)
    }
}

/// Dense Q-table indexed (state, action).
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    state_count: usize,
    action_count: usize,
    values: Vec<f64>,
}

impl QMatrix {
    pub fn zeros(state_count: usize, action_count: usize) -> Self {
        Self {
            state_count,
            action_count,
            values: vec![0.0; state_count * action_count],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.action_count + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.action_count + a] = v;
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    /// max_a Q(s, a)
    pub fn row_max(&self, s: usize) -> f64 {
        let row = &self.values[s * self.action_count..(s + 1) * self.action_count];
        row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// argmax_a Q(s, a), ties toward the lowest action index.
    pub fn row_argmax(&self, s: usize) -> usize {
        let row = &self.values[s * self.action_count..(s + 1) * self.action_count];
        let mut best = 0;
        for (a, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn sup_distance(&self, other: &QMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Bellman-optimality half of the operator:
/// `(H1 Q)(s,a) = r(s,a,mu) + beta * sum_{s'} p(s'|s,a,mu) * max_{a'} Q(s',a')`.
///
/// The mean field used inside the max is the current iterate; the pair is
/// updated jointly, so Q carries no explicit mean-field index.
pub fn apply_h1(q: &QMatrix, mu: &Distribution, inst: &TabularInstance) -> QMatrix {
    let (s_n, a_n) = (inst.state_count, inst.action_count);
    let maxes: Vec<f64> = (0..s_n).map(|s| q.row_max(s)).collect();
    let mut out = QMatrix::zeros(s_n, a_n);
    for s in 0..s_n {
        for a in 0..a_n {
            let p = inst.transition(s, a, mu);
            let cont: f64 = p.weights().iter().zip(&maxes).map(|(w, m)| w * m).sum();
            out.set(s, a, inst.reward(s, a, mu) + inst.discount * cont);
        }
    }
    out
}

/// Greedy maximizer of the H1 objective at each state, ties toward the lowest
/// action index.
pub fn greedy_policy(q: &QMatrix, mu: &Distribution, inst: &TabularInstance) -> Vec<usize> {
    let backed_up = apply_h1(q, mu, inst);
    (0..inst.state_count)
        .map(|s| backed_up.row_argmax(s))
        .collect()
}

/// Mean-field propagation half of the operator:
/// `mu'(.) = sum_s p(.|s, pi(s), mu) mu(s)` where `pi` maximizes the H1
/// objective.
pub fn apply_h2(q: &QMatrix, mu: &Distribution, inst: &TabularInstance) -> Distribution {
    let pi = greedy_policy(q, mu, inst);
    let mut next = vec![0.0; inst.state_count];
    for s in 0..inst.state_count {
        let mass = mu.get(s);
        if mass == 0.0 {
            continue;
        }
        let p = inst.transition(s, pi[s], mu);
        for (s2, w) in p.weights().iter().enumerate() {
            next[s2] += mass * w;
        }
    }
    Distribution::new(next).expect("propagated mean field must stay a distribution")
}

/// One step of mean-field propagation under a stochastic policy.
pub fn propagate_policy(
    mu: &Distribution,
    inst: &TabularInstance,
    pi: &DiscretePolicy,
) -> Distribution {
    let mut next = vec![0.0; inst.state_count];
    for s in 0..inst.state_count {
        let mass = mu.get(s);
        if mass == 0.0 {
            continue;
        }
        for a in 0..inst.action_count {
            let pa = pi.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            let p = inst.transition(s, a, mu);
            for (s2, w) in p.weights().iter().enumerate() {
                next[s2] += mass * pa * w;
            }
        }
    }
    Distribution::new(next).expect("propagated mean field must stay a distribution")
}

/// Outcome of iterating the joint operator.
#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub q_star: QMatrix,
    pub mu_star: Distribution,
    pub policy_star: DiscretePolicy,
    pub iterations: usize,
    /// Per-iteration (sup-norm Q change, L1 mean-field change).
    pub residual_history: Vec<(f64, f64)>,
    pub converged: bool,
}

impl FixedPointResult {
    pub fn joint_residuals(&self) -> Vec<f64> {
        self.residual_history.iter().map(|(q, m)| q + m).collect()
    }

    pub fn final_residual(&self) -> f64 {
        self.residual_history
            .last()
            .map(|(q, m)| q + m)
            .unwrap_or(f64::INFINITY)
    }

    /// Plain-text report of the solve, suitable for writing to a file.
    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str("fixed-point solve report\n");
        out.push_str(&format!("converged: {}\n", self.converged));
        out.push_str(&format!("iterations: {}\n", self.iterations));
        out.push_str(&format!(
            "final_joint_residual: {:e}\n",
            self.final_residual()
        ));
        out.push_str("mu_star:");
        for w in self.mu_star.weights() {
            out.push_str(&format!(" {w:.12}"));
        }
        out.push('\n');
        out.push_str("policy_star (greedy action per state):");
        for s in 0..self.policy_star.state_count() {
            let row = self.policy_star.row(s);
            let a = (0..row.support_size()).max_by(|&x, &y| row.get(x).total_cmp(&row.get(y)));
            out.push_str(&format!(" {}", a.unwrap_or(0)));
        }
        out.push('\n');
        out.push_str("q_star (rows = states):\n");
        for s in 0..self.q_star.state_count() {
            for a in 0..self.q_star.action_count() {
                out.push_str(&format!(" {:.12}", self.q_star.get(s, a)));
            }
            out.push('\n');
        }
        out
    }
}

/// Iterates `(Q, mu) <- (H1(Q, mu), H2(Q, mu))` from `(0, mu0)` until both the
/// sup-norm Q change and the L1 mean-field change drop below `tol`.
///
/// Non-convergence is a status, not an error: contraction is only guaranteed
/// when the model's mean-field sensitivity is small, and the caller may want
/// the residual history either way.
pub fn solve_fixed_point(
    inst: &TabularInstance,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointResult, TabularError> {
    if !(tol > 0.0) {
        return Err(TabularError::BadTolerance(tol));
    }
    let mut q = QMatrix::zeros(inst.state_count, inst.action_count);
    let mut mu = inst.initial_mean_field.clone();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let next_q = apply_h1(&q, &mu, inst);
        let next_mu = apply_h2(&q, &mu, inst);
        let q_delta = q.sup_distance(&next_q);
        let mu_delta = l1_distance(&mu, &next_mu).expect("same support");
        history.push((q_delta, mu_delta));
        q = next_q;
        mu = next_mu;
        iterations += 1;
        if q_delta < tol && mu_delta < tol {
            converged = true;
            break;
        }
    }
    let greedy: Vec<usize> = greedy_policy(&q, &mu, inst);
    let policy = DiscretePolicy::deterministic(&greedy, inst.action_count);
    Ok(FixedPointResult {
        q_star: q,
        mu_star: mu,
        policy_star: policy,
        iterations,
        residual_history: history,
        converged,
    })
}

/// Result of checking a (policy, mean field) pair against both equilibrium
/// conditions.
#[derive(Debug, Clone)]
pub struct DmfeReport {
    /// sup over states of (optimal one-step backup) - (policy value).
    pub best_response_residual: f64,
    /// L1 distance between mu and its one-step propagation under the policy.
    pub consistency_residual: f64,
    pub tolerance: f64,
}

impl DmfeReport {
    pub fn passes(&self) -> bool {
        self.best_response_residual < self.tolerance && self.consistency_residual < self.tolerance
    }

    pub fn report(&self) -> String {
        format!(
            "dmfe verification\nbest_response_residual: {:e}\nconsistency_residual: {:e}\ntolerance: {:e}\npasses: {}\n",
            self.best_response_residual,
            self.consistency_residual,
            self.tolerance,
            self.passes()
        )
    }
}

/// Policy evaluation at a fixed mean field: Q_pi(s,a) via inner iteration to
/// absolute accuracy 1e-12.
pub fn policy_action_values(
    inst: &TabularInstance,
    pi: &DiscretePolicy,
    mu: &Distribution,
) -> QMatrix {
    let (s_n, a_n) = (inst.state_count, inst.action_count);
    let rewards: Vec<f64> = (0..s_n * a_n)
        .map(|i| inst.reward(i / a_n, i % a_n, mu))
        .collect();
    let trans: Vec<Distribution> = (0..s_n * a_n)
        .map(|i| inst.transition(i / a_n, i % a_n, mu))
        .collect();
    let mut v = vec![0.0; s_n];
    loop {
        let mut next = vec![0.0; s_n];
        for s in 0..s_n {
            let mut val = 0.0;
            for a in 0..a_n {
                let pa = pi.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                let idx = s * a_n + a;
                let cont: f64 = trans[idx]
                    .weights()
                    .iter()
                    .zip(&v)
                    .map(|(w, vv)| w * vv)
                    .sum();
                val += pa * (rewards[idx] + inst.discount * cont);
            }
            next[s] = val;
        }
        let delta = next
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta < 1e-12 {
            break;
        }
    }
    let mut q = QMatrix::zeros(s_n, a_n);
    for s in 0..s_n {
        for a in 0..a_n {
            let idx = s * a_n + a;
            let cont: f64 = trans[idx]
                .weights()
                .iter()
                .zip(&v)
                .map(|(w, vv)| w * vv)
                .sum();
            q.set(s, a, rewards[idx] + inst.discount * cont);
        }
    }
    q
}

/// Checks whether `(pi, mu)` is a decentralized mean field equilibrium at
/// tolerance `tol`.
///
/// Best response: the policy's own action values Q_pi (inner evaluation to
/// 1e-12) must be unimprovable by a one-step optimal backup. Consistency: mu
/// must be a fixed point of one-step propagation under pi.
pub fn verify_dmfe(
    inst: &TabularInstance,
    pi: &DiscretePolicy,
    mu: &Distribution,
    tol: f64,
) -> Result<DmfeReport, TabularError> {
    if !(tol > 0.0) {
        return Err(TabularError::BadTolerance(tol));
    }
    if mu.support_size() != inst.state_count {
        return Err(TabularError::StateMismatch {
            got: mu.support_size(),
            want: inst.state_count,
        });
    }
    if pi.state_count() != inst.state_count || pi.action_count() != inst.action_count {
        return Err(TabularError::PolicyMismatch {
            states: pi.state_count(),
            actions: pi.action_count(),
            want_states: inst.state_count,
            want_actions: inst.action_count,
        });
    }
    let q_pi = policy_action_values(inst, pi, mu);
    let backed_up = apply_h1(&q_pi, mu, inst);
    let mut best_response_residual = 0.0f64;
    for s in 0..inst.state_count {
        let improvable = backed_up.row_max(s);
        let own: f64 = (0..inst.action_count)
            .map(|a| pi.prob(s, a) * q_pi.get(s, a))
            .sum();
        best_response_residual = best_response_residual.max(improvable - own);
    }
    let propagated = propagate_policy(mu, inst, pi);
    let consistency_residual = l1_distance(mu, &propagated).expect("same support");
    Ok(DmfeReport {
        best_response_residual,
        consistency_residual,
        tolerance: tol,
    })
}

/// Discounted state-action occupancy under a Markov policy at a fixed mean
/// field: `nu(s,a) = sum_t beta^t P(s_t = s, a_t = a)`.
///
/// Forward propagation from the instance's initial mean field, truncated once
/// `beta^t < truncation_tol * (1 - beta)`, so the dropped tail mass is below
/// `truncation_tol`. Total mass comes to `1 / (1 - beta)`.
pub fn occupancy_measure(
    inst: &TabularInstance,
    pi: &DiscretePolicy,
    mu: &Distribution,
    truncation_tol: f64,
) -> Result<Vec<Vec<f64>>, TabularError> {
    if !(truncation_tol > 0.0) {
        return Err(TabularError::BadTolerance(truncation_tol));
    }
    let (s_n, a_n) = (inst.state_count, inst.action_count);
    let beta = inst.discount;
    let mut nu = vec![vec![0.0; a_n]; s_n];
    let mut state_dist: Vec<f64> = inst.initial_mean_field.weights().to_vec();
    let mut weight = 1.0; // beta^t
    let cutoff = truncation_tol * (1.0 - beta);
    let trans: Vec<Distribution> = (0..s_n * a_n)
        .map(|i| inst.transition(i / a_n, i % a_n, mu))
        .collect();
    while weight >= cutoff {
        let mut next = vec![0.0; s_n];
        for s in 0..s_n {
            let mass = state_dist[s];
            if mass == 0.0 {
                continue;
            }
            for a in 0..a_n {
                let pa = pi.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                nu[s][a] += weight * mass * pa;
                for (s2, w) in trans[s * a_n + a].weights().iter().enumerate() {
                    next[s2] += mass * pa * w;
                }
            }
        }
        state_dist = next;
        weight *= beta;
        if beta == 0.0 {
            break;
        }
    }
    Ok(nu)
}

/// Recovers a Markov policy from an occupancy table:
/// `pi(a|s) = nu(s,a) / sum_a nu(s,a)` where the state marginal is positive,
/// the fallback row elsewhere.
pub fn markovize(
    inst: &TabularInstance,
    nu: &[Vec<f64>],
    fallback: &DiscretePolicy,
) -> Result<DiscretePolicy, TabularError> {
    if fallback.state_count() != inst.state_count || fallback.action_count() != inst.action_count {
        return Err(TabularError::PolicyMismatch {
            states: fallback.state_count(),
            actions: fallback.action_count(),
            want_states: inst.state_count,
            want_actions: inst.action_count,
        });
    }
    let mut rows = Vec::with_capacity(inst.state_count);
    for (s, row) in nu.iter().enumerate() {
        let marginal: f64 = row.iter().sum();
        if marginal > 0.0 {
            rows.push(
                Distribution::new(row.iter().map(|v| v / marginal).collect())
                    .expect("normalized occupancy row is a distribution"),
            );
        } else {
            rows.push(fallback.row(s).clone());
        }
    }
    Ok(DiscretePolicy::new(rows).expect("non-empty policy"))
}

/// Empirical model diagnostics: Lipschitz estimates of the reward and
/// transition maps in the mean field, plus (optionally) the contraction
/// behaviour observed during a solve.
#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    /// Max observed |r(s,a,mu) - r(s,a,mu')| / TV(mu, mu').
    pub reward_lipschitz: f64,
    /// Max observed TV(p(.|s,a,mu), p(.|s,a,mu')) / TV(mu, mu').
    pub transition_lipschitz: f64,
    /// Ratios of successive joint residuals from a solve, when attached.
    pub contraction_ratios: Vec<f64>,
    /// True when residuals were non-increasing from the second iteration on.
    pub residuals_non_increasing: bool,
    /// Geometric mean of the contraction ratios (NaN when none).
    pub geometric_mean_ratio: f64,
}

impl DiagnosticsReport {
    /// Attaches contraction diagnostics computed from a solve's residual
    /// history. Ratio entries are only formed between strictly positive
    /// residuals.
    pub fn with_contraction(mut self, history: &[(f64, f64)]) -> Self {
        let joint: Vec<f64> = history.iter().map(|(q, m)| q + m).collect();
        self.residuals_non_increasing = joint.windows(2).skip(1).all(|w| w[1] <= w[0]);
        let mut ratios = Vec::new();
        for w in joint.windows(2) {
            if w[0] > 0.0 && w[1] > 0.0 {
                ratios.push(w[1] / w[0]);
            }
        }
        self.geometric_mean_ratio = if ratios.is_empty() {
            f64::NAN
        } else {
            (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp()
        };
        self.contraction_ratios = ratios;
        self
    }

    pub fn report(&self) -> String {
        format!(
            "diagnostics\nreward_lipschitz_estimate: {:.6}\ntransition_lipschitz_estimate: {:.6}\nresiduals_non_increasing: {}\ngeometric_mean_contraction_ratio: {:.6}\n",
            self.reward_lipschitz,
            self.transition_lipschitz,
            self.residuals_non_increasing,
            self.geometric_mean_ratio
        )
    }
}

/// Samples random mean-field pairs and reports the largest observed
/// sensitivity of the reward and transition maps, measured against
/// total-variation distance (the Wasserstein-1 metric under the unit discrete
/// metric). Deterministic given the seed.
pub fn estimate_lipschitz(
    inst: &TabularInstance,
    samples: usize,
    seed: u64,
) -> Result<DiagnosticsReport, TabularError> {
    if samples < 2 {
        return Err(TabularError::TooFewSamples(samples));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reward_lip = 0.0f64;
    let mut trans_lip = 0.0f64;
    for _ in 0..samples {
        let mu = random_simplex(inst.state_count, &mut rng);
        let mu2 = random_simplex(inst.state_count, &mut rng);
        let denom = tv_distance(&mu, &mu2).expect("same support");
        if denom < 1e-12 {
            continue;
        }
        for s in 0..inst.state_count {
            for a in 0..inst.action_count {
                let dr = (inst.reward(s, a, &mu) - inst.reward(s, a, &mu2)).abs();
                reward_lip = reward_lip.max(dr / denom);
                let dp = tv_distance(&inst.transition(s, a, &mu), &inst.transition(s, a, &mu2))
                    .expect("same support");
                trans_lip = trans_lip.max(dp / denom);
            }
        }
    }
    Ok(DiagnosticsReport {
        reward_lipschitz: reward_lip,
        transition_lipschitz: trans_lip,
        contraction_ratios: Vec::new(),
        residuals_non_increasing: false,
        geometric_mean_ratio: f64::NAN,
    })
}

/// Uniform sample from the probability simplex (normalized exponentials).
pub fn random_simplex<R: rand::Rng>(n: usize, rng: &mut R) -> Distribution {
    let raw: Vec<f64> = (0..n)
        .map(|_| -(rng.gen::<f64>().max(1e-300)).ln())
        .collect();
    let sum: f64 = raw.iter().sum();
    Distribution::new(raw.into_iter().map(|v| v / sum).collect()).expect("normalized")
}

#[cfg(test)]
mod tests {
    use super::instances;
    use super::*;

    /// 2-state, 2-action instance with hand-set tables, mean field ignored.
    fn tiny_fixed() -> TabularInstance {
        let transition = |s: usize, a: usize, _mu: &Distribution| -> Distribution {
            match (s, a) {
                (0, 0) => Distribution::new(vec![1.0, 0.0]).unwrap(),
                (0, 1) => Distribution::new(vec![0.0, 1.0]).unwrap(),
                (1, 0) => Distribution::new(vec![0.6, 0.4]).unwrap(),
                (1, 1) => Distribution::new(vec![0.0, 1.0]).unwrap(),
                _ => unreachable!(),
            }
        };
        let reward =
            |s: usize, a: usize, _mu: &Distribution| -> f64 { [[1.0, 0.2], [0.5, 0.8]][s][a] };
        TabularInstance::new(
            2,
            2,
            Box::new(transition),
            Box::new(reward),
            0.5,
            1.0,
            Distribution::uniform(2),
        )
    }

    #[test]
    fn h1_zero_discount_returns_rewards() {
        let inst = TabularInstance::new(
            2,
            2,
            Box::new(|_, _, _| Distribution::uniform(2)),
            Box::new(|s, a, _| (s + a) as f64 * 0.1),
            0.0,
            1.0,
            Distribution::uniform(2),
        );
        let q = QMatrix::zeros(2, 2);
        let mu = Distribution::uniform(2);
        let out = apply_h1(&q, &mu, &inst);
        for s in 0..2 {
            for a in 0..2 {
                assert_eq!(out.get(s, a), (s + a) as f64 * 0.1);
            }
        }
    }

    #[test]
    fn h1_zero_q_returns_rewards() {
        let inst = tiny_fixed();
        let q = QMatrix::zeros(2, 2);
        let mu = Distribution::uniform(2);
        let out = apply_h1(&q, &mu, &inst);
        assert_eq!(out.get(0, 0), 1.0);
        assert_eq!(out.get(0, 1), 0.2);
        assert_eq!(out.get(1, 0), 0.5);
        assert_eq!(out.get(1, 1), 0.8);
    }

    #[test]
    fn h1_matches_straight_loop_oracle() {
        let inst = tiny_fixed();
        let mut q = QMatrix::zeros(2, 2);
        q.set(0, 0, 0.3);
        q.set(0, 1, 0.9);
        q.set(1, 0, 0.1);
        q.set(1, 1, 0.4);
        let mu = Distribution::uniform(2);
        let out = apply_h1(&q, &mu, &inst);
        // independent straight-loop evaluation
        let maxes = [0.9f64, 0.4f64];
        let p: [[Vec<f64>; 2]; 2] = [
            [vec![1.0, 0.0], vec![0.0, 1.0]],
            [vec![0.6, 0.4], vec![0.0, 1.0]],
        ];
        let r = [[1.0, 0.2], [0.5, 0.8]];
        for s in 0..2 {
            for a in 0..2 {
                let cont: f64 = p[s][a].iter().zip(&maxes).map(|(w, m)| w * m).sum();
                let want = r[s][a] + 0.5 * cont;
                assert!((out.get(s, a) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn h2_identity_transitions_fix_mu() {
        let inst = TabularInstance::new(
            3,
            2,
            Box::new(|s, _, _| Distribution::delta(3, s)),
            Box::new(|_, _, _| 0.5),
            0.9,
            1.0,
            Distribution::new(vec![0.2, 0.5, 0.3]).unwrap(),
        );
        let q = QMatrix::zeros(3, 2);
        let mu = Distribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let out = apply_h2(&q, &mu, &inst);
        assert!(l1_distance(&out, &mu).unwrap() < 1e-15);
    }

    #[test]
    fn h2_state_independent_transitions_jump_to_target() {
        let rho = Distribution::new(vec![0.1, 0.2, 0.7]).unwrap();
        let rho2 = rho.clone();
        let inst = TabularInstance::new(
            3,
            2,
            Box::new(move |_, _, _| rho2.clone()),
            Box::new(|_, _, _| 0.5),
            0.9,
            1.0,
            Distribution::uniform(3),
        );
        let q = QMatrix::zeros(3, 2);
        let mu = Distribution::uniform(3);
        let out = apply_h2(&q, &mu, &inst);
        assert!(l1_distance(&out, &rho).unwrap() < 1e-15);
    }

    #[test]
    fn h2_matches_matrix_vector_oracle() {
        let inst = instances::congestion4();
        let mu = Distribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let mut q = QMatrix::zeros(4, 2);
        for s in 0..4 {
            for a in 0..2 {
                q.set(s, a, (s as f64) * 0.2 + (a as f64) * 0.35);
            }
        }
        let out = apply_h2(&q, &mu, &inst);
        // dense one-step propagation with the same greedy actions
        let pi = greedy_policy(&q, &mu, &inst);
        let mut want = vec![0.0; 4];
        for s in 0..4 {
            let p = inst.transition(s, pi[s], &mu);
            for s2 in 0..4 {
                want[s2] += mu.get(s) * p.get(s2);
            }
        }
        for (got, want) in out.weights().iter().zip(&want) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_instance_converges_immediately() {
        // identity transitions, state-independent reward: mu never moves and
        // a zero reward kills the Q recursion
        let inst = TabularInstance::new(
            3,
            2,
            Box::new(|s, _, _| Distribution::delta(3, s)),
            Box::new(|_, _, _| 0.0),
            0.5,
            1.0,
            Distribution::new(vec![0.2, 0.5, 0.3]).unwrap(),
        );
        let res = solve_fixed_point(&inst, 1e-12, 10).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
        assert!(l1_distance(&res.mu_star, inst.initial_mean_field()).unwrap() < 1e-15);
    }

    #[test]
    fn non_convergence_is_a_status() {
        let inst = instances::congestion4();
        let res = solve_fixed_point(&inst, 1e-10, 1).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.residual_history.len(), 1);
        assert!(solve_fixed_point(&inst, 0.0, 5).is_err());
    }

    #[test]
    fn solver_iterates_stay_bounded() {
        let inst = instances::congestion4();
        let bound = inst.value_bound() + 1e-9;
        let mut q = QMatrix::zeros(4, 2);
        let mut mu = inst.initial_mean_field().clone();
        for _ in 0..60 {
            let nq = apply_h1(&q, &mu, &inst);
            let nmu = apply_h2(&q, &mu, &inst);
            q = nq;
            mu = nmu;
            for s in 0..4 {
                for a in 0..2 {
                    assert!(q.get(s, a) >= 0.0 && q.get(s, a) <= bound);
                }
            }
        }
    }

    #[test]
    fn verify_dmfe_rejects_uniform_policy_on_congestion() {
        let inst = instances::congestion4();
        let solved = solve_fixed_point(&inst, 1e-11, 500).unwrap();
        assert!(solved.converged);
        let uniform = DiscretePolicy::uniform(4, 2);
        let report = verify_dmfe(&inst, &uniform, &solved.mu_star, 1e-8).unwrap();
        assert!(report.best_response_residual > 1e-3);
        assert!(!report.passes());
    }

    #[test]
    fn single_state_equal_rewards_any_policy_passes() {
        let inst = TabularInstance::new(
            1,
            3,
            Box::new(|_, _, _| Distribution::delta(1, 0)),
            Box::new(|_, _, _| 0.7),
            0.5,
            1.0,
            Distribution::delta(1, 0),
        );
        let mu = Distribution::delta(1, 0);
        for pi in [
            DiscretePolicy::uniform(1, 3),
            DiscretePolicy::deterministic(&[2], 3),
        ] {
            let report = verify_dmfe(&inst, &pi, &mu, 1e-8).unwrap();
            assert!(report.passes(), "{report:?}");
        }
    }

    #[test]
    fn occupancy_single_state_geometric_series() {
        let inst = TabularInstance::new(
            1,
            1,
            Box::new(|_, _, _| Distribution::delta(1, 0)),
            Box::new(|_, _, _| 1.0),
            0.5,
            1.0,
            Distribution::delta(1, 0),
        );
        let pi = DiscretePolicy::uniform(1, 1);
        let nu = occupancy_measure(&inst, &pi, &Distribution::delta(1, 0), 1e-12).unwrap();
        assert!((nu[0][0] - 2.0).abs() < 1e-9); // 1 / (1 - 0.5)
    }

    #[test]
    fn occupancy_zero_discount_is_initial_joint() {
        let inst = TabularInstance::new(
            2,
            2,
            Box::new(|_, _, _| Distribution::uniform(2)),
            Box::new(|_, _, _| 0.0),
            0.0,
            1.0,
            Distribution::new(vec![0.3, 0.7]).unwrap(),
        );
        let pi = DiscretePolicy::new(vec![
            Distribution::new(vec![0.9, 0.1]).unwrap(),
            Distribution::new(vec![0.4, 0.6]).unwrap(),
        ])
        .unwrap();
        let nu = occupancy_measure(&inst, &pi, &Distribution::uniform(2), 1e-12).unwrap();
        assert!((nu[0][0] - 0.3 * 0.9).abs() < 1e-15);
        assert!((nu[0][1] - 0.3 * 0.1).abs() < 1e-15);
        assert!((nu[1][0] - 0.7 * 0.4).abs() < 1e-15);
        assert!((nu[1][1] - 0.7 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn markovize_recovers_markov_policy() {
        let inst = instances::congestion4();
        let mu = inst.initial_mean_field().clone();
        let pi = DiscretePolicy::new(vec![
            Distribution::new(vec![0.7, 0.3]).unwrap(),
            Distribution::new(vec![0.2, 0.8]).unwrap(),
            Distribution::new(vec![0.5, 0.5]).unwrap(),
            Distribution::new(vec![0.1, 0.9]).unwrap(),
        ])
        .unwrap();
        let nu = occupancy_measure(&inst, &pi, &mu, 1e-13).unwrap();
        let back = markovize(&inst, &nu, &DiscretePolicy::uniform(4, 2)).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert!(
                    (back.prob(s, a) - pi.prob(s, a)).abs() < 1e-9,
                    "state {s} action {a}"
                );
            }
        }
    }

    #[test]
    fn markovize_uses_fallback_on_zero_marginal() {
        let inst = instances::congestion4();
        let nu = vec![
            vec![0.5, 0.5],
            vec![0.0, 0.0], // unreached state
            vec![1.0, 3.0],
            vec![0.2, 0.0],
        ];
        let fallback = DiscretePolicy::deterministic(&[1, 1, 1, 1], 2);
        let pi = markovize(&inst, &nu, &fallback).unwrap();
        assert_eq!(pi.prob(1, 1), 1.0);
        assert!((pi.prob(2, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_mu_independent_is_zero() {
        let inst = tiny_fixed();
        let d = estimate_lipschitz(&inst, 50, 3).unwrap();
        assert_eq!(d.reward_lipschitz, 0.0);
        assert_eq!(d.transition_lipschitz, 0.0);
    }

    #[test]
    fn lipschitz_of_coordinate_reward_reaches_one() {
        // r(s,a,mu) = mu(0): the tight constant against TV distance is 1,
        // attained whenever coordinate 0 carries the whole positive part.
        let inst = TabularInstance::new(
            3,
            2,
            Box::new(|s, _, _| Distribution::delta(3, s)),
            Box::new(|_, _, mu: &Distribution| mu.get(0)),
            0.5,
            1.0,
            Distribution::uniform(3),
        );
        let few = estimate_lipschitz(&inst, 5, 9).unwrap().reward_lipschitz;
        let some = estimate_lipschitz(&inst, 50, 9).unwrap().reward_lipschitz;
        let many = estimate_lipschitz(&inst, 500, 9).unwrap().reward_lipschitz;
        assert!(few <= some + 1e-15 && some <= many + 1e-15);
        assert!(many <= 1.0 + 1e-12);
        assert!(many > 0.999, "many={many}");
        // identity transitions: no mean-field sensitivity
        assert_eq!(
            estimate_lipschitz(&inst, 50, 9).unwrap().transition_lipschitz,
            0.0
        );
    }

    #[test]
    fn lipschitz_is_deterministic_per_seed() {
        let inst = instances::congestion4();
        let a = estimate_lipschitz(&inst, 100, 42).unwrap();
        let b = estimate_lipschitz(&inst, 100, 42).unwrap();
        assert_eq!(a.reward_lipschitz, b.reward_lipschitz);
        assert_eq!(a.transition_lipschitz, b.transition_lipschitz);
    }
}
