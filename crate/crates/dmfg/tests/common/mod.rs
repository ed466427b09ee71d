//! Test-only oracles, independent of the library's computation paths.
//!
//! The occupancy oracle expands the exact distribution over trajectories of
//! the joint (policy memory, state) process at a fixed mean field --- the
//! trajectory tree with identical subtrees merged --- truncated at a finite
//! horizon. Policies declare their own memory, so history-dependent policies
//! are handled exactly.

use dmfg::prob::Distribution;
use dmfg::tabular::TabularInstance;
use std::collections::HashMap;

/// A policy that may depend on the whole history through a finite memory.
pub trait HistoryPolicy {
    type Memory: Clone + Eq + std::hash::Hash;
    fn initial_memory(&self) -> Self::Memory;
    /// Action distribution given memory and current state.
    fn act(&self, memory: &Self::Memory, state: usize) -> Vec<f64>;
    fn update(&self, memory: &Self::Memory, state: usize, action: usize) -> Self::Memory;
}

/// Exact discounted occupancy sum_t beta^t P(s_t = s, a_t = a) up to
/// `horizon`, by forward expansion of the joint (memory, state) law.
pub fn occupancy_oracle<P: HistoryPolicy>(
    inst: &TabularInstance,
    policy: &P,
    mu: &Distribution,
    horizon: usize,
) -> Vec<Vec<f64>> {
    let (s_n, a_n) = (inst.state_count(), inst.action_count());
    let beta = inst.discount();
    let mut nu = vec![vec![0.0; a_n]; s_n];
    let mut law: HashMap<(P::Memory, usize), f64> = HashMap::new();
    for s in 0..s_n {
        let w = inst.initial_mean_field().get(s);
        if w > 0.0 {
            law.insert((policy.initial_memory(), s), w);
        }
    }
    let mut weight = 1.0;
    for _ in 0..=horizon {
        let mut next: HashMap<(P::Memory, usize), f64> = HashMap::new();
        for ((mem, s), mass) in &law {
            let action_probs = policy.act(mem, *s);
            for (a, pa) in action_probs.iter().enumerate() {
                if *pa == 0.0 {
                    continue;
                }
                nu[*s][a] += weight * mass * pa;
                let trans = inst.transition(*s, a, mu);
                let new_mem = policy.update(mem, *s, a);
                for (s2, pt) in trans.weights().iter().enumerate() {
                    if *pt > 0.0 {
                        *next.entry((new_mem.clone(), s2)).or_insert(0.0) += mass * pa * pt;
                    }
                }
            }
        }
        law = next;
        weight *= beta;
        if beta == 0.0 {
            break;
        }
    }
    nu
}

/// Markov policy wrapper for the oracle (memory-free).
pub struct MarkovRows(pub Vec<Vec<f64>>);

impl HistoryPolicy for MarkovRows {
    type Memory = ();
    fn initial_memory(&self) {}
    fn act(&self, _memory: &(), state: usize) -> Vec<f64> {
        self.0[state].clone()
    }
    fn update(&self, _memory: &(), _state: usize, _action: usize) {}
}

/// Depends on the previous action (history-dependent).
pub struct LastActionPolicy;

impl HistoryPolicy for LastActionPolicy {
    type Memory = Option<usize>;
    fn initial_memory(&self) -> Option<usize> {
        None
    }
    fn act(&self, memory: &Option<usize>, state: usize) -> Vec<f64> {
        match memory {
            None => vec![0.5, 0.5],
            Some(0) => {
                if state == 0 {
                    vec![0.1, 0.9]
                } else {
                    vec![0.7, 0.3]
                }
            }
            Some(_) => vec![0.8, 0.2],
        }
    }
    fn update(&self, _memory: &Option<usize>, _state: usize, action: usize) -> Option<usize> {
        Some(action)
    }
}

/// Depends on the previous state (history-dependent).
pub struct LastStatePolicy;

impl HistoryPolicy for LastStatePolicy {
    type Memory = Option<usize>;
    fn initial_memory(&self) -> Option<usize> {
        None
    }
    fn act(&self, memory: &Option<usize>, state: usize) -> Vec<f64> {
        match memory {
            Some(prev) if *prev == state => vec![0.05, 0.95], // stuck: push forward
            Some(_) => vec![0.6, 0.4],
            None => vec![0.9, 0.1],
        }
    }
    fn update(&self, _memory: &Option<usize>, state: usize, _action: usize) -> Option<usize> {
        Some(state)
    }
}

/// Depends on the parity of the elapsed time (history-dependent through the
/// history length).
pub struct ParityPolicy;

impl HistoryPolicy for ParityPolicy {
    type Memory = bool;
    fn initial_memory(&self) -> bool {
        false
    }
    fn act(&self, odd: &bool, _state: usize) -> Vec<f64> {
        if *odd {
            vec![0.2, 0.8]
        } else {
            vec![0.9, 0.1]
        }
    }
    fn update(&self, odd: &bool, _state: usize, _action: usize) -> bool {
        !odd
    }
}

/// Standalone value iteration on the mean-field-frozen MDP; returns Q.
pub fn value_iteration_oracle(inst: &TabularInstance, mu: &Distribution, tol: f64) -> Vec<Vec<f64>> {
    let (s_n, a_n) = (inst.state_count(), inst.action_count());
    let mut v = vec![0.0f64; s_n];
    loop {
        let mut nv = vec![0.0f64; s_n];
        for s in 0..s_n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..a_n {
                let p = inst.transition(s, a, mu);
                let cont: f64 = p.weights().iter().zip(&v).map(|(w, vv)| w * vv).sum();
                best = best.max(inst.reward(s, a, mu) + inst.discount() * cont);
            }
            nv[s] = best;
        }
        let delta = nv
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        v = nv;
        if delta < tol {
            break;
        }
    }
    let mut q = vec![vec![0.0; a_n]; s_n];
    for (s, row) in q.iter_mut().enumerate() {
        for (a, cell) in row.iter_mut().enumerate() {
            let p = inst.transition(s, a, mu);
            let cont: f64 = p.weights().iter().zip(&v).map(|(w, vv)| w * vv).sum();
            *cell = inst.reward(s, a, mu) + inst.discount() * cont;
        }
    }
    q
}

/// Power-method stationary distribution of the chain induced by a fixed
/// action per state (mean field frozen).
pub fn stationary_oracle(
    inst: &TabularInstance,
    actions: &[usize],
    mu: &Distribution,
    start: &Distribution,
) -> Vec<f64> {
    let s_n = inst.state_count();
    let mut d: Vec<f64> = start.weights().to_vec();
    for _ in 0..200_000 {
        let mut next = vec![0.0f64; s_n];
        for s in 0..s_n {
            if d[s] == 0.0 {
                continue;
            }
            let p = inst.transition(s, actions[s], mu);
            for (s2, w) in p.weights().iter().enumerate() {
                next[s2] += d[s] * w;
            }
        }
        let delta: f64 = next.iter().zip(&d).map(|(x, y)| (x - y).abs()).sum();
        d = next;
        if delta < 1e-15 {
            break;
        }
    }
    d
}
