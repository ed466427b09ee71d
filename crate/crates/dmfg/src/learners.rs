//! Decentralized model-free agents.
//!
//! Five algorithms share one agent type, differing in their networks and in
//! which mean field they condition on:
//!
//! * `DMFG-QL` — Q-network over (obs ++ mean field), Boltzmann policy on the
//!   *current estimated* mean action produced by a trained estimator network.
//! * `DMFG-AC` — stochastic actor over obs alone, critic over
//!   (obs ++ estimated mean field).
//! * `IL` — independent Q-learning, no mean field at all.
//! * `MFQ` — like DMFG-QL but conditions on the *previous observed* local
//!   mean action; this lag is exactly what the estimator removes.
//! * `MFAC` — actor-critic counterpart of MFQ.
//!
//! Each agent owns its networks, replay buffer, exploration schedule, and
//! RNG; nothing here can read another agent's state or the simulator's
//! global state. All randomness derives from the agent's seed.

use crate::nn::{
    soft_update, weighted_one_hot, Activation, Batch, DenseNet, Loss, NnError,
};
use crate::prob::{boltzmann_policy, Distribution, QRow};
use crate::seed_for;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint {0} does not match this agent's architecture")]
    CheckpointShape(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Algorithm tags, including parse/format for configs and manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    DmfgQl,
    DmfgAc,
    Il,
    Mfq,
    Mfac,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::DmfgQl,
        Algorithm::DmfgAc,
        Algorithm::Il,
        Algorithm::Mfq,
        Algorithm::Mfac,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dmfg-ql" => Some(Algorithm::DmfgQl),
            "dmfg-ac" => Some(Algorithm::DmfgAc),
            "il" => Some(Algorithm::Il),
            "mfq" => Some(Algorithm::Mfq),
            "mfac" => Some(Algorithm::Mfac),
            _ => None,
        }
    }

    pub fn is_actor_critic(self) -> bool {
        matches!(self, Algorithm::DmfgAc | Algorithm::Mfac)
    }

    pub fn has_estimator(self) -> bool {
        matches!(self, Algorithm::DmfgQl | Algorithm::DmfgAc)
    }

    /// Whether the value network conditions on a mean-field input.
    pub fn uses_mean_field(self) -> bool {
        !matches!(self, Algorithm::Il)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Algorithm::DmfgQl => "dmfg-ql",
            Algorithm::DmfgAc => "dmfg-ac",
            Algorithm::Il => "il",
            Algorithm::Mfq => "mfq",
            Algorithm::Mfac => "mfac",
        };
        f.write_str(s)
    }
}

/// One stored transition, including the mean-field inputs used at both ends.
#[derive(Debug, Clone)]
pub struct Experience {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub mf_est: Distribution,
    pub next_mf_est: Distribution,
}

/// Ring buffer with seeded uniform sampling (without replacement per batch).
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Experience>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            items: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, exp: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(exp);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Uniform sample of `n` distinct items; `None` while the buffer is still
    /// too small (the caller skips learning).
    pub fn sample(&mut self, n: usize) -> Option<Vec<Experience>> {
        if self.items.len() < n {
            return None;
        }
        let idx = sample_indices(&mut self.rng, self.items.len(), n);
        Some(idx.into_iter().map(|i| self.items[i].clone()).collect())
    }
}

/// Per-agent network predicting the current mean action from the current
/// observation and the previously observed local mean action.
pub struct MeanFieldEstimator {
    net: DenseNet,
    obs_dim: usize,
    mf_dim: usize,
}

impl MeanFieldEstimator {
    pub fn new(obs_dim: usize, mf_dim: usize, hidden: usize, lr: f64, rng: &mut ChaCha8Rng) -> Self {
        let net = DenseNet::two_hidden(obs_dim + mf_dim, hidden, mf_dim, Activation::Softmax, lr, rng);
        Self {
            net,
            obs_dim,
            mf_dim,
        }
    }

    fn input(&self, obs: &[f64], prev: &Distribution) -> Vec<f64> {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(prev.support_size(), self.mf_dim);
        let mut x = Vec::with_capacity(self.obs_dim + self.mf_dim);
        x.extend_from_slice(obs);
        x.extend_from_slice(prev.weights());
        x
    }

    /// Forward pass: a valid distribution over actions, deterministic.
    pub fn estimate(&self, obs: &[f64], prev_observed_mean: &Distribution) -> Distribution {
        let out = self
            .net
            .forward(&self.input(obs, prev_observed_mean))
            .expect("estimator input width is fixed by construction");
        Distribution::new(out).expect("softmax output is a distribution")
    }

    /// One MSE step toward the observed mean. Returns the pre-step loss.
    pub fn train(
        &mut self,
        obs: &[f64],
        prev_observed_mean: &Distribution,
        observed_mean: &Distribution,
    ) -> Result<f64, NnError> {
        let batch = Batch::new(
            vec![self.input(obs, prev_observed_mean)],
            vec![observed_mean.weights().to_vec()],
        )?;
        self.net.train_step(&batch, Loss::Mse)
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }
}

/// Linear exploration schedule advanced once per episode.
#[derive(Debug, Clone)]
pub struct EpsilonSchedule {
    start: f64,
    end: f64,
    total_episodes: usize,
    pub position: usize,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, total_episodes: usize) -> Self {
        Self {
            start,
            end,
            total_episodes,
            position: 0,
        }
    }

    pub fn value(&self) -> f64 {
        if self.total_episodes <= 1 {
            return self.end;
        }
        let frac = (self.position as f64 / (self.total_episodes - 1) as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }

    pub fn advance(&mut self) {
        self.position += 1;
    }
}

/// Hyperparameters shared by all algorithms; defaults are the reference
/// values used throughout the experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub q_lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub estimator_lr: f64,
    pub gamma: f64,
    pub boltzmann_temp: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Target-network blend applied at the end of every episode.
    pub tau: f64,
    pub hidden: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            q_lr: 1e-2,
            actor_lr: 1e-4,
            critic_lr: 1e-2,
            estimator_lr: 1e-2,
            gamma: 0.9,
            boltzmann_temp: 0.1,
            epsilon_start: 0.20,
            epsilon_end: 0.01,
            buffer_capacity: 200_000,
            batch_size: 64,
            tau: 1.0,
            hidden: 50,
        }
    }
}

/// Losses from one learning call. For actor-critic agents `value_loss` is the
/// critic loss.
#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub value_loss: f64,
    pub actor_loss: Option<f64>,
}

/// A single decentralized learner.
pub struct AgentLearner {
    id: usize,
    algorithm: Algorithm,
    obs_dim: usize,
    action_count: usize,
    mf_dim: usize,
    hp: Hyperparameters,
    qnet: Option<DenseNet>,
    target: Option<DenseNet>,
    actor: Option<DenseNet>,
    critic: Option<DenseNet>,
    estimator: Option<MeanFieldEstimator>,
    epsilon: EpsilonSchedule,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    /// Last observed local mean action (uniform before anything is seen).
    prev_observed_mean: Distribution,
    /// Current mean-field estimate used when acting (DMFG variants).
    current_estimate: Distribution,
}

impl AgentLearner {
    pub fn new(
        id: usize,
        algorithm: Algorithm,
        obs_dim: usize,
        action_count: usize,
        mf_dim: usize,
        hp: Hyperparameters,
        training_episodes: usize,
        agent_seed: u64,
    ) -> Self {
        let mut net_rng = ChaCha8Rng::seed_from_u64(seed_for(agent_seed, 1));
        let (qnet, target, actor, critic) = if algorithm.is_actor_critic() {
            let actor = DenseNet::two_hidden(
                obs_dim,
                hp.hidden,
                action_count,
                Activation::Softmax,
                hp.actor_lr,
                &mut net_rng,
            );
            let critic = DenseNet::two_hidden(
                obs_dim + mf_dim,
                hp.hidden,
                1,
                Activation::Linear,
                hp.critic_lr,
                &mut net_rng,
            );
            (None, None, Some(actor), Some(critic))
        } else {
            let input = if algorithm.uses_mean_field() {
                obs_dim + mf_dim
            } else {
                obs_dim
            };
            let qnet = DenseNet::two_hidden(
                input,
                hp.hidden,
                action_count,
                Activation::Linear,
                hp.q_lr,
                &mut net_rng,
            );
            let target = qnet.clone();
            (Some(qnet), Some(target), None, None)
        };
        let estimator = algorithm.has_estimator().then(|| {
            let mut est_rng = ChaCha8Rng::seed_from_u64(seed_for(agent_seed, 2));
            MeanFieldEstimator::new(obs_dim, mf_dim, hp.hidden, hp.estimator_lr, &mut est_rng)
        });
        Self {
            id,
            algorithm,
            obs_dim,
            action_count,
            mf_dim,
            epsilon: EpsilonSchedule::new(hp.epsilon_start, hp.epsilon_end, training_episodes),
            buffer: ReplayBuffer::new(hp.buffer_capacity, seed_for(agent_seed, 3)),
            rng: ChaCha8Rng::seed_from_u64(seed_for(agent_seed, 4)),
            hp,
            qnet,
            target,
            actor,
            critic,
            estimator,
            prev_observed_mean: Distribution::uniform(mf_dim),
            current_estimate: Distribution::uniform(mf_dim),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.value()
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn estimator(&self) -> Option<&MeanFieldEstimator> {
        self.estimator.as_ref()
    }

    /// The mean field this agent's policy conditions on right now:
    /// the current estimate for DMFG variants, the previous observation for
    /// MFQ / MFAC, uniform (unused) for IL.
    pub fn mean_field_for_acting(&self) -> Distribution {
        match self.algorithm {
            Algorithm::DmfgQl | Algorithm::DmfgAc => self.current_estimate.clone(),
            Algorithm::Mfq | Algorithm::Mfac => self.prev_observed_mean.clone(),
            Algorithm::Il => Distribution::uniform(self.mf_dim),
        }
    }

    /// Refreshes the mean-field estimate for a fresh observation (DMFG
    /// variants feed the estimator; others carry their state unchanged).
    pub fn begin_episode(&mut self, obs: &[f64]) {
        if let Some(est) = &self.estimator {
            self.current_estimate = est.estimate(obs, &self.prev_observed_mean);
        }
    }

    fn value_input(&self, obs: &[f64], mf: &Distribution) -> Vec<f64> {
        if self.algorithm.uses_mean_field() {
            let mut x = Vec::with_capacity(self.obs_dim + self.mf_dim);
            x.extend_from_slice(obs);
            x.extend_from_slice(mf.weights());
            x
        } else {
            obs.to_vec()
        }
    }

    /// Q-values for the given observation and mean-field input (Q-learners).
    pub fn q_values(&self, obs: &[f64], mf: &Distribution) -> QRow {
        let net = self.qnet.as_ref().expect("q_values on a Q-learner");
        let out = net
            .forward(&self.value_input(obs, mf))
            .expect("input width fixed by construction");
        QRow::new(out).expect("finite network output")
    }

    /// Training-time action selection given an explicit mean-field input:
    /// epsilon-greedy overlay on a Boltzmann policy over Q for Q-learners,
    /// a sample from the actor's softmax for actor-critic agents.
    pub fn act_with(&mut self, obs: &[f64], mf: &Distribution) -> usize {
        if self.algorithm.is_actor_critic() {
            let actor = self.actor.as_ref().expect("actor present");
            let out = actor.forward(obs).expect("actor input is obs");
            return Distribution::new(out)
                .expect("softmax output")
                .sample(&mut self.rng);
        }
        if self.rng.gen::<f64>() < self.epsilon.value() {
            return self.rng.gen_range(0..self.action_count);
        }
        let q = self.q_values(obs, mf);
        boltzmann_policy(&q, self.hp.boltzmann_temp)
            .expect("finite q and positive temperature")
            .sample(&mut self.rng)
    }

    /// Training-time action using the agent's own mean-field state.
    pub fn act(&mut self, obs: &[f64]) -> usize {
        let mf = self.mean_field_for_acting();
        self.act_with(obs, &mf)
    }

    /// Execution-phase action: no exploration, no learning. Q-learners play
    /// the greedy action; actor-critic agents sample their (stochastic)
    /// policy, which is the policy itself rather than an exploration overlay.
    pub fn act_frozen(&mut self, obs: &[f64]) -> usize {
        if self.algorithm.is_actor_critic() {
            let actor = self.actor.as_ref().expect("actor present");
            let out = actor.forward(obs).expect("actor input is obs");
            return Distribution::new(out)
                .expect("softmax output")
                .sample(&mut self.rng);
        }
        let mf = self.mean_field_for_acting();
        self.q_values(obs, &mf).argmax()
    }

    /// Consumes the outcome of one environment step: trains the estimator,
    /// stores the transition, and shifts the mean-field state. An empty
    /// neighbourhood (`observed_mean = None`) reuses the previous observation
    /// unchanged. Returns the estimator loss when one was trained.
    pub fn observe_step(
        &mut self,
        obs: &[f64],
        action: usize,
        reward: f64,
        next_obs: &[f64],
        observed_mean: Option<&Distribution>,
    ) -> Option<f64> {
        let observed = observed_mean
            .cloned()
            .unwrap_or_else(|| self.prev_observed_mean.clone());
        let mut mf_loss = None;
        let (mf_t, mf_next) = match self.algorithm {
            Algorithm::DmfgQl | Algorithm::DmfgAc => {
                let est = self.estimator.as_mut().expect("estimator present");
                mf_loss = Some(
                    est.train(obs, &self.prev_observed_mean, &observed)
                        .expect("estimator training on valid inputs"),
                );
                let next_estimate = est.estimate(next_obs, &observed);
                let pair = (self.current_estimate.clone(), next_estimate.clone());
                self.current_estimate = next_estimate;
                pair
            }
            Algorithm::Mfq | Algorithm::Mfac => {
                (self.prev_observed_mean.clone(), observed.clone())
            }
            // placeholders; IL never reads these
            Algorithm::Il => (
                Distribution::uniform(self.mf_dim),
                Distribution::uniform(self.mf_dim),
            ),
        };
        self.buffer.push(Experience {
            obs: obs.to_vec(),
            action,
            reward,
            next_obs: next_obs.to_vec(),
            mf_est: mf_t,
            next_mf_est: mf_next,
        });
        self.prev_observed_mean = observed;
        mf_loss
    }

    /// Execution-phase counterpart of [`observe_step`]: keeps the mean-field
    /// state flowing (estimator forward pass only) without training or
    /// storing anything.
    ///
    /// [`observe_step`]: AgentLearner::observe_step
    pub fn observe_frozen(&mut self, observed_mean: Option<&Distribution>, next_obs: &[f64]) {
        let observed = observed_mean
            .cloned()
            .unwrap_or_else(|| self.prev_observed_mean.clone());
        if let Some(est) = &self.estimator {
            self.current_estimate = est.estimate(next_obs, &observed);
        }
        self.prev_observed_mean = observed;
    }

    /// One learning pass on a batch sampled from the agent's own buffer;
    /// `None` while the buffer holds fewer than `batch_size` items.
    pub fn learn_episode(&mut self) -> Option<LossRecord> {
        let batch = self.buffer.sample(self.hp.batch_size)?;
        Some(self.learn_from(&batch))
    }

    /// The learning update on an explicit batch.
    ///
    /// Q-learners: `y = r + gamma * max_a' Q_target(next_obs, a', next_mf)`,
    /// one MSE step on the taken action's entry. Actor-critic: critic MSE
    /// toward `y = r + gamma * V(next_obs, next_mf)`, then an actor step on
    /// `log pi(a|s)` weighted by the signed TD error `y - V(obs, mf)`.
    pub fn learn_from(&mut self, batch: &[Experience]) -> LossRecord {
        assert!(!batch.is_empty());
        if self.algorithm.is_actor_critic() {
            return self.learn_actor_critic(batch);
        }
        let gamma = self.hp.gamma;
        let target = self.target.as_ref().expect("target net present");
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for exp in batch {
            let next_input = self.value_input(&exp.next_obs, &exp.next_mf_est);
            let next_max = target
                .forward(&next_input)
                .expect("width fixed")
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            let y = exp.reward + gamma * next_max;
            let input = self.value_input(&exp.obs, &exp.mf_est);
            let mut row = self
                .qnet
                .as_ref()
                .expect("qnet present")
                .forward(&input)
                .expect("width fixed");
            row[exp.action] = y;
            inputs.push(input);
            targets.push(row);
        }
        let batch = Batch::new(inputs, targets).expect("aligned batch");
        let loss = self
            .qnet
            .as_mut()
            .expect("qnet present")
            .train_step(&batch, Loss::Mse)
            .expect("finite TD loss");
        LossRecord {
            value_loss: loss,
            actor_loss: None,
        }
    }

    fn learn_actor_critic(&mut self, batch: &[Experience]) -> LossRecord {
        let gamma = self.hp.gamma;
        let critic = self.critic.as_ref().expect("critic present");
        let mut critic_inputs = Vec::with_capacity(batch.len());
        let mut critic_targets = Vec::with_capacity(batch.len());
        let mut actor_inputs = Vec::with_capacity(batch.len());
        let mut actor_targets = Vec::with_capacity(batch.len());
        for exp in batch {
            let next_input = self.value_input(&exp.next_obs, &exp.next_mf_est);
            let v_next = critic.forward(&next_input).expect("width fixed")[0];
            let y = exp.reward + gamma * v_next;
            let input = self.value_input(&exp.obs, &exp.mf_est);
            let v = critic.forward(&input).expect("width fixed")[0];
            let td_error = y - v;
            critic_inputs.push(input);
            critic_targets.push(vec![y]);
            actor_inputs.push(exp.obs.clone());
            actor_targets.push(weighted_one_hot(exp.action, td_error, self.action_count));
        }
        let critic_batch = Batch::new(critic_inputs, critic_targets).expect("aligned batch");
        let value_loss = self
            .critic
            .as_mut()
            .expect("critic present")
            .train_step(&critic_batch, Loss::Mse)
            .expect("finite critic loss");
        let actor_batch = Batch::new(actor_inputs, actor_targets).expect("aligned batch");
        let actor_loss = self
            .actor
            .as_mut()
            .expect("actor present")
            .train_step(&actor_batch, Loss::WeightedLogProb)
            .expect("finite actor loss");
        LossRecord {
            value_loss,
            actor_loss: Some(actor_loss),
        }
    }

    /// End-of-episode bookkeeping: blend the target network toward the online
    /// one (Q-learners) and advance the exploration schedule.
    pub fn end_episode(&mut self) {
        if let (Some(target), Some(qnet)) = (self.target.as_mut(), self.qnet.as_ref()) {
            soft_update(target, qnet, self.hp.tau).expect("architectures match");
        }
        self.epsilon.advance();
    }

    /// Order-insensitive digest of every weight in every network, for
    /// freeze checks during execution.
    pub fn weights_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: &f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        let mut digest_net = |net: &DenseNet| {
            let mut buf = Vec::new();
            net.save(&mut buf).expect("in-memory write");
            for b in buf {
                mix(&(b as f64));
            }
        };
        if let Some(n) = &self.qnet {
            digest_net(n);
        }
        if let Some(n) = &self.target {
            digest_net(n);
        }
        if let Some(n) = &self.actor {
            digest_net(n);
        }
        if let Some(n) = &self.critic {
            digest_net(n);
        }
        if let Some(e) = &self.estimator {
            digest_net(e.net());
        }
        h
    }

    fn net_files(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("qnet", self.qnet.is_some()),
            ("target", self.target.is_some()),
            ("actor", self.actor.is_some()),
            ("critic", self.critic.is_some()),
            ("mf", self.estimator.is_some()),
        ]
    }

    /// Writes one checkpoint file per network:
    /// `{dir}/agent{NNN}.{qnet|target|actor|critic|mf}.txt`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), LearnerError> {
        let io = |path: &Path, source: std::io::Error| LearnerError::Io {
            path: path.display().to_string(),
            source,
        };
        let nets: Vec<(&str, &DenseNet)> = [
            ("qnet", self.qnet.as_ref()),
            ("target", self.target.as_ref()),
            ("actor", self.actor.as_ref()),
            ("critic", self.critic.as_ref()),
            ("mf", self.estimator.as_ref().map(|e| e.net())),
        ]
        .into_iter()
        .filter_map(|(tag, n)| n.map(|n| (tag, n)))
        .collect();
        for (tag, net) in nets {
            let path = dir.join(format!("agent{:03}.{tag}.txt", self.id));
            net.save_to_path(&path).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }

    /// Restores all of this agent's networks from a checkpoint directory.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<(), LearnerError> {
        for (tag, present) in self.net_files() {
            if !present {
                continue;
            }
            let path = dir.join(format!("agent{:03}.{tag}.txt", self.id));
            let net = DenseNet::load_from_path(&path)?;
            let slot: &mut DenseNet = match tag {
                "qnet" => self.qnet.as_mut().unwrap(),
                "target" => self.target.as_mut().unwrap(),
                "actor" => self.actor.as_mut().unwrap(),
                "critic" => self.critic.as_mut().unwrap(),
                "mf" => self.estimator.as_mut().unwrap().net_mut(),
                _ => unreachable!(),
            };
            if net.specs() != slot.specs() {
                return Err(LearnerError::CheckpointShape(path.display().to_string()));
            }
            *slot = net;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::l1_distance;

    fn hp() -> Hyperparameters {
        Hyperparameters::default()
    }

    fn small_agent(algorithm: Algorithm, seed: u64) -> AgentLearner {
        let mut h = hp();
        h.hidden = 8;
        h.batch_size = 4;
        AgentLearner::new(0, algorithm, 3, 4, 4, h, 100, seed)
    }

    #[test]
    fn algorithm_tags_round_trip() {
        for algo in Algorithm::ALL {
            assert_eq!(Algorithm::parse(&algo.to_string()), Some(algo));
        }
        assert_eq!(Algorithm::parse("nonsense"), None);
    }

    #[test]
    fn untrained_estimator_with_zero_weights_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut est = MeanFieldEstimator::new(3, 4, 8, 0.01, &mut rng);
        for layer in [0usize] {
            let _ = layer;
        }
        // zero all weights: softmax of zeros is uniform
        let specs = est.net().specs();
        let net = est.net_mut();
        let zeroed = {
            let mut buf = Vec::new();
            net.save(&mut buf).unwrap();
            let text = String::from_utf8(buf).unwrap();
            let mut lines: Vec<String> = text.lines().map(|s| s.to_string()).collect();
            for line in lines.iter_mut().skip(1) {
                let n = line.split_whitespace().count();
                *line = vec!["0.0"; n].join(" ");
            }
            lines.join("\n")
        };
        *net = DenseNet::load(&zeroed).unwrap();
        assert_eq!(net.specs(), specs);
        let out = est.estimate(&[0.5, -0.3, 1.0], &Distribution::uniform(4));
        for w in out.weights() {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn estimator_output_is_distribution_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = MeanFieldEstimator::new(3, 5, 10, 0.01, &mut rng);
        let obs = [0.1, 0.9, -0.4];
        let prev = Distribution::uniform(5);
        let a = est.estimate(&obs, &prev);
        let b = est.estimate(&obs, &prev);
        assert_eq!(a, b);
        let sum: f64 = a.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn estimator_fits_constant_mean_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut est = MeanFieldEstimator::new(2, 3, 50, 0.01, &mut rng);
        let target = Distribution::new(vec![0.7, 0.2, 0.1]).unwrap();
        let obs = [0.3, -0.8];
        let mut prev = Distribution::uniform(3);
        for _ in 0..2000 {
            est.train(&obs, &prev, &target).unwrap();
            prev = target.clone();
        }
        let out = est.estimate(&obs, &prev);
        assert!(l1_distance(&out, &target).unwrap() < 0.05);
    }

    #[test]
    fn estimator_loss_is_mean_over_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut est = MeanFieldEstimator::new(1, 2, 4, 1e-9, &mut rng);
        let obs = [0.5];
        let prev = Distribution::uniform(2);
        let predicted = est.estimate(&obs, &prev);
        let observed = Distribution::new(vec![1.0, 0.0]).unwrap();
        let loss = est.train(&obs, &prev, &observed).unwrap();
        let want: f64 = predicted
            .weights()
            .iter()
            .zip(observed.weights())
            .map(|(p, o)| (p - o) * (p - o))
            .sum::<f64>()
            / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn estimator_perfect_target_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut est = MeanFieldEstimator::new(2, 3, 6, 0.01, &mut rng);
        let obs = [0.2, 0.4];
        let prev = Distribution::uniform(3);
        let predicted = est.estimate(&obs, &prev);
        let loss = est.train(&obs, &prev, &predicted).unwrap();
        assert!(loss < 1e-28);
    }

    #[test]
    fn estimator_loss_trend_on_stationary_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut est = MeanFieldEstimator::new(2, 4, 20, 0.01, &mut rng);
        let target = Distribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let obs = [1.0, -1.0];
        let prev = Distribution::uniform(4);
        let losses: Vec<f64> = (0..100)
            .map(|_| est.train(&obs, &prev, &target).unwrap())
            .collect();
        // monotone within a smoothing window of 10
        let window_mean =
            |w: &[f64]| -> f64 { w.iter().sum::<f64>() / w.len() as f64 };
        let first = window_mean(&losses[0..10]);
        let mid = window_mean(&losses[45..55]);
        let last = window_mean(&losses[90..100]);
        assert!(first > mid && mid > last, "{first} {mid} {last}");
    }

    #[test]
    fn replay_buffer_ring_and_skip() {
        let mut buf = ReplayBuffer::new(3, 9);
        let exp = |r: f64| Experience {
            obs: vec![0.0],
            action: 0,
            reward: r,
            next_obs: vec![0.0],
            mf_est: Distribution::uniform(2),
            next_mf_est: Distribution::uniform(2),
        };
        assert!(buf.sample(1).is_none());
        for i in 0..5 {
            buf.push(exp(i as f64));
        }
        assert_eq!(buf.len(), 3);
        // oldest two evicted
        let rewards: Vec<f64> = buf.items.iter().map(|e| e.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        assert!(buf.sample(4).is_none());
        let batch = buf.sample(3).unwrap();
        assert_eq!(batch.len(), 3);
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(100, 1);
        for i in 0..100 {
            let exp = Experience {
                obs: vec![i as f64],
                action: 0,
                reward: 0.0,
                next_obs: vec![0.0],
                mf_est: Distribution::uniform(2),
                next_mf_est: Distribution::uniform(2),
            };
            buf.push(exp);
        }
        let mut counts = vec![0usize; 100];
        // 10_000 batches of 10 = 1e5 draws, uniform without replacement per batch
        for _ in 0..10_000 {
            for e in buf.sample(10).unwrap() {
                counts[e.obs[0] as usize] += 1;
            }
        }
        // each batch includes an index with p = 0.1 (without replacement),
        // so the count over 10^4 batches has sigma = sqrt(10^4 * 0.1 * 0.9)
        let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
        for (i, c) in counts.iter().enumerate() {
            let dev = (*c as f64 - 1000.0).abs();
            assert!(dev < 3.0 * sigma, "index {i}: count {c}");
        }
    }

    #[test]
    fn batch_samples_have_distinct_indices() {
        let mut buf = ReplayBuffer::new(10, 17);
        for i in 0..10 {
            buf.push(Experience {
                obs: vec![i as f64],
                action: 0,
                reward: 0.0,
                next_obs: vec![0.0],
                mf_est: Distribution::uniform(2),
                next_mf_est: Distribution::uniform(2),
            });
        }
        for _ in 0..50 {
            let batch = buf.sample(10).unwrap();
            let mut seen: Vec<usize> = batch.iter().map(|e| e.obs[0] as usize).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 10);
        }
    }

    #[test]
    fn epsilon_schedule_endpoints() {
        let mut agent = small_agent(Algorithm::Il, 21);
        assert!((agent.epsilon() - 0.20).abs() < 1e-12);
        for _ in 0..99 {
            agent.end_episode();
        }
        assert!((agent.epsilon() - 0.01).abs() < 1e-12);
        // stays clamped past the schedule
        agent.end_episode();
        assert!((agent.epsilon() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn epsilon_one_explores_uniformly() {
        let mut h = hp();
        h.hidden = 8;
        h.epsilon_start = 1.0;
        h.epsilon_end = 1.0;
        let mut agent = AgentLearner::new(0, Algorithm::Il, 3, 4, 4, h, 10, 33);
        let obs = [0.1, 0.2, 0.3];
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[agent.act(&obs)] += 1;
        }
        // chi-square test, df = 3, p > 0.01 iff statistic < 11.345
        let expected = n as f64 / 4.0;
        let stat: f64 = counts
            .iter()
            .map(|c| {
                let d = *c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(stat < 11.345, "chi-square statistic {stat}, counts {counts:?}");
    }

    #[test]
    fn greedy_limit_concentrates_on_argmax() {
        let mut h = hp();
        h.hidden = 4;
        h.epsilon_start = 0.0;
        h.epsilon_end = 0.0;
        h.boltzmann_temp = 1e3;
        let mut agent = AgentLearner::new(0, Algorithm::Il, 2, 3, 3, h, 10, 35);
        // zero the Q-net weights, then set distinct output biases
        let specs = agent.qnet.as_ref().unwrap().specs();
        let mut buf = Vec::new();
        agent.qnet.as_ref().unwrap().save(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        for line in lines.iter_mut().skip(1) {
            let n = line.split_whitespace().count();
            *line = vec!["0.0"; n].join(" ");
        }
        // last line is the final layer's biases
        let last = lines.len() - 1;
        lines[last] = "0.2 0.9 0.5".into();
        *agent.qnet.as_mut().unwrap() = DenseNet::load(&lines.join("\n")).unwrap();
        assert_eq!(agent.qnet.as_ref().unwrap().specs(), specs);
        let obs = [0.0, 0.0];
        let n = 2000;
        let hits = (0..n).filter(|_| agent.act(&obs) == 1).count();
        assert!(hits as f64 / n as f64 > 0.99, "hits {hits}");
    }

    #[test]
    fn act_uses_current_estimate_for_dmfg_and_previous_observation_for_mfq() {
        let mut dmfg = small_agent(Algorithm::DmfgQl, 41);
        let mut mfq = small_agent(Algorithm::Mfq, 41);
        let obs = [0.3, 0.3, 0.3];
        let c1 = Distribution::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let c2 = Distribution::new(vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        // alternating mean field: the estimator can learn the dynamics, the
        // previous-observation baseline is structurally one step behind
        let mut observed = c1.clone();
        for step in 0..4000 {
            let next = if step % 2 == 0 { c2.clone() } else { c1.clone() };
            dmfg.begin_episode(&obs);
            dmfg.observe_step(&obs, 0, 0.0, &obs, Some(&next));
            mfq.observe_step(&obs, 0, 0.0, &obs, Some(&next));
            observed = next;
        }
        // next true mean continues the alternation
        let expected_next = if l1_distance(&observed, &c1).unwrap() < 1e-9 {
            c2.clone()
        } else {
            c1.clone()
        };
        dmfg.begin_episode(&obs);
        let dmfg_input = dmfg.mean_field_for_acting();
        let mfq_input = mfq.mean_field_for_acting();
        // MFQ lags exactly one step
        assert!(l1_distance(&mfq_input, &observed).unwrap() < 1e-12);
        // the estimator has learned to predict the flip
        assert!(
            l1_distance(&dmfg_input, &expected_next).unwrap() < 0.2,
            "estimate {:?} vs expected {:?}",
            dmfg_input.weights(),
            expected_next.weights()
        );
        // and the two inputs genuinely differ at the change step
        assert!(l1_distance(&dmfg_input, &mfq_input).unwrap() > 1.0);
    }

    #[test]
    fn empty_neighborhood_reuses_previous_observation() {
        let mut agent = small_agent(Algorithm::Mfq, 43);
        let obs = [0.0, 0.0, 0.0];
        let seen = Distribution::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        agent.observe_step(&obs, 0, 0.0, &obs, Some(&seen));
        agent.observe_step(&obs, 0, 0.0, &obs, None);
        assert!(l1_distance(&agent.mean_field_for_acting(), &seen).unwrap() < 1e-12);
    }

    #[test]
    fn learn_gamma_zero_targets_are_rewards() {
        let mut h = hp();
        h.hidden = 6;
        h.gamma = 0.0;
        h.batch_size = 2;
        let mut agent = AgentLearner::new(0, Algorithm::Il, 1, 2, 2, h, 10, 47);
        // zero every network weight so Q == 0 everywhere
        zero_net(agent.qnet.as_mut().unwrap());
        zero_net(agent.target.as_mut().unwrap());
        let exp = |r: f64| Experience {
            obs: vec![0.5],
            action: 1,
            reward: r,
            next_obs: vec![0.5],
            mf_est: Distribution::uniform(2),
            next_mf_est: Distribution::uniform(2),
        };
        let record = agent.learn_from(&[exp(1.0), exp(2.0)]);
        // loss = mean over batch and the 2 outputs of (y - Q)^2, only the
        // taken action differs: (1^2 + 2^2) / (2 * 2)
        assert!((record.value_loss - 1.25).abs() < 1e-12, "{record:?}");
    }

    #[test]
    fn learn_zero_target_net_bootstraps_nothing() {
        let mut h = hp();
        h.hidden = 6;
        h.gamma = 0.9;
        let mut agent = AgentLearner::new(0, Algorithm::Il, 1, 2, 2, h, 10, 53);
        zero_net(agent.qnet.as_mut().unwrap());
        zero_net(agent.target.as_mut().unwrap());
        let exp = Experience {
            obs: vec![1.0],
            action: 0,
            reward: 3.0,
            next_obs: vec![1.0],
            mf_est: Distribution::uniform(2),
            next_mf_est: Distribution::uniform(2),
        };
        let record = agent.learn_from(&[exp]);
        // y = 3 + 0.9 * 0, loss = 9 / 2
        assert!((record.value_loss - 4.5).abs() < 1e-12);
    }

    fn zero_net(net: &mut DenseNet) {
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<String> = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == 0 {
                    l.to_string()
                } else {
                    vec!["0.0"; l.split_whitespace().count()].join(" ")
                }
            })
            .collect();
        *net = DenseNet::load(&lines.join("\n")).unwrap();
    }

    #[test]
    fn scalar_toy_matches_hand_derived_step() {
        let mut h = hp();
        h.q_lr = 1e-2;
        h.gamma = 0.0;
        let mut agent = AgentLearner::new(0, Algorithm::Il, 1, 2, 2, h, 10, 59);
        // swap in single-layer linear nets: Q(x) = W x + b
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let single = DenseNet::new(
            &[crate::nn::LayerSpec::new(1, 2, Activation::Linear)],
            1e-2,
            &mut rng,
        )
        .unwrap();
        *agent.qnet.as_mut().unwrap() = single.clone();
        *agent.target.as_mut().unwrap() = single;
        let net = agent.qnet.as_mut().unwrap();
        zero_net(net);
        // W = [0.5, -0.25]^T (column for the single input), b = 0
        let text = {
            let mut buf = Vec::new();
            net.save(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = "0.5 -0.25".into();
        *net = DenseNet::load(&lines.join("\n")).unwrap();
        let exp = Experience {
            obs: vec![2.0],
            action: 1,
            reward: 1.0,
            next_obs: vec![2.0],
            mf_est: Distribution::uniform(2),
            next_mf_est: Distribution::uniform(2),
        };
        let record = agent.learn_from(&[exp]);
        // Q(2) = [1.0, -0.5]; y = 1.0; masked MSE = (y - Q_1)^2 / 2 = 1.125
        assert!((record.value_loss - 1.125).abs() < 1e-12);
        // dL/dQ_1 = 2(Q_1 - y)/2 = -1.5; dW_1 = -1.5 * x = -3; db_1 = -1.5
        // W_1' = -0.25 + 0.01 * 3 = -0.22 ; b_1' = 0 + 0.015
        let mut buf = Vec::new();
        agent.qnet.as_ref().unwrap().save(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let weights: Vec<f64> = text
            .lines()
            .nth(1)
            .unwrap()
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        let biases: Vec<f64> = text
            .lines()
            .nth(2)
            .unwrap()
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        assert!((weights[0] - 0.5).abs() < 1e-12);
        assert!((weights[1] - (-0.22)).abs() < 1e-12);
        assert!((biases[0] - 0.0).abs() < 1e-12);
        assert!((biases[1] - 0.015).abs() < 1e-12);
    }

    #[test]
    fn learn_skips_until_buffer_fills() {
        let mut agent = small_agent(Algorithm::DmfgQl, 61);
        assert!(agent.learn_episode().is_none());
        let obs = [0.0, 0.0, 0.0];
        let seen = Distribution::uniform(4);
        for _ in 0..4 {
            agent.observe_step(&obs, 0, 0.1, &obs, Some(&seen));
        }
        assert!(agent.learn_episode().is_some());
    }

    #[test]
    fn actor_critic_learns_without_target_net() {
        let mut agent = small_agent(Algorithm::DmfgAc, 67);
        let obs = [0.1, -0.2, 0.3];
        let seen = Distribution::uniform(4);
        agent.begin_episode(&obs);
        for step in 0..8 {
            let a = agent.act(&obs);
            agent.observe_step(&obs, a, (step % 3) as f64 * 0.1, &obs, Some(&seen));
        }
        let record = agent.learn_episode().unwrap();
        assert!(record.actor_loss.is_some());
        assert!(record.value_loss.is_finite());
        agent.end_episode(); // must not panic without a target net
    }

    #[test]
    fn tau_one_copies_target() {
        let mut agent = small_agent(Algorithm::Mfq, 71);
        let obs = [0.2, 0.2, 0.2];
        let seen = Distribution::uniform(4);
        for i in 0..8 {
            agent.observe_step(&obs, i % 4, 0.5, &obs, Some(&seen));
        }
        agent.learn_episode().unwrap();
        assert_ne!(agent.qnet, agent.target);
        agent.end_episode(); // tau defaults to 1.0
        assert_eq!(agent.qnet, agent.target);
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let run = |seed: u64| -> (Vec<usize>, u64) {
            let mut agent = small_agent(Algorithm::DmfgQl, seed);
            let seen = Distribution::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
            let mut actions = Vec::new();
            for ep in 0..3 {
                let obs = [ep as f64 * 0.1, 0.0, 0.5];
                agent.begin_episode(&obs);
                for _ in 0..6 {
                    let a = agent.act(&obs);
                    actions.push(a);
                    agent.observe_step(&obs, a, 0.3, &obs, Some(&seen));
                }
                agent.learn_episode();
                agent.end_episode();
            }
            (actions, agent.weights_digest())
        };
        let (a1, d1) = run(12345);
        let (a2, d2) = run(12345);
        assert_eq!(a1, a2);
        assert_eq!(d1, d2);
        let (_, d3) = run(54321);
        assert_ne!(d1, d3);
    }

    #[test]
    fn checkpoint_round_trip_restores_behaviour() {
        let dir = tempfile::tempdir().unwrap();
        let mut agent = small_agent(Algorithm::DmfgAc, 77);
        let obs = [0.4, 0.4, 0.4];
        let seen = Distribution::uniform(4);
        agent.begin_episode(&obs);
        for _ in 0..8 {
            let a = agent.act(&obs);
            agent.observe_step(&obs, a, 0.2, &obs, Some(&seen));
        }
        agent.learn_episode().unwrap();
        agent.save_checkpoint(dir.path()).unwrap();
        let digest = agent.weights_digest();
        let mut fresh = small_agent(Algorithm::DmfgAc, 999);
        assert_ne!(fresh.weights_digest(), digest);
        fresh.load_checkpoint(dir.path()).unwrap();
        assert_eq!(fresh.weights_digest(), digest);
    }
}
