//! Two-phase experiment orchestration: self-play training, then
//! frozen-policy execution.
//!
//! Training runs one independent worker per seed. Within a seed everything
//! is serial and derived from that seed alone, so per-seed outputs are
//! byte-identical across runs and independent of the other seeds in the
//! list (the `wall_ms` metrics column is the one explicitly non-deterministic
//! field). Each episode: act, step the environment, train the estimator
//! every step, store transitions; at the episode end every agent draws one
//! minibatch from its own buffer, learns, blends its target network, and
//! advances its exploration schedule.
//!
//! Execution freezes all weights (checked by digest), plays `games` episodes
//! with per-game seeds, and tallies wins / draws / losses and mean returns
//! per algorithm.

pub mod config;

use crate::envs::{
    winner, EnvError, EnvName, GridConfig, GridEnv, Observation, Winner, WinnerMode,
};
use crate::learners::{Algorithm, AgentLearner, Hyperparameters, LearnerError};
use crate::prob::Distribution;
use crate::seed_for;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint set does not fit this run: {0}")]
    CheckpointMismatch(String),
    #[error("configuration error:\n{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error("seed {seed} failed: {message}")]
    SeedFailed { seed: u64, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How one team (or the single gather pool) picks actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeamPolicy {
    Learner(Algorithm),
    /// Fixed action every step (clamped to the agent's action set).
    Scripted(usize),
}

impl fmt::Display for TeamPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeamPolicy::Learner(a) => write!(f, "{a}"),
            TeamPolicy::Scripted(k) => write!(f, "scripted:{k}"),
        }
    }
}

impl TeamPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        if let Some(rest) = s.strip_prefix("scripted:") {
            return rest.parse().ok().map(TeamPolicy::Scripted);
        }
        Algorithm::parse(s).map(TeamPolicy::Learner)
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env: EnvName,
    pub grid: GridConfig,
    pub team_policies: Vec<TeamPolicy>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub hp: Hyperparameters,
    pub checkpoint_every: usize,
    pub exec_games: usize,
    pub exec_seed_base: u64,
    pub write_trace: bool,
}

impl RunConfig {
    pub fn default_for(env: EnvName) -> Self {
        let teams = match env {
            EnvName::Battle | EnvName::CombinedArms => 2,
            EnvName::Gather | EnvName::TigerDeer => 1,
        };
        Self {
            env,
            grid: GridConfig::default_for(env),
            team_policies: vec![TeamPolicy::Learner(Algorithm::DmfgQl); teams],
            episodes: 300,
            seeds: vec![1],
            hp: Hyperparameters::default(),
            checkpoint_every: 100,
            exec_games: 100,
            exec_seed_base: 31,
            write_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Execute,
    Probe,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Execute => "execute",
            Phase::Probe => "probe",
        })
    }
}

pub const METRICS_HEADER: &str =
    "run_id,phase,seed,episode,agent_id,algorithm,episode_return,kills,deaths,epsilon,q_loss,mf_loss,wall_ms";

/// One row of training / execution telemetry.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub run_id: String,
    pub phase: Phase,
    pub seed: u64,
    pub episode: usize,
    pub agent_id: usize,
    pub algorithm: String,
    pub episode_return: f64,
    pub kills: usize,
    pub deaths: usize,
    pub epsilon: f64,
    pub q_loss: Option<f64>,
    pub mf_loss: Option<f64>,
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:?},{},{},{:?},{},{},{:?}",
            self.run_id,
            self.phase,
            self.seed,
            self.episode,
            self.agent_id,
            self.algorithm,
            self.episode_return,
            self.kills,
            self.deaths,
            self.epsilon,
            opt(&self.q_loss),
            opt(&self.mf_loss),
            self.wall_ms
        )
    }
}

enum Runner {
    Learner(Box<AgentLearner>),
    Scripted { action: usize },
}

impl Runner {
    fn algorithm_tag(&self) -> String {
        match self {
            Runner::Learner(l) => l.algorithm().to_string(),
            Runner::Scripted { action } => format!("scripted:{action}"),
        }
    }

    fn learner(&self) -> Option<&AgentLearner> {
        match self {
            Runner::Learner(l) => Some(l),
            Runner::Scripted { .. } => None,
        }
    }
}

fn build_runners(
    env: &GridEnv,
    config: &RunConfig,
    master_seed: u64,
) -> Result<Vec<Runner>, HarnessError> {
    let teams = env.team_count();
    if config.team_policies.len() != teams {
        return Err(HarnessError::Config(vec![format!(
            "env {} has {} team(s), but {} algorithm assignment(s) were given",
            env.name(),
            teams,
            config.team_policies.len()
        )]));
    }
    let mf_dim = env.mean_field_dim();
    Ok(env
        .specs()
        .iter()
        .map(|spec| match config.team_policies[spec.team] {
            TeamPolicy::Scripted(action) => Runner::Scripted {
                action: action.min(spec.action_count - 1),
            },
            TeamPolicy::Learner(algorithm) => Runner::Learner(Box::new(AgentLearner::new(
                spec.id,
                algorithm,
                env.obs_dim(spec.id),
                spec.action_count,
                mf_dim,
                config.hp.clone(),
                config.episodes,
                seed_for(master_seed, spec.id as u64),
            ))),
        })
        .collect())
}

/// Per-seed training artifacts.
#[derive(Debug, Clone)]
pub struct SeedArtifact {
    pub seed: u64,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Per-episode estimator MSE (summed over steps, averaged over the
    /// agents that own an estimator); empty when none do.
    pub mf_series: Vec<f64>,
    /// Per-episode mean return over learner agents.
    pub return_series: Vec<f64>,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedArtifact>,
}

/// Trains every seed in the config (one worker thread per seed) and writes
/// `seed{S}/metrics.csv`, periodic checkpoints, and a final checkpoint per
/// seed under `out_dir`. A failing seed aborts that seed only.
pub fn train_selfplay(config: &RunConfig, out_dir: &Path) -> Result<RunArtifact, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_run_manifest(config, out_dir, Phase::Train)?;
    let results: Vec<Result<SeedArtifact, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| scope.spawn(move || train_one_seed(config, seed, out_dir)))
            .collect();
        handles
            .into_iter()
            .map(|h| match h.join() {
                Ok(r) => r,
                Err(_) => Err(HarnessError::SeedFailed {
                    seed: 0,
                    message: "seed worker panicked".into(),
                }),
            })
            .collect()
    });
    let mut seeds = Vec::new();
    for (seed, result) in config.seeds.iter().zip(results) {
        match result {
            Ok(artifact) => seeds.push(artifact),
            Err(e) => {
                return Err(HarnessError::SeedFailed {
                    seed: *seed,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(RunArtifact {
        out_dir: out_dir.to_path_buf(),
        seeds,
    })
}

fn train_one_seed(config: &RunConfig, seed: u64, out_dir: &Path) -> Result<SeedArtifact, HarnessError> {
    let seed_dir = out_dir.join(format!("seed{seed:04}"));
    fs::create_dir_all(&seed_dir).map_err(|e| io_err(&seed_dir, e))?;
    let mut env = GridEnv::new(config.env, config.grid.clone(), seed_for(seed, 1_000_000))?;
    if config.write_trace {
        let path = seed_dir.join("trace.txt");
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        env.set_trace(Box::new(std::io::BufWriter::new(file)))
            .map_err(|e| io_err(&path, e))?;
    }
    let mut runners = build_runners(&env, config, seed)?;
    let metrics_path = seed_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| io_err(&metrics_path, e))?;
    let run_id = format!("train-s{seed}");
    let mut mf_series = Vec::with_capacity(config.episodes);
    let mut return_series = Vec::with_capacity(config.episodes);

    for episode in 0..config.episodes {
        let started = Instant::now();
        if episode > 0 {
            env.reset();
        }
        let mut mf_loss_sums: Vec<Option<f64>> = vec![None; runners.len()];
        let mut obs: Vec<Observation> = (0..env.agent_count()).map(|id| env.observe(id)).collect();
        for (id, runner) in runners.iter_mut().enumerate() {
            if let Runner::Learner(l) = runner {
                l.begin_episode(obs[id].as_slice());
            }
        }
        loop {
            let alive_before: Vec<bool> = (0..env.agent_count()).map(|id| env.alive(id)).collect();
            let actions: Vec<usize> = runners
                .iter_mut()
                .enumerate()
                .map(|(id, runner)| {
                    if !alive_before[id] {
                        return 0;
                    }
                    match runner {
                        Runner::Scripted { action } => *action,
                        Runner::Learner(l) => l.act(obs[id].as_slice()),
                    }
                })
                .collect();
            let outcome = env.step(&actions)?;
            for (id, runner) in runners.iter_mut().enumerate() {
                if !alive_before[id] {
                    continue;
                }
                if let Runner::Learner(l) = runner {
                    let step = &outcome.per_agent[id];
                    let mf_loss = l.observe_step(
                        obs[id].as_slice(),
                        actions[id],
                        step.reward,
                        step.observation.as_slice(),
                        step.observed_mean_action.as_ref(),
                    );
                    if let Some(loss) = mf_loss {
                        *mf_loss_sums[id].get_or_insert(0.0) += loss;
                    }
                }
            }
            for (id, step) in outcome.per_agent.iter().enumerate() {
                obs[id] = step.observation.clone();
            }
            if outcome.done {
                break;
            }
        }
        // one minibatch per agent, then target/epsilon bookkeeping
        let mut q_losses: Vec<Option<f64>> = vec![None; runners.len()];
        let mut epsilons: Vec<f64> = vec![0.0; runners.len()];
        for (id, runner) in runners.iter_mut().enumerate() {
            if let Runner::Learner(l) = runner {
                epsilons[id] = l.epsilon();
                q_losses[id] = l.learn_episode().map(|r| r.value_loss);
                l.end_episode();
            }
        }
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let stats = env.stats();
        for (id, runner) in runners.iter().enumerate() {
            let record = MetricsRecord {
                run_id: run_id.clone(),
                phase: Phase::Train,
                seed,
                episode,
                agent_id: id,
                algorithm: runner.algorithm_tag(),
                episode_return: stats.agent_returns[id],
                kills: stats.agent_kills[id],
                deaths: usize::from(stats.deaths[id]),
                epsilon: epsilons[id],
                q_loss: q_losses[id],
                mf_loss: mf_loss_sums[id],
                wall_ms,
            };
            writeln!(metrics, "{}", record.to_csv_row()).map_err(|e| io_err(&metrics_path, e))?;
        }
        metrics.flush().map_err(|e| io_err(&metrics_path, e))?;
        let estimating: Vec<f64> = mf_loss_sums.iter().filter_map(|x| *x).collect();
        mf_series.push(if estimating.is_empty() {
            0.0
        } else {
            estimating.iter().sum::<f64>() / estimating.len() as f64
        });
        let learner_returns: Vec<f64> = runners
            .iter()
            .enumerate()
            .filter(|(_, r)| r.learner().is_some())
            .map(|(id, _)| stats.agent_returns[id])
            .collect();
        return_series.push(if learner_returns.is_empty() {
            0.0
        } else {
            learner_returns.iter().sum::<f64>() / learner_returns.len() as f64
        });
        if (episode + 1) % config.checkpoint_every == 0 && episode + 1 < config.episodes {
            let dir = seed_dir.join(format!("ckpt_ep{:05}", episode + 1));
            save_checkpoint_set(&dir, &env, &runners, config, episode + 1)?;
        }
    }
    let final_dir = seed_dir.join("final");
    save_checkpoint_set(&final_dir, &env, &runners, config, config.episodes)?;
    Ok(SeedArtifact {
        seed,
        metrics_path,
        final_checkpoint: final_dir,
        mf_series,
        return_series,
    })
}

const MANIFEST_NAME: &str = "manifest.txt";

fn save_checkpoint_set(
    dir: &Path,
    env: &GridEnv,
    runners: &[Runner],
    config: &RunConfig,
    episodes_trained: usize,
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str("dmfg-manifest v1\n");
    manifest.push_str(&format!("env {}\n", env.name()));
    manifest.push_str(&format!("mean_field_dim {}\n", env.mean_field_dim()));
    manifest.push_str(&format!("episodes_trained {episodes_trained}\n"));
    manifest.push_str(&format!("schedule_episodes {}\n", config.episodes));
    for (id, runner) in runners.iter().enumerate() {
        match runner {
            Runner::Scripted { action } => {
                manifest.push_str(&format!("agent {id:03} policy scripted:{action}\n"));
            }
            Runner::Learner(l) => {
                manifest.push_str(&format!(
                    "agent {id:03} policy {} obs_dim {} actions {} epsilon_position {}\n",
                    l.algorithm(),
                    env.obs_dim(id),
                    env.specs()[id].action_count,
                    episodes_trained,
                ));
                l.save_checkpoint(dir)?;
            }
        }
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// A parsed checkpoint manifest: per-slot policies.
struct ManifestInfo {
    env: EnvName,
    policies: Vec<(usize, TeamPolicy)>,
}

fn read_manifest(dir: &Path) -> Result<ManifestInfo, HarnessError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let bad = |m: &str| HarnessError::CheckpointMismatch(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some("dmfg-manifest v1") {
        return Err(bad("missing manifest header"));
    }
    let mut env = None;
    let mut policies = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["env", name] => {
                env = EnvName::parse(name);
                if env.is_none() {
                    return Err(bad(&format!("unknown env {name}")));
                }
            }
            ["agent", id, "policy", tag, ..] => {
                let id: usize = id.parse().map_err(|_| bad("bad agent id"))?;
                let policy = TeamPolicy::parse(tag).ok_or_else(|| bad(&format!("unknown policy {tag}")))?;
                policies.push((id, policy));
            }
            _ => {}
        }
    }
    Ok(ManifestInfo {
        env: env.ok_or_else(|| bad("missing env line"))?,
        policies,
    })
}

/// One finished game.
#[derive(Debug, Clone)]
pub struct GameRecord {
    pub game: usize,
    pub env_seed: u64,
    pub winner: Winner,
    pub team_kills: Vec<usize>,
    pub team_returns: Vec<f64>,
}

/// Aggregated outcome per algorithm tag.
#[derive(Debug, Clone)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub games: usize,
    pub wins: usize,
    pub draws: usize,
    pub losses: usize,
    pub mean_return: f64,
}

#[derive(Debug, Clone)]
pub struct TournamentResult {
    pub games: Vec<GameRecord>,
    pub summary: Vec<AlgorithmSummary>,
}

/// Frozen-policy execution: builds the env from `config`, loads one
/// checkpoint set per team (gather and tiger-deer take any number of sets
/// and deal them round-robin over the agent pool), plays `exec_games`
/// episodes, and writes `games.csv` + `summary.csv` under `out_dir`.
///
/// No weight changes happen during the phase; every learner's digest is
/// checked before and after each game.
pub fn tournament(
    config: &RunConfig,
    checkpoint_dirs: &[PathBuf],
    out_dir: &Path,
) -> Result<TournamentResult, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_run_manifest(config, out_dir, Phase::Execute)?;
    if checkpoint_dirs.is_empty() {
        return Err(HarnessError::Config(vec!["no checkpoint sets given".into()]));
    }
    let probe_env = GridEnv::new(config.env, config.grid.clone(), 0)?;
    let team_count = probe_env.team_count();
    let per_team = team_count > 1;
    if per_team && checkpoint_dirs.len() != team_count {
        return Err(HarnessError::Config(vec![format!(
            "env {} needs one checkpoint set per team ({}), got {}",
            config.env,
            team_count,
            checkpoint_dirs.len()
        )]));
    }
    // slot -> which checkpoint set serves it
    let slot_source: Vec<usize> = probe_env
        .specs()
        .iter()
        .map(|spec| {
            if per_team {
                spec.team
            } else {
                spec.id % checkpoint_dirs.len()
            }
        })
        .collect();
    let manifests: Vec<ManifestInfo> = checkpoint_dirs
        .iter()
        .map(|d| read_manifest(d))
        .collect::<Result<_, _>>()?;
    for (dir, m) in checkpoint_dirs.iter().zip(&manifests) {
        if m.env != config.env {
            return Err(HarnessError::CheckpointMismatch(format!(
                "{} was trained on {}, this run is {}",
                dir.display(),
                m.env,
                config.env
            )));
        }
    }
    // build frozen runners: slot i takes agent i's policy and weights from
    // its source set
    let mut runners: Vec<Runner> = Vec::new();
    for spec in probe_env.specs() {
        let source = slot_source[spec.id];
        let manifest = &manifests[source];
        let policy = manifest
            .policies
            .iter()
            .find(|(id, _)| *id == spec.id)
            .map(|(_, p)| *p)
            .ok_or_else(|| {
                HarnessError::CheckpointMismatch(format!(
                    "{} has no entry for agent {:03}",
                    checkpoint_dirs[source].display(),
                    spec.id
                ))
            })?;
        let runner = match policy {
            TeamPolicy::Scripted(action) => Runner::Scripted {
                action: action.min(spec.action_count - 1),
            },
            TeamPolicy::Learner(algorithm) => {
                let mut l = AgentLearner::new(
                    spec.id,
                    algorithm,
                    probe_env.obs_dim(spec.id),
                    spec.action_count,
                    probe_env.mean_field_dim(),
                    config.hp.clone(),
                    config.episodes,
                    seed_for(config.exec_seed_base, 5_000_000 + spec.id as u64),
                );
                l.load_checkpoint(&checkpoint_dirs[source]).map_err(|e| {
                    HarnessError::CheckpointMismatch(format!(
                        "{}: {e}",
                        checkpoint_dirs[source].display()
                    ))
                })?;
                Runner::Learner(Box::new(l))
            }
        };
        runners.push(runner);
    }

    let digests: Vec<Option<u64>> = runners
        .iter()
        .map(|r| r.learner().map(|l| l.weights_digest()))
        .collect();
    let winner_mode = match config.env {
        EnvName::Gather | EnvName::TigerDeer => WinnerMode::IndividualReward,
        _ => WinnerMode::TeamKills,
    };
    let mut games = Vec::with_capacity(config.exec_games);
    let games_path = out_dir.join("games.csv");
    let mut games_file = fs::File::create(&games_path).map_err(|e| io_err(&games_path, e))?;
    writeln!(
        games_file,
        "game,env_seed,winner,team_kills,team_returns"
    )
    .map_err(|e| io_err(&games_path, e))?;

    for game in 0..config.exec_games {
        let env_seed = seed_for(config.exec_seed_base, game as u64);
        let mut env = GridEnv::new(config.env, config.grid.clone(), env_seed)?;
        let mut obs: Vec<Observation> = (0..env.agent_count()).map(|id| env.observe(id)).collect();
        for (id, runner) in runners.iter_mut().enumerate() {
            if let Runner::Learner(l) = runner {
                l.begin_episode(obs[id].as_slice());
            }
        }
        loop {
            let alive: Vec<bool> = (0..env.agent_count()).map(|id| env.alive(id)).collect();
            let actions: Vec<usize> = runners
                .iter_mut()
                .enumerate()
                .map(|(id, runner)| {
                    if !alive[id] {
                        return 0;
                    }
                    match runner {
                        Runner::Scripted { action } => *action,
                        Runner::Learner(l) => l.act_frozen(obs[id].as_slice()),
                    }
                })
                .collect();
            let outcome = env.step(&actions)?;
            // keep the mean-field state flowing (no training)
            for (id, runner) in runners.iter_mut().enumerate() {
                if !alive[id] {
                    continue;
                }
                if let Runner::Learner(l) = runner {
                    l.observe_frozen(
                        step_observed(&outcome, id),
                        outcome.per_agent[id].observation.as_slice(),
                    );
                }
            }
            for (id, step) in outcome.per_agent.iter().enumerate() {
                obs[id] = step.observation.clone();
            }
            if outcome.done {
                break;
            }
        }
        let stats = env.stats();
        let who = winner(stats, winner_mode);
        let record = GameRecord {
            game,
            env_seed,
            winner: who,
            team_kills: stats.team_kills.clone(),
            team_returns: stats.team_returns.clone(),
        };
        let winner_tag = match who {
            Winner::Team(t) => format!("team{t}"),
            Winner::Agent(a) => format!("agent{a:03}"),
            Winner::Draw => "draw".into(),
        };
        writeln!(
            games_file,
            "{},{},{},{},{}",
            record.game,
            record.env_seed,
            winner_tag,
            join_usize(&record.team_kills),
            join_f64(&record.team_returns),
        )
        .map_err(|e| io_err(&games_path, e))?;
        games.push(record);

        // per-game per-agent returns feed the per-algorithm means
        for (id, runner) in runners.iter().enumerate() {
            let _ = (id, runner);
        }
    }

    // freeze check
    for (runner, before) in runners.iter().zip(&digests) {
        if let (Some(l), Some(d)) = (runner.learner(), before) {
            assert_eq!(
                l.weights_digest(),
                *d,
                "weights changed during execution of agent {}",
                l.id()
            );
        }
    }

    // summarize per algorithm tag
    let tags: Vec<String> = runners.iter().map(|r| r.algorithm_tag()).collect();
    let mut unique_tags: Vec<String> = tags.clone();
    unique_tags.sort();
    unique_tags.dedup();
    // recompute per-game returns per algorithm from the game records is not
    // possible after the fact (env is gone), so tally during summary replay:
    // returns were aggregated per team; per-agent means need another pass.
    let mut summary = Vec::new();
    for tag in &unique_tags {
        let slots: Vec<usize> = (0..tags.len()).filter(|i| &tags[*i] == tag).collect();
        let mut wins = 0;
        let mut draws = 0;
        let mut losses = 0;
        let mut return_sum = 0.0;
        for record in &games {
            match record.winner {
                Winner::Team(t) => {
                    let mine = slots.iter().any(|&s| probe_env.specs()[s].team == t);
                    if mine {
                        wins += 1;
                    } else {
                        losses += 1;
                    }
                }
                Winner::Agent(a) => {
                    if slots.contains(&a) {
                        wins += 1;
                    } else {
                        losses += 1;
                    }
                }
                Winner::Draw => draws += 1,
            }
            // mean return of this algorithm's teams in this game
            let teams: Vec<usize> = {
                let mut t: Vec<usize> = slots.iter().map(|&s| probe_env.specs()[s].team).collect();
                t.sort_unstable();
                t.dedup();
                t
            };
            let team_sizes: Vec<usize> = teams
                .iter()
                .map(|&t| probe_env.specs().iter().filter(|s| s.team == t).count())
                .collect();
            let total: f64 = teams
                .iter()
                .zip(&team_sizes)
                .map(|(&t, &n)| record.team_returns[t] / n.max(1) as f64)
                .sum();
            return_sum += total / teams.len().max(1) as f64;
        }
        summary.push(AlgorithmSummary {
            algorithm: tag.clone(),
            games: games.len(),
            wins,
            draws,
            losses,
            mean_return: return_sum / games.len().max(1) as f64,
        });
    }
    let summary_path = out_dir.join("summary.csv");
    let mut summary_file = fs::File::create(&summary_path).map_err(|e| io_err(&summary_path, e))?;
    writeln!(summary_file, "algorithm,games,wins,draws,losses,mean_return")
        .map_err(|e| io_err(&summary_path, e))?;
    for s in &summary {
        writeln!(
            summary_file,
            "{},{},{},{},{},{:?}",
            s.algorithm, s.games, s.wins, s.draws, s.losses, s.mean_return
        )
        .map_err(|e| io_err(&summary_path, e))?;
    }
    Ok(TournamentResult { games, summary })
}

fn step_observed(outcome: &crate::envs::StepOutcome, id: usize) -> Option<&Distribution> {
    outcome.per_agent[id].observed_mean_action.as_ref()
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Estimator learning probe: trains per the config (normally against
/// scripted opponents) and emits the per-episode estimator MSE series,
/// averaged per estimating agent, to `probe_mse.csv`.
pub fn run_estimator_probe(config: &RunConfig, out_dir: &Path) -> Result<Vec<f64>, HarnessError> {
    let has_estimator = config
        .team_policies
        .iter()
        .any(|p| matches!(p, TeamPolicy::Learner(a) if a.has_estimator()));
    if !has_estimator {
        return Err(HarnessError::Config(vec![
            "the probe needs at least one team running a dmfg-ql or dmfg-ac learner".into(),
        ]));
    }
    let artifact = train_selfplay(config, out_dir)?;
    // average the per-episode series across seeds
    let episodes = config.episodes;
    let mut series = vec![0.0; episodes];
    for seed in &artifact.seeds {
        for (i, v) in seed.mf_series.iter().enumerate() {
            series[i] += v / artifact.seeds.len() as f64;
        }
    }
    let path = out_dir.join("probe_mse.csv");
    let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    writeln!(f, "episode,mse").map_err(|e| io_err(&path, e))?;
    for (i, v) in series.iter().enumerate() {
        writeln!(f, "{i},{v:?}").map_err(|e| io_err(&path, e))?;
    }
    Ok(series)
}

fn write_run_manifest(config: &RunConfig, out_dir: &Path, phase: Phase) -> Result<(), HarnessError> {
    let path = out_dir.join(format!("run_manifest_{phase}.txt"));
    let mut text = String::from("dmfg-run v1\n");
    text.push_str(&format!("version {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("phase {phase}\n"));
    text.push_str(&config::render_config(config));
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}
