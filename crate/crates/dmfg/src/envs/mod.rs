//! Deterministic, seedable multi-agent grid environments.
//!
//! Four families share one engine:
//!
//! * `battle` — two teams of soldiers; attack and kill rewards, HP recovery.
//! * `gather` — a free-for-all over limited food; food takes several attacks
//!   to capture, agents die to a single hit.
//! * `tiger_deer` — cooperating tigers hunt randomly moving deer; attacking a
//!   deer alongside another tiger pays, solo attacks pay a small shaping
//!   reward, and tigers slowly starve unless they eat.
//! * `combined_arms` — battle with heterogeneous teams of ranged (9 actions)
//!   and melee (5 actions) units.
//!
//! Action layout for 9-action kinds: `0` stay, `1..=4` move N/E/S/W,
//! `5..=8` attack N/E/S/W. Melee units have 5 actions: `0` stay, `1..=4`
//! advance N/E/S/W, which attacks when an enemy is in reach in that direction
//! at the start of the tick and moves otherwise. Observed mean actions are
//! zero-padded to the widest action set in play, so melee actions occupy the
//! first 5 slots.
//!
//! Tick resolution order is fixed and documented here once: intents are
//! classified from tick-start positions; all moves resolve in ascending agent
//! id (conflicts: lowest id wins, losers stay); all attacks then resolve
//! against post-move positions; deaths apply after every attack has landed;
//! deer move; HP recovery / starvation drain runs last. The per-agent
//! observed mean action averages the actions of *other* agents whose
//! tick-start position lies within the observer's view square (Chebyshev
//! distance), which is also the visibility rule for observations.

use crate::prob::{one_hot_mean, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("agent {agent} chose action {action}, but only {count} actions exist")]
    BadAction {
        agent: usize,
        action: usize,
        count: usize,
    },
    #[error("expected {want} actions (one per agent slot), got {got}")]
    WrongActionCount { got: usize, want: usize },
    #[error("grid of {cells} cells cannot hold {needed} entities")]
    Overcrowded { cells: usize, needed: usize },
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("episode is already done")]
    EpisodeOver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvName {
    Battle,
    Gather,
    TigerDeer,
    CombinedArms,
}

impl EnvName {
    pub const ALL: [EnvName; 4] = [
        EnvName::Battle,
        EnvName::Gather,
        EnvName::TigerDeer,
        EnvName::CombinedArms,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "battle" => Some(EnvName::Battle),
            "gather" => Some(EnvName::Gather),
            "tiger_deer" => Some(EnvName::TigerDeer),
            "combined_arms" => Some(EnvName::CombinedArms),
            _ => None,
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvName::Battle => "battle",
            EnvName::Gather => "gather",
            EnvName::TigerDeer => "tiger_deer",
            EnvName::CombinedArms => "combined_arms",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Soldier,
    Gatherer,
    Tiger,
    Melee,
    Ranged,
}

impl Kind {
    pub fn action_count(self) -> usize {
        match self {
            Kind::Melee => 5,
            _ => 9,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Kind::Soldier => "soldier",
            Kind::Gatherer => "gatherer",
            Kind::Tiger => "tiger",
            Kind::Melee => "melee",
            Kind::Ranged => "ranged",
        }
    }
}

/// Identity and capabilities of one agent.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub id: usize,
    pub team: usize,
    pub kind: Kind,
    pub action_count: usize,
    pub view_radius: usize,
    pub attack_radius: usize,
    pub max_hp: f64,
    pub speed: usize,
}

/// Reward and damage constants for all families; the per-family defaults
/// reproduce the reference reward structures.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    // battle / combined arms
    pub attack_hit: f64,
    pub kill: f64,
    pub step: f64,
    pub death: f64,
    pub attack_penalty: f64,
    pub hp_damage: f64,
    pub hp_recover: f64,
    // gather
    pub gather_step: f64,
    pub gather_attack_penalty: f64,
    pub gather_death: f64,
    pub food_attack: f64,
    pub food_capture: f64,
    pub food_hp: i32,
    // tiger-deer
    pub tiger_joint_attack: f64,
    pub tiger_solo_attack: f64,
    pub tiger_hp_drain: f64,
    pub tiger_eat_hp: f64,
    pub deer_hp: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        Self {
            attack_hit: 5.0,
            kill: 10.0,
            step: -0.005,
            death: -0.1,
            attack_penalty: -0.1,
            hp_damage: 2.0,
            hp_recover: 0.1,
            gather_step: -0.01,
            gather_attack_penalty: -2.0,
            gather_death: -20.0,
            food_attack: 20.0,
            food_capture: 60.0,
            food_hp: 5,
            tiger_joint_attack: 1.0,
            tiger_solo_attack: 0.2,
            tiger_hp_drain: 0.021,
            tiger_eat_hp: 8.0,
            deer_hp: 5.0,
        }
    }
}

/// Environment shape and scale. `default_for` gives the desk-scale defaults;
/// every field stays configurable.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub step_cap: usize,
    pub view_radius: usize,
    pub attack_radius: usize,
    pub max_hp: f64,
    /// Battle / combined arms: soldiers (or ranged+melee) per team.
    pub team_size: usize,
    /// Gather: number of free-for-all agents.
    pub gather_agents: usize,
    pub food_count: usize,
    /// Tiger-deer.
    pub tiger_count: usize,
    pub deer_count: usize,
    /// Combined arms split (ranged + melee must equal team_size).
    pub ranged_per_team: usize,
    pub melee_per_team: usize,
    pub ranged_attack_radius: usize,
    pub ranged_max_hp: f64,
    pub rewards: RewardTable,
}

impl GridConfig {
    pub fn default_for(name: EnvName) -> Self {
        let base = Self {
            width: 12,
            height: 12,
            step_cap: 500,
            view_radius: 3,
            attack_radius: 1,
            max_hp: 10.0,
            team_size: 5,
            gather_agents: 8,
            food_count: 10,
            tiger_count: 6,
            deer_count: 20,
            ranged_per_team: 3,
            melee_per_team: 2,
            ranged_attack_radius: 2,
            ranged_max_hp: 3.0,
            rewards: RewardTable::default(),
        };
        match name {
            EnvName::Battle | EnvName::Gather | EnvName::TigerDeer | EnvName::CombinedArms => base,
        }
    }

    fn validate(&self, name: EnvName) -> Result<(), EnvError> {
        let radius_bound = self.width.max(self.height);
        if self.view_radius >= radius_bound || self.attack_radius >= radius_bound {
            return Err(EnvError::BadConfig(
                "view and attack radii must be smaller than the grid".into(),
            ));
        }
        if name == EnvName::CombinedArms && self.ranged_per_team + self.melee_per_team != self.team_size
        {
            return Err(EnvError::BadConfig(format!(
                "combined arms team_size {} must equal ranged {} + melee {}",
                self.team_size, self.ranged_per_team, self.melee_per_team
            )));
        }
        if self.step_cap == 0 {
            return Err(EnvError::BadConfig("step cap must be positive".into()));
        }
        Ok(())
    }
}

/// Flattened local view: five channel planes over the (2r+1)^2 window
/// (own team, enemy team, resource, HP-normalized, wall), then own HP and
/// grid-normalized coordinates. All values lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-agent slice of a step.
#[derive(Debug, Clone)]
pub struct AgentStep {
    pub observation: Observation,
    pub reward: f64,
    pub alive: bool,
    /// Mean one-hot action of visible *other* agents this tick; `None` when
    /// the neighbourhood was empty (the learner substitutes its previous
    /// estimate).
    pub observed_mean_action: Option<Distribution>,
}

/// Everything a caller learns from one tick.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub per_agent: Vec<AgentStep>,
    pub done: bool,
    /// Cumulative kills credited to each team (deer count for tigers).
    pub kills_by_team: Vec<usize>,
}

/// Cumulative episode bookkeeping, also the input to [`winner`].
#[derive(Debug, Clone)]
pub struct EpisodeStats {
    pub steps: usize,
    pub team_kills: Vec<usize>,
    pub team_returns: Vec<f64>,
    pub agent_returns: Vec<f64>,
    pub deaths: Vec<bool>,
    pub agent_kills: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WinnerMode {
    TeamKills,
    IndividualReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    Team(usize),
    Agent(usize),
    Draw,
}

/// Deterministic winner rule: most kills, ties broken by cumulative team
/// reward, full tie is a draw. Individual mode: highest return wins, ties
/// draw.
pub fn winner(stats: &EpisodeStats, mode: WinnerMode) -> Winner {
    match mode {
        WinnerMode::TeamKills => {
            let max_kills = stats.team_kills.iter().max().copied().unwrap_or(0);
            let leaders: Vec<usize> = (0..stats.team_kills.len())
                .filter(|t| stats.team_kills[*t] == max_kills)
                .collect();
            if leaders.len() == 1 {
                return Winner::Team(leaders[0]);
            }
            let best_return = leaders
                .iter()
                .map(|t| stats.team_returns[*t])
                .fold(f64::NEG_INFINITY, f64::max);
            let by_return: Vec<usize> = leaders
                .into_iter()
                .filter(|t| stats.team_returns[*t] == best_return)
                .collect();
            if by_return.len() == 1 {
                Winner::Team(by_return[0])
            } else {
                Winner::Draw
            }
        }
        WinnerMode::IndividualReward => {
            let best = stats
                .agent_returns
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let leaders: Vec<usize> = (0..stats.agent_returns.len())
                .filter(|a| stats.agent_returns[*a] == best)
                .collect();
            if leaders.len() == 1 {
                Winner::Agent(leaders[0])
            } else {
                Winner::Draw
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Empty,
    Agent(usize),
    Food(usize),
    Deer(usize),
}

#[derive(Debug, Clone)]
struct AgentState {
    pos: (i32, i32),
    hp: f64,
    alive: bool,
}

#[derive(Debug, Clone)]
struct FoodState {
    pos: (i32, i32),
    hp: i32,
    alive: bool,
}

#[derive(Debug, Clone)]
struct DeerState {
    pos: (i32, i32),
    hp: f64,
    alive: bool,
}

#[derive(Debug, Clone, Copy)]
enum Intent {
    Stay,
    Move(usize),
    Attack(usize),
}

/// N, E, S, W with y growing downward.
const DIRS: [(i32, i32); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

/// One reward event, kept for auditing (the sum per agent must reproduce the
/// episode returns exactly).
#[derive(Debug, Clone)]
pub struct RewardEvent {
    pub step: usize,
    pub agent: usize,
    pub amount: f64,
    pub what: &'static str,
}

pub struct GridEnv {
    name: EnvName,
    config: GridConfig,
    specs: Vec<AgentSpec>,
    agents: Vec<AgentState>,
    food: Vec<FoodState>,
    deer: Vec<DeerState>,
    grid: Vec<Cell>,
    rng: ChaCha8Rng,
    stats: EpisodeStats,
    done: bool,
    mean_field_dim: usize,
    events: Vec<RewardEvent>,
    trace: Option<Box<dyn Write + Send>>,
}

impl GridEnv {
    /// Builds the environment and places every entity uniformly at random on
    /// distinct cells.
    pub fn new(name: EnvName, config: GridConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate(name)?;
        let specs = Self::build_specs(name, &config);
        let entity_count = specs.len()
            + match name {
                EnvName::Gather => config.food_count,
                EnvName::TigerDeer => config.deer_count,
                _ => 0,
            };
        let cells = config.width * config.height;
        if entity_count > cells {
            return Err(EnvError::Overcrowded {
                cells,
                needed: entity_count,
            });
        }
        let mean_field_dim = specs.iter().map(|s| s.action_count).max().unwrap_or(1);
        let agent_count = specs.len();
        let team_count = specs.iter().map(|s| s.team).max().unwrap_or(0) + 1;
        let mut env = Self {
            name,
            config,
            specs,
            agents: Vec::new(),
            food: Vec::new(),
            deer: Vec::new(),
            grid: vec![Cell::Empty; cells],
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: EpisodeStats {
                steps: 0,
                team_kills: vec![0; team_count],
                team_returns: vec![0.0; team_count],
                agent_returns: vec![0.0; agent_count],
                deaths: vec![false; agent_count],
                agent_kills: vec![0; agent_count],
            },
            done: false,
            mean_field_dim,
            events: Vec::new(),
            trace: None,
        };
        env.reset();
        Ok(env)
    }

    fn build_specs(name: EnvName, config: &GridConfig) -> Vec<AgentSpec> {
        let mut specs = Vec::new();
        let mut push = |team: usize, kind: Kind, view: usize, attack: usize, hp: f64| {
            let id = specs.len();
            specs.push(AgentSpec {
                id,
                team,
                kind,
                action_count: kind.action_count(),
                view_radius: view,
                attack_radius: attack,
                max_hp: hp,
                speed: 1,
            });
        };
        match name {
            EnvName::Battle => {
                for team in 0..2 {
                    for _ in 0..config.team_size {
                        push(team, Kind::Soldier, config.view_radius, config.attack_radius, config.max_hp);
                    }
                }
            }
            EnvName::Gather => {
                for _ in 0..config.gather_agents {
                    push(0, Kind::Gatherer, config.view_radius, config.attack_radius, config.max_hp);
                }
            }
            EnvName::TigerDeer => {
                for _ in 0..config.tiger_count {
                    push(0, Kind::Tiger, config.view_radius, config.attack_radius, config.max_hp);
                }
            }
            EnvName::CombinedArms => {
                for team in 0..2 {
                    for _ in 0..config.ranged_per_team {
                        push(
                            team,
                            Kind::Ranged,
                            config.view_radius,
                            config.ranged_attack_radius,
                            config.ranged_max_hp,
                        );
                    }
                    for _ in 0..config.melee_per_team {
                        push(team, Kind::Melee, config.view_radius, config.attack_radius, config.max_hp);
                    }
                }
            }
        }
        specs
    }

    /// Starts a fresh episode: full HP, everything re-placed from the
    /// environment's RNG stream.
    pub fn reset(&mut self) {
        self.grid.iter_mut().for_each(|c| *c = Cell::Empty);
        let entity_count = self.specs.len()
            + match self.name {
                EnvName::Gather => self.config.food_count,
                EnvName::TigerDeer => self.config.deer_count,
                _ => 0,
            };
        let cells = self.config.width * self.config.height;
        // partial Fisher-Yates over all cell indices
        let mut order: Vec<usize> = (0..cells).collect();
        for i in 0..entity_count {
            let j = self.rng.gen_range(i..cells);
            order.swap(i, j);
        }
        let mut slots = order.into_iter();
        let to_pos = |idx: usize, width: usize| ((idx % width) as i32, (idx / width) as i32);
        self.agents = self
            .specs
            .iter()
            .map(|spec| {
                let pos = to_pos(slots.next().unwrap(), self.config.width);
                AgentState {
                    pos,
                    hp: spec.max_hp,
                    alive: true,
                }
            })
            .collect();
        self.food.clear();
        if self.name == EnvName::Gather {
            for _ in 0..self.config.food_count {
                let pos = to_pos(slots.next().unwrap(), self.config.width);
                self.food.push(FoodState {
                    pos,
                    hp: self.config.rewards.food_hp,
                    alive: true,
                });
            }
        }
        self.deer.clear();
        if self.name == EnvName::TigerDeer {
            for _ in 0..self.config.deer_count {
                let pos = to_pos(slots.next().unwrap(), self.config.width);
                self.deer.push(DeerState {
                    pos,
                    hp: self.config.rewards.deer_hp,
                    alive: true,
                });
            }
        }
        for (id, a) in self.agents.iter().enumerate() {
            let idx = self.cell_index(a.pos);
            self.grid[idx] = Cell::Agent(id);
        }
        for (i, f) in self.food.iter().enumerate() {
            let idx = self.cell_index(f.pos);
            self.grid[idx] = Cell::Food(i);
        }
        for (i, d) in self.deer.iter().enumerate() {
            let idx = self.cell_index(d.pos);
            self.grid[idx] = Cell::Deer(i);
        }
        let teams = self.stats.team_kills.len();
        self.stats = EpisodeStats {
            steps: 0,
            team_kills: vec![0; teams],
            team_returns: vec![0.0; teams],
            agent_returns: vec![0.0; self.specs.len()],
            deaths: vec![false; self.specs.len()],
            agent_kills: vec![0; self.specs.len()],
        };
        self.done = false;
        self.events.clear();
    }

    pub fn name(&self) -> EnvName {
        self.name
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn specs(&self) -> &[AgentSpec] {
        &self.specs
    }

    pub fn agent_count(&self) -> usize {
        self.specs.len()
    }

    pub fn team_count(&self) -> usize {
        self.stats.team_kills.len()
    }

    pub fn alive(&self, id: usize) -> bool {
        self.agents[id].alive
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    pub fn events(&self) -> &[RewardEvent] {
        &self.events
    }

    /// Width of every observed mean action: the largest action set in play.
    pub fn mean_field_dim(&self) -> usize {
        self.mean_field_dim
    }

    pub fn obs_dim(&self, id: usize) -> usize {
        let w = 2 * self.specs[id].view_radius + 1;
        5 * w * w + 3
    }

    /// Streams one line per tick into `w` (format `dmfg-trace v1`).
    pub fn set_trace(&mut self, mut w: Box<dyn Write + Send>) -> std::io::Result<()> {
        writeln!(w, "dmfg-trace v1 env {} agents {}", self.name, self.specs.len())?;
        self.trace = Some(w);
        Ok(())
    }

    fn cell_index(&self, pos: (i32, i32)) -> usize {
        pos.1 as usize * self.config.width + pos.0 as usize
    }

    fn in_bounds(&self, pos: (i32, i32)) -> bool {
        pos.0 >= 0
            && pos.1 >= 0
            && (pos.0 as usize) < self.config.width
            && (pos.1 as usize) < self.config.height
    }

    fn cell(&self, pos: (i32, i32)) -> Cell {
        if self.in_bounds(pos) {
            self.grid[self.cell_index(pos)]
        } else {
            Cell::Empty
        }
    }

    /// Local window observation for one agent; zeros once it is dead.
    pub fn observe(&self, id: usize) -> Observation {
        let spec = &self.specs[id];
        let r = spec.view_radius as i32;
        let w = (2 * r + 1) as usize;
        let mut data = vec![0.0; 5 * w * w + 3];
        let state = &self.agents[id];
        if !state.alive {
            return Observation(data);
        }
        let plane = w * w;
        for dy in -r..=r {
            for dx in -r..=r {
                let cell_pos = (state.pos.0 + dx, state.pos.1 + dy);
                let idx = (dy + r) as usize * w + (dx + r) as usize;
                if !self.in_bounds(cell_pos) {
                    data[4 * plane + idx] = 1.0; // wall
                    continue;
                }
                match self.cell(cell_pos) {
                    Cell::Empty => {}
                    Cell::Agent(other) => {
                        let ospec = &self.specs[other];
                        let chan = if ospec.team == spec.team { 0 } else { 1 };
                        data[chan * plane + idx] = 1.0;
                        data[3 * plane + idx] = self.agents[other].hp / ospec.max_hp;
                    }
                    Cell::Food(fi) => {
                        data[2 * plane + idx] = 1.0;
                        data[3 * plane + idx] =
                            self.food[fi].hp as f64 / self.config.rewards.food_hp as f64;
                    }
                    Cell::Deer(di) => {
                        data[2 * plane + idx] = 1.0;
                        data[3 * plane + idx] = self.deer[di].hp / self.config.rewards.deer_hp;
                    }
                }
            }
        }
        let tail = 5 * plane;
        data[tail] = state.hp / spec.max_hp;
        data[tail + 1] = state.pos.0 as f64 / (self.config.width - 1).max(1) as f64;
        data[tail + 2] = state.pos.1 as f64 / (self.config.height - 1).max(1) as f64;
        Observation(data)
    }

    fn classify(&self, id: usize, action: usize) -> Intent {
        let spec = &self.specs[id];
        if spec.kind == Kind::Melee {
            // advance: attack when something attackable is in reach in that
            // direction at tick start, otherwise move
            return match action {
                0 => Intent::Stay,
                d => {
                    let dir = d - 1;
                    if self.scan_target(id, dir).is_some() {
                        Intent::Attack(dir)
                    } else {
                        Intent::Move(dir)
                    }
                }
            };
        }
        match action {
            0 => Intent::Stay,
            1..=4 => Intent::Move(action - 1),
            _ => Intent::Attack(action - 5),
        }
    }

    /// First attackable entity within attack radius in the given direction.
    fn scan_target(&self, attacker: usize, dir: usize) -> Option<Cell> {
        let spec = &self.specs[attacker];
        let pos = self.agents[attacker].pos;
        let (dx, dy) = DIRS[dir];
        for k in 1..=spec.attack_radius as i32 {
            let probe = (pos.0 + dx * k, pos.1 + dy * k);
            if !self.in_bounds(probe) {
                return None;
            }
            match self.cell(probe) {
                Cell::Empty => continue,
                Cell::Agent(other) => {
                    let attackable = match self.name {
                        // friendly units are transparent to attacks
                        EnvName::Battle | EnvName::CombinedArms => {
                            self.specs[other].team != spec.team
                        }
                        EnvName::Gather => true,
                        EnvName::TigerDeer => false,
                    };
                    return if attackable && self.agents[other].alive {
                        Some(Cell::Agent(other))
                    } else {
                        None // blocked by a non-attackable body
                    };
                }
                Cell::Food(fi) => {
                    return (self.name == EnvName::Gather && self.food[fi].alive)
                        .then_some(Cell::Food(fi));
                }
                Cell::Deer(di) => {
                    return (self.name == EnvName::TigerDeer && self.deer[di].alive)
                        .then_some(Cell::Deer(di));
                }
            }
        }
        None
    }

    /// Advances one tick. `actions` holds one entry per agent slot; entries
    /// for dead agents are ignored.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        if actions.len() != self.specs.len() {
            return Err(EnvError::WrongActionCount {
                got: actions.len(),
                want: self.specs.len(),
            });
        }
        for (id, spec) in self.specs.iter().enumerate() {
            if self.agents[id].alive && actions[id] >= spec.action_count {
                return Err(EnvError::BadAction {
                    agent: id,
                    action: actions[id],
                    count: spec.action_count,
                });
            }
        }
        let step_no = self.stats.steps;
        let alive_at_start: Vec<bool> = self.agents.iter().map(|a| a.alive).collect();
        let start_positions: Vec<(i32, i32)> = self.agents.iter().map(|a| a.pos).collect();
        let mut rewards = vec![0.0; self.specs.len()];
        let credit =
            |events: &mut Vec<RewardEvent>, rewards: &mut [f64], agent: usize, amount: f64, what: &'static str| {
                rewards[agent] += amount;
                events.push(RewardEvent {
                    step: step_no,
                    agent,
                    amount,
                    what,
                });
            };

        // step penalty for everyone alive at tick start
        let step_pen = match self.name {
            EnvName::Battle | EnvName::CombinedArms => self.config.rewards.step,
            EnvName::Gather => self.config.rewards.gather_step,
            EnvName::TigerDeer => 0.0,
        };
        if step_pen != 0.0 {
            for id in 0..self.specs.len() {
                if alive_at_start[id] {
                    credit(&mut self.events, &mut rewards, id, step_pen, "step");
                }
            }
        }

        // classify intents from tick-start state
        let intents: Vec<Option<Intent>> = (0..self.specs.len())
            .map(|id| alive_at_start[id].then(|| self.classify(id, actions[id])))
            .collect();

        // move phase, ascending id, live occupancy
        for id in 0..self.specs.len() {
            if let Some(Intent::Move(dir)) = intents[id] {
                let (dx, dy) = DIRS[dir];
                let speed = self.specs[id].speed as i32;
                let mut pos = self.agents[id].pos;
                for _ in 0..speed {
                    let next = (pos.0 + dx, pos.1 + dy);
                    if !self.in_bounds(next) || self.cell(next) != Cell::Empty {
                        break;
                    }
                    pos = next;
                }
                if pos != self.agents[id].pos {
                    let old = self.cell_index(self.agents[id].pos);
                    self.grid[old] = Cell::Empty;
                    let new = self.cell_index(pos);
                    self.grid[new] = Cell::Agent(id);
                    self.agents[id].pos = pos;
                }
            }
        }

        // attack phase against post-move positions, ascending id
        let mut attacked_agent: Vec<bool> = vec![false; self.specs.len()];
        let mut hitters_of_agent: Vec<Vec<usize>> = vec![Vec::new(); self.specs.len()];
        let mut gather_killed: Vec<bool> = vec![false; self.specs.len()];
        let mut deer_hitters: Vec<Vec<usize>> = vec![Vec::new(); self.deer.len()];
        for id in 0..self.specs.len() {
            let Some(Intent::Attack(dir)) = intents[id] else {
                continue;
            };
            let attack_pen = match self.name {
                EnvName::Battle | EnvName::CombinedArms => self.config.rewards.attack_penalty,
                EnvName::Gather => self.config.rewards.gather_attack_penalty,
                EnvName::TigerDeer => 0.0,
            };
            if attack_pen != 0.0 {
                credit(&mut self.events, &mut rewards, id, attack_pen, "attack_penalty");
            }
            match self.scan_target(id, dir) {
                None | Some(Cell::Empty) => {}
                Some(Cell::Agent(victim)) => match self.name {
                    EnvName::Battle | EnvName::CombinedArms => {
                        self.agents[victim].hp -= self.config.rewards.hp_damage;
                        attacked_agent[victim] = true;
                        hitters_of_agent[victim].push(id);
                        credit(
                            &mut self.events,
                            &mut rewards,
                            id,
                            self.config.rewards.attack_hit,
                            "attack_hit",
                        );
                    }
                    EnvName::Gather => {
                        // a single attack kills
                        gather_killed[victim] = true;
                        hitters_of_agent[victim].push(id);
                    }
                    EnvName::TigerDeer => unreachable!("tigers only target deer"),
                },
                Some(Cell::Food(fi)) => {
                    credit(
                        &mut self.events,
                        &mut rewards,
                        id,
                        self.config.rewards.food_attack,
                        "food_attack",
                    );
                    self.food[fi].hp -= 1;
                    if self.food[fi].hp <= 0 {
                        credit(
                            &mut self.events,
                            &mut rewards,
                            id,
                            self.config.rewards.food_capture,
                            "food_capture",
                        );
                        self.food[fi].alive = false;
                        let idx = self.cell_index(self.food[fi].pos);
                        self.grid[idx] = Cell::Empty;
                        self.stats.agent_kills[id] += 1;
                    }
                }
                Some(Cell::Deer(di)) => {
                    self.deer[di].hp -= 1.0;
                    deer_hitters[di].push(id);
                }
            }
        }

        // tiger rewards depend on how many attacked each deer
        if self.name == EnvName::TigerDeer {
            let mut eaten_by: Vec<usize> = vec![0; self.specs.len()];
            for (di, hitters) in deer_hitters.iter().enumerate() {
                if hitters.is_empty() {
                    continue;
                }
                let amount = if hitters.len() >= 2 {
                    self.config.rewards.tiger_joint_attack
                } else {
                    self.config.rewards.tiger_solo_attack
                };
                let what = if hitters.len() >= 2 {
                    "joint_deer_attack"
                } else {
                    "solo_deer_attack"
                };
                for &t in hitters {
                    credit(&mut self.events, &mut rewards, t, amount, what);
                }
                if self.deer[di].hp <= 0.0 {
                    self.deer[di].alive = false;
                    let idx = self.cell_index(self.deer[di].pos);
                    self.grid[idx] = Cell::Empty;
                    for &t in hitters {
                        eaten_by[t] += 1;
                        self.stats.agent_kills[t] += 1;
                    }
                    self.stats.team_kills[0] += 1;
                }
            }
            // drain or feed
            for id in 0..self.specs.len() {
                if !alive_at_start[id] || !self.agents[id].alive {
                    continue;
                }
                if eaten_by[id] > 0 {
                    let max = self.specs[id].max_hp;
                    self.agents[id].hp =
                        (self.agents[id].hp + eaten_by[id] as f64 * self.config.rewards.tiger_eat_hp).min(max);
                } else {
                    self.agents[id].hp -= self.config.rewards.tiger_hp_drain;
                    if self.agents[id].hp <= 0.0 {
                        self.agents[id].alive = false;
                        self.stats.deaths[id] = true;
                        let idx = self.cell_index(self.agents[id].pos);
                        self.grid[idx] = Cell::Empty;
                    }
                }
            }
        }

        // deaths after all attacks have landed
        match self.name {
            EnvName::Battle | EnvName::CombinedArms => {
                for victim in 0..self.specs.len() {
                    if alive_at_start[victim] && self.agents[victim].alive && self.agents[victim].hp <= 0.0
                    {
                        self.agents[victim].alive = false;
                        self.stats.deaths[victim] = true;
                        let idx = self.cell_index(self.agents[victim].pos);
                        self.grid[idx] = Cell::Empty;
                        credit(
                            &mut self.events,
                            &mut rewards,
                            victim,
                            self.config.rewards.death,
                            "death",
                        );
                        let killer_team = self.specs[hitters_of_agent[victim][0]].team;
                        self.stats.team_kills[killer_team] += 1;
                        for &h in &hitters_of_agent[victim] {
                            self.stats.agent_kills[h] += 1;
                            credit(&mut self.events, &mut rewards, h, self.config.rewards.kill, "kill");
                        }
                    }
                }
            }
            EnvName::Gather => {
                for victim in 0..self.specs.len() {
                    if gather_killed[victim] && self.agents[victim].alive {
                        self.agents[victim].alive = false;
                        self.stats.deaths[victim] = true;
                        let idx = self.cell_index(self.agents[victim].pos);
                        self.grid[idx] = Cell::Empty;
                        credit(
                            &mut self.events,
                            &mut rewards,
                            victim,
                            self.config.rewards.gather_death,
                            "death",
                        );
                        for &h in &hitters_of_agent[victim] {
                            self.stats.agent_kills[h] += 1;
                        }
                    }
                }
            }
            EnvName::TigerDeer => {}
        }

        // deer wander (uniform over stay + 4 directions, blocked moves stay)
        if self.name == EnvName::TigerDeer {
            for di in 0..self.deer.len() {
                if !self.deer[di].alive {
                    continue;
                }
                let pick = self.rng.gen_range(0..5usize);
                if pick == 0 {
                    continue;
                }
                let (dx, dy) = DIRS[pick - 1];
                let next = (self.deer[di].pos.0 + dx, self.deer[di].pos.1 + dy);
                if self.in_bounds(next) && self.cell(next) == Cell::Empty {
                    let old = self.cell_index(self.deer[di].pos);
                    self.grid[old] = Cell::Empty;
                    let idx = self.cell_index(next);
                    self.grid[idx] = Cell::Deer(di);
                    self.deer[di].pos = next;
                }
            }
        }

        // recovery for units not attacked this tick
        if matches!(self.name, EnvName::Battle | EnvName::CombinedArms) {
            for id in 0..self.specs.len() {
                if self.agents[id].alive && !attacked_agent[id] {
                    let max = self.specs[id].max_hp;
                    self.agents[id].hp = (self.agents[id].hp + self.config.rewards.hp_recover).min(max);
                }
            }
        }

        // bookkeeping
        for id in 0..self.specs.len() {
            self.stats.agent_returns[id] += rewards[id];
            self.stats.team_returns[self.specs[id].team] += rewards[id];
        }
        self.stats.steps += 1;
        self.done = self.stats.steps >= self.config.step_cap || self.finished();

        // observed mean actions from tick-start positions, actions of others
        let mut per_agent = Vec::with_capacity(self.specs.len());
        for id in 0..self.specs.len() {
            let observed = if alive_at_start[id] {
                let spec = &self.specs[id];
                let r = spec.view_radius as i32;
                let me = start_positions[id];
                let mut seen = Vec::new();
                for other in 0..self.specs.len() {
                    if other == id || !alive_at_start[other] {
                        continue;
                    }
                    let p = start_positions[other];
                    if (p.0 - me.0).abs() <= r && (p.1 - me.1).abs() <= r {
                        seen.push(actions[other]);
                    }
                }
                one_hot_mean(&seen, self.mean_field_dim).ok()
            } else {
                None
            };
            per_agent.push(AgentStep {
                observation: self.observe(id),
                reward: rewards[id],
                alive: self.agents[id].alive,
                observed_mean_action: observed,
            });
        }

        if let Some(w) = &mut self.trace {
            let mut line = format!("tick {step_no}");
            for id in 0..self.specs.len() {
                let a = &self.agents[id];
                line.push_str(&format!(
                    " |{id} {},{} hp {:.3} act {} rew {:.4} alive {}",
                    a.pos.0,
                    a.pos.1,
                    a.hp,
                    if alive_at_start[id] { actions[id] as i64 } else { -1 },
                    rewards[id],
                    u8::from(a.alive),
                ));
            }
            let _ = writeln!(w, "{line}");
        }

        Ok(StepOutcome {
            per_agent,
            done: self.done,
            kills_by_team: self.stats.team_kills.clone(),
        })
    }

    /// Natural termination condition (before the step cap).
    fn finished(&self) -> bool {
        match self.name {
            EnvName::Battle | EnvName::CombinedArms => {
                let mut alive = vec![false; self.team_count()];
                for (id, a) in self.agents.iter().enumerate() {
                    if a.alive {
                        alive[self.specs[id].team] = true;
                    }
                }
                alive.iter().filter(|x| **x).count() <= 1
            }
            EnvName::Gather => {
                self.food.iter().all(|f| !f.alive) || self.agents.iter().all(|a| !a.alive)
            }
            EnvName::TigerDeer => {
                self.deer.iter().all(|d| !d.alive) || self.agents.iter().all(|a| !a.alive)
            }
        }
    }

    /// Test/scenario constructor with explicit placements. Panics on
    /// overlapping or out-of-bounds placements.
    pub fn with_layout(
        name: EnvName,
        config: GridConfig,
        seed: u64,
        agent_positions: &[(i32, i32)],
        food_positions: &[(i32, i32)],
        deer_positions: &[(i32, i32)],
    ) -> Result<Self, EnvError> {
        let mut cfg = config;
        match name {
            EnvName::Gather => cfg.food_count = food_positions.len(),
            EnvName::TigerDeer => cfg.deer_count = deer_positions.len(),
            _ => {}
        }
        let mut env = Self::new(name, cfg, seed)?;
        assert_eq!(agent_positions.len(), env.specs.len(), "one position per agent");
        env.grid.iter_mut().for_each(|c| *c = Cell::Empty);
        for (id, &pos) in agent_positions.iter().enumerate() {
            assert!(env.in_bounds(pos), "agent {id} out of bounds");
            let idx = env.cell_index(pos);
            assert_eq!(env.grid[idx], Cell::Empty, "overlapping placement at {pos:?}");
            env.grid[idx] = Cell::Agent(id);
            env.agents[id].pos = pos;
            env.agents[id].hp = env.specs[id].max_hp;
            env.agents[id].alive = true;
        }
        for (i, &pos) in food_positions.iter().enumerate() {
            let idx = env.cell_index(pos);
            assert_eq!(env.grid[idx], Cell::Empty, "overlapping placement at {pos:?}");
            env.grid[idx] = Cell::Food(i);
            env.food[i].pos = pos;
        }
        for (i, &pos) in deer_positions.iter().enumerate() {
            let idx = env.cell_index(pos);
            assert_eq!(env.grid[idx], Cell::Empty, "overlapping placement at {pos:?}");
            env.grid[idx] = Cell::Deer(i);
            env.deer[i].pos = pos;
        }
        Ok(env)
    }

    /// Test hook: directly set an agent's HP.
    pub fn set_hp(&mut self, id: usize, hp: f64) {
        self.agents[id].hp = hp;
    }

    /// Test hook: directly set a deer's HP.
    pub fn set_deer_hp(&mut self, index: usize, hp: f64) {
        self.deer[index].hp = hp;
    }

    pub fn agent_hp(&self, id: usize) -> f64 {
        self.agents[id].hp
    }

    pub fn agent_pos(&self, id: usize) -> (i32, i32) {
        self.agents[id].pos
    }
}
