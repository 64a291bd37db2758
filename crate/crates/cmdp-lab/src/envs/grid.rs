//! GridGather: apple/bomb gathering on a small square grid.
//!
//! The agent moves up/down/left/right (clamped at the walls), collects a
//! reward for each apple and a unit of constraint cost for each bomb it
//! walks onto, and the episode ends after a fixed number of steps or once
//! every apple is gone. Layouts are either redrawn per episode or pinned to
//! a layout seed; pinned layouts can be compiled into an exact
//! [`TabularCmdp`] for oracle checks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::{Environment, StepOutcome};
use crate::cmdp::{SparseTransition, StateRepr, TabularCmdp};

/// Hard cap on the enumerated state count of [`grid_to_tabular`].
pub const MAX_TABULAR_STATES: usize = 20_000;

const MAX_ITEMS_PER_KIND: usize = 63;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{items} items do not fit a {grid_size}x{grid_size} grid with one empty cell spare")]
    InfeasiblePlacement { items: usize, grid_size: usize },
    #[error("at most {MAX_ITEMS_PER_KIND} items of one kind are supported, got {0}")]
    TooManyItems(usize),
    #[error("episode_length must be at least 1")]
    ZeroEpisodeLength,
    #[error("stepping a finished episode")]
    EpisodeDone,
    #[error("tabular conversion requires a fixed layout seed")]
    LayoutNotFixed,
    #[error("enumeration would produce {states} states, above the cap of {MAX_TABULAR_STATES}")]
    StateSpaceOverflow { states: usize },
}

/// Item layout policy: redraw every episode, or derive once from a seed so
/// that every episode shares the same map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutMode {
    Fixed(u64),
    RandomizePerEpisode,
}

impl Serialize for LayoutMode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            LayoutMode::Fixed(seed) => serializer.serialize_u64(*seed),
            LayoutMode::RandomizePerEpisode => serializer.serialize_str("randomize-per-episode"),
        }
    }
}

impl<'de> Deserialize<'de> for LayoutMode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Seed(u64),
            Flag(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Seed(s) => Ok(LayoutMode::Fixed(s)),
            Raw::Flag(f) if f == "randomize-per-episode" => Ok(LayoutMode::RandomizePerEpisode),
            Raw::Flag(f) => Err(D::Error::custom(format!(
                "layout_seed must be an integer seed or \"randomize-per-episode\", got \"{f}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridGatherSpec {
    pub grid_size: usize,
    pub num_apples: usize,
    pub num_bombs: usize,
    pub apple_reward: f64,
    pub bomb_cost: f64,
    pub cost_limit: f64,
    pub episode_length: usize,
    pub layout_seed: LayoutMode,
}

impl Default for GridGatherSpec {
    fn default() -> Self {
        Self {
            grid_size: 5,
            num_apples: 2,
            num_bombs: 8,
            apple_reward: 10.0,
            bomb_cost: 1.0,
            cost_limit: 0.2,
            episode_length: 15,
            layout_seed: LayoutMode::RandomizePerEpisode,
        }
    }
}

impl GridGatherSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        let items = self.num_apples + self.num_bombs;
        if items + 1 > self.grid_size * self.grid_size {
            return Err(GridError::InfeasiblePlacement { items, grid_size: self.grid_size });
        }
        if self.num_apples > MAX_ITEMS_PER_KIND || self.num_bombs > MAX_ITEMS_PER_KIND {
            return Err(GridError::TooManyItems(self.num_apples.max(self.num_bombs)));
        }
        if self.episode_length == 0 {
            return Err(GridError::ZeroEpisodeLength);
        }
        Ok(())
    }

    /// Feature vector length: normalized agent row/column, one presence bit
    /// per item, and the normalized step counter.
    pub fn feature_dim(&self) -> usize {
        2 + self.num_apples + self.num_bombs + 1
    }
}

/// A point-in-time simulator state. Item cells are stored in layout order
/// and flagged off as they are collected, so item identity is stable across
/// the episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    agent: usize,
    apple_cells: Vec<usize>,
    bomb_cells: Vec<usize>,
    apple_mask: u64,
    bomb_mask: u64,
    t: usize,
}

impl EnvState {
    pub fn agent_cell(&self) -> usize {
        self.agent
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn remaining_apples(&self) -> Vec<usize> {
        masked_cells(&self.apple_cells, self.apple_mask)
    }

    pub fn remaining_bombs(&self) -> Vec<usize> {
        masked_cells(&self.bomb_cells, self.bomb_mask)
    }

    /// An episode finishes when the step budget runs out or, on maps that
    /// have apples at all, once the last apple is collected.
    pub fn is_done(&self, spec: &GridGatherSpec) -> bool {
        self.t >= spec.episode_length || (spec.num_apples > 0 && self.apple_mask == 0)
    }
}

fn masked_cells(cells: &[usize], mask: u64) -> Vec<usize> {
    cells.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &c)| c).collect()
}

fn full_mask(n: usize) -> u64 {
    if n == 0 {
        0
    } else {
        (1u64 << n) - 1
    }
}

fn place_items(spec: &GridGatherSpec, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let cells = spec.grid_size * spec.grid_size;
    let picked = sample(rng, cells, spec.num_apples + spec.num_bombs).into_vec();
    let (apples, bombs) = picked.split_at(spec.num_apples);
    (apples.to_vec(), bombs.to_vec())
}

fn sample_state(spec: &GridGatherSpec, rng: &mut ChaCha8Rng) -> EnvState {
    let (apple_cells, bomb_cells) = match spec.layout_seed {
        LayoutMode::Fixed(seed) => place_items(spec, &mut ChaCha8Rng::seed_from_u64(seed)),
        LayoutMode::RandomizePerEpisode => place_items(spec, rng),
    };
    let cells = spec.grid_size * spec.grid_size;
    let empty: Vec<usize> = (0..cells)
        .filter(|c| !apple_cells.contains(c) && !bomb_cells.contains(c))
        .collect();
    let agent = empty[rng.gen_range(0..empty.len())];
    EnvState {
        agent,
        apple_mask: full_mask(apple_cells.len()),
        bomb_mask: full_mask(bomb_cells.len()),
        apple_cells,
        bomb_cells,
        t: 0,
    }
}

/// Starts an episode: items are placed on distinct cells according to the
/// layout mode and the agent spawns on a uniformly random empty cell.
/// Deterministic given `seed`.
pub fn env_reset(spec: &GridGatherSpec, seed: u64) -> Result<EnvState, GridError> {
    spec.validate()?;
    Ok(sample_state(spec, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Advances one step: the agent moves one cell (clamped at the walls) and
/// collects whatever item sits on the cell it enters. Pure in
/// `(spec, state, action)`.
pub fn env_step(
    spec: &GridGatherSpec,
    state: &EnvState,
    action: usize,
) -> Result<(EnvState, f64, f64, bool), GridError> {
    if state.is_done(spec) {
        return Err(GridError::EpisodeDone);
    }
    assert!(action < 4, "actions are up/down/left/right");
    let g = spec.grid_size;
    let (row, col) = (state.agent / g, state.agent % g);
    let (row, col) = match action {
        0 => (row.saturating_sub(1), col),
        1 => ((row + 1).min(g - 1), col),
        2 => (row, col.saturating_sub(1)),
        _ => (row, (col + 1).min(g - 1)),
    };
    let mut next = state.clone();
    next.agent = row * g + col;
    next.t += 1;
    let mut reward = 0.0;
    let mut cost = 0.0;
    if let Some(i) = next.apple_cells.iter().position(|&c| c == next.agent) {
        if next.apple_mask & (1 << i) != 0 {
            next.apple_mask &= !(1 << i);
            reward = spec.apple_reward;
        }
    }
    if let Some(i) = next.bomb_cells.iter().position(|&c| c == next.agent) {
        if next.bomb_mask & (1 << i) != 0 {
            next.bomb_mask &= !(1 << i);
            cost = spec.bomb_cost;
        }
    }
    let done = next.is_done(spec);
    Ok((next, reward, cost, done))
}

/// Features for function approximation: normalized agent coordinates, one
/// presence bit per item in layout order, normalized step counter.
pub fn features(spec: &GridGatherSpec, state: &EnvState) -> Vec<f64> {
    let g = spec.grid_size;
    let denom = (g - 1).max(1) as f64;
    let mut f = Vec::with_capacity(spec.feature_dim());
    f.push((state.agent / g) as f64 / denom);
    f.push((state.agent % g) as f64 / denom);
    for i in 0..spec.num_apples {
        f.push(((state.apple_mask >> i) & 1) as f64);
    }
    for i in 0..spec.num_bombs {
        f.push(((state.bomb_mask >> i) & 1) as f64);
    }
    f.push(state.t as f64 / spec.episode_length as f64);
    f
}

/// Simulator wrapped as an [`Environment`]; states are reported through the
/// feature map and `id` is meaningful only for fixed layouts (where it
/// matches [`grid_to_tabular`]'s indexing).
pub struct GridEnv {
    spec: GridGatherSpec,
    gamma: f64,
    limits: Vec<f64>,
    state: Option<EnvState>,
    indexer: Option<GridIndexer>,
}

impl GridEnv {
    pub fn new(spec: GridGatherSpec, gamma: f64) -> Result<Self, GridError> {
        spec.validate()?;
        let indexer = match spec.layout_seed {
            LayoutMode::Fixed(_) => Some(GridIndexer::new(&spec)?),
            LayoutMode::RandomizePerEpisode => None,
        };
        Ok(Self {
            limits: vec![spec.cost_limit],
            gamma,
            spec,
            state: None,
            indexer,
        })
    }

    pub fn spec(&self) -> &GridGatherSpec {
        &self.spec
    }

    fn repr(&self, state: &EnvState) -> StateRepr {
        let id = self.indexer.as_ref().map_or(0, |ix| ix.index_of(state));
        StateRepr { id, features: features(&self.spec, state) }
    }
}

impl Environment for GridEnv {
    fn num_actions(&self) -> usize {
        4
    }

    fn num_cost_channels(&self) -> usize {
        1
    }

    fn limits(&self) -> &[f64] {
        &self.limits
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    fn num_states(&self) -> Option<usize> {
        self.indexer.as_ref().map(GridIndexer::num_states)
    }

    fn max_episode_steps(&self) -> usize {
        self.spec.episode_length
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> StateRepr {
        let state = sample_state(&self.spec, rng);
        let repr = self.repr(&state);
        self.state = Some(state);
        repr
    }

    fn step(&mut self, action: usize, _rng: &mut ChaCha8Rng) -> StepOutcome {
        let state = self.state.as_ref().expect("reset before step");
        let (next, reward, cost, done) =
            env_step(&self.spec, state, action).expect("stepping a live episode");
        let repr = self.repr(&next);
        self.state = Some(next);
        StepOutcome { next: repr, reward, costs: vec![cost], done }
    }
}

/// Bijection between simulator states of a fixed layout and a flat index
/// space `(cell, apple mask, bomb mask, step)`. Maps with no items at all
/// drop the mask and step components: their dynamics are time-homogeneous,
/// so only the agent cell matters.
pub struct GridIndexer {
    spec: GridGatherSpec,
    apple_cells: Vec<usize>,
    bomb_cells: Vec<usize>,
    timed: bool,
}

impl GridIndexer {
    pub fn new(spec: &GridGatherSpec) -> Result<Self, GridError> {
        spec.validate()?;
        let LayoutMode::Fixed(seed) = spec.layout_seed else {
            return Err(GridError::LayoutNotFixed);
        };
        let (apple_cells, bomb_cells) = place_items(spec, &mut ChaCha8Rng::seed_from_u64(seed));
        let timed = spec.num_apples + spec.num_bombs > 0;
        let ix = Self { spec: spec.clone(), apple_cells, bomb_cells, timed };
        if ix.num_states() > MAX_TABULAR_STATES {
            return Err(GridError::StateSpaceOverflow { states: ix.num_states() });
        }
        Ok(ix)
    }

    pub fn num_states(&self) -> usize {
        let cells = self.spec.grid_size * self.spec.grid_size;
        if self.timed {
            cells
                * (1 << self.spec.num_apples)
                * (1 << self.spec.num_bombs)
                * (self.spec.episode_length + 1)
        } else {
            cells
        }
    }

    pub fn index_of(&self, state: &EnvState) -> usize {
        if !self.timed {
            return state.agent;
        }
        let t_span = self.spec.episode_length + 1;
        ((state.agent * (1 << self.spec.num_apples) + state.apple_mask as usize)
            * (1 << self.spec.num_bombs)
            + state.bomb_mask as usize)
            * t_span
            + state.t
    }

    fn state_of(&self, index: usize) -> EnvState {
        if !self.timed {
            return EnvState {
                agent: index,
                apple_cells: self.apple_cells.clone(),
                bomb_cells: self.bomb_cells.clone(),
                apple_mask: 0,
                bomb_mask: 0,
                t: 0,
            };
        }
        let t_span = self.spec.episode_length + 1;
        let t = index % t_span;
        let rest = index / t_span;
        let bomb_mask = (rest % (1 << self.spec.num_bombs)) as u64;
        let rest = rest >> self.spec.num_bombs;
        let apple_mask = (rest % (1 << self.spec.num_apples)) as u64;
        let agent = rest >> self.spec.num_apples;
        EnvState {
            agent,
            apple_cells: self.apple_cells.clone(),
            bomb_cells: self.bomb_cells.clone(),
            apple_mask,
            bomb_mask,
            t,
        }
    }
}

/// Compiles a fixed-layout grid into an exact [`TabularCmdp`] over the
/// enumerated `(cell, item masks, step)` space. Finished configurations
/// become absorbing zero-reward states.
pub fn grid_to_tabular(spec: &GridGatherSpec, gamma: f64) -> Result<TabularCmdp, GridError> {
    let ix = GridIndexer::new(spec)?;
    let n = ix.num_states();
    let mut rows = Vec::with_capacity(n);
    for s in 0..n {
        let state = ix.state_of(s);
        let mut per_action = Vec::with_capacity(4);
        for a in 0..4 {
            let entry = if ix.timed && state.is_done(spec) {
                SparseTransition { next: s, prob: 1.0, reward: 0.0, costs: vec![0.0] }
            } else {
                let (next, reward, cost, _) =
                    env_step(spec, &state, a).expect("live state by construction");
                SparseTransition { next: ix.index_of(&next), prob: 1.0, reward, costs: vec![cost] }
            };
            per_action.push(vec![entry]);
        }
        rows.push(per_action);
    }

    let cells = spec.grid_size * spec.grid_size;
    let spawn: Vec<usize> = (0..cells)
        .filter(|c| !ix.apple_cells.contains(c) && !ix.bomb_cells.contains(c))
        .collect();
    let mut initial_dist = vec![0.0; n];
    let w = 1.0 / spawn.len() as f64;
    for &cell in &spawn {
        let start = EnvState {
            agent: cell,
            apple_cells: ix.apple_cells.clone(),
            bomb_cells: ix.bomb_cells.clone(),
            apple_mask: full_mask(spec.num_apples),
            bomb_mask: full_mask(spec.num_bombs),
            t: 0,
        };
        initial_dist[ix.index_of(&start)] = w;
    }

    Ok(TabularCmdp::from_sparse(n, 4, rows, vec![spec.cost_limit], gamma, initial_dist)
        .expect("enumerated model is well-formed"))
}
