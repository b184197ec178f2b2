//! Desk-scale cooperative gridworlds.
//!
//! Two worlds are built in:
//!
//! * **Spread**: `n` agents and `n` landmarks on a `G x G` grid. Team reward
//!   per step is `-(1/(n*G)) * sum_l min_i manhattan(agent_i, l) - 0.05 * collisions`,
//!   where `collisions` counts agent pairs sharing a cell. Horizon 25.
//! * **KeyCorridor**: a 7x5 grid split by a wall column with a single door.
//!   The door opens (permanently) once any agent stands on the switch cell,
//!   which sits next to agent 0's start. Reward per step is
//!   `0.1 * (#agents in goal region) - 0.01`. Horizon 30.
//!
//! Moves are simultaneous and computed from positions at time `t`; moves into
//! walls, the closed door or off the grid leave the agent in place. Agents may
//! overlap. All observation components lie in `[-1, 1]`.
//!
//! [`Env`] also supports two diagnostic modifiers used by tests: a zero-reward
//! mode and an inert agent whose actions are ignored.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_from, Rng};
use crate::{EmaiError, Result};

/// Discrete action or continuous action vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { lb: Vec<f64>, ub: Vec<f64> },
}

impl ActionSpace {
    pub fn discrete(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(EmaiError::invalid(format!("discrete action space needs k >= 2, got {k}")));
        }
        Ok(ActionSpace::Discrete(k))
    }

    pub fn continuous(lb: Vec<f64>, ub: Vec<f64>) -> Result<Self> {
        if lb.is_empty() || lb.len() != ub.len() {
            return Err(EmaiError::invalid("continuous bounds must be non-empty and equal length"));
        }
        if lb.iter().zip(&ub).any(|(l, u)| !(l < u)) {
            return Err(EmaiError::invalid("continuous bounds need lb < ub element-wise"));
        }
        Ok(ActionSpace::Continuous { lb, ub })
    }

    pub fn n_discrete(&self) -> Option<usize> {
        match self {
            ActionSpace::Discrete(k) => Some(*k),
            ActionSpace::Continuous { .. } => None,
        }
    }

    pub fn contains(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionSpace::Discrete(k), Action::Discrete(a)) => a < k,
            (ActionSpace::Continuous { lb, ub }, Action::Continuous(v)) => {
                v.len() == lb.len()
                    && v.iter().zip(lb.iter().zip(ub)).all(|(x, (l, u))| x >= l && x <= u)
            }
            _ => false,
        }
    }
}

/// Uniform random action: any of the `k` discrete actions (the original one
/// included), or a per-dimension uniform draw over `[lb, ub]`.
pub fn random_action(space: &ActionSpace, rng: &mut Rng) -> Action {
    match space {
        ActionSpace::Discrete(k) => Action::Discrete(rng.gen_range(0..*k)),
        ActionSpace::Continuous { lb, ub } => Action::Continuous(
            lb.iter().zip(ub).map(|(l, u)| rng.gen_range(*l..=*u)).collect(),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub horizon: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
}

/// Grid moves. `y` grows downward, so `Up` decrements the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Stay = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

pub const N_MOVES: usize = 5;

impl Move {
    pub const ALL: [Move; N_MOVES] = [Move::Stay, Move::Up, Move::Down, Move::Left, Move::Right];

    pub fn from_index(a: usize) -> Option<Move> {
        Move::ALL.get(a).copied()
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Move::Stay => (0, 0),
            Move::Up => (0, -1),
            Move::Down => (0, 1),
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn shifted(self, m: Move) -> Cell {
        let (dx, dy) = m.delta();
        Cell::new(self.x + dx, self.y + dy)
    }
}

/// Maps a grid coordinate in `0..extent` to `[-1, 1]`.
pub fn norm_coord(v: i32, extent: i32) -> f64 {
    2.0 * v as f64 / (extent - 1) as f64 - 1.0
}

/// Inverse of [`norm_coord`], rounding to the nearest cell and clamping.
pub fn decode_coord(v: f64, extent: i32) -> i32 {
    let raw = ((v + 1.0) * 0.5 * (extent - 1) as f64).round() as i32;
    raw.clamp(0, extent - 1)
}

/// Maps a signed offset to `[-1, 1]` by the largest possible offset.
pub fn norm_offset(d: i32, extent: i32) -> f64 {
    d as f64 / (extent - 1) as f64
}

pub fn decode_offset(v: f64, extent: i32) -> i32 {
    (v * (extent - 1) as f64).round() as i32
}

// ---------------------------------------------------------------------------
// Spread

pub const SPREAD_HORIZON: usize = 25;
pub const SPREAD_COLLISION_PENALTY: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Spread {
    pub n: usize,
    pub grid: i32,
    pub agents: Vec<Cell>,
    pub landmarks: Vec<Cell>,
}

impl Spread {
    pub fn new(n: usize, grid: usize) -> Result<Self> {
        if n < 2 {
            return Err(EmaiError::invalid(format!("spread needs at least 2 agents, got {n}")));
        }
        if grid < 2 || grid * grid < n {
            return Err(EmaiError::invalid(format!("grid {grid} too small for {n} landmarks")));
        }
        Ok(Spread {
            n,
            grid: grid as i32,
            agents: vec![Cell::new(0, 0); n],
            landmarks: vec![Cell::new(0, 0); n],
        })
    }

    /// Team reward for a configuration of agents and landmarks.
    pub fn reward_for(grid: i32, agents: &[Cell], landmarks: &[Cell]) -> f64 {
        let n = agents.len();
        let dist: i32 = landmarks
            .iter()
            .map(|l| agents.iter().map(|a| a.manhattan(*l)).min().unwrap_or(0))
            .sum();
        let mut collisions = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                if agents[i] == agents[j] {
                    collisions += 1;
                }
            }
        }
        -(dist as f64) / (n as f64 * grid as f64) - SPREAD_COLLISION_PENALTY * collisions as f64
    }

    fn reset(&mut self, rng: &mut Rng) {
        let g = self.grid;
        let mut landmarks: Vec<Cell> = Vec::with_capacity(self.n);
        while landmarks.len() < self.n {
            let c = Cell::new(rng.gen_range(0..g), rng.gen_range(0..g));
            if !landmarks.contains(&c) {
                landmarks.push(c);
            }
        }
        self.landmarks = landmarks;
        self.agents = (0..self.n)
            .map(|_| Cell::new(rng.gen_range(0..g), rng.gen_range(0..g)))
            .collect();
    }

    fn move_agent(&self, c: Cell, m: Move) -> Cell {
        let next = c.shifted(m);
        if next.x < 0 || next.y < 0 || next.x >= self.grid || next.y >= self.grid {
            c
        } else {
            next
        }
    }

    pub fn observation(&self, i: usize) -> Vec<f64> {
        let g = self.grid;
        let me = self.agents[i];
        let mut o = Vec::with_capacity(self.obs_dim());
        o.push(norm_coord(me.x, g));
        o.push(norm_coord(me.y, g));
        for l in &self.landmarks {
            o.push(norm_offset(l.x - me.x, g));
            o.push(norm_offset(l.y - me.y, g));
        }
        for (j, a) in self.agents.iter().enumerate() {
            if j != i {
                o.push(norm_offset(a.x - me.x, g));
                o.push(norm_offset(a.y - me.y, g));
            }
        }
        o
    }

    pub fn obs_dim(&self) -> usize {
        2 + 2 * self.n + 2 * (self.n - 1)
    }

    fn state(&self, t: usize) -> Vec<f64> {
        let g = self.grid;
        let mut s: Vec<f64> = Vec::with_capacity(4 * self.n + 1);
        for c in self.agents.iter().chain(&self.landmarks) {
            s.push(norm_coord(c.x, g));
            s.push(norm_coord(c.y, g));
        }
        s.push(2.0 * t as f64 / SPREAD_HORIZON as f64 - 1.0);
        s
    }
}

// ---------------------------------------------------------------------------
// KeyCorridor

pub const KC_WIDTH: i32 = 7;
pub const KC_HEIGHT: i32 = 5;
pub const KC_AGENTS: usize = 3;
pub const KC_HORIZON: usize = 30;
pub const KC_WALL_X: i32 = 4;
pub const KC_DOOR: Cell = Cell::new(4, 2);
pub const KC_SWITCH: Cell = Cell::new(0, 4);
pub const KC_AGENT0_START: Cell = Cell::new(1, 1);
/// Cell directly in front of the door on the start side.
pub const KC_DOOR_APPROACH: Cell = Cell::new(3, 2);
pub const KC_OBS_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct KeyCorridor {
    pub agents: Vec<Cell>,
    pub door_open: bool,
}

impl KeyCorridor {
    pub fn new() -> Self {
        KeyCorridor {
            agents: vec![KC_AGENT0_START; KC_AGENTS],
            door_open: false,
        }
    }

    pub fn in_goal(c: Cell) -> bool {
        c.x > KC_WALL_X
    }

    /// Whether a cell can be occupied given the door state.
    pub fn walkable(c: Cell, door_open: bool) -> bool {
        if c.x < 0 || c.y < 0 || c.x >= KC_WIDTH || c.y >= KC_HEIGHT {
            return false;
        }
        if c.x == KC_WALL_X {
            return c == KC_DOOR && door_open;
        }
        true
    }

    pub fn step_cell(c: Cell, m: Move, door_open: bool) -> Cell {
        let next = c.shifted(m);
        if Self::walkable(next, door_open) {
            next
        } else {
            c
        }
    }

    /// Agent 0 starts next to the switch; agents 1 and 2 start anywhere in
    /// the two columns nearest the door.
    fn reset(&mut self, rng: &mut Rng) {
        self.door_open = false;
        self.agents[0] = KC_AGENT0_START;
        for i in 1..KC_AGENTS {
            self.agents[i] = Cell::new(rng.gen_range(2..KC_WALL_X), rng.gen_range(0..KC_HEIGHT));
        }
    }

    pub fn reward_for(agents: &[Cell]) -> f64 {
        0.1 * agents.iter().filter(|c| Self::in_goal(**c)).count() as f64 - 0.01
    }

    pub fn observation(&self, i: usize) -> Vec<f64> {
        let me = self.agents[i];
        vec![
            norm_coord(me.x, KC_WIDTH),
            norm_coord(me.y, KC_HEIGHT),
            if self.door_open { 1.0 } else { -1.0 },
            norm_offset(KC_SWITCH.x - me.x, KC_WIDTH),
            norm_offset(KC_SWITCH.y - me.y, KC_HEIGHT),
            norm_offset(KC_DOOR.x - me.x, KC_WIDTH),
            norm_offset(KC_DOOR.y - me.y, KC_HEIGHT),
        ]
    }

    fn state(&self, t: usize) -> Vec<f64> {
        let mut s = Vec::with_capacity(2 * KC_AGENTS + 2);
        for c in &self.agents {
            s.push(norm_coord(c.x, KC_WIDTH));
            s.push(norm_coord(c.y, KC_HEIGHT));
        }
        s.push(if self.door_open { 1.0 } else { -1.0 });
        s.push(2.0 * t as f64 / KC_HORIZON as f64 - 1.0);
        s
    }

    /// Static map rows: `#` wall, `D` door, `S` switch, `G` goal, `.` floor.
    pub fn layout() -> Vec<String> {
        (0..KC_HEIGHT)
            .map(|y| {
                (0..KC_WIDTH)
                    .map(|x| {
                        let c = Cell::new(x, y);
                        if c == KC_DOOR {
                            'D'
                        } else if x == KC_WALL_X {
                            '#'
                        } else if c == KC_SWITCH {
                            'S'
                        } else if Self::in_goal(c) {
                            'G'
                        } else {
                            '.'
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

impl Default for KeyCorridor {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Env

#[derive(Debug, Clone, PartialEq)]
pub enum World {
    Spread(Spread),
    KeyCorridor(KeyCorridor),
}

/// Which built-in world, with parameters. Parsed from config strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorldKind {
    Spread { n: usize, grid: usize },
    KeyCorridor,
}

/// A seeded episodic environment instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    world: World,
    spec: EnvSpec,
    t: usize,
    done: bool,
    started: bool,
    zero_reward: bool,
    inert_agent: Option<usize>,
}

impl Env {
    pub fn spread(n: usize, grid: usize) -> Result<Self> {
        let w = Spread::new(n, grid)?;
        let spec = EnvSpec {
            name: "spread".into(),
            n_agents: n,
            obs_dim: w.obs_dim(),
            state_dim: 4 * n + 1,
            action_space: ActionSpace::Discrete(N_MOVES),
            horizon: SPREAD_HORIZON,
            gamma: 0.99,
        };
        Ok(Self::from_parts(World::Spread(w), spec))
    }

    pub fn key_corridor() -> Self {
        let spec = EnvSpec {
            name: "key-corridor".into(),
            n_agents: KC_AGENTS,
            obs_dim: KC_OBS_DIM,
            state_dim: 2 * KC_AGENTS + 2,
            action_space: ActionSpace::Discrete(N_MOVES),
            horizon: KC_HORIZON,
            gamma: 0.99,
        };
        Self::from_parts(World::KeyCorridor(KeyCorridor::new()), spec)
    }

    pub fn from_kind(kind: &WorldKind) -> Result<Self> {
        match kind {
            WorldKind::Spread { n, grid } => Self::spread(*n, *grid),
            WorldKind::KeyCorridor => Ok(Self::key_corridor()),
        }
    }

    fn from_parts(world: World, spec: EnvSpec) -> Self {
        Env {
            world,
            spec,
            t: 0,
            done: false,
            started: false,
            zero_reward: false,
            inert_agent: None,
        }
    }

    /// Diagnostic: team reward is always 0.
    pub fn with_zero_reward(mut self) -> Self {
        self.zero_reward = true;
        self.spec.name = format!("{}+zero-reward", self.spec.name);
        self
    }

    /// Diagnostic: agent `i`'s actions are replaced by `Stay` before the
    /// transition, so nothing it does matters.
    pub fn with_inert_agent(mut self, i: usize) -> Result<Self> {
        if i >= self.spec.n_agents {
            return Err(EmaiError::invalid(format!("inert agent {i} out of range")));
        }
        self.inert_agent = Some(i);
        self.spec.name = format!("{}+inert{}", self.spec.name, i);
        Ok(self)
    }

    /// Replaces the world configuration (positions etc.) directly. The
    /// episode restarts at `t = 0`. Useful for hand-built test scenarios.
    pub fn set_world(&mut self, world: World) -> Result<()> {
        match (&self.world, &world) {
            (World::Spread(a), World::Spread(b)) if a.n == b.n && a.grid == b.grid => {}
            (World::KeyCorridor(_), World::KeyCorridor(_)) => {}
            _ => return Err(EmaiError::invalid("set_world: world kind or size differs")),
        }
        self.world = world;
        self.t = 0;
        self.done = false;
        self.started = true;
        Ok(())
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut rng = rng_from(seed);
        match &mut self.world {
            World::Spread(w) => w.reset(&mut rng),
            World::KeyCorridor(w) => w.reset(&mut rng),
        }
        self.t = 0;
        self.done = false;
        self.started = true;
        (self.state(), self.observations())
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.spec.n_agents).map(|i| self.observation(i)).collect()
    }

    pub fn observation(&self, i: usize) -> Vec<f64> {
        match &self.world {
            World::Spread(w) => w.observation(i),
            World::KeyCorridor(w) => w.observation(i),
        }
    }

    pub fn state(&self) -> Vec<f64> {
        match &self.world {
            World::Spread(w) => w.state(self.t),
            World::KeyCorridor(w) => w.state(self.t),
        }
    }

    pub fn positions(&self) -> Vec<Cell> {
        match &self.world {
            World::Spread(w) => w.agents.clone(),
            World::KeyCorridor(w) => w.agents.clone(),
        }
    }

    pub fn grid_size(&self) -> (i32, i32) {
        match &self.world {
            World::Spread(w) => (w.grid, w.grid),
            World::KeyCorridor(_) => (KC_WIDTH, KC_HEIGHT),
        }
    }

    /// Static map for rendering; landmarks are drawn as `L`.
    pub fn layout(&self) -> Vec<String> {
        match &self.world {
            World::Spread(w) => (0..w.grid)
                .map(|y| {
                    (0..w.grid)
                        .map(|x| if w.landmarks.contains(&Cell::new(x, y)) { 'L' } else { '.' })
                        .collect()
                })
                .collect(),
            World::KeyCorridor(_) => KeyCorridor::layout(),
        }
    }

    pub fn door_open(&self) -> Option<bool> {
        match &self.world {
            World::KeyCorridor(w) => Some(w.door_open),
            World::Spread(_) => None,
        }
    }

    pub fn step(&mut self, joint_action: &[Action]) -> Result<StepResult> {
        if !self.started || self.done {
            return Err(EmaiError::EpisodeDone);
        }
        let n = self.spec.n_agents;
        if joint_action.len() != n {
            return Err(EmaiError::invalid(format!(
                "joint action has {} entries, expected {n}",
                joint_action.len()
            )));
        }
        let mut moves = Vec::with_capacity(n);
        for (i, a) in joint_action.iter().enumerate() {
            let m = a
                .discrete()
                .and_then(Move::from_index)
                .ok_or_else(|| EmaiError::InvalidAction {
                    agent: i,
                    detail: format!("{a:?} not in Discrete({N_MOVES})"),
                })?;
            moves.push(if self.inert_agent == Some(i) { Move::Stay } else { m });
        }

        let reward = match &mut self.world {
            World::Spread(w) => {
                let next: Vec<Cell> =
                    w.agents.iter().zip(&moves).map(|(c, m)| w.move_agent(*c, *m)).collect();
                w.agents = next;
                Spread::reward_for(w.grid, &w.agents, &w.landmarks)
            }
            World::KeyCorridor(w) => {
                let open = w.door_open;
                let next: Vec<Cell> = w
                    .agents
                    .iter()
                    .zip(&moves)
                    .map(|(c, m)| KeyCorridor::step_cell(*c, *m, open))
                    .collect();
                w.agents = next;
                if w.agents.contains(&KC_SWITCH) {
                    w.door_open = true;
                }
                KeyCorridor::reward_for(&w.agents)
            }
        };
        let reward = if self.zero_reward { 0.0 } else { reward };
        self.t += 1;
        self.done = self.t >= self.spec.horizon;
        Ok(StepResult {
            next_state: self.state(),
            observations: self.observations(),
            reward,
            done: self.done,
        })
    }
}

/// Drives one episode from `reset(seed)` to termination. `choose` sees the
/// environment (before the step), the current observations and state, and
/// returns the joint action. Returns the per-step rewards.
pub fn run_episode<F>(env: &mut Env, seed: u64, mut choose: F) -> Result<Vec<f64>>
where
    F: FnMut(&Env, &[Vec<f64>], &[f64]) -> Result<Vec<Action>>,
{
    let (mut state, mut obs) = env.reset(seed);
    let mut rewards = Vec::with_capacity(env.spec().horizon);
    while !env.is_done() {
        let joint = choose(env, &obs, &state)?;
        let step = env.step(&joint)?;
        rewards.push(step.reward);
        state = step.next_state;
        obs = step.observations;
    }
    Ok(rewards)
}

/// `sum_t gamma^t r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += g * r;
        g *= gamma;
    }
    total
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{chi_square_crit_p01, chi_square_uniform};

    fn stay(n: usize) -> Vec<Action> {
        vec![Action::Discrete(0); n]
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = Env::spread(3, 8).unwrap();
        let mut b = Env::spread(3, 8).unwrap();
        assert_eq!(a.reset(7), b.reset(7));
        assert_eq!(a.reset(7), a.clone().reset(7));
    }

    #[test]
    fn observation_shapes() {
        for mut env in [Env::spread(3, 8).unwrap(), Env::spread(4, 6).unwrap(), Env::key_corridor()] {
            let (s, obs) = env.reset(3);
            assert_eq!(s.len(), env.spec().state_dim);
            assert_eq!(obs.len(), env.spec().n_agents);
            assert!(obs.iter().all(|o| o.len() == env.spec().obs_dim));
        }
    }

    #[test]
    fn key_corridor_starts_closed() {
        let mut env = Env::key_corridor();
        let (_, obs) = env.reset(0);
        assert!(obs.iter().all(|o| o[2] == -1.0));
    }

    #[test]
    fn wall_bump_is_noop() {
        let mut env = Env::spread(2, 8).unwrap();
        env.set_world(World::Spread(Spread {
            n: 2,
            grid: 8,
            agents: vec![Cell::new(0, 0), Cell::new(3, 3)],
            landmarks: vec![Cell::new(5, 5), Cell::new(6, 6)],
        }))
        .unwrap();
        env.step(&[Action::Discrete(Move::Left as usize), Action::Discrete(0)]).unwrap();
        assert_eq!(env.positions()[0], Cell::new(0, 0));
    }

    #[test]
    fn spread_reward_formula() {
        let r = Spread::reward_for(
            8,
            &[Cell::new(1, 1), Cell::new(5, 5)],
            &[Cell::new(1, 1), Cell::new(5, 6)],
        );
        assert!((r - (-0.0625)).abs() < 1e-15);
        let covered = Spread::reward_for(8, &[Cell::new(1, 1), Cell::new(5, 6)], &[Cell::new(1, 1), Cell::new(5, 6)]);
        assert_eq!(covered, 0.0);
        let shared = Spread::reward_for(8, &[Cell::new(1, 1), Cell::new(1, 1)], &[Cell::new(1, 1), Cell::new(5, 6)]);
        assert!(shared < 0.0);
    }

    #[test]
    fn switch_opens_door_for_good() {
        let mut env = Env::key_corridor();
        env.reset(0);
        let mut kc = KeyCorridor::new();
        kc.agents = vec![Cell::new(0, 3), Cell::new(3, 2), Cell::new(3, 1)];
        env.set_world(World::KeyCorridor(kc)).unwrap();
        let down = Action::Discrete(Move::Down as usize);
        let r = env.step(&[down.clone(), Action::Discrete(0), Action::Discrete(0)]).unwrap();
        assert!(r.observations.iter().all(|o| o[2] == 1.0));
        // leave the switch, door stays open
        let up = Action::Discrete(Move::Up as usize);
        let r = env.step(&[up, Action::Discrete(0), Action::Discrete(0)]).unwrap();
        assert!(r.observations.iter().all(|o| o[2] == 1.0));
    }

    #[test]
    fn closed_door_blocks() {
        let mut env = Env::key_corridor();
        env.reset(0);
        let mut kc = KeyCorridor::new();
        kc.agents = vec![Cell::new(1, 1), KC_DOOR_APPROACH, KC_DOOR_APPROACH];
        env.set_world(World::KeyCorridor(kc)).unwrap();
        let right = Action::Discrete(Move::Right as usize);
        env.step(&[Action::Discrete(0), right.clone(), right]).unwrap();
        assert_eq!(env.positions()[1], KC_DOOR_APPROACH);
    }

    #[test]
    fn invalid_action_and_step_after_done_rejected() {
        let mut env = Env::key_corridor();
        env.reset(1);
        let bad = vec![Action::Discrete(0), Action::Discrete(5), Action::Discrete(0)];
        assert!(matches!(env.step(&bad), Err(EmaiError::InvalidAction { agent: 1, .. })));
        for _ in 0..KC_HORIZON {
            env.step(&stay(3)).unwrap();
        }
        assert!(env.is_done());
        assert!(matches!(env.step(&stay(3)), Err(EmaiError::EpisodeDone)));
    }

    #[test]
    fn random_discrete_is_uniform() {
        let space = ActionSpace::discrete(5).unwrap();
        let mut rng = rng_from(11);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[random_action(&space, &mut rng).discrete().unwrap()] += 1;
        }
        assert!(chi_square_uniform(&counts) < chi_square_crit_p01(4), "{counts:?}");
    }

    #[test]
    fn random_continuous_in_range() {
        let space = ActionSpace::continuous(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mut rng = rng_from(3);
        for _ in 0..1000 {
            let a = random_action(&space, &mut rng);
            assert!(space.contains(&a));
        }
    }

    #[test]
    fn random_discrete_fixture_sequence() {
        // Recorded from ChaCha8 seeded with 42.
        let space = ActionSpace::Discrete(2);
        let mut rng = rng_from(42);
        let seq: Vec<usize> = (0..16).map(|_| random_action(&space, &mut rng).discrete().unwrap()).collect();
        assert_eq!(seq, RECORDED_BITS.to_vec());
    }

    const RECORDED_BITS: [usize; 16] = [1, 1, 0, 0, 1, 1, 1, 0, 1, 0, 0, 0, 1, 0, 0, 1];

    #[test]
    fn action_space_validation() {
        assert!(ActionSpace::discrete(1).is_err());
        assert!(ActionSpace::continuous(vec![1.0], vec![1.0]).is_err());
    }
}
