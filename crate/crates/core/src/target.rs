//! The team being explained. Everything outside this module sees a target only
//! through [`BlackBox`]: per-agent observation in, action out.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ctde::{
    argmax, epsilon_greedy, AgentQNet, CtdeCheckpoint, Episode, EpisodeBuffer, EpsilonSchedule,
    LearnerConfig, QLearner, Transition,
};
use crate::envs::{
    decode_coord, decode_offset, Action, Cell, Env, KeyCorridor, Move, World, KC_DOOR_APPROACH,
    KC_HEIGHT, KC_OBS_DIM, KC_SWITCH, KC_WIDTH, N_MOVES,
};
use crate::rng::{derive_seed, derived_rng, stream};
use crate::{EmaiError, Result};

/// Query-only view of a team policy.
pub trait BlackBox: Send + Sync {
    fn id(&self) -> String;
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn act(&self, obs: &[f64], agent_id: usize) -> Result<Action>;

    fn act_joint(&self, observations: &[Vec<f64>]) -> Result<Vec<Action>> {
        observations.iter().enumerate().map(|(i, o)| self.act(o, i)).collect()
    }
}

fn check_query(obs: &[f64], agent_id: usize, obs_dim: usize, n_agents: usize) -> Result<()> {
    if obs.len() != obs_dim {
        return Err(EmaiError::Shape {
            op: "target act",
            left: vec![obs.len()],
            right: vec![obs_dim],
        });
    }
    if agent_id >= n_agents {
        return Err(EmaiError::invalid(format!("agent id {agent_id} >= {n_agents}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Scripted spread

/// Greedy landmark assignment: agents in id order claim their nearest
/// unclaimed landmark (lowest landmark index on ties) and walk to it,
/// closing the horizontal offset first.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedSpread {
    pub n: usize,
    pub grid: i32,
}

impl ScriptedSpread {
    pub fn obs_dim(&self) -> usize {
        2 + 2 * self.n + 2 * (self.n - 1)
    }

    /// Absolute agent and landmark cells reconstructed from one observation.
    fn decode(&self, obs: &[f64], me_id: usize) -> (Vec<Cell>, Vec<Cell>) {
        let g = self.grid;
        let me = Cell::new(decode_coord(obs[0], g), decode_coord(obs[1], g));
        let rel = |k: usize| Cell::new(me.x + decode_offset(obs[k], g), me.y + decode_offset(obs[k + 1], g));
        let landmarks: Vec<Cell> = (0..self.n).map(|l| rel(2 + 2 * l)).collect();
        let mut agents = Vec::with_capacity(self.n);
        let mut k = 2 + 2 * self.n;
        for j in 0..self.n {
            if j == me_id {
                agents.push(me);
            } else {
                agents.push(rel(k));
                k += 2;
            }
        }
        (agents, landmarks)
    }

    pub fn assignment(agents: &[Cell], landmarks: &[Cell]) -> Vec<usize> {
        let mut claimed = vec![false; landmarks.len()];
        let mut out = Vec::with_capacity(agents.len());
        for a in agents {
            let mut best: Option<usize> = None;
            for (l, c) in landmarks.iter().enumerate() {
                if claimed[l] {
                    continue;
                }
                if best.is_none_or(|b| a.manhattan(*c) < a.manhattan(landmarks[b])) {
                    best = Some(l);
                }
            }
            let l = best.unwrap_or(0);
            if l < claimed.len() {
                claimed[l] = true;
            }
            out.push(l);
        }
        out
    }

    fn act(&self, obs: &[f64], agent_id: usize) -> Move {
        let (agents, landmarks) = self.decode(obs, agent_id);
        let goal = landmarks[Self::assignment(&agents, &landmarks)[agent_id]];
        let me = agents[agent_id];
        if goal.x > me.x {
            Move::Right
        } else if goal.x < me.x {
            Move::Left
        } else if goal.y > me.y {
            Move::Down
        } else if goal.y < me.y {
            Move::Up
        } else {
            Move::Stay
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted key corridor

const KC_CELLS: usize = (KC_WIDTH * KC_HEIGHT) as usize;

/// BFS distances (in moves) to a set of goal cells; `u32::MAX` if unreachable.
fn distance_map(door_open: bool, is_goal: impl Fn(Cell) -> bool) -> [u32; KC_CELLS] {
    let idx = |c: Cell| (c.y * KC_WIDTH + c.x) as usize;
    let mut dist = [u32::MAX; KC_CELLS];
    let mut queue = VecDeque::new();
    for y in 0..KC_HEIGHT {
        for x in 0..KC_WIDTH {
            let c = Cell::new(x, y);
            if KeyCorridor::walkable(c, door_open) && is_goal(c) {
                dist[idx(c)] = 0;
                queue.push_back(c);
            }
        }
    }
    while let Some(c) = queue.pop_front() {
        for m in [Move::Up, Move::Down, Move::Left, Move::Right] {
            let nb = c.shifted(m);
            if KeyCorridor::walkable(nb, door_open) && dist[idx(nb)] == u32::MAX {
                dist[idx(nb)] = dist[idx(c)] + 1;
                queue.push_back(nb);
            }
        }
    }
    dist
}

/// Switch-then-goal for agent 0, wait-at-door-then-goal for the others. The
/// weak variant sends agent 0 the long way round to the switch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedKeyCorridor {
    pub weak: bool,
    to_switch: [u32; KC_CELLS],
    to_approach: [u32; KC_CELLS],
    to_goal: [u32; KC_CELLS],
}

impl ScriptedKeyCorridor {
    pub fn new(weak: bool) -> Self {
        ScriptedKeyCorridor {
            weak,
            to_switch: distance_map(false, |c| c == KC_SWITCH),
            to_approach: distance_map(false, |c| c == KC_DOOR_APPROACH),
            to_goal: distance_map(true, KeyCorridor::in_goal),
        }
    }

    fn descend(dist: &[u32; KC_CELLS], me: Cell, door_open: bool) -> Move {
        let d = |c: Cell| dist[(c.y * KC_WIDTH + c.x) as usize];
        if d(me) == 0 {
            return Move::Stay;
        }
        let mut best = Move::Stay;
        let mut best_d = d(me);
        for m in [Move::Left, Move::Right, Move::Up, Move::Down] {
            let next = KeyCorridor::step_cell(me, m, door_open);
            if d(next) < best_d {
                best_d = d(next);
                best = m;
            }
        }
        best
    }

    fn detour(me: Cell) -> Move {
        if me.y == KC_HEIGHT - 1 {
            Move::Left
        } else if me.x < KC_DOOR_APPROACH.x {
            Move::Right
        } else {
            Move::Down
        }
    }

    fn act(&self, obs: &[f64], agent_id: usize) -> Move {
        let me = Cell::new(decode_coord(obs[0], KC_WIDTH), decode_coord(obs[1], KC_HEIGHT));
        let door_open = obs[2] > 0.0;
        if door_open {
            return Self::descend(&self.to_goal, me, true);
        }
        match agent_id {
            0 if self.weak => Self::detour(me),
            0 => Self::descend(&self.to_switch, me, false),
            _ => Self::descend(&self.to_approach, me, false),
        }
    }
}

// ---------------------------------------------------------------------------
// Policies

#[derive(Debug, Clone, PartialEq)]
pub enum Scripted {
    Spread(ScriptedSpread),
    KeyCorridor(ScriptedKeyCorridor),
}

/// Greedy (epsilon = 0) policy over a trained utility network.
#[derive(Debug, Clone, PartialEq)]
pub struct Learned {
    pub id: String,
    net: AgentQNet,
}

impl Learned {
    pub fn new(id: impl Into<String>, net: AgentQNet) -> Self {
        Learned { id: id.into(), net }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetPolicy {
    Scripted { id: String, rule: Scripted },
    Learned(Learned),
}

pub const SCRIPTED_IDS: [&str; 3] = ["scripted", "scripted-weak", "scripted-spread"];

impl TargetPolicy {
    /// Scripted target for the given environment. `weak` is only meaningful
    /// for the key corridor.
    pub fn scripted(env: &Env, weak: bool) -> Result<Self> {
        let id = if weak { "scripted-weak" } else { "scripted" };
        let rule = match env.world() {
            World::Spread(w) => {
                if weak {
                    return Err(EmaiError::invalid("no weak scripted policy for spread"));
                }
                Scripted::Spread(ScriptedSpread { n: w.n, grid: w.grid })
            }
            World::KeyCorridor(_) => Scripted::KeyCorridor(ScriptedKeyCorridor::new(weak)),
        };
        Ok(TargetPolicy::Scripted { id: id.into(), rule })
    }

    /// Scripted policy by environment name (`spread` takes its size from `env`).
    pub fn scripted_by_name(name: &str, env: &Env) -> Result<Self> {
        match (name, env.world()) {
            ("key-corridor" | "key-corridor-weak", World::KeyCorridor(_)) => {
                Self::scripted(env, name.ends_with("-weak"))
            }
            ("spread", World::Spread(_)) => Self::scripted(env, false),
            ("spread" | "key-corridor" | "key-corridor-weak", _) => Err(EmaiError::incompatible(format!(
                "scripted policy {name} does not fit env {}",
                env.spec().name
            ))),
            _ => Err(EmaiError::invalid(format!("unknown scripted policy {name}"))),
        }
    }

    pub fn learned(id: impl Into<String>, net: AgentQNet) -> Self {
        TargetPolicy::Learned(Learned::new(id, net))
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, TargetPolicy::Learned(_))
    }

    /// White-box access for the value- and gradient-based baselines. Not part
    /// of [`BlackBox`].
    pub fn privileged_qnet(&self) -> Option<&AgentQNet> {
        match self {
            TargetPolicy::Learned(l) => Some(&l.net),
            TargetPolicy::Scripted { .. } => None,
        }
    }

    /// Checks that the policy was built for `env`'s agent count and observation width.
    pub fn check_env(&self, env: &Env) -> Result<()> {
        let spec = env.spec();
        if self.n_agents() != spec.n_agents || self.obs_dim() != spec.obs_dim {
            return Err(EmaiError::incompatible(format!(
                "target {} expects {} agents / obs {}, env {} has {} / {}",
                self.id(),
                self.n_agents(),
                self.obs_dim(),
                spec.name,
                spec.n_agents,
                spec.obs_dim
            )));
        }
        Ok(())
    }
}

impl BlackBox for TargetPolicy {
    fn id(&self) -> String {
        match self {
            TargetPolicy::Scripted { id, .. } => id.clone(),
            TargetPolicy::Learned(l) => l.id.clone(),
        }
    }

    fn n_agents(&self) -> usize {
        match self {
            TargetPolicy::Scripted { rule: Scripted::Spread(s), .. } => s.n,
            TargetPolicy::Scripted { rule: Scripted::KeyCorridor(_), .. } => 3,
            TargetPolicy::Learned(l) => l.net.n_agents(),
        }
    }

    fn obs_dim(&self) -> usize {
        match self {
            TargetPolicy::Scripted { rule: Scripted::Spread(s), .. } => s.obs_dim(),
            TargetPolicy::Scripted { rule: Scripted::KeyCorridor(_), .. } => KC_OBS_DIM,
            TargetPolicy::Learned(l) => l.net.obs_dim(),
        }
    }

    fn act(&self, obs: &[f64], agent_id: usize) -> Result<Action> {
        check_query(obs, agent_id, self.obs_dim(), self.n_agents())?;
        let a = match self {
            TargetPolicy::Scripted { rule: Scripted::Spread(s), .. } => s.act(obs, agent_id) as usize,
            TargetPolicy::Scripted { rule: Scripted::KeyCorridor(k), .. } => k.act(obs, agent_id) as usize,
            TargetPolicy::Learned(l) => argmax(&l.net.q_individual(obs, agent_id)?),
        };
        Ok(Action::Discrete(a))
    }
}

// ---------------------------------------------------------------------------
// Training a learned target

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    pub lr: f64,
    pub gamma: f64,
    pub stale_interval: u64,
    pub buffer_episodes: usize,
    pub batch_episodes: usize,
    /// Optimizer steps per collected episode.
    pub updates_per_episode: usize,
    pub grad_clip: Option<f64>,
    pub hidden: Vec<usize>,
    pub mixer: crate::ctde::MixerKind,
    pub mixer_embed: usize,
    pub hyper_hidden: usize,
    pub epsilon: EpsilonSchedule,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let l = LearnerConfig::default();
        TrainingConfig {
            steps: 100_000,
            lr: l.lr,
            gamma: l.gamma,
            stale_interval: l.stale_interval,
            buffer_episodes: 2000,
            batch_episodes: 32,
            updates_per_episode: 4,
            grad_clip: l.grad_clip,
            hidden: l.hidden,
            mixer: l.mixer,
            mixer_embed: l.mixer_embed,
            hyper_hidden: l.hyper_hidden,
            epsilon: EpsilonSchedule::default(),
        }
    }
}

impl TrainingConfig {
    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            lr: self.lr,
            gamma: self.gamma,
            stale_interval: self.stale_interval,
            grad_clip: self.grad_clip,
            hidden: self.hidden.clone(),
            mixer: self.mixer,
            mixer_embed: self.mixer_embed,
            hyper_hidden: self.hyper_hidden,
        }
    }
}

/// One row of a training curve, written once per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub episode: u64,
    pub episode_return: f64,
    pub loss: f64,
    /// Weighted-in auxiliary loss (0 for target training).
    pub diff_loss: f64,
    pub epsilon: f64,
    /// Fraction of masked agent-steps (always 0 for target training).
    pub mask_rate: f64,
}

pub fn write_curve_csv<W: Write>(out: &mut W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "env_steps,episode,episode_return,loss,diff_loss,epsilon,mask_rate")?;
    for p in curve {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.env_steps, p.episode, p.episode_return, p.loss, p.diff_loss, p.epsilon, p.mask_rate
        )?;
    }
    Ok(())
}

pub struct TrainedTarget {
    pub policy: TargetPolicy,
    pub checkpoint: CtdeCheckpoint,
    pub curve: Vec<CurvePoint>,
}

/// Trains a learned team on `env` with value-decomposed Q-learning until
/// `cfg.steps` environment steps have been taken.
pub fn train_target(env: &Env, cfg: &TrainingConfig, seed: u64) -> Result<TrainedTarget> {
    let spec = env.spec().clone();
    let n_actions = spec
        .action_space
        .n_discrete()
        .ok_or_else(|| EmaiError::incompatible("target training needs a discrete action space"))?;
    let mut init = derived_rng(seed, stream::INIT, 0);
    let mut learner = QLearner::new(spec.obs_dim, spec.state_dim, spec.n_agents, n_actions, &cfg.learner(), &mut init)?;
    let mut buffer = EpisodeBuffer::new(cfg.buffer_episodes)?;
    let mut act_rng = derived_rng(seed, stream::TRAIN, 0);
    let mut sample_rng = derived_rng(seed, stream::SAMPLE, 0);
    let mut env = env.clone();
    let mut curve = Vec::new();
    let mut env_steps = 0u64;
    let mut episode = 0u64;
    while env_steps < cfg.steps {
        let (mut state, mut obs) = env.reset(derive_seed(seed, stream::ENV, episode));
        let mut ep = Episode::default();
        let eps = cfg.epsilon.value(env_steps);
        let mut ret = 0.0;
        while !env.is_done() {
            let eps = cfg.epsilon.value(env_steps);
            let q = learner.net.q_joint(&obs)?;
            let actions: Vec<usize> = q.iter().map(|qi| epsilon_greedy(qi, eps, &mut act_rng)).collect();
            let joint: Vec<Action> = actions.iter().map(|a| Action::Discrete(*a)).collect();
            let step = env.step(&joint)?;
            ret += step.reward;
            ep.steps.push(Transition {
                obs,
                state,
                actions,
                reward: step.reward,
                done: step.done,
            });
            obs = step.observations;
            state = step.next_state;
            env_steps += 1;
            learner.on_env_step(env_steps);
        }
        ep.final_obs = obs;
        ep.final_state = state;
        buffer.push(ep);
        episode += 1;
        let mut loss = f64::NAN;
        for _ in 0..cfg.updates_per_episode {
            let batch = buffer.sample(cfg.batch_episodes, &mut sample_rng);
            loss = learner.td_train_step(&batch)?.td;
        }
        curve.push(CurvePoint {
            env_steps,
            episode,
            episode_return: ret,
            loss,
            diff_loss: 0.0,
            epsilon: eps,
            mask_rate: 0.0,
        });
    }
    let checkpoint = CtdeCheckpoint::capture(&spec.name, spec.state_dim, &learner.net, &learner.mixer, env_steps);
    Ok(TrainedTarget {
        policy: TargetPolicy::learned(format!("learned-{}", spec.name), learner.net),
        checkpoint,
        curve,
    })
}

/// Restores a greedy learned target from a checkpoint written by [`train_target`].
pub fn load_target(checkpoint: &CtdeCheckpoint, id: impl Into<String>) -> Result<TargetPolicy> {
    let (net, _) = checkpoint.restore()?;
    if net.n_actions() != N_MOVES {
        return Err(EmaiError::incompatible("checkpoint action count differs from built-in envs"));
    }
    Ok(TargetPolicy::learned(id, net))
}
