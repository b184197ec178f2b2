//! Centralized-training / decentralized-execution Q-learning machinery shared
//! by the target trainer and the masking-agent trainer.
//!
//! One utility network is shared by all agents and sees `obs ++ one_hot(id)`.
//! A mixer combines the chosen per-agent values into `Q_tot`, either by
//! summation (VDN) or through a state-conditioned network whose mixing weights
//! are forced non-negative by an absolute value, which makes `Q_tot` monotone
//! in every agent's value so per-agent greedy choices are jointly greedy.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::nn::{clip_global_norm, Activation, Adam, Graph, Mlp, ParamDoc, Tensor, Var};
use crate::rng::Rng;
use crate::{EmaiError, Result};

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy with probability `1 - epsilon`, uniform otherwise.
pub fn epsilon_greedy(q: &[f64], epsilon: f64, rng: &mut Rng) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// Linear annealing from `start` to `end` over `anneal_steps`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            anneal_steps: 50_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.end;
        }
        let frac = step as f64 / self.anneal_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

// ---------------------------------------------------------------------------
// Utility network

/// Shared per-agent utility network `Q_i(o_i, .)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentQNet {
    mlp: Mlp,
    n_agents: usize,
    obs_dim: usize,
    n_actions: usize,
}

impl AgentQNet {
    pub fn new(
        obs_dim: usize,
        n_agents: usize,
        n_actions: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Result<Self> {
        let mlp = Mlp::with_hidden(obs_dim + n_agents, hidden, n_actions, Activation::Relu, rng)?;
        Ok(AgentQNet {
            mlp,
            n_agents,
            obs_dim,
            n_actions,
        })
    }

    pub fn from_mlp(mlp: Mlp, obs_dim: usize, n_agents: usize, n_actions: usize) -> Result<Self> {
        if mlp.input_size() != obs_dim + n_agents || mlp.output_size() != n_actions {
            return Err(EmaiError::Shape {
                op: "agent q-net",
                left: vec![mlp.input_size(), mlp.output_size()],
                right: vec![obs_dim + n_agents, n_actions],
            });
        }
        Ok(AgentQNet {
            mlp,
            n_agents,
            obs_dim,
            n_actions,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }

    pub fn zeroed(mut self) -> Self {
        self.mlp = self.mlp.zeroed();
        self
    }

    fn check_obs(&self, obs: &[f64], agent_id: usize) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(EmaiError::Shape {
                op: "q_individual obs",
                left: vec![obs.len()],
                right: vec![self.obs_dim],
            });
        }
        if agent_id >= self.n_agents {
            return Err(EmaiError::invalid(format!(
                "agent id {agent_id} out of range for {} agents",
                self.n_agents
            )));
        }
        Ok(())
    }

    /// Appends `obs ++ one_hot(agent_id)` to `out`.
    pub fn push_input(&self, obs: &[f64], agent_id: usize, out: &mut Vec<f64>) -> Result<()> {
        self.check_obs(obs, agent_id)?;
        out.extend_from_slice(obs);
        out.extend((0..self.n_agents).map(|j| if j == agent_id { 1.0 } else { 0.0 }));
        Ok(())
    }

    /// One input row per agent for a joint observation.
    pub fn joint_input(&self, observations: &[Vec<f64>]) -> Result<Tensor> {
        if observations.len() != self.n_agents {
            return Err(EmaiError::Shape {
                op: "joint observation",
                left: vec![observations.len()],
                right: vec![self.n_agents],
            });
        }
        let mut data = Vec::with_capacity(self.n_agents * (self.obs_dim + self.n_agents));
        for (i, o) in observations.iter().enumerate() {
            self.push_input(o, i, &mut data)?;
        }
        Tensor::new(vec![self.n_agents, self.obs_dim + self.n_agents], data)
    }

    pub fn q_individual(&self, obs: &[f64], agent_id: usize) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(self.obs_dim + self.n_agents);
        self.push_input(obs, agent_id, &mut row)?;
        let x = Tensor::new(vec![1, row.len()], row)?;
        Ok(self.mlp.forward(&x)?.into_data())
    }

    /// Q vectors for every agent of a joint observation.
    pub fn q_joint(&self, observations: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let out = self.mlp.forward(&self.joint_input(observations)?)?;
        Ok((0..self.n_agents).map(|i| out.row(i).to_vec()).collect())
    }

    pub fn forward_graph(&self, g: &mut Graph<'_>, vars: &[Var], input: Var) -> Result<Var> {
        self.mlp.forward_graph(g, vars, input)
    }
}

// ---------------------------------------------------------------------------
// Mixers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Vdn,
    Monotonic,
}

/// State-conditioned mixer: `Q_tot = |W2(s)|^T elu(|W1(s)|^T q + b1(s)) + b2(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicMixer {
    pub hyper_w1: Mlp,
    pub hyper_b1: Mlp,
    pub hyper_w2: Mlp,
    pub hyper_b2: Mlp,
    n_agents: usize,
    embed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Vdn { n_agents: usize },
    Monotonic(MonotonicMixer),
}

pub const DEFAULT_MIXER_EMBED: usize = 32;
pub const DEFAULT_HYPER_HIDDEN: usize = 64;

impl Mixer {
    pub fn new(
        kind: MixerKind,
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match kind {
            MixerKind::Vdn => Mixer::Vdn { n_agents },
            MixerKind::Monotonic => {
                let relu = Activation::Relu;
                Mixer::Monotonic(MonotonicMixer {
                    hyper_w1: Mlp::with_hidden(state_dim, &[hyper_hidden], n_agents * embed, relu, rng)?,
                    hyper_b1: Mlp::with_hidden(state_dim, &[], embed, relu, rng)?,
                    hyper_w2: Mlp::with_hidden(state_dim, &[hyper_hidden], embed, relu, rng)?,
                    hyper_b2: Mlp::with_hidden(state_dim, &[embed], 1, relu, rng)?,
                    n_agents,
                    embed,
                })
            }
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Vdn { .. } => MixerKind::Vdn,
            Mixer::Monotonic(_) => MixerKind::Monotonic,
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Mixer::Vdn { n_agents } => *n_agents,
            Mixer::Monotonic(m) => m.n_agents,
        }
    }

    fn mlps(&self) -> Vec<&Mlp> {
        match self {
            Mixer::Vdn { .. } => vec![],
            Mixer::Monotonic(m) => vec![&m.hyper_w1, &m.hyper_b1, &m.hyper_w2, &m.hyper_b2],
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.mlps().into_iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Mixer::Vdn { .. } => vec![],
            Mixer::Monotonic(m) => {
                let mut out = m.hyper_w1.params_mut();
                out.extend(m.hyper_b1.params_mut());
                out.extend(m.hyper_w2.params_mut());
                out.extend(m.hyper_b2.params_mut());
                out
            }
        }
    }

    /// `Q_tot` for a batch: `states [B, S]`, `qs [B, n]` -> `[B, 1]`.
    pub fn forward_graph(&self, g: &mut Graph<'_>, vars: &[Var], states: Var, qs: Var) -> Result<Var> {
        let n = self.n_agents();
        if g.value(qs).cols() != n {
            return Err(EmaiError::Shape {
                op: "mixer q input",
                left: g.value(qs).shape().to_vec(),
                right: vec![n],
            });
        }
        match self {
            Mixer::Vdn { .. } => {
                let b = g.value(qs).rows();
                let ones = g.input(Tensor::new(vec![n, 1], vec![1.0; n])?);
                let out = g.matmul(qs, ones)?;
                debug_assert_eq!(g.value(out).rows(), b);
                Ok(out)
            }
            Mixer::Monotonic(m) => {
                let mut off = 0;
                let mut take = |mlp: &Mlp| {
                    let k = mlp.params().len();
                    let s = &vars[off..off + k];
                    off += k;
                    s.to_vec()
                };
                let (vw1, vb1, vw2, vb2) =
                    (take(&m.hyper_w1), take(&m.hyper_b1), take(&m.hyper_w2), take(&m.hyper_b2));
                let w1 = m.hyper_w1.forward_graph(g, &vw1, states)?;
                let w1 = g.abs(w1)?;
                let b1 = m.hyper_b1.forward_graph(g, &vb1, states)?;
                let hidden = g.batch_vec_mat(qs, w1)?;
                let hidden = g.add(hidden, b1)?;
                let hidden = g.elu(hidden)?;
                let w2 = m.hyper_w2.forward_graph(g, &vw2, states)?;
                let w2 = g.abs(w2)?;
                let b2 = m.hyper_b2.forward_graph(g, &vb2, states)?;
                let out = g.row_dot(hidden, w2)?;
                g.add(out, b2)
            }
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.params().into_iter().map(|p| g.param(p)).collect()
    }

    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.params().into_iter().map(|p| g.constant(p)).collect()
    }

    /// Batched `Q_tot` without gradient tracking.
    pub fn q_total_batch(&self, states: &Tensor, qs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let s = g.constant(states);
        let q = g.constant(qs);
        let out = self.forward_graph(&mut g, &vars, s, q)?;
        Ok(g.value(out).clone())
    }

    pub fn q_total(&self, state: &[f64], chosen_q: &[f64]) -> Result<f64> {
        if chosen_q.len() != self.n_agents() {
            return Err(EmaiError::Shape {
                op: "q_total",
                left: vec![chosen_q.len()],
                right: vec![self.n_agents()],
            });
        }
        let s = Tensor::new(vec![1, state.len()], state.to_vec())?;
        let q = Tensor::new(vec![1, chosen_q.len()], chosen_q.to_vec())?;
        Ok(self.q_total_batch(&s, &q)?.item())
    }
}

// ---------------------------------------------------------------------------
// Episodes and replay

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    /// The learner's own per-agent actions (env actions or mask bits).
    pub actions: Vec<usize>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub steps: Vec<Transition>,
    pub final_obs: Vec<Vec<f64>>,
    pub final_state: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn next_obs(&self, t: usize) -> &[Vec<f64>] {
        self.steps.get(t + 1).map_or(&self.final_obs, |s| &s.obs)
    }

    pub fn next_state(&self, t: usize) -> &[f64] {
        self.steps.get(t + 1).map_or(&self.final_state, |s| &s.state)
    }
}

/// FIFO store of whole episodes.
#[derive(Debug, Clone)]
pub struct EpisodeBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl EpisodeBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(EmaiError::invalid("buffer capacity must be positive"));
        }
        Ok(EpisodeBuffer {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(4096)),
        })
    }

    pub fn push(&mut self, ep: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    /// Up to `batch` distinct episodes, uniformly at random.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Vec<&Episode> {
        let k = batch.min(self.episodes.len());
        rand::seq::index::sample(rng, self.episodes.len(), k)
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect()
    }
}

/// A batch of episodes flattened to transition-major rows.
#[derive(Debug, Clone)]
pub struct FlatBatch {
    pub n_agents: usize,
    pub n_episodes: usize,
    /// `[N * n, obs_dim + n]`, row `k * n + i` is agent `i` of transition `k`.
    pub inputs: Tensor,
    pub next_inputs: Tensor,
    pub actions: Vec<usize>,
    pub states: Tensor,
    pub next_states: Tensor,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub episode_of: Vec<usize>,
    pub t_of: Vec<usize>,
}

impl FlatBatch {
    pub fn new(net: &AgentQNet, episodes: &[&Episode]) -> Result<Self> {
        if episodes.is_empty() || episodes.iter().all(|e| e.is_empty()) {
            return Err(EmaiError::invalid("empty training batch"));
        }
        let n = net.n_agents();
        let width = net.obs_dim() + n;
        let total: usize = episodes.iter().map(|e| e.len()).sum();
        let state_dim = episodes
            .iter()
            .find_map(|e| e.steps.first())
            .map_or(0, |s| s.state.len());
        let mut inputs = Vec::with_capacity(total * n * width);
        let mut next_inputs = Vec::with_capacity(total * n * width);
        let mut states = Vec::with_capacity(total * state_dim);
        let mut next_states = Vec::with_capacity(total * state_dim);
        let mut actions = Vec::with_capacity(total * n);
        let mut rewards = Vec::with_capacity(total);
        let mut dones = Vec::with_capacity(total);
        let mut episode_of = Vec::with_capacity(total);
        let mut t_of = Vec::with_capacity(total);
        for (e, ep) in episodes.iter().enumerate() {
            for (t, tr) in ep.steps.iter().enumerate() {
                if tr.actions.len() != n || tr.obs.len() != n {
                    return Err(EmaiError::invalid("transition agent count differs from network"));
                }
                for i in 0..n {
                    net.push_input(&tr.obs[i], i, &mut inputs)?;
                    net.push_input(&ep.next_obs(t)[i], i, &mut next_inputs)?;
                }
                states.extend_from_slice(&tr.state);
                next_states.extend_from_slice(ep.next_state(t));
                actions.extend_from_slice(&tr.actions);
                rewards.push(tr.reward);
                dones.push(tr.done);
                episode_of.push(e);
                t_of.push(t);
            }
        }
        Ok(FlatBatch {
            n_agents: n,
            n_episodes: episodes.len(),
            inputs: Tensor::new(vec![total * n, width], inputs)?,
            next_inputs: Tensor::new(vec![total * n, width], next_inputs)?,
            actions,
            states: Tensor::new(vec![total, state_dim], states)?,
            next_states: Tensor::new(vec![total, state_dim], next_states)?,
            rewards,
            dones,
            episode_of,
            t_of,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Stale copies and TD learning

/// Frozen snapshots of the utility network and mixer used for TD targets.
#[derive(Debug, Clone)]
pub struct StaleCopy {
    pub net: AgentQNet,
    pub mixer: Mixer,
    interval: u64,
    refreshes: u64,
}

impl StaleCopy {
    pub fn new(net: &AgentQNet, mixer: &Mixer, interval: u64) -> Result<Self> {
        if interval == 0 {
            return Err(EmaiError::invalid("stale refresh interval must be positive"));
        }
        Ok(StaleCopy {
            net: net.clone(),
            mixer: mixer.clone(),
            interval,
            refreshes: 0,
        })
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    /// Called after every environment step; copies the live parameters when
    /// `env_steps` is a multiple of the interval.
    pub fn on_env_step(&mut self, env_steps: u64, net: &AgentQNet, mixer: &Mixer) -> bool {
        if env_steps > 0 && env_steps % self.interval == 0 {
            self.net.clone_from(net);
            self.mixer.clone_from(mixer);
            self.refreshes += 1;
            true
        } else {
            false
        }
    }

    /// `y = r + gamma * (1 - done) * max_a Q̂_tot(s', a)`. The joint max is the
    /// mix of per-agent maxima, which is exact for monotone mixers.
    pub fn td_targets(&self, batch: &FlatBatch, gamma: f64) -> Result<Vec<f64>> {
        let n = batch.n_agents;
        let q_next = self.net.mlp().forward(&batch.next_inputs)?;
        let best: Vec<f64> = (0..q_next.rows())
            .map(|r| q_next.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let best = Tensor::new(vec![batch.len(), n], best)?;
        let q_tot_next = self.mixer.q_total_batch(&batch.next_states, &best)?;
        let y: Vec<f64> = (0..batch.len())
            .map(|k| {
                let bootstrap = if batch.dones[k] { 0.0 } else { gamma * q_tot_next.data()[k] };
                batch.rewards[k] + bootstrap
            })
            .collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(EmaiError::NonFinite("td target".into()));
        }
        Ok(y)
    }
}

/// Graph nodes of the TD objective.
#[derive(Debug, Clone, Copy)]
pub struct TdGraph {
    /// `[N, 1]` mixed values of the taken actions.
    pub q_tot: Var,
    /// Mean squared TD error (scalar).
    pub loss: Var,
}

/// Builds `mean((y - Q_tot)^2)` on `g` from bound network/mixer vars.
pub fn td_loss_graph(
    g: &mut Graph<'_>,
    net: &AgentQNet,
    net_vars: &[Var],
    mixer: &Mixer,
    mixer_vars: &[Var],
    batch: &FlatBatch,
    targets: &[f64],
) -> Result<TdGraph> {
    let x = g.input(batch.inputs.clone());
    let q = net.forward_graph(g, net_vars, x)?;
    let chosen = g.gather(q, batch.actions.clone())?;
    let chosen = g.reshape(chosen, vec![batch.len(), batch.n_agents])?;
    let s = g.input(batch.states.clone());
    let q_tot = mixer.forward_graph(g, mixer_vars, s, chosen)?;
    let y = g.input(Tensor::column(targets.to_vec()));
    let err = g.sub(y, q_tot)?;
    let sq = g.square(err)?;
    let loss = g.mean(sq)?;
    Ok(TdGraph { q_tot, loss })
}

/// Extra differentiable term added to the TD loss as `weight * term`.
pub struct ExtraLoss {
    pub term: Var,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub td: f64,
    pub extra: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub lr: f64,
    pub gamma: f64,
    pub stale_interval: u64,
    pub grad_clip: Option<f64>,
    pub hidden: Vec<usize>,
    pub mixer: MixerKind,
    pub mixer_embed: usize,
    pub hyper_hidden: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            lr: 5e-4,
            gamma: 0.99,
            stale_interval: 200,
            grad_clip: Some(10.0),
            hidden: vec![64, 64],
            mixer: MixerKind::Monotonic,
            mixer_embed: DEFAULT_MIXER_EMBED,
            hyper_hidden: DEFAULT_HYPER_HIDDEN,
        }
    }
}

/// Live network + mixer, their stale copies and the optimizer.
#[derive(Debug, Clone)]
pub struct QLearner {
    pub net: AgentQNet,
    pub mixer: Mixer,
    pub stale: StaleCopy,
    opt: Adam,
    gamma: f64,
    grad_clip: Option<f64>,
}

impl QLearner {
    pub fn new(
        obs_dim: usize,
        state_dim: usize,
        n_agents: usize,
        n_actions: usize,
        cfg: &LearnerConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let net = AgentQNet::new(obs_dim, n_agents, n_actions, &cfg.hidden, rng)?;
        let mixer = Mixer::new(cfg.mixer, n_agents, state_dim, cfg.mixer_embed, cfg.hyper_hidden, rng)?;
        Self::from_parts(net, mixer, cfg)
    }

    pub fn from_parts(net: AgentQNet, mixer: Mixer, cfg: &LearnerConfig) -> Result<Self> {
        if !(cfg.gamma >= 0.0 && cfg.gamma <= 1.0) {
            return Err(EmaiError::invalid(format!("gamma must be in [0,1], got {}", cfg.gamma)));
        }
        let stale = StaleCopy::new(&net, &mixer, cfg.stale_interval)?;
        Ok(QLearner {
            net,
            mixer,
            stale,
            opt: Adam::new(cfg.lr)?,
            gamma: cfg.gamma,
            grad_clip: cfg.grad_clip,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn updates(&self) -> u64 {
        self.opt.steps()
    }

    pub fn on_env_step(&mut self, env_steps: u64) -> bool {
        self.stale.on_env_step(env_steps, &self.net, &self.mixer)
    }

    /// One optimizer step on the TD loss alone.
    pub fn td_train_step(&mut self, episodes: &[&Episode]) -> Result<LossReport> {
        self.train_step_with(episodes, |_, _, _| Ok(None))
    }

    /// One optimizer step on `L_td + weight * extra`, where `extra` is built
    /// by the caller from the batch and the `[N, 1]` `Q_tot` node.
    pub fn train_step_with<F>(&mut self, episodes: &[&Episode], extra: F) -> Result<LossReport>
    where
        F: for<'g> FnOnce(&mut Graph<'g>, &FlatBatch, Var) -> Result<Option<ExtraLoss>>,
    {
        let batch = FlatBatch::new(&self.net, episodes)?;
        let targets = self.stale.td_targets(&batch, self.gamma)?;
        let n_net = self.net.params().len();

        let (report, mut grads) = {
            let mut g = Graph::new();
            let net_vars = self.net.mlp().bind(&mut g);
            let mixer_vars = self.mixer.bind(&mut g);
            let td = td_loss_graph(&mut g, &self.net, &net_vars, &self.mixer, &mixer_vars, &batch, &targets)?;
            let td_value = g.value(td.loss).item();
            let (total, extra_value) = match extra(&mut g, &batch, td.q_tot)? {
                Some(e) => {
                    let v = g.value(e.term).item();
                    let weighted = g.scale(e.term, e.weight)?;
                    (g.add(td.loss, weighted)?, v)
                }
                None => (td.loss, 0.0),
            };
            let total_value = g.value(total).item();
            if !total_value.is_finite() {
                return Err(EmaiError::NonFinite("training loss".into()));
            }
            let grads = g.backward(total)?;
            let all: Vec<Tensor> = net_vars
                .iter()
                .chain(&mixer_vars)
                .map(|v| grads.get_or_zeros(*v))
                .collect();
            (
                LossReport {
                    total: total_value,
                    td: td_value,
                    extra: extra_value,
                    grad_norm: 0.0,
                },
                all,
            )
        };
        let grad_norm = match self.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        let mut params = self.net.params_mut();
        params.extend(self.mixer.params_mut());
        debug_assert_eq!(params.len(), grads.len());
        debug_assert!(n_net <= grads.len());
        self.opt.step(&mut params, &grads)?;
        Ok(LossReport { grad_norm, ..report })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CTDE_FORMAT: &str = "emai-ctde";
pub const CTDE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtdeHeader {
    pub env: String,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    pub mixer: MixerKind,
    pub training_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MixerDoc {
    Vdn,
    Monotonic {
        embed: usize,
        hyper_w1: ParamDoc,
        hyper_b1: ParamDoc,
        hyper_w2: ParamDoc,
        hyper_b2: ParamDoc,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtdeCheckpoint {
    pub format: String,
    pub version: u32,
    pub header: CtdeHeader,
    pub agent: ParamDoc,
    pub mixer: MixerDoc,
}

impl CtdeCheckpoint {
    pub fn capture(env: &str, state_dim: usize, net: &AgentQNet, mixer: &Mixer, step: u64) -> Self {
        let mixer_doc = match mixer {
            Mixer::Vdn { .. } => MixerDoc::Vdn,
            Mixer::Monotonic(m) => MixerDoc::Monotonic {
                embed: m.embed,
                hyper_w1: ParamDoc::from_mlp(&m.hyper_w1),
                hyper_b1: ParamDoc::from_mlp(&m.hyper_b1),
                hyper_w2: ParamDoc::from_mlp(&m.hyper_w2),
                hyper_b2: ParamDoc::from_mlp(&m.hyper_b2),
            },
        };
        CtdeCheckpoint {
            format: CTDE_FORMAT.into(),
            version: CTDE_VERSION,
            header: CtdeHeader {
                env: env.into(),
                n_agents: net.n_agents(),
                obs_dim: net.obs_dim(),
                state_dim,
                n_actions: net.n_actions(),
                mixer: mixer.kind(),
                training_step: step,
            },
            agent: ParamDoc::from_mlp(net.mlp()),
            mixer: mixer_doc,
        }
    }

    pub fn restore(&self) -> Result<(AgentQNet, Mixer)> {
        if self.format != CTDE_FORMAT || self.version != CTDE_VERSION {
            return Err(EmaiError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let h = &self.header;
        let net = AgentQNet::from_mlp(self.agent.to_mlp()?, h.obs_dim, h.n_agents, h.n_actions)?;
        let mixer = match &self.mixer {
            MixerDoc::Vdn => Mixer::Vdn { n_agents: h.n_agents },
            MixerDoc::Monotonic {
                embed,
                hyper_w1,
                hyper_b1,
                hyper_w2,
                hyper_b2,
            } => Mixer::Monotonic(MonotonicMixer {
                hyper_w1: hyper_w1.to_mlp()?,
                hyper_b1: hyper_b1.to_mlp()?,
                hyper_w2: hyper_w2.to_mlp()?,
                hyper_b2: hyper_b2.to_mlp()?,
                n_agents: h.n_agents,
                embed: *embed,
            }),
        };
        if mixer.kind() != h.mixer {
            return Err(EmaiError::Checkpoint("mixer kind disagrees with header".into()));
        }
        Ok((net, mixer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::stats::{chi_square_crit_p01, chi_square_uniform};
    use proptest::prelude::*;

    fn toy_mixer(n: usize, seed: u64) -> Mixer {
        Mixer::new(MixerKind::Monotonic, n, 4, 8, 16, &mut rng_from(seed)).unwrap()
    }

    #[test]
    fn zero_net_gives_zero_q() {
        let net = AgentQNet::new(3, 2, 4, &[8], &mut rng_from(0)).unwrap().zeroed();
        assert_eq!(net.q_individual(&[0.1, 0.2, 0.3], 1).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn agent_id_changes_input() {
        let net = AgentQNet::new(3, 2, 4, &[8], &mut rng_from(0)).unwrap();
        let o = [0.1, 0.2, 0.3];
        let a = net.q_individual(&o, 0).unwrap();
        assert_ne!(a, net.q_individual(&o, 1).unwrap());
        assert_eq!(a, net.q_individual(&o, 0).unwrap());
    }

    #[test]
    fn q_individual_shape_errors() {
        let net = AgentQNet::new(3, 2, 4, &[8], &mut rng_from(0)).unwrap();
        assert!(net.q_individual(&[0.1, 0.2], 0).is_err());
        assert!(net.q_individual(&[0.1, 0.2, 0.3], 2).is_err());
    }

    #[test]
    fn vdn_sums() {
        let m = Mixer::Vdn { n_agents: 3 };
        assert_eq!(m.q_total(&[], &[1.0, 2.0, -0.5]).unwrap(), 2.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn monotonic_is_non_decreasing(
            seed in any::<u64>(),
            s in prop::collection::vec(-3.0f64..3.0, 4),
            q in prop::collection::vec(-10.0f64..10.0, 3),
            i in 0usize..3,
            delta in 1e-9f64..5.0,
        ) {
            let m = toy_mixer(3, seed);
            let mut q2 = q.clone();
            q2[i] += delta;
            prop_assert!(m.q_total(&s, &q2).unwrap() >= m.q_total(&s, &q).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn per_agent_argmax_is_joint_argmax(
            seed in any::<u64>(),
            n in 2usize..=4,
            s in prop::collection::vec(-1.0f64..1.0, 4),
            q in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 4),
        ) {
            let m = toy_mixer(n, seed);
            let q = &q[..n];
            let greedy: Vec<usize> = q.iter().map(|qi| argmax(qi)).collect();
            let mut best = (f64::NEG_INFINITY, Vec::new());
            for j in 0..(1usize << n) {
                let bits: Vec<usize> = (0..n).map(|i| (j >> (n - 1 - i)) & 1).collect();
                let chosen: Vec<f64> = bits.iter().zip(q).map(|(b, qi)| qi[*b]).collect();
                let v = m.q_total(&s, &chosen).unwrap();
                if v > best.0 {
                    best = (v, bits);
                }
            }
            prop_assert_eq!(greedy, best.1);
        }
    }

    #[test]
    fn epsilon_greedy_rules() {
        let mut rng = rng_from(1);
        assert_eq!(epsilon_greedy(&[0.1, 0.9], 0.0, &mut rng), 1);
        assert_eq!(epsilon_greedy(&[0.5, 0.5], 0.0, &mut rng), 0);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[epsilon_greedy(&[0.0, 1.0, 2.0, 3.0, 4.0], 1.0, &mut rng)] += 1;
        }
        assert!(chi_square_uniform(&counts) < chi_square_crit_p01(4), "{counts:?}");
    }

    #[test]
    fn schedule_anneals_then_holds() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(25_000) - 0.525).abs() < 1e-12);
        assert_eq!(s.value(50_000), 0.05);
        assert_eq!(s.value(1_000_000), 0.05);
    }

    fn one_step_episode(obs: Vec<Vec<f64>>, actions: Vec<usize>, reward: f64, done: bool) -> Episode {
        Episode {
            steps: vec![Transition {
                obs: obs.clone(),
                state: vec![0.0; 4],
                actions,
                reward,
                done,
            }],
            final_obs: obs,
            final_state: vec![0.0; 4],
        }
    }

    #[test]
    fn buffer_is_fifo_and_sampling_reproducible() {
        let mut buf = EpisodeBuffer::new(3).unwrap();
        for r in 0..5 {
            buf.push(one_step_episode(vec![vec![0.0]; 2], vec![0, 0], r as f64, true));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.get(0).unwrap().steps[0].reward, 2.0);
        let a: Vec<f64> = buf.sample(2, &mut rng_from(4)).iter().map(|e| e.steps[0].reward).collect();
        let b: Vec<f64> = buf.sample(2, &mut rng_from(4)).iter().map(|e| e.steps[0].reward).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn td_target_and_loss_values() {
        // Terminal transition with reward 0 and a zero network: loss 0.
        let net = AgentQNet::new(1, 2, 2, &[4], &mut rng_from(0)).unwrap().zeroed();
        let mixer = Mixer::Vdn { n_agents: 2 };
        let ep = one_step_episode(vec![vec![0.3], vec![-0.3]], vec![1, 0], 0.0, true);
        let batch = FlatBatch::new(&net, &[&ep]).unwrap();
        let stale = StaleCopy::new(&net, &mixer, 10).unwrap();
        let y = stale.td_targets(&batch, 0.99).unwrap();
        assert_eq!(y, vec![0.0]);
        let mut g = Graph::new();
        let nv = net.mlp().bind(&mut g);
        let mv = mixer.bind(&mut g);
        let td = td_loss_graph(&mut g, &net, &nv, &mixer, &mv, &batch, &y).unwrap();
        assert_eq!(g.value(td.loss).item(), 0.0);
    }

    #[test]
    fn td_loss_direct_evaluation() {
        // y = 1 + 0.99 * 2 = 2.98 against Q_tot = 2.5.
        let net = AgentQNet::new(1, 2, 2, &[4], &mut rng_from(0)).unwrap().zeroed();
        let mixer = Mixer::Vdn { n_agents: 2 };
        let ep = one_step_episode(vec![vec![0.0], vec![0.0]], vec![0, 0], 1.0, false);
        let batch = FlatBatch::new(&net, &[&ep]).unwrap();
        let y = vec![1.0 + 0.99 * 2.0];
        let mut g = Graph::new();
        // Replace the network output by feeding a biased zero net: bias 1.25 per agent.
        let mut biased = net.clone();
        let last = biased.params_mut().pop().unwrap();
        last.data_mut().iter_mut().for_each(|v| *v = 1.25);
        let nv = biased.mlp().bind(&mut g);
        let mv = mixer.bind(&mut g);
        let td = td_loss_graph(&mut g, &biased, &nv, &mixer, &mv, &batch, &y).unwrap();
        assert!((g.value(td.q_tot).item() - 2.5).abs() < 1e-12);
        assert!((g.value(td.loss).item() - 0.2304).abs() < 1e-12);
    }

    #[test]
    fn stale_copy_refreshes_on_multiples_only() {
        let mut rng = rng_from(3);
        let cfg = LearnerConfig {
            stale_interval: 5,
            hidden: vec![4],
            mixer_embed: 4,
            hyper_hidden: 4,
            ..LearnerConfig::default()
        };
        let mut learner = QLearner::new(1, 4, 2, 2, &cfg, &mut rng).unwrap();
        let ep = one_step_episode(vec![vec![0.2], vec![0.1]], vec![1, 0], 0.5, false);
        let batch = FlatBatch::new(&learner.net, &[&ep]).unwrap();
        let y0 = learner.stale.td_targets(&batch, 0.9).unwrap();
        for step in 1..5u64 {
            learner.td_train_step(&[&ep]).unwrap();
            assert!(!learner.on_env_step(step));
            assert_eq!(learner.stale.td_targets(&batch, 0.9).unwrap(), y0);
        }
        learner.td_train_step(&[&ep]).unwrap();
        assert!(learner.on_env_step(5));
        assert_ne!(learner.stale.td_targets(&batch, 0.9).unwrap(), y0);
        assert_eq!(learner.stale.refreshes(), 1);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = rng_from(8);
        let cfg = LearnerConfig {
            hidden: vec![6],
            mixer_embed: 4,
            hyper_hidden: 5,
            ..LearnerConfig::default()
        };
        let l = QLearner::new(3, 4, 2, 5, &cfg, &mut rng).unwrap();
        let ck = CtdeCheckpoint::capture("spread", 4, &l.net, &l.mixer, 12);
        let json = serde_json::to_string(&ck).unwrap();
        let back: CtdeCheckpoint = serde_json::from_str(&json).unwrap();
        let (net, mixer) = back.restore().unwrap();
        assert_eq!(net, l.net);
        assert_eq!(mixer, l.mixer);
        assert_eq!(back.header.training_step, 12);
    }

    #[test]
    fn two_agent_one_step_task_finds_best_joint_action() {
        // Additive payoff with a bonus on the best pair.
        let payoff = |a: usize, b: usize| {
            let u = [0.0, 1.0, 0.2][a];
            let v = [0.5, 0.0, 1.0][b];
            u + v + if (a, b) == (1, 2) { 0.3 } else { 0.0 }
        };
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for a in 0..3 {
            for b in 0..3 {
                if payoff(a, b) > best.0 {
                    best = (payoff(a, b), (a, b));
                }
            }
        }
        let cfg = LearnerConfig {
            lr: 5e-3,
            hidden: vec![16],
            mixer_embed: 8,
            hyper_hidden: 8,
            ..LearnerConfig::default()
        };
        let mut rng = rng_from(21);
        let mut learner = QLearner::new(1, 1, 2, 3, &cfg, &mut rng).unwrap();
        let schedule = EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            anneal_steps: 1000,
        };
        let obs = vec![vec![0.0], vec![0.0]];
        let mut buffer = EpisodeBuffer::new(500).unwrap();
        for step in 1..=2000u64 {
            let eps = schedule.value(step);
            let q = learner.net.q_joint(&obs).unwrap();
            let acts: Vec<usize> = q.iter().map(|qi| epsilon_greedy(qi, eps, &mut rng)).collect();
            buffer.push(Episode {
                steps: vec![Transition {
                    obs: obs.clone(),
                    state: vec![0.0],
                    actions: acts.clone(),
                    reward: payoff(acts[0], acts[1]),
                    done: true,
                }],
                final_obs: obs.clone(),
                final_state: vec![0.0],
            });
            let batch = buffer.sample(32, &mut rng);
            learner.td_train_step(&batch).unwrap();
            learner.on_env_step(step);
        }
        let greedy: Vec<usize> = learner.net.q_joint(&obs).unwrap().iter().map(|q| argmax(q)).collect();
        assert_eq!((greedy[0], greedy[1]), best.1);
    }
}
