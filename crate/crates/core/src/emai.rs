//! Masking agents. One masking agent per team member decides each step
//! whether that member keeps its action (bit 0) or has it replaced by a
//! uniformly random one (bit 1). They are trained jointly with value
//! decomposition on the team reward plus a per-mask bonus, with an extra loss
//! tying the masked process's return to the unmasked team's return. Members
//! whose masking agent refuses to mask them are the important ones.
//!
//! The team is only ever queried through [`BlackBox`].

use serde::{Deserialize, Serialize};

use crate::ctde::{
    argmax, epsilon_greedy, AgentQNet, CtdeCheckpoint, CtdeHeader, Episode, EpisodeBuffer, ExtraLoss,
    FlatBatch, Mixer, MixerDoc, QLearner, Transition,
};
use crate::envs::{discounted_return, random_action, Action, ActionSpace, Env};
use crate::nn::{Graph, ParamDoc, Tensor, Var};
use crate::par::map_indexed;
use crate::rng::{derive_seed, derived_rng, stream, Rng};
use crate::stats::mean_se;
use crate::target::{BlackBox, CurvePoint, TrainingConfig};
use crate::{EmaiError, Result};

pub const KEEP: usize = 0;
pub const MASK: usize = 1;

/// Keep the chosen action or draw a fresh random one.
pub fn apply_mask(action: &Action, bit: usize, space: &ActionSpace, rng: &mut Rng) -> Action {
    if bit == KEEP {
        action.clone()
    } else {
        random_action(space, rng)
    }
}

/// Sparsity bonus `beta * (number of masked agents)`.
pub fn masking_reward(bits: &[usize], beta: f64) -> f64 {
    beta * bits.iter().filter(|b| **b == MASK).count() as f64
}

// ---------------------------------------------------------------------------
// Baseline return

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineReturn {
    /// Mean discounted return of the unmasked team.
    pub j_pi: f64,
    pub stderr: f64,
    pub episodes: usize,
    pub gamma: f64,
    /// Mean absolute per-step reward over the same rollouts.
    pub mean_abs_reward: f64,
}

/// Monte-Carlo estimate of the team's discounted return over `episodes`
/// seeded episodes. Results are merged in seed order, so the value does not
/// depend on `workers`.
pub fn estimate_baseline_return(
    target: &dyn BlackBox,
    env: &Env,
    episodes: usize,
    gamma: f64,
    seed: u64,
    workers: usize,
) -> Result<BaselineReturn> {
    if episodes == 0 {
        return Err(EmaiError::invalid("baseline needs at least one episode"));
    }
    check_target(target, env)?;
    let per_episode = map_indexed(workers, episodes, |k| {
        let mut env = env.clone();
        let rewards = crate::envs::run_episode(&mut env, derive_seed(seed, stream::BASELINE, k as u64), |_, obs, _| {
            target.act_joint(obs)
        })?;
        let abs: f64 = rewards.iter().map(|r| r.abs()).sum();
        Ok((discounted_return(&rewards, gamma), abs, rewards.len()))
    })?;
    let returns: Vec<f64> = per_episode.iter().map(|p| p.0).collect();
    let steps: usize = per_episode.iter().map(|p| p.2).sum();
    let abs_total: f64 = per_episode.iter().map(|p| p.1).sum();
    let ms = mean_se(&returns);
    Ok(BaselineReturn {
        j_pi: ms.mean,
        stderr: ms.stderr,
        episodes,
        gamma,
        mean_abs_reward: if steps > 0 { abs_total / steps as f64 } else { 0.0 },
    })
}

pub fn check_target(target: &dyn BlackBox, env: &Env) -> Result<()> {
    let spec = env.spec();
    if target.n_agents() != spec.n_agents || target.obs_dim() != spec.obs_dim {
        return Err(EmaiError::incompatible(format!(
            "target {} ({} agents, obs {}) does not fit env {} ({} agents, obs {})",
            target.id(),
            target.n_agents(),
            target.obs_dim(),
            spec.name,
            spec.n_agents,
            spec.obs_dim
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Importance

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    /// `Q(keep) - Q(mask)`.
    pub gap: f64,
    /// Probability of masking under a temperature-1 softmax of the two values,
    /// clamped to the open unit interval.
    pub mask_prob: f64,
}

impl ImportanceScore {
    pub fn from_q(q_keep: f64, q_mask: f64) -> Self {
        let gap = q_keep - q_mask;
        ImportanceScore {
            gap,
            mask_prob: (1.0 / (1.0 + gap.exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0),
        }
    }
}

/// Index of the highest gap, lowest index on ties.
pub fn most_critical(scores: &[ImportanceScore]) -> usize {
    argmax(&scores.iter().map(|s| s.gap).collect::<Vec<_>>())
}

// ---------------------------------------------------------------------------
// Difference loss

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiffMode {
    /// Discounted sum of the mixed values, as in the training objective.
    #[default]
    Literal,
    /// Discounted sum of realized environment rewards (carries no gradient).
    RealizedReturn,
}

/// Per-transition sparsity bonus of a flattened batch.
fn batch_masking_rewards(batch: &FlatBatch, beta: f64) -> Vec<f64> {
    let n = batch.n_agents;
    (0..batch.len())
        .map(|k| masking_reward(&batch.actions[k * n..(k + 1) * n], beta))
        .collect()
}

/// Builds `mean_e D_e^2` with `D_e = J - sum_t gamma^t (Q_tot_t - R^m_t)`.
/// In [`DiffMode::RealizedReturn`], `Q_tot_t` is replaced by the stored
/// transition reward, so `Q_tot_t - R^m_t` is the environment reward.
pub fn diff_loss_graph(
    g: &mut Graph<'_>,
    q_tot: Var,
    batch: &FlatBatch,
    j_pi: f64,
    gamma: f64,
    beta: f64,
    mode: DiffMode,
) -> Result<Var> {
    let rm = batch_masking_rewards(batch, beta);
    let weights: Vec<f64> = batch.t_of.iter().map(|&t| gamma.powi(t as i32)).collect();
    let mut offset = vec![j_pi; batch.n_episodes];
    for k in 0..batch.len() {
        offset[batch.episode_of[k]] += weights[k] * rm[k];
    }
    let values = match mode {
        DiffMode::Literal => q_tot,
        DiffMode::RealizedReturn => g.input(Tensor::column(batch.rewards.clone())),
    };
    let disc = g.segment_sum(values, batch.episode_of.clone(), weights, batch.n_episodes)?;
    let offset = g.input(Tensor::column(offset));
    let d = g.sub(offset, disc)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

// ---------------------------------------------------------------------------
// Masking policy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaiHeader {
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub j_pi: f64,
    pub j_pi_stderr: f64,
    pub target_id: String,
    pub target_checksum: String,
    pub diff_mode: DiffMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingPolicy {
    pub net: AgentQNet,
    pub mixer: Mixer,
    pub header: EmaiHeader,
}

impl MaskingPolicy {
    pub fn n_agents(&self) -> usize {
        self.net.n_agents()
    }

    pub fn importance(&self, observations: &[Vec<f64>]) -> Result<Vec<ImportanceScore>> {
        Ok(self
            .net
            .q_joint(observations)?
            .iter()
            .map(|q| ImportanceScore::from_q(q[KEEP], q[MASK]))
            .collect())
    }

    pub fn most_critical(&self, observations: &[Vec<f64>]) -> Result<usize> {
        Ok(most_critical(&self.importance(observations)?))
    }

    /// Greedy mask bits (keep wins ties).
    pub fn greedy_mask(&self, observations: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.net.q_joint(observations)?.iter().map(|q| argmax(q)).collect())
    }
}

pub const EMAI_FORMAT: &str = "emai-masking";
pub const EMAI_VERSION: u32 = 1;

/// Masking checkpoint: a CTDE checkpoint plus the explainer header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaiCheckpoint {
    pub format: String,
    pub version: u32,
    pub header: CtdeHeader,
    pub emai: EmaiHeader,
    pub agent: ParamDoc,
    pub mixer: MixerDoc,
}

impl EmaiCheckpoint {
    pub fn capture(env: &str, state_dim: usize, policy: &MaskingPolicy, step: u64) -> Self {
        let base = CtdeCheckpoint::capture(env, state_dim, &policy.net, &policy.mixer, step);
        EmaiCheckpoint {
            format: EMAI_FORMAT.into(),
            version: EMAI_VERSION,
            header: base.header,
            emai: policy.header.clone(),
            agent: base.agent,
            mixer: base.mixer,
        }
    }

    pub fn restore(&self) -> Result<MaskingPolicy> {
        if self.format != EMAI_FORMAT || self.version != EMAI_VERSION {
            return Err(EmaiError::Checkpoint(format!(
                "unsupported masking checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let base = CtdeCheckpoint {
            format: crate::ctde::CTDE_FORMAT.into(),
            version: crate::ctde::CTDE_VERSION,
            header: self.header.clone(),
            agent: self.agent.clone(),
            mixer: self.mixer.clone(),
        };
        let (net, mixer) = base.restore()?;
        if net.n_actions() != 2 {
            return Err(EmaiError::Checkpoint("masking network must have 2 outputs".into()));
        }
        Ok(MaskingPolicy {
            net,
            mixer,
            header: self.emai.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaiConfig {
    /// Sparsity weight; `None` derives it from the baseline rollouts.
    pub beta: Option<f64>,
    /// Multiplier applied to the mean absolute step reward when `beta` is unset.
    pub beta_scale: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub baseline_episodes: usize,
    pub diff_mode: DiffMode,
    pub training: TrainingConfig,
}

impl Default for EmaiConfig {
    fn default() -> Self {
        EmaiConfig {
            beta: None,
            beta_scale: 0.02,
            lambda: 1.0,
            gamma: 0.99,
            baseline_episodes: 500,
            diff_mode: DiffMode::Literal,
            training: TrainingConfig {
                steps: 150_000,
                updates_per_episode: 1,
                ..TrainingConfig::default()
            },
        }
    }
}

impl EmaiConfig {
    pub fn resolved_beta(&self, baseline: &BaselineReturn) -> f64 {
        self.beta.unwrap_or(self.beta_scale * baseline.mean_abs_reward)
    }

    fn validate(&self) -> Result<()> {
        if self.beta.is_some_and(|b| !(b >= 0.0)) || !(self.lambda >= 0.0) || !(self.beta_scale >= 0.0) {
            return Err(EmaiError::invalid("beta and lambda must be non-negative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EmaiError::invalid(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

pub struct TrainedEmai {
    pub policy: MaskingPolicy,
    pub curve: Vec<CurvePoint>,
    pub env_steps: u64,
}

/// Collects one masked episode. Returns the episode (mask bits as actions,
/// training reward = env reward + bonus), the env-reward sum and the number of
/// masked agent-steps.
#[allow(clippy::too_many_arguments)]
fn masked_episode(
    target: &dyn BlackBox,
    env: &mut Env,
    learner: &mut QLearner,
    env_seed: u64,
    beta: f64,
    cfg: &TrainingConfig,
    env_steps: &mut u64,
    act_rng: &mut Rng,
    mask_rng: &mut Rng,
) -> Result<(Episode, f64, usize)> {
    let space = env.spec().action_space.clone();
    let (mut state, mut obs) = env.reset(env_seed);
    let mut ep = Episode::default();
    let mut ret = 0.0;
    let mut masked = 0;
    while !env.is_done() {
        let eps = cfg.epsilon.value(*env_steps);
        let team = target.act_joint(&obs)?;
        let bits: Vec<usize> = learner
            .net
            .q_joint(&obs)?
            .iter()
            .map(|q| epsilon_greedy(q, eps, act_rng))
            .collect();
        let joint: Vec<Action> = team
            .iter()
            .zip(&bits)
            .map(|(a, b)| apply_mask(a, *b, &space, mask_rng))
            .collect();
        let step = env.step(&joint)?;
        let bonus = masking_reward(&bits, beta);
        masked += bits.iter().filter(|b| **b == MASK).count();
        ret += step.reward;
        ep.steps.push(Transition {
            obs,
            state,
            actions: bits,
            reward: step.reward + bonus,
            done: step.done,
        });
        obs = step.observations;
        state = step.next_state;
        *env_steps += 1;
        learner.on_env_step(*env_steps);
    }
    ep.final_obs = obs;
    ep.final_state = state;
    Ok((ep, ret, masked))
}

/// Trains masking agents for `target` on `env` until the step budget is spent.
pub fn train_emai(
    target: &dyn BlackBox,
    env: &Env,
    cfg: &EmaiConfig,
    baseline: &BaselineReturn,
    seed: u64,
) -> Result<TrainedEmai> {
    cfg.validate()?;
    check_target(target, env)?;
    let spec = env.spec().clone();
    let beta = cfg.resolved_beta(baseline);
    let lambda = cfg.lambda;
    let tc = &cfg.training;
    let mut learner_cfg = tc.learner();
    learner_cfg.gamma = cfg.gamma;
    let mut init = derived_rng(seed, stream::INIT, 1);
    let mut learner = QLearner::new(spec.obs_dim, spec.state_dim, spec.n_agents, 2, &learner_cfg, &mut init)?;
    let mut buffer = EpisodeBuffer::new(tc.buffer_episodes)?;
    let mut act_rng = derived_rng(seed, stream::TRAIN, 1);
    let mut mask_rng = derived_rng(seed, stream::MASK, 1);
    let mut sample_rng = derived_rng(seed, stream::SAMPLE, 1);
    let mut env = env.clone();
    let mut curve = Vec::new();
    let mut env_steps = 0u64;
    let mut episode = 0u64;
    while env_steps < tc.steps {
        let eps = tc.epsilon.value(env_steps);
        let (ep, ret, masked) = masked_episode(
            target,
            &mut env,
            &mut learner,
            derive_seed(seed, stream::ENV, episode),
            beta,
            tc,
            &mut env_steps,
            &mut act_rng,
            &mut mask_rng,
        )?;
        let agent_steps = ep.len() * spec.n_agents;
        buffer.push(ep);
        episode += 1;
        let mut report = None;
        for _ in 0..tc.updates_per_episode {
            let batch = buffer.sample(tc.batch_episodes, &mut sample_rng);
            let (j_pi, gamma, mode) = (baseline.j_pi, cfg.gamma, cfg.diff_mode);
            report = Some(learner.train_step_with(&batch, |g, fb, q_tot| {
                if lambda == 0.0 {
                    return Ok(None);
                }
                let term = diff_loss_graph(g, q_tot, fb, j_pi, gamma, beta, mode)?;
                Ok(Some(ExtraLoss { term, weight: lambda }))
            })?);
        }
        curve.push(CurvePoint {
            env_steps,
            episode,
            episode_return: ret,
            loss: report.map_or(f64::NAN, |r| r.total),
            diff_loss: report.map_or(f64::NAN, |r| r.extra),
            epsilon: eps,
            mask_rate: masked as f64 / agent_steps.max(1) as f64,
        });
    }
    let header = EmaiHeader {
        beta,
        lambda,
        gamma: cfg.gamma,
        j_pi: baseline.j_pi,
        j_pi_stderr: baseline.stderr,
        target_id: target.id(),
        target_checksum: target.id(),
        diff_mode: cfg.diff_mode,
    };
    Ok(TrainedEmai {
        policy: MaskingPolicy {
            net: learner.net,
            mixer: learner.mixer,
            header,
        },
        curve,
        env_steps,
    })
}

/// Rolls out the team with greedy masks from `policy`; returns per-episode
/// env-reward sums and, per episode, the mask bits of every step.
pub fn greedy_mask_rollouts(
    policy: &MaskingPolicy,
    target: &dyn BlackBox,
    env: &Env,
    episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<(f64, Vec<Vec<usize>>, Vec<Vec<Vec<f64>>>)>> {
    check_target(target, env)?;
    let space = env.spec().action_space.clone();
    map_indexed(workers, episodes, |k| {
        let mut env = env.clone();
        let mut mask_rng = derived_rng(seed, stream::MASK, k as u64);
        let mut bits_log = Vec::new();
        let mut obs_log = Vec::new();
        let rewards = crate::envs::run_episode(&mut env, derive_seed(seed, stream::ENV, k as u64), |_, obs, _| {
            let team = target.act_joint(obs)?;
            let bits = policy.greedy_mask(obs)?;
            let joint = team
                .iter()
                .zip(&bits)
                .map(|(a, b)| apply_mask(a, *b, &space, &mut mask_rng))
                .collect();
            bits_log.push(bits);
            obs_log.push(obs.to_vec());
            Ok(joint)
        })?;
        Ok((rewards.iter().sum(), bits_log, obs_log))
    })
}
