//! Per-step agent importance from several explainers, plus a brute-force
//! Monte-Carlo counterfactual oracle.
//!
//! Only [`Explainer::ValueBased`] and [`Explainer::GradientBased`] look inside
//! the team, and they can only be built from a learned target's privileged
//! accessor. The other explainers see the team through [`BlackBox`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ctde::{argmax, AgentQNet};
use crate::emai::MaskingPolicy;
use crate::envs::{random_action, Env};
use crate::nn::{Graph, Tensor};
use crate::rng::{derived_rng, stream, Rng};
use crate::stats::mean_se;
use crate::target::{BlackBox, TargetPolicy};
use crate::{EmaiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplainerKind {
    Emai,
    Random,
    ValueBased,
    GradientBased,
    McOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    BlackBox,
    WhiteBox,
}

impl ExplainerKind {
    pub fn access(self) -> Access {
        match self {
            ExplainerKind::ValueBased | ExplainerKind::GradientBased => Access::WhiteBox,
            _ => Access::BlackBox,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            ExplainerKind::Emai => "emai",
            ExplainerKind::Random => "random",
            ExplainerKind::ValueBased => "value-based",
            ExplainerKind::GradientBased => "gradient-based",
            ExplainerKind::McOracle => "mc-oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GradNorm {
    #[default]
    L1,
    L2,
}

/// What an explainer may look at for one step. `env` is the environment as it
/// is before the step is taken.
pub struct StepContext<'a> {
    pub env: &'a Env,
    pub observations: &'a [Vec<f64>],
    pub target: &'a dyn BlackBox,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Explainer {
    Emai(MaskingPolicy),
    Random,
    ValueBased(AgentQNet),
    GradientBased { net: AgentQNet, norm: GradNorm },
    McOracle { rollouts: usize },
}

fn white_box_net(target: &TargetPolicy, kind: ExplainerKind) -> Result<AgentQNet> {
    target.privileged_qnet().cloned().ok_or_else(|| {
        EmaiError::incompatible(format!(
            "{} explainer needs white-box access to a learned target; {} is scripted",
            kind.id(),
            target.id()
        ))
    })
}

impl Explainer {
    pub fn value_based(target: &TargetPolicy) -> Result<Self> {
        Ok(Explainer::ValueBased(white_box_net(target, ExplainerKind::ValueBased)?))
    }

    pub fn gradient_based(target: &TargetPolicy, norm: GradNorm) -> Result<Self> {
        Ok(Explainer::GradientBased {
            net: white_box_net(target, ExplainerKind::GradientBased)?,
            norm,
        })
    }

    pub fn mc_oracle(rollouts: usize) -> Result<Self> {
        if rollouts == 0 {
            return Err(EmaiError::invalid("oracle needs at least one rollout per agent"));
        }
        Ok(Explainer::McOracle { rollouts })
    }

    pub fn kind(&self) -> ExplainerKind {
        match self {
            Explainer::Emai(_) => ExplainerKind::Emai,
            Explainer::Random => ExplainerKind::Random,
            Explainer::ValueBased(_) => ExplainerKind::ValueBased,
            Explainer::GradientBased { .. } => ExplainerKind::GradientBased,
            Explainer::McOracle { .. } => ExplainerKind::McOracle,
        }
    }

    pub fn id(&self) -> &'static str {
        self.kind().id()
    }

    /// One finite score per agent; higher means more important.
    pub fn explain(&self, ctx: &StepContext<'_>, rng: &mut Rng) -> Result<Vec<f64>> {
        let n = ctx.observations.len();
        let scores = match self {
            Explainer::Emai(p) => p.importance(ctx.observations)?.iter().map(|s| s.gap).collect(),
            Explainer::Random => (0..n).map(|_| rng.gen::<f64>()).collect(),
            Explainer::ValueBased(net) => net
                .q_joint(ctx.observations)?
                .iter()
                .map(|q| q.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect(),
            Explainer::GradientBased { net, norm } => (0..n)
                .map(|i| log_prob_saliency(net, &ctx.observations[i], i, *norm))
                .collect::<Result<_>>()?,
            Explainer::McOracle { rollouts } => {
                let seed = rng.gen::<u64>();
                mc_counterfactual_oracle(ctx.target, ctx.env, *rollouts, seed)?.scores
            }
        };
        let scores: Vec<f64> = scores;
        if scores.len() != n || scores.iter().any(|s| !s.is_finite()) {
            return Err(EmaiError::NonFinite(format!("{} explainer scores", self.id())));
        }
        Ok(scores)
    }

    /// Argmax of [`Explainer::explain`], lowest index on ties.
    pub fn most_critical(&self, ctx: &StepContext<'_>, rng: &mut Rng) -> Result<usize> {
        Ok(argmax(&self.explain(ctx, rng)?))
    }
}

/// Norm of `d log p(a*) / d o` where `p` is the softmax of the agent's Q
/// values and `a*` its greedy action.
pub fn log_prob_saliency(net: &AgentQNet, obs: &[f64], agent_id: usize, norm: GradNorm) -> Result<f64> {
    let mut row = Vec::with_capacity(net.obs_dim() + net.n_agents());
    net.push_input(obs, agent_id, &mut row)?;
    let width = row.len();
    let mut g = Graph::new();
    let vars = net.mlp().bind_frozen(&mut g);
    let x = g.input_with_grad(Tensor::new(vec![1, width], row)?);
    let q = net.forward_graph(&mut g, &vars, x)?;
    let chosen = argmax(g.value(q).data());
    let lp = g.log_softmax(q)?;
    let picked = g.gather(lp, vec![chosen])?;
    let loss = g.sum(picked)?;
    let grads = g.backward(loss)?;
    let gx = grads.get_or_zeros(x);
    let obs_grad = &gx.data()[..net.obs_dim()];
    Ok(match norm {
        GradNorm::L1 => obs_grad.iter().map(|v| v.abs()).sum(),
        GradNorm::L2 => obs_grad.iter().map(|v| v * v).sum::<f64>().sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    pub scores: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Undiscounted return of the unmasked continuation.
    pub baseline: f64,
}

/// Counterfactual importance from `env`'s current state: for each agent,
/// `rollouts` continuations in which only that agent acts uniformly at random
/// for the rest of the episode, compared with the unmasked continuation.
///
/// Transitions are deterministic given the state, so cloning the environment
/// is the same as replaying the prefix, and one unmasked rollout is exact.
pub fn mc_counterfactual_oracle(target: &dyn BlackBox, env: &Env, rollouts: usize, seed: u64) -> Result<OracleScores> {
    if rollouts == 0 {
        return Err(EmaiError::invalid("oracle needs at least one rollout per agent"));
    }
    let n = env.spec().n_agents;
    let space = env.spec().action_space.clone();
    let continue_from = |masked: Option<(usize, &mut Rng)>| -> Result<f64> {
        let mut e = env.clone();
        let mut obs = e.observations();
        let mut total = 0.0;
        let mut masked = masked;
        while !e.is_done() {
            let mut joint = target.act_joint(&obs)?;
            if let Some((i, rng)) = masked.as_mut() {
                joint[*i] = random_action(&space, rng);
            }
            let step = e.step(&joint)?;
            total += step.reward;
            obs = step.observations;
        }
        Ok(total)
    };
    let baseline = continue_from(None)?;
    let mut scores = Vec::with_capacity(n);
    let mut stderr = Vec::with_capacity(n);
    for i in 0..n {
        let deltas: Vec<f64> = (0..rollouts)
            .map(|r| {
                let mut rng = derived_rng(seed, stream::ORACLE, (i * rollouts + r) as u64);
                Ok(continue_from(Some((i, &mut rng)))? - baseline)
            })
            .collect::<Result<_>>()?;
        let ms = mean_se(&deltas);
        scores.push(ms.mean.abs());
        stderr.push(ms.stderr);
    }
    Ok(OracleScores {
        scores,
        stderr,
        baseline,
    })
}
