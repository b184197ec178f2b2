//! Evaluation harness: fidelity via relative reward difference (RRD),
//! observation-noise attacks on the most critical agent, and patching the most
//! critical agent's actions from a package harvested out of good episodes.
//!
//! Every batch runs on a fixed list of per-episode seeds, so the original,
//! guided and random-guided batches are paired episode by episode. Any single
//! episode of a batch can be replayed with [`Recorder`] annotations.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ctde::argmax;
use crate::emai::{apply_mask, check_target, MASK};
use crate::envs::{Action, Env};
use crate::explain::{Explainer, StepContext};
use crate::par::map_indexed;
use crate::replay::{EpisodeRecord, Recorder, StepAnnotation};
use crate::rng::{derive_seed, derived_rng, stream};
use crate::stats::{cov_of_means, mean_se, MeanSe};
use crate::target::BlackBox;
use crate::{EmaiError, Result};

/// Denominators smaller than this leave the RRD undefined.
pub const RRD_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
}

fn env_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, stream::ENV, k as u64)
}

/// One step's decision inside an evaluation rollout.
struct Decision {
    executed: Vec<Action>,
    proposed: Vec<Action>,
    importance: Vec<f64>,
}

fn action_ids(actions: &[Action]) -> Result<Vec<usize>> {
    actions
        .iter()
        .map(|a| a.discrete().ok_or_else(|| EmaiError::incompatible("evaluation replays need discrete actions")))
        .collect()
}

/// Plays one episode from `seed`, optionally capturing it. Returns the
/// undiscounted return.
fn play<F>(env: &Env, seed: u64, ids: Option<(&str, &str)>, mut decide: F) -> Result<(f64, Option<EpisodeRecord>)>
where
    F: FnMut(&Env, &[Vec<f64>]) -> Result<Decision>,
{
    let mut env = env.clone();
    let (_, mut obs) = env.reset(seed);
    let mut rec = match ids {
        Some((target_id, explainer_id)) => Some(Recorder::start(&env, seed, target_id, explainer_id)?),
        None => None,
    };
    let mut ret = 0.0;
    while !env.is_done() {
        let d = decide(&env, &obs)?;
        let before = rec.as_ref().map(|_| env.clone());
        let step = env.step(&d.executed)?;
        ret += step.reward;
        if let (Some(r), Some(before)) = (rec.as_mut(), before) {
            r.push(
                &before,
                StepAnnotation {
                    target_actions: action_ids(&d.proposed)?,
                    mask_actions: None,
                    final_actions: action_ids(&d.executed)?,
                    importance: d.importance,
                },
                step.reward,
            )?;
        }
        obs = step.observations;
    }
    Ok((ret, rec.map(Recorder::finish)))
}

fn scores(explainer: &Explainer, env: &Env, obs: &[Vec<f64>], target: &dyn BlackBox, rng: &mut crate::rng::Rng) -> Result<Vec<f64>> {
    explainer.explain(
        &StepContext {
            env,
            observations: obs,
            target,
        },
        rng,
    )
}

fn original_episode(target: &dyn BlackBox, env: &Env, seed: u64, record: bool) -> Result<(f64, Option<EpisodeRecord>)> {
    let n = env.spec().n_agents;
    let tid = target.id();
    play(env, seed, record.then_some((tid.as_str(), "none")), |_, obs| {
        let joint = target.act_joint(obs)?;
        Ok(Decision {
            executed: joint.clone(),
            proposed: joint,
            importance: vec![0.0; n],
        })
    })
}

/// Original (unperturbed) undiscounted episode returns.
pub fn original_returns(target: &dyn BlackBox, env: &Env, s: &EvalSettings) -> Result<Vec<f64>> {
    map_indexed(s.workers, s.episodes, |k| Ok(original_episode(target, env, env_seed(s.seed, k), false)?.0))
}

/// Who gets randomized each step of a guided rollout.
#[derive(Clone, Copy)]
enum Selector<'a> {
    Explainer(&'a Explainer),
    Uniform,
}

fn randomized_episode(
    target: &dyn BlackBox,
    env: &Env,
    s: &EvalSettings,
    selector: Selector<'_>,
    k: usize,
    record: bool,
) -> Result<(f64, Option<EpisodeRecord>)> {
    let space = env.spec().action_space.clone();
    let n = env.spec().n_agents;
    let (select_stream, mask_offset, label) = match selector {
        Selector::Explainer(x) => (stream::EXPLAIN, 0, x.id()),
        Selector::Uniform => (stream::SELECT, 1, "uniform-selection"),
    };
    let mut select_rng = derived_rng(s.seed, select_stream, k as u64);
    let mut mask_rng = derived_rng(s.seed, stream::MASK, 2 * k as u64 + mask_offset);
    let tid = target.id();
    play(env, env_seed(s.seed, k), record.then_some((tid.as_str(), label)), |env_now, obs| {
        let proposed = target.act_joint(obs)?;
        let importance = match selector {
            Selector::Explainer(x) => scores(x, env_now, obs, target, &mut select_rng)?,
            Selector::Uniform => {
                let mut v = vec![0.0; n];
                v[select_rng.gen_range(0..n)] = 1.0;
                v
            }
        };
        let critical = argmax(&importance);
        let mut executed = proposed.clone();
        executed[critical] = apply_mask(&executed[critical], MASK, &space, &mut mask_rng);
        Ok(Decision {
            executed,
            proposed,
            importance,
        })
    })
}

/// Returns with one agent per step replaced by a random action.
fn randomized_returns(target: &dyn BlackBox, env: &Env, s: &EvalSettings, selector: Selector<'_>) -> Result<Vec<f64>> {
    map_indexed(s.workers, s.episodes, |k| Ok(randomized_episode(target, env, s, selector, k, false)?.0))
}

/// Replays episode `k` of the explainer-guided fidelity batch.
pub fn record_fidelity_episode(explainer: &Explainer, target: &dyn BlackBox, env: &Env, s: &EvalSettings, k: usize) -> Result<EpisodeRecord> {
    check_target(target, env)?;
    let (_, rec) = randomized_episode(target, env, s, Selector::Explainer(explainer), k, true)?;
    rec.ok_or_else(|| EmaiError::invalid("episode was not recorded"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrdReport {
    pub explainer: String,
    pub env: String,
    pub episodes: usize,
    pub r_o: MeanSe,
    pub r_e: MeanSe,
    pub r_r: MeanSe,
    /// Paired `R_e - R_o`.
    pub numerator: MeanSe,
    /// Paired `R_r - R_o`.
    pub denominator: MeanSe,
    /// `None` when the denominator is below [`RRD_GUARD`].
    pub rrd: Option<f64>,
    pub rrd_stderr: Option<f64>,
}

/// `|mean a| / |mean b|` for paired difference series, with a delta-method
/// standard error.
pub fn rrd_from_series(r_o: &[f64], r_e: &[f64], r_r: &[f64]) -> (MeanSe, MeanSe, Option<f64>, Option<f64>) {
    let de: Vec<f64> = r_e.iter().zip(r_o).map(|(e, o)| e - o).collect();
    let dr: Vec<f64> = r_r.iter().zip(r_o).map(|(r, o)| r - o).collect();
    let num = mean_se(&de);
    let den = mean_se(&dr);
    if den.mean.abs() < RRD_GUARD {
        return (num, den, None, None);
    }
    let rrd = num.mean.abs() / den.mean.abs();
    let (a, b) = (num.mean, den.mean);
    let var = if a == 0.0 {
        (num.stderr / b).powi(2)
    } else {
        let cov = cov_of_means(&de, &dr);
        rrd * rrd * ((num.stderr / a).powi(2) + (den.stderr / b).powi(2) - 2.0 * cov / (a * b))
    };
    (num, den, Some(rrd), Some(var.max(0.0).sqrt()))
}

pub fn eval_fidelity(explainer: &Explainer, target: &dyn BlackBox, env: &Env, s: &EvalSettings) -> Result<RrdReport> {
    check_target(target, env)?;
    let r_o = original_returns(target, env, s)?;
    let r_e = randomized_returns(target, env, s, Selector::Explainer(explainer))?;
    let r_r = randomized_returns(target, env, s, Selector::Uniform)?;
    let (numerator, denominator, rrd, rrd_stderr) = rrd_from_series(&r_o, &r_e, &r_r);
    if rrd.is_none() {
        log::warn!("RRD undefined: random-selection reward change {} is below guard", denominator.mean);
    }
    Ok(RrdReport {
        explainer: explainer.id().into(),
        env: env.spec().name.clone(),
        episodes: s.episodes,
        r_o: mean_se(&r_o),
        r_e: mean_se(&r_e),
        r_r: mean_se(&r_r),
        numerator,
        denominator,
        rrd,
        rrd_stderr,
    })
}

// ---------------------------------------------------------------------------
// Attacks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    /// Perturb only the explainer's most critical agent.
    #[default]
    Critical,
    /// Perturb every agent (diagnostic).
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub explainer: String,
    pub env: String,
    pub episodes: usize,
    pub original: MeanSe,
    pub modified: MeanSe,
    /// Paired `modified - original`.
    pub delta: MeanSe,
    /// Attack noise level or patch threshold.
    pub parameter: f64,
    /// Number of action replacements (patching only).
    pub replacements: usize,
}

fn delta_report(explainer: &str, env: &Env, original: &[f64], modified: &[f64], parameter: f64, replacements: usize) -> DeltaReport {
    let d: Vec<f64> = modified.iter().zip(original).map(|(m, o)| m - o).collect();
    DeltaReport {
        explainer: explainer.into(),
        env: env.spec().name.clone(),
        episodes: original.len(),
        original: mean_se(original),
        modified: mean_se(modified),
        delta: mean_se(&d),
        parameter,
        replacements,
    }
}

fn attack_label(explainer: &Explainer, mode: AttackMode) -> &'static str {
    match mode {
        AttackMode::Critical => explainer.id(),
        AttackMode::All => "all-agents",
    }
}

#[allow(clippy::too_many_arguments)]
fn attack_episode(
    explainer: &Explainer,
    target: &dyn BlackBox,
    env: &Env,
    noise_eps: f64,
    mode: AttackMode,
    s: &EvalSettings,
    k: usize,
    record: bool,
) -> Result<(f64, Option<EpisodeRecord>)> {
    let n = env.spec().n_agents;
    let mut select_rng = derived_rng(s.seed, stream::EXPLAIN, k as u64);
    let mut noise_rng = derived_rng(s.seed, stream::ATTACK, k as u64);
    let tid = target.id();
    let ids = record.then_some((tid.as_str(), attack_label(explainer, mode)));
    play(env, env_seed(s.seed, k), ids, |env_now, obs| {
        let (importance, victims) = match mode {
            AttackMode::All => (vec![1.0; n], (0..n).collect()),
            AttackMode::Critical => {
                let sc = scores(explainer, env_now, obs, target, &mut select_rng)?;
                let c = argmax(&sc);
                (sc, vec![c])
            }
        };
        let mut seen = obs.to_vec();
        if noise_eps > 0.0 {
            for v in victims {
                for x in seen[v].iter_mut() {
                    *x = (*x + noise_rng.gen_range(-noise_eps..=noise_eps)).clamp(-1.0, 1.0);
                }
            }
        }
        let executed = target.act_joint(&seen)?;
        let proposed = if record { target.act_joint(obs)? } else { executed.clone() };
        Ok(Decision {
            executed,
            proposed,
            importance,
        })
    })
}

/// Each step, adds uniform noise in `[-noise_eps, noise_eps]` to every
/// observation component of the targeted agent(s), clips to `[-1, 1]` and feeds
/// the result to the team. The explainer itself sees clean observations.
pub fn launch_attack(
    explainer: &Explainer,
    target: &dyn BlackBox,
    env: &Env,
    noise_eps: f64,
    mode: AttackMode,
    s: &EvalSettings,
) -> Result<DeltaReport> {
    if !(noise_eps >= 0.0) {
        return Err(EmaiError::invalid(format!("noise_eps must be >= 0, got {noise_eps}")));
    }
    check_target(target, env)?;
    let original = original_returns(target, env, s)?;
    let attacked = map_indexed(s.workers, s.episodes, |k| {
        Ok(attack_episode(explainer, target, env, noise_eps, mode, s, k, false)?.0)
    })?;
    Ok(delta_report(attack_label(explainer, mode), env, &original, &attacked, noise_eps, 0))
}

/// Replays episode `k` of an attack batch; `target_actions` are the team's
/// choices on clean observations, `final_actions` the ones actually taken.
pub fn record_attack_episode(
    explainer: &Explainer,
    target: &dyn BlackBox,
    env: &Env,
    noise_eps: f64,
    mode: AttackMode,
    s: &EvalSettings,
    k: usize,
) -> Result<EpisodeRecord> {
    check_target(target, env)?;
    let (_, rec) = attack_episode(explainer, target, env, noise_eps, mode, s, k, true)?;
    rec.ok_or_else(|| EmaiError::invalid("episode was not recorded"))
}

// ---------------------------------------------------------------------------
// Patching

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEntry {
    pub obs: Vec<f64>,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchPackage {
    pub source: String,
    pub quantile: f64,
    pub harvest_episodes: usize,
    pub kept_episodes: Vec<usize>,
    pub entries: Vec<PatchEntry>,
}

/// Number of episodes kept for a quantile (at least one).
pub fn kept_count(episodes: usize, quantile: f64) -> usize {
    ((quantile * episodes as f64).ceil() as usize).clamp(1, episodes)
}

/// Runs the team unperturbed, keeps the top `quantile` of episodes by return
/// and records, for every step of those, the most critical agent's
/// observation and action. Exact-duplicate observations keep the first entry.
pub fn build_patch_package(
    explainer: &Explainer,
    target: &dyn BlackBox,
    env: &Env,
    quantile: f64,
    s: &EvalSettings,
) -> Result<PatchPackage> {
    if s.episodes < 10 {
        return Err(EmaiError::invalid("patch harvesting needs at least 10 episodes"));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(EmaiError::invalid(format!("quantile must be in (0, 1], got {quantile}")));
    }
    check_target(target, env)?;
    let runs = map_indexed(s.workers, s.episodes, |k| {
        let mut select_rng = derived_rng(s.seed, stream::HARVEST, k as u64);
        let mut picked = Vec::new();
        let (ret, _) = play(env, derive_seed(s.seed, stream::HARVEST, k as u64), None, |env_now, obs| {
            let joint = target.act_joint(obs)?;
            let importance = scores(explainer, env_now, obs, target, &mut select_rng)?;
            let i = argmax(&importance);
            let a = joint[i]
                .discrete()
                .ok_or_else(|| EmaiError::incompatible("patching needs discrete actions"))?;
            picked.push(PatchEntry { obs: obs[i].clone(), action: a });
            Ok(Decision {
                executed: joint.clone(),
                proposed: joint,
                importance,
            })
        })?;
        Ok((ret, picked))
    })?;
    let mut order: Vec<usize> = (0..runs.len()).collect();
    let all_equal = runs.iter().all(|r| r.0 == runs[0].0);
    if all_equal {
        log::warn!("all harvest episodes have the same return; keeping every episode");
    } else {
        order.sort_by(|a, b| runs[*b].0.total_cmp(&runs[*a].0));
        order.truncate(kept_count(runs.len(), quantile));
    }
    let mut entries: Vec<PatchEntry> = Vec::new();
    for &k in &order {
        for entry in &runs[k].1 {
            if !entries.iter().any(|e| e.obs == entry.obs) {
                entries.push(entry.clone());
            }
        }
    }
    Ok(PatchPackage {
        source: explainer.id().into(),
        quantile,
        harvest_episodes: s.episodes,
        kept_episodes: order,
        entries,
    })
}

pub fn manhattan(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Nearest package entry by Manhattan distance, lowest index on ties.
pub fn nearest_entry<'p>(package: &'p PatchPackage, obs: &[f64]) -> Option<(&'p PatchEntry, f64)> {
    let mut best: Option<(&PatchEntry, f64)> = None;
    for e in &package.entries {
        let d = manhattan(&e.obs, obs);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((e, d));
        }
    }
    best
}

/// Default similarity threshold for an observation width.
pub fn default_d_th(obs_dim: usize) -> f64 {
    0.05 * obs_dim as f64
}

fn check_package(package: &PatchPackage, env: &Env) -> Result<()> {
    if package.entries.is_empty() {
        return Err(EmaiError::invalid("patch package is empty"));
    }
    if let Some(e) = package.entries.iter().find(|e| e.obs.len() != env.spec().obs_dim) {
        return Err(EmaiError::incompatible(format!(
            "package observation width {} differs from env {}",
            e.obs.len(),
            env.spec().obs_dim
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn patch_episode(
    package: &PatchPackage,
    explainer: &Explainer,
    target: &dyn BlackBox,
    env: &Env,
    d_th: f64,
    s: &EvalSettings,
    k: usize,
    record: bool,
) -> Result<(f64, usize, Option<EpisodeRecord>)> {
    let mut select_rng = derived_rng(s.seed, stream::EXPLAIN, k as u64);
    let mut replaced = 0usize;
    let tid = target.id();
    let (ret, rec) = play(env, env_seed(s.seed, k), record.then_some((tid.as_str(), explainer.id())), |env_now, obs| {
        let proposed = target.act_joint(obs)?;
        let importance = scores(explainer, env_now, obs, target, &mut select_rng)?;
        let i = argmax(&importance);
        let mut executed = proposed.clone();
        if let Some((entry, d)) = nearest_entry(package, &obs[i]) {
            if d <= d_th && executed[i] != Action::Discrete(entry.action) {
                executed[i] = Action::Discrete(entry.action);
                replaced += 1;
            }
        }
        Ok(Decision {
            executed,
            proposed,
            importance,
        })
    })?;
    Ok((ret, replaced, rec))
}

/// Each step, if the most critical agent's observation is within `d_th` of a
/// package entry whose action differs from the team's, the package action is
/// executed instead.
pub fn apply_patch(
    package: &PatchPackage,
    explainer: &Explainer,
    target: &dyn BlackBox,
    env: &Env,
    d_th: f64,
    s: &EvalSettings,
) -> Result<DeltaReport> {
    check_package(package, env)?;
    check_target(target, env)?;
    let original = original_returns(target, env, s)?;
    let patched = map_indexed(s.workers, s.episodes, |k| {
        let (ret, replaced, _) = patch_episode(package, explainer, target, env, d_th, s, k, false)?;
        Ok((ret, replaced))
    })?;
    let returns: Vec<f64> = patched.iter().map(|p| p.0).collect();
    let replacements = patched.iter().map(|p| p.1).sum();
    Ok(delta_report(explainer.id(), env, &original, &returns, d_th, replacements))
}

/// Replays episode `k` of a patch batch; `final_actions` differ from
/// `target_actions` exactly where a patch fired.
pub fn record_patch_episode(
    package: &PatchPackage,
    explainer: &Explainer,
    target: &dyn BlackBox,
    env: &Env,
    d_th: f64,
    s: &EvalSettings,
    k: usize,
) -> Result<EpisodeRecord> {
    check_package(package, env)?;
    check_target(target, env)?;
    let (_, _, rec) = patch_episode(package, explainer, target, env, d_th, s, k, true)?;
    rec.ok_or_else(|| EmaiError::invalid("episode was not recorded"))
}

// ---------------------------------------------------------------------------
// Report emission

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub explainer: String,
    pub env: String,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
}

impl RrdReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        let row = |metric: &str, value: f64, stderr: f64| MetricRow {
            explainer: self.explainer.clone(),
            env: self.env.clone(),
            metric: metric.into(),
            value,
            stderr,
        };
        vec![
            row("r_o", self.r_o.mean, self.r_o.stderr),
            row("r_e", self.r_e.mean, self.r_e.stderr),
            row("r_r", self.r_r.mean, self.r_r.stderr),
            row("rrd", self.rrd.unwrap_or(f64::NAN), self.rrd_stderr.unwrap_or(f64::NAN)),
        ]
    }
}

impl DeltaReport {
    pub fn rows(&self, kind: &str) -> Vec<MetricRow> {
        let row = |metric: String, m: MeanSe| MetricRow {
            explainer: self.explainer.clone(),
            env: self.env.clone(),
            metric,
            value: m.mean,
            stderr: m.stderr,
        };
        vec![
            row(format!("{kind}_original"), self.original),
            row(format!("{kind}_modified"), self.modified),
            row(format!("{kind}_delta"), self.delta),
        ]
    }
}

pub fn write_metric_csv<W: Write>(out: &mut W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(out, "explainer,env,metric,value,stderr")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.explainer, r.env, r.metric, r.value, r.stderr)?;
    }
    Ok(())
}
