use std::path::{Path, PathBuf};

use emai_core::ctde::CtdeCheckpoint;
use emai_core::emai::{estimate_baseline_return, train_emai, EmaiCheckpoint};
use emai_core::envs::{run_episode, Env};
use emai_core::eval::{
    apply_patch, build_patch_package, default_d_th, eval_fidelity, launch_attack, record_attack_episode,
    record_patch_episode, write_metric_csv, EvalSettings,
};
use emai_core::explain::{Explainer, ExplainerKind};
use emai_core::replay::{parse, record_explained_episode, render, serialize, RenderMode};
use emai_core::rng::{derive_seed, derived_rng, stream};
use emai_core::stats::{mean_se, MeanSe};
use emai_core::target::{load_target, train_target, write_curve_csv, BlackBox, TargetPolicy};
use serde::{Deserialize, Serialize};

use crate::config::{LoadedConfig, RunConfig, TargetConfig, TargetKind};
use crate::error::CliError;
use crate::manifest::{sha256_hex, Manifest, OutputDir};

/// Flags that override individual config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

/// A loaded config with overrides applied and the output root resolved.
pub struct Run {
    loaded: LoadedConfig,
    pub cfg: RunConfig,
    pub out: PathBuf,
    env: Env,
}

impl Run {
    pub fn new(mut loaded: LoadedConfig, ov: &Overrides) -> Result<Self, CliError> {
        if let Some(s) = ov.seed {
            loaded.config.seed = s;
        }
        if let Some(w) = ov.workers {
            if w == 0 {
                return Err(CliError::Config("--workers must be at least 1".into()));
            }
            loaded.config.workers = w;
        }
        let out = loaded.output_dir(ov.out.as_deref());
        let cfg = loaded.config.clone();
        let env = cfg.env.build()?;
        Ok(Run { loaded, cfg, out, env })
    }

    fn settings(&self, episodes: usize) -> EvalSettings {
        EvalSettings {
            episodes,
            seed: self.cfg.seed,
            workers: self.cfg.workers,
        }
    }

    fn output(&self, command: &str) -> Result<OutputDir, CliError> {
        OutputDir::create(&self.out, command, &self.cfg)
    }

    /// The team to explain plus a checksum identifying it.
    fn target(&self, tc: &TargetConfig) -> Result<(TargetPolicy, String), CliError> {
        match tc.kind {
            TargetKind::Scripted => {
                if tc.checkpoint.is_some() {
                    return Err(CliError::Config("target.checkpoint requires kind = \"checkpoint\"".into()));
                }
                let t = TargetPolicy::scripted(&self.env, tc.weak)?;
                let sum = format!("scripted:{}:{}", self.env.spec().name, t.id());
                Ok((t, sum))
            }
            TargetKind::Checkpoint => {
                if tc.weak {
                    return Err(CliError::Config("target.weak applies to scripted targets only".into()));
                }
                let path = self.loaded.target_checkpoint(tc, &self.out);
                let bytes = read_artifact(&path)?;
                let ckpt: CtdeCheckpoint = serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::Incompatible(format!("{}: not a team checkpoint ({e})", path.display())))?;
                let spec = self.env.spec();
                if ckpt.header.env != spec.name || ckpt.header.n_agents != spec.n_agents || ckpt.header.obs_dim != spec.obs_dim {
                    return Err(CliError::Incompatible(format!(
                        "{} was trained on {} ({} agents, obs {}), config env is {} ({} agents, obs {})",
                        path.display(),
                        ckpt.header.env,
                        ckpt.header.n_agents,
                        ckpt.header.obs_dim,
                        spec.name,
                        spec.n_agents,
                        spec.obs_dim
                    )));
                }
                let sum = sha256_hex(&bytes);
                let t = load_target(&ckpt, format!("learned-{}", &sum[..12]))?;
                Ok((t, sum))
            }
        }
    }

    fn explainer(&self, target: &TargetPolicy, target_sum: &str) -> Result<Explainer, CliError> {
        let x = &self.cfg.explainer;
        Ok(match x.kind {
            ExplainerKind::Emai => {
                let path = self.loaded.explainer_checkpoint(&self.out);
                let bytes = read_artifact(&path)?;
                let ckpt: EmaiCheckpoint = serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::Incompatible(format!("{}: not a masking checkpoint ({e})", path.display())))?;
                let spec = self.env.spec();
                if ckpt.header.env != spec.name || ckpt.header.n_agents != spec.n_agents || ckpt.header.obs_dim != spec.obs_dim {
                    return Err(CliError::Incompatible(format!(
                        "{} explains env {}, config env is {}",
                        path.display(),
                        ckpt.header.env,
                        spec.name
                    )));
                }
                if ckpt.emai.target_checksum != target_sum {
                    return Err(CliError::Incompatible(format!(
                        "{} was trained for target {}, config target is {}",
                        path.display(),
                        ckpt.emai.target_checksum,
                        target_sum
                    )));
                }
                Explainer::Emai(ckpt.restore()?)
            }
            ExplainerKind::Random => Explainer::Random,
            ExplainerKind::ValueBased => Explainer::value_based(target)?,
            ExplainerKind::GradientBased => Explainer::gradient_based(target, x.grad_norm)?,
            ExplainerKind::McOracle => Explainer::mc_oracle(x.rollouts)?,
        })
    }
}

fn read_artifact(path: &Path) -> Result<Vec<u8>, CliError> {
    if !path.is_file() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    Ok(std::fs::read(path)?)
}

fn csv_bytes(rows: &[emai_core::eval::MetricRow]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_metric_csv(&mut buf, rows)?;
    Ok(buf)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| format!("{x:.4}"))
}

/// Greedy evaluation written next to a trained team.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamSummary {
    pub episodes: usize,
    pub episode_return: MeanSe,
    /// Key-corridor only.
    pub door_open_rate: Option<f64>,
}

fn team_summary(target: &TargetPolicy, env: &Env, seed: u64, episodes: usize) -> Result<TeamSummary, CliError> {
    let mut returns = Vec::with_capacity(episodes);
    let mut opened = 0usize;
    for k in 0..episodes {
        let mut e = env.clone();
        let r = run_episode(&mut e, derive_seed(seed, stream::ENV, k as u64), |_, obs, _| target.act_joint(obs))?;
        returns.push(r.iter().sum::<f64>());
        opened += usize::from(e.door_open() == Some(true));
    }
    Ok(TeamSummary {
        episodes,
        episode_return: mean_se(&returns),
        door_open_rate: env.door_open().map(|_| opened as f64 / episodes as f64),
    })
}

pub fn train_target_cmd(run: &Run) -> Result<Manifest, CliError> {
    let mut out = run.output("train-target")?;
    let trained = train_target(&run.env, &run.cfg.training, run.cfg.seed)?;
    out.write_json("checkpoint.json", &trained.checkpoint)?;
    let mut curve = Vec::new();
    write_curve_csv(&mut curve, &trained.curve)?;
    out.write("curve.csv", &curve)?;
    let summary = team_summary(&trained.policy, &run.env, run.cfg.seed, run.cfg.eval.episodes)?;
    out.write_json("summary.json", &summary)?;
    println!(
        "greedy return {:.4} ± {:.4} over {} episodes",
        summary.episode_return.mean, summary.episode_return.stderr, summary.episodes
    );
    out.finish()
}

pub fn train_emai_cmd(run: &Run) -> Result<Manifest, CliError> {
    let (target, target_sum) = run.target(&run.cfg.target)?;
    let mut out = run.output("train-emai")?;
    let e = &run.cfg.emai;
    let baseline = estimate_baseline_return(&target, &run.env, e.baseline_episodes, e.gamma, run.cfg.seed, run.cfg.workers)?;
    out.write_json("baseline.json", &baseline)?;
    let mut trained = train_emai(&target, &run.env, e, &baseline, run.cfg.seed)?;
    trained.policy.header.target_checksum = target_sum;
    let spec = run.env.spec();
    let ckpt = EmaiCheckpoint::capture(&spec.name, spec.state_dim, &trained.policy, trained.env_steps);
    out.write_json("checkpoint.json", &ckpt)?;
    let mut curve = Vec::new();
    write_curve_csv(&mut curve, &trained.curve)?;
    out.write("curve.csv", &curve)?;
    println!(
        "baseline return {:.4} ± {:.4}, beta {:.6}, {} env steps",
        baseline.j_pi, baseline.stderr, trained.policy.header.beta, trained.env_steps
    );
    out.finish()
}

pub fn explain_cmd(run: &Run, episodes: Option<usize>) -> Result<Manifest, CliError> {
    let (target, sum) = run.target(&run.cfg.target)?;
    let explainer = run.explainer(&target, &sum)?;
    let mut out = run.output("explain")?;
    let n = episodes.unwrap_or(run.cfg.eval.explain_episodes);
    for k in 0..n {
        let seed = derive_seed(run.cfg.seed, stream::ENV, k as u64);
        let mut rng = derived_rng(run.cfg.seed, stream::EXPLAIN, k as u64);
        let rec = record_explained_episode(&run.env, seed, &target, &explainer, &mut rng)?;
        out.write(&format!("replays/episode-{k:03}.ndjson"), serialize(&rec)?.as_bytes())?;
    }
    println!("wrote {n} annotated replays ({})", explainer.id());
    out.finish()
}

pub fn eval_fidelity_cmd(run: &Run) -> Result<Manifest, CliError> {
    let (target, sum) = run.target(&run.cfg.target)?;
    let explainer = run.explainer(&target, &sum)?;
    let mut out = run.output("eval-fidelity")?;
    let report = eval_fidelity(&explainer, &target, &run.env, &run.settings(run.cfg.eval.episodes))?;
    out.write_json("rrd.json", &report)?;
    out.write("rrd.csv", &csv_bytes(&report.rows())?)?;
    println!(
        "rrd {} ± {} ({}, {}, {} episodes)",
        fmt_opt(report.rrd),
        fmt_opt(report.rrd_stderr),
        report.explainer,
        report.env,
        report.episodes
    );
    out.finish()
}

pub fn attack_cmd(run: &Run) -> Result<Manifest, CliError> {
    let (target, sum) = run.target(&run.cfg.target)?;
    let explainer = run.explainer(&target, &sum)?;
    let mut out = run.output("attack")?;
    let ev = &run.cfg.eval;
    let s = run.settings(ev.episodes);
    let report = launch_attack(&explainer, &target, &run.env, ev.noise_eps, ev.attack_mode, &s)?;
    out.write_json("attack.json", &report)?;
    out.write("attack.csv", &csv_bytes(&report.rows("attack"))?)?;
    for k in 0..ev.replay_episodes.min(ev.episodes) {
        let rec = record_attack_episode(&explainer, &target, &run.env, ev.noise_eps, ev.attack_mode, &s, k)?;
        out.write(&format!("replays/attack-{k:03}.ndjson"), serialize(&rec)?.as_bytes())?;
    }
    println!(
        "attack delta {:.4} ± {:.4} ({}, noise {})",
        report.delta.mean, report.delta.stderr, report.explainer, ev.noise_eps
    );
    out.finish()
}

pub fn patch_cmd(run: &Run) -> Result<Manifest, CliError> {
    let (target, sum) = run.target(&run.cfg.target)?;
    let explainer = run.explainer(&target, &sum)?;
    let ev = &run.cfg.eval;
    let patched_team = match &ev.patch_target {
        Some(tc) => run.target(tc)?.0,
        None => target.clone(),
    };
    let mut out = run.output("patch")?;
    let package = build_patch_package(&explainer, &target, &run.env, ev.quantile, &run.settings(ev.harvest_episodes))?;
    out.write_json("package.json", &package)?;
    let d_th = ev.d_th.unwrap_or_else(|| default_d_th(run.env.spec().obs_dim));
    let s = run.settings(ev.episodes);
    let report = apply_patch(&package, &explainer, &patched_team, &run.env, d_th, &s)?;
    out.write_json("patch.json", &report)?;
    out.write("patch.csv", &csv_bytes(&report.rows("patch"))?)?;
    for k in 0..ev.replay_episodes.min(ev.episodes) {
        let rec = record_patch_episode(&package, &explainer, &patched_team, &run.env, d_th, &s, k)?;
        out.write(&format!("replays/patch-{k:03}.ndjson"), serialize(&rec)?.as_bytes())?;
    }
    println!(
        "patch delta {:.4} ± {:.4} ({}, {} entries, {} replacements)",
        report.delta.mean,
        report.delta.stderr,
        report.explainer,
        package.entries.len(),
        report.replacements
    );
    out.finish()
}

pub fn render_cmd(replay: &Path, mode: RenderMode, out: Option<&Path>) -> Result<(), CliError> {
    let bytes = read_artifact(replay)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Other(format!("{}: {e}", replay.display())))?;
    let record = parse(&text).map_err(|e| CliError::Other(format!("{}: {e}", replay.display())))?;
    let rendered = render(&record, mode);
    match out {
        Some(p) => std::fs::write(p, rendered).map_err(|e| CliError::Other(format!("write {}: {e}", p.display())))?,
        None => print!("{rendered}"),
    }
    Ok(())
}
