//! Run configuration: one TOML file per run, parsed strictly.
//!
//! Relative paths inside the file resolve against the file's directory.
//! Checkpoints default to the locations the training commands write under the
//! run's output directory.

use std::path::{Path, PathBuf};

use emai_core::emai::EmaiConfig;
use emai_core::envs::Env;
use emai_core::eval::AttackMode;
use emai_core::explain::{ExplainerKind, GradNorm};
use emai_core::target::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const OUTPUT_ROOT_ENV: &str = "EMAI_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Rollout worker threads for evaluation batches.
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub target: TargetConfig,
    pub explainer: ExplainerConfig,
    /// Target-team training (`train-target`).
    pub training: TrainingConfig,
    pub emai: EmaiConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            output_dir: None,
            env: EnvConfig::default(),
            target: TargetConfig::default(),
            explainer: ExplainerConfig::default(),
            training: TrainingConfig::default(),
            emai: EmaiConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EnvName {
    Spread,
    #[default]
    KeyCorridor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    /// Spread only: agent and landmark count (default 3).
    pub n: Option<usize>,
    /// Spread only: grid side (default 8).
    pub grid: Option<usize>,
    /// Diagnostic: every step reward is 0.
    pub zero_reward: bool,
}

impl EnvConfig {
    pub fn build(&self) -> Result<Env, CliError> {
        let env = match self.name {
            EnvName::Spread => Env::spread(self.n.unwrap_or(3), self.grid.unwrap_or(8))?,
            EnvName::KeyCorridor => {
                if self.n.is_some() || self.grid.is_some() {
                    return Err(CliError::Config("env.n and env.grid apply to spread only".into()));
                }
                Env::key_corridor()
            }
        };
        Ok(if self.zero_reward { env.with_zero_reward() } else { env })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    #[default]
    Scripted,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: TargetKind,
    /// Scripted key-corridor only: agent 0 detours before the switch.
    pub weak: bool,
    /// Learned team; defaults to `<output>/train-target/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub kind: ExplainerKind,
    /// Masking policy; defaults to `<output>/train-emai/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    /// Rollouts per agent for the Monte-Carlo oracle.
    pub rollouts: usize,
    pub grad_norm: GradNorm,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            kind: ExplainerKind::Emai,
            checkpoint: None,
            rollouts: 64,
            grad_norm: GradNorm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub noise_eps: f64,
    pub attack_mode: AttackMode,
    /// Patch similarity threshold; defaults to `0.05 * obs_dim`.
    pub d_th: Option<f64>,
    pub quantile: f64,
    pub harvest_episodes: usize,
    /// Team the patch is applied to; defaults to `target` (which the package
    /// is always harvested from).
    pub patch_target: Option<TargetConfig>,
    /// Episodes written by `explain`.
    pub explain_episodes: usize,
    /// Example replays written by `attack` and `patch`.
    pub replay_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 500,
            noise_eps: 0.5,
            attack_mode: AttackMode::Critical,
            d_th: None,
            quantile: 0.1,
            harvest_episodes: 500,
            patch_target: None,
            explain_episodes: 5,
            replay_episodes: 1,
        }
    }
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub stem: String,
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(one_line(&e.to_string())))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let bad = |m: &str| Err(CliError::Config(m.into()));
    if cfg.workers == 0 {
        return bad("workers must be at least 1");
    }
    if cfg.eval.episodes == 0 {
        return bad("eval.episodes must be at least 1");
    }
    if !(cfg.eval.noise_eps >= 0.0) {
        return bad("eval.noise_eps must be >= 0");
    }
    if cfg.eval.d_th.is_some_and(|d| !(d >= 0.0)) {
        return bad("eval.d_th must be >= 0");
    }
    if !(cfg.eval.quantile > 0.0 && cfg.eval.quantile <= 1.0) {
        return bad("eval.quantile must be in (0, 1]");
    }
    if cfg.eval.harvest_episodes < 10 {
        return bad("eval.harvest_episodes must be at least 10");
    }
    if cfg.explainer.rollouts == 0 {
        return bad("explainer.rollouts must be at least 1");
    }
    cfg.env.build().map(|_| ())
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Missing(format!("config {}: {e}", path.display())))?;
    let config = parse_config(&text)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    Ok(LoadedConfig { config, base_dir, stem })
}

impl LoadedConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `--out` beats `output_dir`, which beats `$EMAI_OUTPUT_ROOT/<stem>`,
    /// which beats `runs/<stem>`.
    pub fn output_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        if let Some(p) = &self.config.output_dir {
            return self.resolve(p);
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(&self.stem)
    }

    pub fn target_checkpoint(&self, t: &TargetConfig, out: &Path) -> PathBuf {
        match &t.checkpoint {
            Some(p) => self.resolve(p),
            None => out.join("train-target").join("checkpoint.json"),
        }
    }

    pub fn explainer_checkpoint(&self, out: &Path) -> PathBuf {
        match &self.config.explainer.checkpoint {
            Some(p) => self.resolve(p),
            None => out.join("train-emai").join("checkpoint.json"),
        }
    }
}
