//! Importance-annotated episode replays: capture, `.ndjson` serialization and
//! text rendering with the most critical agent marked `*`.
//!
//! Line 1 of a replay file is the header object (`"v": 1`), followed by one
//! object per step. Floats are written with 9 significant digits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ctde::argmax;
use crate::envs::{Action, Env};
use crate::explain::{Explainer, StepContext};
use crate::rng::Rng;
use crate::target::BlackBox;
use crate::{EmaiError, Result};

pub const REPLAY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayHeader {
    pub v: u32,
    pub env: String,
    pub seed: u64,
    pub target_id: String,
    pub explainer_id: String,
    pub n_agents: usize,
    pub steps: usize,
    /// Sum of step rewards, checked on parse.
    pub reward_sum: f64,
    /// Static map rows at reset.
    pub layout: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub t: usize,
    pub state: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
    /// Agent cells as `[x, y]`.
    pub positions: Vec<[i32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub door_open: Option<bool>,
    pub target_actions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_actions: Option<Vec<usize>>,
    pub final_actions: Vec<usize>,
    pub reward: f64,
    pub importance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub header: ReplayHeader,
    pub steps: Vec<StepRecord>,
}

/// Rounds to 9 significant digits, the precision replays are written at.
pub fn round9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn round_all(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = round9(*x));
}

impl StepRecord {
    fn rounded(&self) -> StepRecord {
        let mut s = self.clone();
        round_all(&mut s.state);
        s.obs.iter_mut().for_each(|o| round_all(o));
        s.reward = round9(s.reward);
        round_all(&mut s.importance);
        s
    }

    /// Most important agent, lowest index on ties.
    pub fn critical(&self) -> usize {
        argmax(&self.importance)
    }

    fn check(&self, n: usize) -> std::result::Result<(), String> {
        let lens = [
            ("obs", self.obs.len()),
            ("positions", self.positions.len()),
            ("target_actions", self.target_actions.len()),
            ("final_actions", self.final_actions.len()),
            ("importance", self.importance.len()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(format!("{name} has {len} entries, expected {n}"));
            }
        }
        if let Some(m) = &self.mask_actions {
            if m.len() != n || m.iter().any(|b| *b > 1) {
                return Err(format!("mask_actions must be {n} bits"));
            }
        }
        let finite = self.state.iter().chain(self.obs.iter().flatten()).chain(&self.importance).all(|x| x.is_finite());
        if !finite || !self.reward.is_finite() {
            return Err("non-finite value".into());
        }
        Ok(())
    }
}

impl EpisodeRecord {
    /// The record as it reads back after serialization.
    pub fn rounded(&self) -> EpisodeRecord {
        let mut header = self.header.clone();
        header.reward_sum = round9(header.reward_sum);
        EpisodeRecord {
            header,
            steps: self.steps.iter().map(StepRecord::rounded).collect(),
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Incremental capture of one episode, started right after `Env::reset`.
#[derive(Debug, Clone)]
pub struct Recorder {
    header: ReplayHeader,
    steps: Vec<StepRecord>,
}

/// What one step contributes besides the env snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAnnotation {
    pub target_actions: Vec<usize>,
    pub mask_actions: Option<Vec<usize>>,
    pub final_actions: Vec<usize>,
    pub importance: Vec<f64>,
}

fn discrete(actions: &[Action]) -> Result<Vec<usize>> {
    actions
        .iter()
        .map(|a| a.discrete().ok_or_else(|| EmaiError::incompatible("replays record discrete actions only")))
        .collect()
}

impl Recorder {
    /// Fails if `env` is not at the start of an episode.
    pub fn start(env: &Env, seed: u64, target_id: &str, explainer_id: &str) -> Result<Self> {
        if env.t() != 0 {
            return Err(EmaiError::invalid(format!("recording must start at t = 0, env is at t = {}", env.t())));
        }
        Ok(Recorder {
            header: ReplayHeader {
                v: REPLAY_VERSION,
                env: env.spec().name.clone(),
                seed,
                target_id: target_id.into(),
                explainer_id: explainer_id.into(),
                n_agents: env.spec().n_agents,
                steps: 0,
                reward_sum: 0.0,
                layout: env.layout(),
            },
            steps: Vec::new(),
        })
    }

    /// Records the step about to be taken from `env` (before `Env::step`).
    pub fn push(&mut self, env: &Env, note: StepAnnotation, reward: f64) -> Result<()> {
        if env.t() != self.steps.len() {
            return Err(EmaiError::invalid(format!("expected step {}, env is at {}", self.steps.len(), env.t())));
        }
        let step = StepRecord {
            t: env.t(),
            state: env.state(),
            obs: env.observations(),
            positions: env.positions().iter().map(|c| [c.x, c.y]).collect(),
            door_open: env.door_open(),
            target_actions: note.target_actions,
            mask_actions: note.mask_actions,
            final_actions: note.final_actions,
            reward,
            importance: note.importance,
        };
        step.check(self.header.n_agents).map_err(EmaiError::invalid)?;
        self.steps.push(step);
        Ok(())
    }

    pub fn finish(mut self) -> EpisodeRecord {
        self.header.steps = self.steps.len();
        self.header.reward_sum = self.steps.iter().map(|s| s.reward).sum();
        EpisodeRecord {
            header: self.header,
            steps: self.steps,
        }
    }
}

/// Plays one unperturbed episode and annotates every step with the
/// explainer's scores. EMAI explainers also record their greedy mask bits.
pub fn record_explained_episode(
    env: &Env,
    seed: u64,
    target: &dyn BlackBox,
    explainer: &Explainer,
    rng: &mut Rng,
) -> Result<EpisodeRecord> {
    let mut env = env.clone();
    env.reset(seed);
    let mut rec = Recorder::start(&env, seed, &target.id(), explainer.id())?;
    while !env.is_done() {
        let obs = env.observations();
        let joint = target.act_joint(&obs)?;
        let importance = explainer.explain(
            &StepContext {
                env: &env,
                observations: &obs,
                target,
            },
            rng,
        )?;
        let mask_actions = match explainer {
            Explainer::Emai(p) => Some(p.greedy_mask(&obs)?),
            _ => None,
        };
        let actions = discrete(&joint)?;
        let before = env.clone();
        let step = env.step(&joint)?;
        rec.push(
            &before,
            StepAnnotation {
                target_actions: actions.clone(),
                mask_actions,
                final_actions: actions,
                importance,
            },
            step.reward,
        )?;
    }
    Ok(rec.finish())
}

// ---------------------------------------------------------------------------
// Serialization

pub fn serialize(record: &EpisodeRecord) -> Result<String> {
    let r = record.rounded();
    let n = r.header.n_agents;
    for s in &r.steps {
        s.check(n).map_err(|m| EmaiError::invalid(format!("step {}: {m}", s.t)))?;
    }
    let mut out = serde_json::to_string(&r.header)?;
    out.push('\n');
    for s in &r.steps {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

fn parse_err(line: usize, msg: impl Into<String>) -> EmaiError {
    EmaiError::Parse { line, msg: msg.into() }
}

pub fn parse(text: &str) -> Result<EpisodeRecord> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty replay"))?;
    let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| parse_err(1, format!("header: {e}")))?;
    match raw.get("v").and_then(|v| v.as_u64()) {
        Some(v) if v == REPLAY_VERSION as u64 => {}
        Some(v) => return Err(parse_err(1, format!("unsupported replay version {v}"))),
        None => return Err(parse_err(1, "header has no version field `v`")),
    }
    let header: ReplayHeader = serde_json::from_value(raw).map_err(|e| parse_err(1, format!("header: {e}")))?;
    let mut steps: Vec<StepRecord> = Vec::with_capacity(header.steps);
    let mut last_good = 1;
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let step: StepRecord = serde_json::from_str(line)
            .map_err(|e| parse_err(no, format!("malformed step ({e}); last good line is {last_good}")))?;
        if step.t != steps.len() {
            return Err(parse_err(no, format!("expected t = {}, found {}", steps.len(), step.t)));
        }
        step.check(header.n_agents).map_err(|m| parse_err(no, m))?;
        steps.push(step);
        last_good = no;
    }
    if steps.len() != header.steps {
        return Err(parse_err(
            last_good + 1,
            format!("truncated: header declares {} steps, found {}; last good line is {last_good}", header.steps, steps.len()),
        ));
    }
    let sum: f64 = steps.iter().map(|s| s.reward).sum();
    let scale: f64 = 1.0 + steps.iter().map(|s| s.reward.abs()).sum::<f64>();
    if (sum - header.reward_sum).abs() > 1e-7 * scale {
        return Err(parse_err(1, format!("header reward_sum {} differs from step sum {sum}", header.reward_sum)));
    }
    Ok(EpisodeRecord { header, steps })
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Ascii,
    Csv,
}

impl std::str::FromStr for RenderMode {
    type Err = EmaiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascii" => Ok(RenderMode::Ascii),
            "csv" => Ok(RenderMode::Csv),
            _ => Err(EmaiError::invalid(format!("unknown render mode {s:?} (expected ascii or csv)"))),
        }
    }
}

fn agent_glyph(i: usize) -> char {
    std::char::from_digit(i as u32, 36).unwrap_or('?')
}

fn render_ascii(record: &EpisodeRecord) -> String {
    let h = &record.header;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "env={} seed={} target={} explainer={} steps={} reward={}",
        h.env, h.seed, h.target_id, h.explainer_id, h.steps, h.reward_sum
    );
    for s in &record.steps {
        let critical = s.critical();
        let mut grid: Vec<Vec<char>> = h.layout.iter().map(|row| row.chars().collect()).collect();
        if s.door_open == Some(true) {
            grid.iter_mut().flatten().filter(|c| **c == 'D').for_each(|c| *c = '/');
        }
        // Draw in reverse so the lowest id wins a shared cell, then the marker.
        for (i, p) in s.positions.iter().enumerate().rev() {
            if let Some(c) = grid.get_mut(p[1] as usize).and_then(|row| row.get_mut(p[0] as usize)) {
                *c = agent_glyph(i);
            }
        }
        if let Some(p) = s.positions.get(critical) {
            if let Some(c) = grid.get_mut(p[1] as usize).and_then(|row| row.get_mut(p[0] as usize)) {
                *c = '*';
            }
        }
        let _ = writeln!(out, "t={} reward={} critical={}", s.t, s.reward, critical);
        let imp: Vec<String> = s.importance.iter().map(|x| format!("{x:.3}")).collect();
        let _ = writeln!(out, "importance {}", imp.join(" "));
        if let Some(m) = &s.mask_actions {
            let m: Vec<String> = m.iter().map(|b| b.to_string()).collect();
            let _ = writeln!(out, "mask {}", m.join(" "));
        }
        for row in grid {
            out.extend(row);
            out.push('\n');
        }
    }
    out
}

fn render_csv(record: &EpisodeRecord) -> String {
    let mut out = String::from("t,agent,importance,masked\n");
    for s in &record.steps {
        for (i, imp) in s.importance.iter().enumerate() {
            let masked = s.mask_actions.as_ref().map_or(0, |m| m[i]);
            let _ = writeln!(out, "{},{},{},{}", s.t, i, imp, masked);
        }
    }
    out
}

pub fn render(record: &EpisodeRecord, mode: RenderMode) -> String {
    match mode {
        RenderMode::Ascii => render_ascii(record),
        RenderMode::Csv => render_csv(record),
    }
}
