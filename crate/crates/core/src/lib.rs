//! Agent-level importance explanations for cooperative multi-agent policies.
//!
//! A set of *masking agents* is trained with value-decomposed Q-learning to
//! decide, per agent and per time-step, whether the corresponding agent of a
//! fixed black-box team may have its action replaced by a random one. Agents
//! that are never masked are the important ones. Around that learner the crate
//! ships the pieces needed to exercise it end to end:
//!
//! - [`envs`]: two desk-scale gridworlds (cooperative spread, key corridor)
//! - [`nn`]: a small reverse-mode autodiff engine, MLPs and Adam
//! - [`ctde`]: shared utility networks, mixers, replay and TD training
//! - [`target`]: the black-box team being explained (scripted or learned)
//! - [`emai`]: the masking-agent explainer itself
//! - [`explain`]: baseline explainers and a Monte-Carlo counterfactual oracle
//! - [`eval`]: fidelity (RRD), observation attacks and policy patching
//! - [`replay`]: importance-annotated episode records and rendering

pub mod ctde;
pub mod emai;
pub mod envs;
pub mod error;
pub mod eval;
pub mod explain;
pub mod nn;
pub mod par;
pub mod replay;
pub mod rng;
pub mod stats;
pub mod target;

pub use error::{EmaiError, Result};
