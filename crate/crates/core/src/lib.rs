//! Core library for the desk-scale trajectory pipeline: an action DSL,
//! trajectory data model, curation and decontamination, model gateway,
//! thought completion, decision-tree boosting, dataset building, an agent
//! runtime over simulated environments, and an evaluation harness.

pub mod action;
pub mod boost;
pub mod curation;
pub mod dataset;
pub mod gateway;
pub mod harness;
pub mod prompts;
pub mod runtime;
pub mod thought;
pub mod trajectory;

pub use action::{parse_action, parse_decision, render_action, Action, Resolution};
pub use trajectory::{Observation, Step, Terminal, Trajectory};
