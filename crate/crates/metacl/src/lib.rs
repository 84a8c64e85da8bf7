//! Online continual learning by consolidating a generative meta-model over
//! task-network weights.
//!
//! Per task, a set of small classifiers is trained in one online pass over
//! the stream. Their flattened weights, cut into fixed-size chunks, train a
//! conditional variational autoencoder with a learned prior per task
//! ([`vae`]). After each task the autoencoder replays earlier tasks from
//! frozen prior snapshots so one meta-model keeps serving every task seen
//! so far ([`consolidation`]). At test time, classifiers are sampled from
//! the learned priors, finetuned on a small exemplar memory, and ensembled
//! by majority vote, with or without knowledge of the task identity
//! ([`inference`]). [`harness`] wires the whole pipeline behind a TOML
//! config and persists metrics; the `metacl` binary exposes it on the
//! command line.
//!
//! Runnable walkthroughs, fastest first (`cargo run --example <name>`):
//!
//! - `gradient_check`: both training losses against finite differences.
//! - `online_stream`: single-pass gated training plus reservoir exemplars.
//! - `export_latents`: per-task latent draws written to CSV.
//! - `consolidation_replay`: replay restores cycle consistency for earlier
//!   tasks while frozen state stays bitwise untouched.
//! - `weight_generation`: classifiers sampled from a learned weight prior,
//!   raw, voted, and finetuned.
//! - `synthetic_quickstart`: the full pipeline and both inference modes on
//!   Gaussian blobs.

pub mod chunking;
pub mod consolidation;
pub mod classifier;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
