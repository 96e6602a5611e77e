//! Offline generative auto-bidding at desk scale.
//!
//! The crate is organized around a small pipeline:
//!
//! - [`auction`] / [`env`] / [`policy`] — a simulated second-price ad market
//!   with scripted competitor agents that produces offline episode logs.
//! - [`score`] — CPA-penalized scoring and the score-based return-to-go used
//!   both as training signal and evaluation metric.
//! - [`dataset`] — episode logs converted into (RTG, state, action)
//!   trajectories, windowed and normalized for sequence-model training.
//! - [`autodiff`] — a minimal reverse-mode tape over dense 2-D tensors plus an
//!   AdamW update rule; everything the model needs and nothing else.
//! - [`model`] — the causal-transformer bidding policy with action
//!   exploration, the RTG-weighted action loss, and the learnable value head.
//! - [`trainer`] — the optimization loop, ablation variants, metrics, and
//!   checkpointing.
//! - [`eval`] — round-robin evaluation, the constant-coefficient grid oracle,
//!   and the ablation/alignment experiment runners.
//! - [`config`] — the TOML run configuration shared by the CLI commands.

pub mod auction;
pub mod autodiff;

pub mod config;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod model;
pub mod trainer;


pub mod policy;
pub mod score;


pub use auction::AuctionOutcome;
pub use config::RunConfig;
pub use dataset::{Dataset, NormalizationStats, Trajectory, TrajectoryWindow};
pub use env::{EnvConfig, EpisodeLog};
pub use eval::{EvalConfig, EvalReport};
pub use model::{GaveModel, ModelCheckpoint, ModelConfig};
pub use score::{PrefixStats, RtgSequence, ScoreConfig, ScoreVariant};
pub use trainer::{TrainConfig, TrainVariant};
