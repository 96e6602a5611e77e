//! Episode logs converted into training trajectories.
//!
//! A trajectory is the (RTG, state, action) record of one agent's delivery
//! period, with the cumulative cost/value prefixes retained so the RTG
//! stream can be rebuilt under any score variant without touching states or
//! actions. Training consumes fixed-length windows: one per time step,
//! front-padded with zeros and masked where the episode has not started yet.
//!
//! Datasets persist as newline-delimited JSON (one trajectory per line) next
//! to a manifest carrying the score config, context length, normalization
//! statistics, environment config, and per-variant quantiles of episode
//! total scores. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, EpisodeLog, STATE_DIM};
use crate::score::{rtg_sequence, PrefixStats, ScoreConfig, ScoreError, ScoreVariant};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("episode log for agent {agent} is incomplete ({got}/{expected} steps)")]
    IncompleteEpisode {
        agent: usize,
        got: usize,
        expected: usize,
    },
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported dataset version {got} (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("manifest declares {declared} trajectories but file holds {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("dataset was built with context {dataset} but the run requires {requested}")]
    ContextMismatch { dataset: usize, requested: usize },
}

/// One agent's delivery period as a training sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_seed: u64,
    pub agent: usize,
    pub rtgs: Vec<f64>,
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<f64>,
    pub cum_costs: Vec<f64>,
    pub cum_values: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn prefix_stats(&self) -> Vec<PrefixStats> {
        self.cum_costs
            .iter()
            .zip(&self.cum_values)
            .map(|(&c, &v)| PrefixStats::new(c, v))
            .collect()
    }

    /// RTG stream under an alternative score variant, from the stored
    /// prefixes. States and actions are untouched by construction.
    pub fn rtgs_for(&self, config: &ScoreConfig) -> Result<Vec<f64>, ScoreError> {
        Ok(rtg_sequence(&self.prefix_stats(), config)?.values)
    }
}

/// An `M+1`-step training sample: inputs, labels, and the padding mask.
///
/// The action labels are the `actions` stream itself; `label_next_rtgs[k]`
/// is the trajectory RTG one step after position `k` (zero past the end of
/// the episode). `timesteps` ascend by one across the window and are
/// negative on padded positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub rtgs: Vec<f64>,
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<f64>,
    pub label_next_rtgs: Vec<f64>,
    pub timesteps: Vec<i64>,
    pub mask: Vec<bool>,
}

impl TrajectoryWindow {
    pub fn len(&self) -> usize {
        self.rtgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtgs.is_empty()
    }

    pub fn real_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Converts complete episode logs into trajectories under the given score
/// config.
pub fn episodes_to_trajectories(
    logs: &[EpisodeLog],
    score_config: &ScoreConfig,
) -> Result<Vec<Trajectory>, DatasetError> {
    logs.iter()
        .map(|log| {
            if !log.is_complete() {
                return Err(DatasetError::IncompleteEpisode {
                    agent: log.agent,
                    got: log.actions.len(),
                    expected: log.num_steps,
                });
            }
            let rtgs = rtg_sequence(&log.prefix_stats(), score_config)?.values;
            Ok(Trajectory {
                episode_seed: log.episode_seed,
                agent: log.agent,
                rtgs,
                states: log.states.clone(),
                actions: log.actions.clone(),
                cum_costs: log.cum_costs.clone(),
                cum_values: log.cum_values.clone(),
            })
        })
        .collect()
}

/// One window per step `t`, covering `[t - M, t]` with zero front-padding.
pub fn make_windows(trajectory: &Trajectory, context: usize) -> Vec<TrajectoryWindow> {
    make_windows_with_rtgs(trajectory, &trajectory.rtgs, context)
}

/// Same, with an externally supplied RTG stream (variant rebuilds).
pub fn make_windows_with_rtgs(
    trajectory: &Trajectory,
    rtgs: &[f64],
    context: usize,
) -> Vec<TrajectoryWindow> {
    let horizon = trajectory.len();
    debug_assert_eq!(rtgs.len(), horizon);
    let width = context + 1;
    (0..horizon)
        .map(|t| {
            let mut window = TrajectoryWindow {
                rtgs: vec![0.0; width],
                states: vec![[0.0; STATE_DIM]; width],
                actions: vec![0.0; width],
                label_next_rtgs: vec![0.0; width],
                timesteps: vec![0; width],
                mask: vec![false; width],
            };
            for k in 0..width {
                let step = t as i64 - context as i64 + k as i64;
                window.timesteps[k] = step;
                if step < 0 {
                    continue;
                }
                let s = step as usize;
                window.rtgs[k] = rtgs[s];
                window.states[k] = trajectory.states[s];
                window.actions[k] = trajectory.actions[s];
                window.label_next_rtgs[k] = if s + 1 < horizon { rtgs[s + 1] } else { 0.0 };
                window.mask[k] = true;
            }
            window
        })
        .collect()
}

/// Per-channel affine normalization for states and RTGs, and the single
/// positive action scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub state_mean: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub rtg_mean: f64,
    pub rtg_scale: f64,
    pub action_scale: f64,
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone, count: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / count as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl NormalizationStats {
    pub fn fit(trajectories: &[Trajectory]) -> Result<Self, DatasetError> {
        let steps: usize = trajectories.iter().map(|t| t.len()).sum();
        if steps == 0 {
            return Err(DatasetError::Empty);
        }
        let mut state_mean = vec![0.0; STATE_DIM];
        let mut state_scale = vec![1.0; STATE_DIM];
        for c in 0..STATE_DIM {
            let channel = trajectories
                .iter()
                .flat_map(move |t| t.states.iter().map(move |s| s[c]));
            let (m, s) = mean_and_scale(channel, steps);
            state_mean[c] = m;
            state_scale[c] = s;
        }
        let rtg_iter = trajectories.iter().flat_map(|t| t.rtgs.iter().copied());
        let (rtg_mean, rtg_scale) = mean_and_scale(rtg_iter, steps);
        let max_action = trajectories
            .iter()
            .flat_map(|t| t.actions.iter())
            .fold(0.0f64, |acc, &a| acc.max(a.abs()));
        Ok(Self {
            state_mean,
            state_scale,
            rtg_mean,
            rtg_scale,
            action_scale: if max_action > 0.0 { max_action } else { 1.0 },
        })
    }

    pub fn normalize_state(&self, state: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for c in 0..STATE_DIM {
            out[c] = (state[c] - self.state_mean[c]) / self.state_scale[c];
        }
        out
    }

    pub fn denormalize_state(&self, state: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for c in 0..STATE_DIM {
            out[c] = state[c] * self.state_scale[c] + self.state_mean[c];
        }
        out
    }

    pub fn normalize_rtg(&self, rtg: f64) -> f64 {
        (rtg - self.rtg_mean) / self.rtg_scale
    }

    pub fn denormalize_rtg(&self, rtg: f64) -> f64 {
        rtg * self.rtg_scale + self.rtg_mean
    }

    pub fn normalize_action(&self, action: f64) -> f64 {
        action / self.action_scale
    }

    pub fn denormalize_action(&self, action: f64) -> f64 {
        action * self.action_scale
    }

    /// Normalized copy of a window; padded positions stay exactly zero.
    pub fn normalize_window(&self, window: &TrajectoryWindow) -> TrajectoryWindow {
        let mut out = window.clone();
        for k in 0..window.len() {
            if !window.mask[k] {
                continue;
            }
            out.rtgs[k] = self.normalize_rtg(window.rtgs[k]);
            out.states[k] = self.normalize_state(&window.states[k]);
            out.actions[k] = self.normalize_action(window.actions[k]);
            out.label_next_rtgs[k] = self.normalize_rtg(window.label_next_rtgs[k]);
        }
        out
    }
}

/// Quantile grid: sorted `(level, value)` pairs with linear interpolation.
pub fn quantile_grid(values: &[f64], levels: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels
        .iter()
        .map(|&q| {
            let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            (q, sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
        })
        .collect()
}

pub fn quantile_from_grid(grid: &[(f64, f64)], q: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    let mut prev = grid[0];
    for &(level, value) in grid {
        if q <= level {
            if level == prev.0 {
                return value;
            }
            let frac = (q - prev.0) / (level - prev.0);
            return prev.1 * (1.0 - frac) + value * frac;
        }
        prev = (level, value);
    }
    prev.1
}

const QUANTILE_LEVELS: [f64; 21] = [
    0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8,
    0.85, 0.9, 0.95, 1.0,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub score_config: ScoreConfig,
    /// Window context length M; windows span M+1 steps.
    pub context: usize,
    pub normalization: NormalizationStats,
    pub env_config: EnvConfig,
    pub num_episodes: usize,
    pub num_trajectories: usize,
    /// Episode total-score quantiles per variant, for RTG conditioning at
    /// evaluation time.
    pub total_score_quantiles: BTreeMap<String, Vec<(f64, f64)>>,
}

/// Trajectory corpus plus its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    /// Builds a dataset from episode logs: scores trajectories, fits
    /// normalization, and records per-variant total-score quantiles.
    pub fn build(
        env_config: &EnvConfig,
        score_config: &ScoreConfig,
        logs: &[EpisodeLog],
        context: usize,
        num_episodes: usize,
    ) -> Result<Self, DatasetError> {
        let trajectories = episodes_to_trajectories(logs, score_config)?;
        if trajectories.is_empty() {
            return Err(DatasetError::Empty);
        }
        let normalization = NormalizationStats::fit(&trajectories)?;
        let mut total_score_quantiles = BTreeMap::new();
        for variant in ScoreVariant::ALL {
            let config = ScoreConfig::new(score_config.cpa_limit, variant)
                .expect("limit already validated");
            let totals: Vec<f64> = trajectories
                .iter()
                .map(|t| Ok(rtg_sequence(&t.prefix_stats(), &config)?.total()))
                .collect::<Result<_, ScoreError>>()?;
            total_score_quantiles
                .insert(variant.label().to_string(), quantile_grid(&totals, &QUANTILE_LEVELS));
        }
        Ok(Self {
            manifest: DatasetManifest {
                format_version: DATASET_VERSION,
                score_config: *score_config,
                context,
                normalization,
                env_config: env_config.clone(),
                num_episodes,
                num_trajectories: trajectories.len(),
                total_score_quantiles,
            },
            trajectories,
        })
    }

    /// All training windows under the manifest's score variant.
    pub fn windows(&self) -> Vec<TrajectoryWindow> {
        self.trajectories
            .iter()
            .flat_map(|t| make_windows(t, self.manifest.context))
            .collect()
    }

    /// Windows with the RTG stream rebuilt under `variant`, along with the
    /// normalization refit for that stream (states/actions stats unchanged).
    pub fn windows_for_variant(
        &self,
        variant: ScoreVariant,
    ) -> Result<(Vec<TrajectoryWindow>, NormalizationStats), DatasetError> {
        let config = ScoreConfig::new(self.manifest.score_config.cpa_limit, variant)?;
        let mut windows = Vec::new();
        let mut all_rtgs = Vec::new();
        for t in &self.trajectories {
            let rtgs = t.rtgs_for(&config)?;
            windows.extend(make_windows_with_rtgs(t, &rtgs, self.manifest.context));
            all_rtgs.extend(rtgs);
        }
        let (rtg_mean, rtg_scale) = mean_and_scale(all_rtgs.iter().copied(), all_rtgs.len());
        let normalization = NormalizationStats {
            rtg_mean,
            rtg_scale,
            ..self.manifest.normalization.clone()
        };
        Ok((windows, normalization))
    }

    pub fn check_context(&self, requested: usize) -> Result<(), DatasetError> {
        if self.manifest.context != requested {
            return Err(DatasetError::ContextMismatch {
                dataset: self.manifest.context,
                requested,
            });
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        let mut file =
            std::io::BufWriter::new(std::fs::File::create(dir.join("trajectories.ndjson"))?);
        for trajectory in &self.trajectories {
            serde_json::to_writer(&mut file, trajectory)?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format_version != DATASET_VERSION {
            return Err(DatasetError::VersionMismatch {
                got: manifest.format_version,
                expected: DATASET_VERSION,
            });
        }
        let file = std::io::BufReader::new(std::fs::File::open(dir.join("trajectories.ndjson"))?);
        let mut trajectories = Vec::new();
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trajectories.push(serde_json::from_str(&line)?);
        }
        if trajectories.len() != manifest.num_trajectories {
            return Err(DatasetError::CountMismatch {
                declared: manifest.num_trajectories,
                found: trajectories.len(),
            });
        }
        Ok(Self {
            manifest,
            trajectories,
        })
    }
}
