//! The optimization loop.
//!
//! Each step samples a batch of windows uniformly with replacement, runs the
//! teacher and exploration passes, combines the losses, clips the global
//! gradient norm, and applies an AdamW update. Window computations run in
//! parallel; gradients reduce in index order, so runs are bit-reproducible
//! for a fixed seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::optim::{clip_global_norm, AdamWConfig, AdamWState};
use crate::autodiff::params::ARCHIVE_VERSION;
use crate::dataset::{Dataset, DatasetError, NormalizationStats, TrajectoryWindow};
use crate::model::{GaveModel, LossVariant, ModelCheckpoint, ModelConfig, ModelError, WindowLosses};
use crate::score::ScoreVariant;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step}; diagnostic snapshot {snapshot:?}")]
    NonFinite {
        step: usize,
        snapshot: Option<PathBuf>,
    },
    #[error("parameters became non-finite at step {0}")]
    NonFiniteParams(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which model variant to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainVariant {
    /// Full model: exploration, expectile value head, value guidance.
    Gave,
    /// Value function ablated; the push loss replaces it.
    GaveV,
    /// Exploration ablated too; score-based RTG retained.
    GaveVa,
    /// Plain sequence-model baseline: reward-sum RTG, behavior cloning.
    Dt,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 4] = [
        TrainVariant::Gave,
        TrainVariant::GaveV,
        TrainVariant::GaveVa,
        TrainVariant::Dt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TrainVariant::Gave => "gave",
            TrainVariant::GaveV => "gave-v",
            TrainVariant::GaveVa => "gave-va",
            TrainVariant::Dt => "dt",
        }
    }

    pub fn loss_variant(self) -> LossVariant {
        match self {
            TrainVariant::Gave => LossVariant::Full,
            TrainVariant::GaveV => LossVariant::NoValueGuide,
            TrainVariant::GaveVa | TrainVariant::Dt => LossVariant::BehaviorClone,
        }
    }

    /// The plain baseline swaps the score-based RTG for the reward sum.
    fn forced_rtg_variant(self) -> Option<ScoreVariant> {
        match self {
            TrainVariant::Dt => Some(ScoreVariant::S1),
            _ => None,
        }
    }
}

impl std::str::FromStr for TrainVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gave" => Ok(TrainVariant::Gave),
            "gave-v" => Ok(TrainVariant::GaveV),
            "gave-va" => Ok(TrainVariant::GaveVa),
            "dt" => Ok(TrainVariant::Dt),
            other => Err(format!(
                "unknown variant '{other}' (expected gave, gave-v, gave-va or dt)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub variant: TrainVariant,
    /// RTG score variant override; defaults to the dataset's. The plain
    /// baseline ignores this and always uses the reward sum.
    pub rtg_variant: Option<ScoreVariant>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 20_000,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 1,
            checkpoint_every: 1000,
            log_every: 10,
            variant: TrainVariant::Gave,
            rtg_variant: None,
        }
    }
}

/// One logged metrics row. Component columns that do not exist under the
/// trained variant are `None` and absent from the CSV.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_r: f64,
    pub l_a: f64,
    pub l_e: Option<f64>,
    pub l_v: Option<f64>,
    pub l_w: Option<f64>,
    pub l_o: f64,
    pub w_mean: Option<f64>,
    pub beta_mean: f64,
}

/// CSV header for a variant's metrics file.
pub fn metrics_header(variant: TrainVariant) -> &'static str {
    match variant {
        TrainVariant::Gave => "step,L_r,L_a,L_e,L_v,L_o,w_mean,beta_mean",
        TrainVariant::GaveV => "step,L_r,L_a,L_w,L_o,w_mean,beta_mean",
        TrainVariant::GaveVa | TrainVariant::Dt => "step,L_r,L_a,L_o,beta_mean",
    }
}

fn metrics_line(variant: TrainVariant, row: &MetricsRow) -> String {
    match variant {
        TrainVariant::Gave => format!(
            "{},{},{},{},{},{},{},{}",
            row.step,
            row.l_r,
            row.l_a,
            row.l_e.unwrap_or(f64::NAN),
            row.l_v.unwrap_or(f64::NAN),
            row.l_o,
            row.w_mean.unwrap_or(f64::NAN),
            row.beta_mean
        ),
        TrainVariant::GaveV => format!(
            "{},{},{},{},{},{},{}",
            row.step,
            row.l_r,
            row.l_a,
            row.l_w.unwrap_or(f64::NAN),
            row.l_o,
            row.w_mean.unwrap_or(f64::NAN),
            row.beta_mean
        ),
        TrainVariant::GaveVa | TrainVariant::Dt => format!(
            "{},{},{},{},{}",
            row.step, row.l_r, row.l_a, row.l_o, row.beta_mean
        ),
    }
}

/// Result of a training run: the last checkpoint, the best one according to
/// the validator (when given), and the metrics history.
pub struct TrainOutcome {
    pub final_checkpoint: ModelCheckpoint,
    pub best_checkpoint: Option<ModelCheckpoint>,
    pub best_score: Option<f64>,
    pub metrics: Vec<MetricsRow>,
    pub metrics_path: Option<PathBuf>,
}

impl TrainOutcome {
    /// The checkpoint evaluation should use: validator's best when present,
    /// last otherwise.
    pub fn selected(&self) -> &ModelCheckpoint {
        self.best_checkpoint.as_ref().unwrap_or(&self.final_checkpoint)
    }
}

/// Periodic model scorer for checkpoint selection (a held-out simulated
/// validation round, wired in by the caller).
pub type Validator<'a> = &'a (dyn Fn(&ModelCheckpoint) -> f64 + Sync);

struct BatchStats {
    losses: WindowLosses,
    grads: Vec<Vec<f64>>,
}

/// Trains one variant on a dataset. When `out_dir` is given, checkpoints
/// land there along with `metrics.csv`; diagnostics are written next to them
/// if the loss ever turns non-finite.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
    validator: Option<Validator>,
) -> Result<TrainOutcome, TrainError> {
    dataset.check_context(model_config.context)?;
    let variant = train_config.variant;

    let manifest_variant = dataset.manifest.score_config.variant;
    let rtg_variant = variant
        .forced_rtg_variant()
        .or(train_config.rtg_variant)
        .unwrap_or(manifest_variant);
    let (raw_windows, normalization): (Vec<TrajectoryWindow>, NormalizationStats) =
        if rtg_variant == manifest_variant {
            (dataset.windows(), dataset.manifest.normalization.clone())
        } else {
            dataset.windows_for_variant(rtg_variant)?
        };
    let windows: Vec<TrajectoryWindow> = raw_windows
        .iter()
        .map(|w| normalization.normalize_window(w))
        .collect();

    let t_max = dataset.manifest.env_config.num_steps;
    let mut model = GaveModel::new(model_config, t_max, train_config.seed)?;
    let mut optimizer = AdamWState::new(
        &model.params,
        AdamWConfig::new(train_config.learning_rate, train_config.weight_decay),
    );
    let mut sampler = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x51_7C_C1_B7_27_22_0A_95);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let metrics_path = out_dir.map(|d| d.join("metrics.csv"));
    let mut metrics_file = match &metrics_path {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "{}", metrics_header(variant))?;
            Some(f)
        }
        None => None,
    };

    let build_checkpoint = |model: &GaveModel, optimizer: Option<&AdamWState>| ModelCheckpoint {
        format_version: ARCHIVE_VERSION,
        model: model.clone(),
        score_variant: rtg_variant,
        cpa_limit: dataset.manifest.score_config.cpa_limit,
        normalization: normalization.clone(),
        total_score_quantiles: dataset.manifest.total_score_quantiles.clone(),
        optimizer: optimizer.cloned(),
    };

    let loss_variant = variant.loss_variant();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, ModelCheckpoint)> = None;

    for step in 1..=train_config.max_steps {
        let indices: Vec<usize> = (0..train_config.batch_size)
            .map(|_| sampler.gen_range(0..windows.len()))
            .collect();

        let batch: Vec<Result<BatchStats, ModelError>> = indices
            .par_iter()
            .map(|&i| {
                let fwd = model.forward_window(&windows[i], loss_variant, None)?;
                let (losses, grads) = fwd.gradients()?;
                Ok(BatchStats { losses, grads })
            })
            .collect();

        let mut grads = model.params.zeros_like();
        let mut l_r = 0.0;
        let mut l_a = 0.0;
        let mut l_e = 0.0;
        let mut l_v = 0.0;
        let mut l_w = 0.0;
        let mut l_o = 0.0;
        let mut w_sum = 0.0;
        let mut beta_sum = 0.0;
        let mut positions = 0usize;
        let mut explored = 0usize;
        let scale = 1.0 / train_config.batch_size as f64;
        for item in batch {
            let item = item?;
            for (dst, src) in grads.iter_mut().zip(&item.grads) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * scale;
                }
            }
            l_r += item.losses.l_r * scale;
            l_a += item.losses.l_a * scale;
            l_e += item.losses.l_e.unwrap_or(0.0) * scale;
            l_v += item.losses.l_v.unwrap_or(0.0) * scale;
            l_w += item.losses.l_w.unwrap_or(0.0) * scale;
            l_o += item.losses.l_o * scale;
            w_sum += item.losses.w_sum;
            beta_sum += item.losses.beta_sum;
            positions += item.losses.real_positions;
            explored += item.losses.explored_positions;
        }

        if !l_o.is_finite() {
            let snapshot = if let Some(dir) = out_dir {
                let path = dir.join(format!("diagnostic_{step:06}.json"));
                let snapshot = serde_json::json!({
                    "step": step,
                    "batch_indices": indices,
                    "l_r": l_r, "l_a": l_a, "l_e": l_e, "l_v": l_v, "l_w": l_w, "l_o": l_o,
                    "params_finite": model.params.all_finite(),
                });
                std::fs::write(&path, serde_json::to_string_pretty(&snapshot)?)?;
                Some(path)
            } else {
                None
            };
            return Err(TrainError::NonFinite { step, snapshot });
        }

        clip_global_norm(&mut grads, train_config.grad_clip);
        optimizer.apply(&mut model.params, &grads);

        if step % train_config.log_every == 0 || step == 1 || step == train_config.max_steps {
            let has_explore = loss_variant != LossVariant::BehaviorClone;
            let row = MetricsRow {
                step,
                l_r,
                l_a,
                l_e: (loss_variant == LossVariant::Full).then_some(l_e),
                l_v: (loss_variant == LossVariant::Full).then_some(l_v),
                l_w: (loss_variant == LossVariant::NoValueGuide).then_some(l_w),
                l_o,
                w_mean: has_explore.then(|| w_sum / explored.max(1) as f64),
                beta_mean: beta_sum / (if explored > 0 { explored } else { positions }).max(1) as f64,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", metrics_line(variant, &row))?;
            }
            metrics.push(row);
        }

        let at_checkpoint =
            step % train_config.checkpoint_every == 0 || step == train_config.max_steps;
        if at_checkpoint {
            if !model.params.all_finite() {
                return Err(TrainError::NonFiniteParams(step));
            }
            let checkpoint = build_checkpoint(&model, None);
            if let Some(dir) = out_dir {
                checkpoint.save(&dir.join(format!("checkpoint_{step:06}.json")))?;
            }
            if let Some(validate) = validator {
                let score = validate(&checkpoint);
                if best.as_ref().map_or(true, |(b, _)| score > *b) {
                    best = Some((score, checkpoint));
                }
            }
        }
    }

    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }

    let final_checkpoint = build_checkpoint(&model, Some(&optimizer));
    if let Some(dir) = out_dir {
        final_checkpoint.save(&dir.join("final.json"))?;
        if let Some((_, checkpoint)) = &best {
            checkpoint.save(&dir.join("best.json"))?;
        }
    }
    let (best_score, best_checkpoint) = match best {
        Some((score, ck)) => (Some(score), Some(ck)),
        None => (None, None),
    };
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        best_score,
        metrics,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{run_episode, EnvConfig};
    use crate::policy::{default_roster, BidPolicy};
    use crate::score::ScoreConfig;

    fn tiny_dataset() -> Dataset {
        let env = EnvConfig {
            num_steps: 10,
            impressions_per_step: 20.0,
            num_agents: 4,
            budget_per_agent: 20.0,
            ..EnvConfig::default()
        };
        let mut logs = Vec::new();
        for episode in 0..2 {
            let mut policies: Vec<Box<dyn BidPolicy>> = default_roster(env.num_agents, episode)
                .into_iter()
                .map(|p| Box::new(p) as Box<dyn BidPolicy>)
                .collect();
            logs.extend(run_episode(&env, &mut policies, 50 + episode).unwrap());
        }
        let score = ScoreConfig::new(env.cpa_limit, ScoreVariant::S2).unwrap();
        Dataset::build(&env, &score, &logs, 3, 2).unwrap()
    }

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            width: 16,
            context: 3,
            ..ModelConfig::default()
        }
    }

    fn tiny_train_config(steps: usize, variant: TrainVariant) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_steps: steps,
            learning_rate: 1e-3,
            checkpoint_every: steps,
            log_every: 1,
            variant,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn metrics_log_covers_every_logged_step() {
        let dataset = tiny_dataset();
        let out = train(
            &dataset,
            &tiny_model_config(),
            &tiny_train_config(6, TrainVariant::Gave),
            None,
            None,
        )
        .unwrap();
        assert_eq!(out.metrics.len(), 6);
        assert_eq!(out.metrics.last().unwrap().step, 6);
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let dataset = tiny_dataset();
        let run = || {
            train(
                &dataset,
                &tiny_model_config(),
                &tiny_train_config(5, TrainVariant::Gave),
                None,
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        let pa = &a.final_checkpoint.model.params;
        let pb = &b.final_checkpoint.model.params;
        for (ta, tb) in pa.tensors.iter().zip(&pb.tensors) {
            assert_eq!(ta.data, tb.data, "{} diverged", ta.name);
        }
    }

    #[test]
    fn first_step_w_mean_is_exactly_half() {
        let dataset = tiny_dataset();
        let out = train(
            &dataset,
            &tiny_model_config(),
            &tiny_train_config(1, TrainVariant::Gave),
            None,
            None,
        )
        .unwrap();
        assert_eq!(out.metrics[0].w_mean, Some(0.5));
    }

    #[test]
    fn logged_total_matches_weighted_components() {
        let dataset = tiny_dataset();
        let mut model_config = tiny_model_config();
        model_config.loss_weights = [0.7, 1.3, 0.5, 2.0];
        let out = train(
            &dataset,
            &model_config,
            &tiny_train_config(4, TrainVariant::Gave),
            None,
            None,
        )
        .unwrap();
        for row in &out.metrics {
            let expected = 0.7 * row.l_r
                + 1.3 * row.l_a
                + 0.5 * row.l_e.unwrap()
                + 2.0 * row.l_v.unwrap();
            assert!((row.l_o - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn variant_metric_columns_match_their_construction() {
        let dataset = tiny_dataset();
        let model_config = tiny_model_config();

        let dt = train(
            &dataset,
            &model_config,
            &tiny_train_config(2, TrainVariant::Dt),
            None,
            None,
        )
        .unwrap();
        for row in &dt.metrics {
            assert!(row.l_e.is_none() && row.l_v.is_none() && row.l_w.is_none());
            assert!(row.w_mean.is_none());
            let expected = row.l_r + row.l_a;
            assert!((row.l_o - expected).abs() < 1e-9, "exactly two loss terms");
        }
        assert_eq!(dt.final_checkpoint.score_variant, ScoreVariant::S1);

        let va = train(
            &dataset,
            &model_config,
            &tiny_train_config(2, TrainVariant::GaveVa),
            None,
            None,
        )
        .unwrap();
        assert!(va.metrics.iter().all(|r| r.w_mean.is_none()));
        assert_eq!(va.final_checkpoint.score_variant, ScoreVariant::S2);

        let gv = train(
            &dataset,
            &model_config,
            &tiny_train_config(2, TrainVariant::GaveV),
            None,
            None,
        )
        .unwrap();
        for row in &gv.metrics {
            assert!(row.l_w.is_some());
            assert!(row.l_e.is_none() && row.l_v.is_none());
        }
        assert_eq!(metrics_header(TrainVariant::GaveV), "step,L_r,L_a,L_w,L_o,w_mean,beta_mean");
    }

    #[test]
    fn metrics_csv_has_the_documented_header() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset();
        train(
            &dataset,
            &tiny_model_config(),
            &tiny_train_config(2, TrainVariant::Gave),
            Some(dir.path()),
            None,
        )
        .unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("step,L_r,L_a,L_e,L_v,L_o,w_mean,beta_mean\n"));
        assert!(dir.path().join("final.json").exists());
        assert!(dir.path().join("checkpoint_000002.json").exists());
    }

    #[test]
    fn poisoned_dataset_aborts_with_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let mut dataset = tiny_dataset();
        for traj in &mut dataset.trajectories {
            traj.states[0][0] = f64::NAN;
        }
        let result = train(
            &dataset,
            &tiny_model_config(),
            &tiny_train_config(3, TrainVariant::Gave),
            Some(dir.path()),
            None,
        );
        let err = match result {
            Err(e) => e,
            Ok(_) => panic!("training on NaN states must abort"),
        };
        match err {
            TrainError::NonFinite { step, snapshot } => {
                assert!(step >= 1);
                let path = snapshot.expect("diagnostic written when out dir given");
                assert!(path.exists());
            }
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn validator_selects_the_best_checkpoint() {
        let dataset = tiny_dataset();
        let mut config = tiny_train_config(4, TrainVariant::Gave);
        config.checkpoint_every = 2;
        // Score checkpoints by a value that peaks at the first validation.
        let counter = std::sync::atomic::AtomicUsize::new(0);
        let validate = |_ck: &ModelCheckpoint| -> f64 {
            let n = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            match n {
                0 => 10.0,
                _ => 1.0,
            }
        };
        let out = train(&dataset, &tiny_model_config(), &config, None, Some(&validate)).unwrap();
        assert_eq!(out.best_score, Some(10.0));
        assert!(out.best_checkpoint.is_some());
        // The selected checkpoint differs from the final one.
        let sel = out.selected();
        let fin = &out.final_checkpoint;
        let differs = sel
            .model
            .params
            .tensors
            .iter()
            .zip(&fin.model.params.tensors)
            .any(|(a, b)| a.data != b.data);
        assert!(differs);
    }

    #[test]
    fn context_mismatch_is_refused() {
        let dataset = tiny_dataset();
        let mut model_config = tiny_model_config();
        model_config.context = 7;
        assert!(matches!(
            train(
                &dataset,
                &model_config,
                &tiny_train_config(1, TrainVariant::Gave),
                None,
                None
            ),
            Err(TrainError::Dataset(DatasetError::ContextMismatch { .. }))
        ));
    }
}
