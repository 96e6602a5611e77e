//! Evaluation harness.
//!
//! The test policy replaces each scripted agent slot in turn and plays a
//! full delivery period against the rest; its episode is scored with the
//! CPA-penalized metric and performance is the mean across slots and
//! rounds. Budget ratios scale only the evaluated slot's budget, leaving
//! the competition unchanged. A constant-coefficient grid search over the
//! same seeds serves as the brute-force reference policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::config::config_hash;
use crate::dataset::{quantile_from_grid, Dataset, DatasetError};
use crate::env::{run_episode_with_budgets, EnvConfig, EnvError, EpisodeLog};
use crate::model::{InferenceContext, ModelCheckpoint, ModelError};
use crate::policy::{default_roster, BidPolicy, PolicySpec, StepObservation};
use crate::score::{compute_cpa, score_at, PrefixStats, ScoreConfig, ScoreError, ScoreVariant};
use crate::trainer::{train, TrainConfig, TrainError, TrainVariant};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("checkpoint carries no score anchor for variant {0}")]
    MissingAnchor(String),
    #[error("round-robin needs at least 2 agents, got {0}")]
    TooFewAgents(usize),
    #[error("empty oracle grid")]
    EmptyGrid,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Budget multipliers applied to the evaluated slot only.
    pub budget_ratios: Vec<f64>,
    /// Independent evaluation rounds; each reseeds the market and the
    /// competitor roster.
    pub rounds: usize,
    /// Quantile of the training episodes' total scores used as the initial
    /// RTG target, scaled by the budget ratio.
    pub target_rtg_quantile: f64,
    /// Score variant for both the RTG updates and the reported score.
    pub variant: ScoreVariant,
    pub seed: u64,
    /// Grid size for the constant-coefficient reference search.
    pub oracle_grid: usize,
    /// Upper end of the oracle grid (the grid spans (0, max]).
    pub oracle_grid_max: f64,
    /// Training seeds used by the ablation study.
    pub ablation_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budget_ratios: vec![0.5, 1.0, 1.5],
            rounds: 3,
            target_rtg_quantile: 0.95,
            variant: ScoreVariant::S2,
            seed: 17,
            oracle_grid: 50,
            oracle_grid_max: 4.0,
            ablation_seeds: 10,
        }
    }
}

/// Autoregressive bidding agent: conditions on the remaining score target,
/// decrements it by the realized score increment each step, and keeps a
/// rolling window of the most recent steps.
pub struct ModelAgent<'a> {
    checkpoint: &'a ModelCheckpoint,
    score_config: ScoreConfig,
    initial_rtg: f64,
    rtg: f64,
    prev_score: f64,
    context: InferenceContext,
}

impl<'a> ModelAgent<'a> {
    pub fn new(
        checkpoint: &'a ModelCheckpoint,
        score_config: ScoreConfig,
        target_rtg: f64,
    ) -> Self {
        Self {
            checkpoint,
            score_config,
            initial_rtg: target_rtg,
            rtg: target_rtg,
            prev_score: 0.0,
            context: InferenceContext::default(),
        }
    }

    pub fn remaining_target(&self) -> f64 {
        self.rtg
    }

    pub fn context_steps(&self) -> usize {
        self.context.steps()
    }
}

impl BidPolicy for ModelAgent<'_> {
    fn begin_episode(&mut self, _episode_seed: u64) {
        self.rtg = self.initial_rtg;
        self.prev_score = 0.0;
        self.context = InferenceContext::default();
    }

    fn bid_coefficient(&mut self, obs: &StepObservation) -> f64 {
        // The observation's cumulative stats cover everything through the
        // previous step; realize that score increment before bidding.
        if obs.step > 0 {
            let score = score_at(
                PrefixStats::new(obs.cum_cost, obs.cum_value),
                &self.score_config,
            );
            self.rtg = (self.rtg - (score - self.prev_score)).max(0.0);
            self.prev_score = score;
        }
        self.context.rtgs.push(self.rtg);
        self.context.states.push(obs.features);
        self.context.timesteps.push(obs.step);
        self.context
            .truncate_front(self.checkpoint.model.config.context + 1);
        let lambda = self
            .checkpoint
            .predict_action(&self.context)
            .expect("inference context is maintained within the model contract");
        self.context.actions.push(lambda);
        lambda
    }
}

/// Initial RTG target for a checkpoint under an eval variant: the requested
/// quantile of the training episodes' total scores, scaled by budget ratio.
pub fn initial_target_rtg(
    checkpoint: &ModelCheckpoint,
    variant: ScoreVariant,
    quantile: f64,
    budget_ratio: f64,
) -> Result<f64, EvalError> {
    let grid = checkpoint
        .total_score_quantiles
        .get(variant.label())
        .ok_or_else(|| EvalError::MissingAnchor(variant.label().to_string()))?;
    Ok(quantile_from_grid(grid, quantile) * budget_ratio)
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Runs one delivery period with the test policy in `slot` and scripted
/// agents elsewhere. Returns all agents' logs; the tested agent's is at
/// `slot`.
pub fn infer_episode(
    test_policy: &mut dyn BidPolicy,
    env_config: &EnvConfig,
    slot: usize,
    round: usize,
    eval_seed: u64,
    budget_ratio: f64,
) -> Result<Vec<EpisodeLog>, EvalError> {
    let roster_seed = mix(env_config.seed, round as u64 + 1);
    let episode_seed = mix(eval_seed, (round as u64) << 8);
    let mut policies: Vec<Box<dyn BidPolicy + '_>> = default_roster(env_config.num_agents, roster_seed)
        .into_iter()
        .map(|p| Box::new(p) as Box<dyn BidPolicy + '_>)
        .collect();
    policies[slot] = Box::new(DynPolicy(test_policy));
    let mut budgets = vec![env_config.budget_per_agent; env_config.num_agents];
    budgets[slot] *= budget_ratio;
    Ok(run_episode_with_budgets(
        env_config,
        &mut policies,
        episode_seed,
        Some(&budgets),
    )?)
}

struct DynPolicy<'a>(&'a mut dyn BidPolicy);

impl BidPolicy for DynPolicy<'_> {
    fn begin_episode(&mut self, episode_seed: u64) {
        self.0.begin_episode(episode_seed);
    }

    fn bid_coefficient(&mut self, obs: &StepObservation) -> f64 {
        self.0.bid_coefficient(obs)
    }
}

/// One evaluated slot episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlotScore {
    pub round: usize,
    pub slot: usize,
    pub score: f64,
    /// None when the slot acquired no value.
    pub cpa: Option<f64>,
    pub total_value: f64,
    pub total_cost: f64,
    pub mean_lambda: f64,
}

/// Aggregate of a full round-robin at one budget ratio.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRobinResult {
    pub budget_ratio: f64,
    pub mean_score: f64,
    pub std_score: f64,
    pub slots: Vec<SlotScore>,
}

fn score_log(log: &EpisodeLog, config: &ScoreConfig) -> (f64, Option<f64>, f64, f64) {
    let stats = PrefixStats::new(log.total_cost(), log.total_value());
    let cpa = compute_cpa(stats);
    let score = score_at(stats, config);
    let cpa = if cpa.is_finite() && log.total_value() > 0.0 {
        Some(cpa)
    } else {
        None
    };
    (score, cpa, log.total_value(), log.total_cost())
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Round-robin evaluation of any test-policy factory. The factory is called
/// once per (round, slot) episode.
pub fn round_robin_policy<F>(
    make_policy: F,
    env_config: &EnvConfig,
    eval_config: &EvalConfig,
    score_config: &ScoreConfig,
    budget_ratio: f64,
) -> Result<RoundRobinResult, EvalError>
where
    F: Fn(usize, usize) -> Box<dyn BidPolicy> + Sync,
{
    if env_config.num_agents < 2 {
        return Err(EvalError::TooFewAgents(env_config.num_agents));
    }
    let pairs: Vec<(usize, usize)> = (0..eval_config.rounds)
        .flat_map(|round| (0..env_config.num_agents).map(move |slot| (round, slot)))
        .collect();
    let slots: Vec<SlotScore> = pairs
        .par_iter()
        .map(|&(round, slot)| -> Result<SlotScore, EvalError> {
            let mut policy = make_policy(round, slot);
            let logs = infer_episode(
                policy.as_mut(),
                env_config,
                slot,
                round,
                eval_config.seed,
                budget_ratio,
            )?;
            let log = &logs[slot];
            let (score, cpa, total_value, total_cost) = score_log(log, score_config);
            let mean_lambda = log.actions.iter().sum::<f64>() / log.actions.len().max(1) as f64;
            Ok(SlotScore {
                round,
                slot,
                score,
                cpa,
                total_value,
                total_cost,
                mean_lambda,
            })
        })
        .collect::<Result<_, _>>()?;
    let scores: Vec<f64> = slots.iter().map(|s| s.score).collect();
    let (mean_score, std_score) = mean_and_std(&scores);
    Ok(RoundRobinResult {
        budget_ratio,
        mean_score,
        std_score,
        slots,
    })
}

/// Round-robin evaluation of a trained model at one budget ratio.
pub fn round_robin(
    checkpoint: &ModelCheckpoint,
    env_config: &EnvConfig,
    eval_config: &EvalConfig,
    budget_ratio: f64,
) -> Result<RoundRobinResult, EvalError> {
    let score_config = ScoreConfig::new(env_config.cpa_limit, eval_config.variant)?;
    let target = initial_target_rtg(
        checkpoint,
        eval_config.variant,
        eval_config.target_rtg_quantile,
        budget_ratio,
    )?;
    round_robin_policy(
        |_, _| Box::new(OwnedModelAgent::new(checkpoint.clone(), score_config, target)),
        env_config,
        eval_config,
        &score_config,
        budget_ratio,
    )
}

/// Owning wrapper so the round-robin factory can hand out 'static policies.
struct OwnedModelAgent {
    checkpoint: ModelCheckpoint,
    score_config: ScoreConfig,
    target: f64,
    state: Option<(f64, f64)>,
    context: InferenceContext,
}

impl OwnedModelAgent {
    fn new(checkpoint: ModelCheckpoint, score_config: ScoreConfig, target: f64) -> Self {
        Self {
            checkpoint,
            score_config,
            target,
            state: None,
            context: InferenceContext::default(),
        }
    }
}

impl BidPolicy for OwnedModelAgent {
    fn begin_episode(&mut self, _episode_seed: u64) {
        self.state = Some((self.target, 0.0));
        self.context = InferenceContext::default();
    }

    fn bid_coefficient(&mut self, obs: &StepObservation) -> f64 {
        let (mut rtg, mut prev_score) = self.state.unwrap_or((self.target, 0.0));
        if obs.step > 0 {
            let score = score_at(
                PrefixStats::new(obs.cum_cost, obs.cum_value),
                &self.score_config,
            );
            rtg = (rtg - (score - prev_score)).max(0.0);
            prev_score = score;
        }
        self.context.rtgs.push(rtg);
        self.context.states.push(obs.features);
        self.context.timesteps.push(obs.step);
        self.context
            .truncate_front(self.checkpoint.model.config.context + 1);
        let lambda = self
            .checkpoint
            .predict_action(&self.context)
            .expect("inference context is maintained within the model contract");
        self.context.actions.push(lambda);
        self.state = Some((rtg, prev_score));
        lambda
    }
}

/// Constant-coefficient grid search result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleResult {
    pub budget_ratio: f64,
    pub best_lambda: f64,
    pub best_score: f64,
    /// Mean score per grid point.
    pub curve: Vec<(f64, f64)>,
}

/// Brute-force reference: evaluates a constant coefficient from `grid` in
/// the round-robin protocol (same seeds) and returns the best.
pub fn oracle_constant_lambda(
    env_config: &EnvConfig,
    eval_config: &EvalConfig,
    grid: &[f64],
    budget_ratio: f64,
) -> Result<OracleResult, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let score_config = ScoreConfig::new(env_config.cpa_limit, eval_config.variant)?;
    let mut curve = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let result = round_robin_policy(
            |_, _| {
                Box::new(
                    PolicySpec::ConstantLambda { lambda }
                        .build()
                        .expect("constant policy is always valid"),
                )
            },
            env_config,
            eval_config,
            &score_config,
            budget_ratio,
        )?;
        curve.push((lambda, result.mean_score));
    }
    let (best_lambda, best_score) = curve
        .iter()
        .copied()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    Ok(OracleResult {
        budget_ratio,
        best_lambda,
        best_score,
        curve,
    })
}

/// Evenly spaced grid over (0, max]: `count` points.
pub fn lambda_grid(count: usize, max: f64) -> Vec<f64> {
    (1..=count).map(|i| max * i as f64 / count as f64).collect()
}

/// Full evaluation report: per-ratio aggregates, optional oracle rows, and
/// the hashes/seeds needed to reproduce it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub score_variant: String,
    pub target_rtg_quantile: f64,
    pub env_config_hash: String,
    pub eval_config_hash: String,
    pub seed: u64,
    pub results: Vec<RoundRobinResult>,
    pub oracle: Vec<OracleResult>,
}

impl EvalReport {
    pub fn build(
        checkpoint: &ModelCheckpoint,
        env_config: &EnvConfig,
        eval_config: &EvalConfig,
        with_oracle: bool,
    ) -> Result<Self, EvalError> {
        let mut results = Vec::new();
        let mut oracle = Vec::new();
        for &ratio in &eval_config.budget_ratios {
            results.push(round_robin(checkpoint, env_config, eval_config, ratio)?);
            if with_oracle {
                let grid = lambda_grid(eval_config.oracle_grid, eval_config.oracle_grid_max);
                oracle.push(oracle_constant_lambda(env_config, eval_config, &grid, ratio)?);
            }
        }
        Ok(Self {
            score_variant: eval_config.variant.label().to_string(),
            target_rtg_quantile: eval_config.target_rtg_quantile,
            env_config_hash: config_hash(env_config),
            eval_config_hash: config_hash(eval_config),
            seed: eval_config.seed,
            results,
            oracle,
        })
    }

    /// Summary CSV: one row per budget ratio.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "budget_ratio,mean_score,std_score,mean_value,mean_cost,oracle_lambda,oracle_score\n",
        );
        for result in &self.results {
            let mean_value: f64 =
                result.slots.iter().map(|s| s.total_value).sum::<f64>() / result.slots.len() as f64;
            let mean_cost: f64 =
                result.slots.iter().map(|s| s.total_cost).sum::<f64>() / result.slots.len() as f64;
            let oracle = self
                .oracle
                .iter()
                .find(|o| o.budget_ratio == result.budget_ratio);
            let (ol, os) = match oracle {
                Some(o) => (format!("{}", o.best_lambda), format!("{}", o.best_score)),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                result.budget_ratio,
                result.mean_score,
                result.std_score,
                mean_value,
                mean_cost,
                ol,
                os
            ));
        }
        out
    }
}

/// Welch's two-sample t-test; returns (t, two-sided p).
pub fn welch_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, sa) = mean_and_std(a);
    let (mb, sb) = mean_and_std(b);
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let va = sa * sa / na;
    let vb = sb * sb / nb;
    if va + vb == 0.0 {
        return if ma == mb { (0.0, 1.0) } else { (f64::INFINITY, 0.0) };
    }
    let t = (ma - mb) / (va + vb).sqrt();
    let df = (va + vb) * (va + vb)
        / (va * va / (na - 1.0).max(1.0) + vb * vb / (nb - 1.0).max(1.0));
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0)).expect("valid t distribution");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    (t, p)
}

/// One ablation table row: a variant's scores over the training seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Two-sided Welch p-value for full model vs the plain baseline.
    pub p_gave_vs_dt: f64,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mean,std,seeds\n");
        for row in &self.rows {
            let per_seed: Vec<String> = row.per_seed.iter().map(|s| format!("{s}")).collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.variant,
                row.mean,
                row.std,
                per_seed.join(";")
            ));
        }
        out
    }

    pub fn row(&self, variant: TrainVariant) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.variant == variant.label())
            .expect("all four variants present")
    }
}

/// Trains and evaluates all four variants on the same dataset and seed set
/// at 100% budget.
pub fn run_ablation_suite(
    dataset: &Dataset,
    model_config: &crate::model::ModelConfig,
    train_config: &TrainConfig,
    env_config: &EnvConfig,
    eval_config: &EvalConfig,
    seeds: &[u64],
) -> Result<AblationTable, EvalError> {
    let mut rows = Vec::new();
    for variant in TrainVariant::ALL {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let config = TrainConfig {
                seed,
                variant,
                ..*train_config
            };
            let outcome = train(dataset, model_config, &config, None, None)?;
            let eval = EvalConfig {
                seed: mix(eval_config.seed, i as u64 + 1),
                ..eval_config.clone()
            };
            let result = round_robin(outcome.selected(), env_config, &eval, 1.0)?;
            per_seed.push(result.mean_score);
        }
        let (mean, std) = mean_and_std(&per_seed);
        rows.push(AblationRow {
            variant: variant.label().to_string(),
            mean,
            std,
            per_seed,
        });
    }
    let p_gave_vs_dt = welch_t_test(
        &rows[0].per_seed, // gave
        &rows[3].per_seed, // dt
    )
    .1;
    Ok(AblationTable {
        rows,
        p_gave_vs_dt,
        config_hash: config_hash(&(env_config, eval_config)),
        seeds: seeds.to_vec(),
    })
}

/// Train-variant x eval-variant score matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    /// `scores[i][j]`: trained with RTG variant i, evaluated under j
    /// (order S1, S2, S3).
    pub scores: [[f64; 3]; 3],
    pub config_hash: String,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl AlignmentMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train\\eval,s1,s2,s3\n");
        for (i, variant) in ScoreVariant::ALL.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                variant.label(),
                self.scores[i][0],
                self.scores[i][1],
                self.scores[i][2]
            ));
        }
        out
    }
}

/// Trains one model per RTG variant and scores each under every variant.
pub fn run_alignment_matrix(
    dataset: &Dataset,
    model_config: &crate::model::ModelConfig,
    train_config: &TrainConfig,
    env_config: &EnvConfig,
    eval_config: &EvalConfig,
) -> Result<AlignmentMatrix, EvalError> {
    let mut scores = [[0.0; 3]; 3];
    for (i, train_variant) in ScoreVariant::ALL.iter().enumerate() {
        let config = TrainConfig {
            variant: TrainVariant::Gave,
            rtg_variant: Some(*train_variant),
            ..*train_config
        };
        let outcome = train(dataset, model_config, &config, None, None)?;
        for (j, eval_variant) in ScoreVariant::ALL.iter().enumerate() {
            let eval = EvalConfig {
                variant: *eval_variant,
                ..eval_config.clone()
            };
            let result = round_robin(outcome.selected(), env_config, &eval, 1.0)?;
            scores[i][j] = result.mean_score;
        }
    }
    Ok(AlignmentMatrix {
        scores,
        config_hash: config_hash(&(env_config, eval_config)),
        train_seed: train_config.seed,
        eval_seed: eval_config.seed,
    })
}

/// Convenience for generating a dataset with the scripted roster.
pub fn generate_dataset(
    env_config: &EnvConfig,
    score_config: &ScoreConfig,
    episodes: usize,
    context: usize,
) -> Result<Dataset, EvalError> {
    let logs = generate_episode_logs(env_config, episodes)?;
    Ok(Dataset::build(env_config, score_config, &logs, context, episodes)?)
}

/// Scripted-roster episodes for offline data collection, parallel over
/// episodes and deterministic per (config seed, episode index).
pub fn generate_episode_logs(
    env_config: &EnvConfig,
    episodes: usize,
) -> Result<Vec<EpisodeLog>, EvalError> {
    let all: Vec<Vec<EpisodeLog>> = (0..episodes)
        .into_par_iter()
        .map(|episode| -> Result<Vec<EpisodeLog>, EvalError> {
            let roster_seed = mix(env_config.seed, 0x0DD0 + episode as u64);
            let episode_seed = mix(env_config.seed, 0xEE00 + episode as u64);
            let mut policies: Vec<Box<dyn BidPolicy + '_>> =
                default_roster(env_config.num_agents, roster_seed)
                    .into_iter()
                    .map(|p| Box::new(p) as Box<dyn BidPolicy + '_>)
                    .collect();
            Ok(crate::env::run_episode(env_config, &mut policies, episode_seed)?)
        })
        .collect::<Result<_, _>>()?;
    Ok(all.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::score::ScoreConfig;

    fn small_env() -> EnvConfig {
        EnvConfig {
            num_steps: 8,
            impressions_per_step: 15.0,
            num_agents: 4,
            budget_per_agent: 12.0,
            ..EnvConfig::default()
        }
    }

    fn small_eval() -> EvalConfig {
        EvalConfig {
            budget_ratios: vec![1.0],
            rounds: 2,
            oracle_grid: 4,
            oracle_grid_max: 2.0,
            ..EvalConfig::default()
        }
    }

    fn quick_checkpoint(env: &EnvConfig) -> ModelCheckpoint {
        let score = ScoreConfig::new(env.cpa_limit, ScoreVariant::S2).unwrap();
        let dataset = generate_dataset(env, &score, 2, 3).unwrap();
        let model_config = ModelConfig {
            layers: 1,
            heads: 2,
            width: 16,
            context: 3,
            ..ModelConfig::default()
        };
        let train_config = TrainConfig {
            batch_size: 4,
            max_steps: 3,
            checkpoint_every: 3,
            log_every: 1,
            ..TrainConfig::default()
        };
        train(&dataset, &model_config, &train_config, None, None)
            .unwrap()
            .final_checkpoint
    }

    #[test]
    fn model_agent_rtg_never_goes_negative_and_context_stays_bounded() {
        let env = small_env();
        let checkpoint = quick_checkpoint(&env);
        let score = ScoreConfig::new(env.cpa_limit, ScoreVariant::S2).unwrap();
        // Tiny target: the realized score quickly exceeds it.
        let mut agent = ModelAgent::new(&checkpoint, score, 0.05);
        agent.begin_episode(3);
        let logs = infer_episode(&mut agent, &env, 1, 0, 7, 1.0).unwrap();
        assert_eq!(logs.len(), env.num_agents);
        assert!(agent.remaining_target() >= 0.0);
        assert!(agent.context_steps() <= checkpoint.model.config.context + 1);
        assert_eq!(logs[1].actions.len(), env.num_steps);
    }

    #[test]
    fn s1_variant_decrements_by_exactly_the_step_reward() {
        let env = small_env();
        let checkpoint = quick_checkpoint(&env);
        let score = ScoreConfig::new(env.cpa_limit, ScoreVariant::S1).unwrap();
        let target = 1e9; // far above anything achievable: the floor never binds
        let mut agent = ModelAgent::new(&checkpoint, score, target);
        agent.begin_episode(0);
        let logs = infer_episode(&mut agent, &env, 0, 0, 11, 1.0).unwrap();
        let total_reward_before_last: f64 =
            logs[0].rewards[..env.num_steps - 1].iter().sum();
        // After the full episode the agent saw all but the final step's
        // rewards through observations.
        let expected = target - total_reward_before_last;
        assert!((agent.remaining_target() - expected).abs() < 1e-9);
    }

    #[test]
    fn round_robin_covers_every_slot_and_averages_arithmetically() {
        let env = small_env();
        let checkpoint = quick_checkpoint(&env);
        let eval = small_eval();
        let result = round_robin(&checkpoint, &env, &eval, 1.0).unwrap();
        assert_eq!(result.slots.len(), eval.rounds * env.num_agents);
        let by_hand: f64 =
            result.slots.iter().map(|s| s.score).sum::<f64>() / result.slots.len() as f64;
        assert!((result.mean_score - by_hand).abs() < 1e-12);
        for slot in &result.slots {
            assert!(slot.score <= slot.total_value + 1e-12, "penalty must not exceed 1");
            assert!(slot.score >= 0.0);
        }
    }

    #[test]
    fn spending_nothing_scores_zero() {
        let env = small_env();
        let score = ScoreConfig::new(env.cpa_limit, ScoreVariant::S2).unwrap();
        let eval = small_eval();
        let result = round_robin_policy(
            |_, _| {
                Box::new(
                    PolicySpec::ConstantLambda { lambda: 0.0 }
                        .build()
                        .unwrap(),
                )
            },
            &env,
            &eval,
            &score,
            1.0,
        )
        .unwrap();
        assert_eq!(result.mean_score, 0.0);
        assert!(result.slots.iter().all(|s| s.cpa.is_none()));
    }

    #[test]
    fn oracle_grid_of_one_returns_that_value() {
        let env = small_env();
        let eval = small_eval();
        let oracle = oracle_constant_lambda(&env, &eval, &[1.2], 1.0).unwrap();
        assert_eq!(oracle.best_lambda, 1.2);
        assert_eq!(oracle.curve.len(), 1);
    }

    #[test]
    fn finer_grid_never_scores_worse() {
        let env = small_env();
        let eval = small_eval();
        let coarse: Vec<f64> = vec![0.5, 1.0, 2.0];
        let fine: Vec<f64> = vec![0.25, 0.5, 0.75, 1.0, 1.5, 2.0];
        let a = oracle_constant_lambda(&env, &eval, &coarse, 1.0).unwrap();
        let b = oracle_constant_lambda(&env, &eval, &fine, 1.0).unwrap();
        assert!(b.best_score >= a.best_score - 1e-12, "superset argmax");
        assert!(a.best_lambda > 0.0);
    }

    #[test]
    fn slot_replacement_leaves_other_agents_policies_untouched() {
        // Non-adaptive scripted agents choose identical coefficient streams
        // whether or not some other slot was replaced by the test policy.
        let env = EnvConfig {
            num_agents: 4,
            num_steps: 6,
            impressions_per_step: 10.0,
            budget_per_agent: 1e9,
            ..small_env()
        };
        let eval = small_eval();

        let baseline = {
            let score = ScoreConfig::new(env.cpa_limit, ScoreVariant::S2).unwrap();
            round_robin_policy(
                |_, _| Box::new(PolicySpec::ConstantLambda { lambda: 1.0 }.build().unwrap()),
                &env,
                &eval,
                &score,
                1.0,
            )
            .unwrap()
        };
        let _ = baseline;

        // Compare agent 2's actions between a slot-0 run and a slot-1 run:
        // identical rounds, identical roster, so identical non-adaptive
        // lambda streams (agent 2 here is a constant-coefficient agent).
        let run_for_slot = |slot: usize| {
            let mut policy = PolicySpec::ConstantLambda { lambda: 1.3 }.build().unwrap();
            infer_episode(&mut policy, &env, slot, 0, eval.seed, 1.0).unwrap()
        };
        let a = run_for_slot(0);
        let b = run_for_slot(1);
        assert_eq!(a[2].actions, b[2].actions);
        assert_eq!(a[3].actions, b[3].actions);
    }

    #[test]
    fn welch_test_detects_separated_samples() {
        let a = [10.0, 10.5, 9.8, 10.2, 10.1];
        let b = [5.0, 5.2, 4.9, 5.1, 5.05];
        let (t, p) = welch_t_test(&a, &b);
        assert!(t > 10.0);
        assert!(p < 0.001);

        let (_, p_same) = welch_t_test(&a, &a);
        assert!(p_same > 0.9);
    }

    #[test]
    fn report_embeds_hashes_and_has_one_row_per_ratio() {
        let env = small_env();
        let checkpoint = quick_checkpoint(&env);
        let eval = EvalConfig {
            budget_ratios: vec![0.5, 1.0, 1.5],
            rounds: 1,
            oracle_grid: 2,
            oracle_grid_max: 1.5,
            ..EvalConfig::default()
        };
        let report = EvalReport::build(&checkpoint, &env, &eval, true).unwrap();
        assert_eq!(report.results.len(), 3);
        assert_eq!(report.oracle.len(), 3);
        assert_eq!(report.env_config_hash.len(), 64);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4, "header plus one row per ratio");
        assert!(csv.starts_with("budget_ratio,"));

        // The JSON mirror round-trips.
        let json = serde_json::to_string(&report).unwrap();
        let parsed: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.results.len(), 3);
    }
}
