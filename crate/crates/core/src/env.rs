//! Simulated delivery environment.
//!
//! A delivery period is `num_steps` discrete steps. At each step a Poisson
//! number of impressions arrives; every agent holds a private Beta-sampled
//! value in [0, 1] for each impression and bids `coefficient * value`. Each
//! impression is sold by second-price auction with platform-side budget
//! control. In sparse mode the realized value of a won impression is a
//! Bernoulli conversion with probability `value * conversion_scale` instead
//! of the value itself; conversion draws are a pure hash of the impression
//! coordinates so they do not disturb the sampling streams.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{auction_impression, AuctionError};
use crate::policy::{BidPolicy, StepObservation};
use crate::score::PrefixStats;

pub const STATE_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("episode already finished after {0} steps")]
    EpisodeFinished(usize),
    #[error("expected {expected} bid coefficients, got {got}")]
    WrongAgentCount { expected: usize, got: usize },
    #[error("bid coefficients must be nonnegative, got {0}")]
    NegativeCoefficient(f64),
    #[error("impression values must lie in [0, 1], got {0}")]
    ValueOutOfRange(f64),
    #[error(transparent)]
    Auction(#[from] AuctionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed episode log file: {0}")]
    Malformed(#[from] serde_json::Error),
}

/// Environment parameters. Loaded from the `[env]` section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub num_steps: usize,
    pub impressions_per_step: f64,
    pub num_agents: usize,
    pub budget_per_agent: f64,
    pub cpa_limit: f64,
    pub value_alpha: f64,
    pub value_beta: f64,
    pub sparse_mode: bool,
    pub conversion_scale: f64,
    pub lambda_max: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_steps: 48,
            impressions_per_step: 200.0,
            num_agents: 8,
            budget_per_agent: 400.0,
            cpa_limit: 1.0,
            value_alpha: 2.0,
            value_beta: 5.0,
            sparse_mode: false,
            conversion_scale: 0.1,
            lambda_max: 8.0,
            seed: 7,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_steps < 1 {
            return Err(EnvError::InvalidConfig("num_steps must be >= 1".into()));
        }
        if self.impressions_per_step < 1.0 {
            return Err(EnvError::InvalidConfig(
                "impressions_per_step mean must be >= 1".into(),
            ));
        }
        if self.num_agents < 1 {
            return Err(EnvError::InvalidConfig("num_agents must be >= 1".into()));
        }
        if !(self.budget_per_agent > 0.0) {
            return Err(EnvError::InvalidConfig("budget_per_agent must be > 0".into()));
        }
        if !(self.cpa_limit > 0.0) {
            return Err(EnvError::InvalidConfig("cpa_limit must be > 0".into()));
        }
        if !(self.value_alpha > 0.0 && self.value_beta > 0.0) {
            return Err(EnvError::InvalidConfig("value distribution shape must be > 0".into()));
        }
        if !(self.lambda_max > 0.0) {
            return Err(EnvError::InvalidConfig("lambda_max must be > 0".into()));
        }
        Ok(())
    }
}

/// The candidate impressions of one time step; `per_impression[i][a]` is
/// agent `a`'s private value for impression `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpressionBatch {
    pub per_impression: Vec<Vec<f64>>,
}

impl ImpressionBatch {
    pub fn validate(&self) -> Result<(), EnvError> {
        for values in &self.per_impression {
            for &v in values {
                if !(0.0..=1.0).contains(&v) {
                    return Err(EnvError::ValueOutOfRange(v));
                }
            }
        }
        Ok(())
    }
}

/// Per-agent tallies of one step's auctions.
#[derive(Clone, Debug, Default)]
pub struct StepAuctionResult {
    pub wins: Vec<u64>,
    pub costs: Vec<f64>,
    /// Sum of the winner's private values over won impressions.
    pub won_value_sums: Vec<f64>,
    /// Winner per impression, if sold.
    pub winners: Vec<Option<usize>>,
    /// Price charged per impression (0 when unsold).
    pub prices: Vec<f64>,
}

/// Auctions one batch of impressions. `remaining` is decremented in place as
/// wins are charged, so the budget constraint holds exactly at every point.
pub fn run_step_auctions(
    batch: &ImpressionBatch,
    lambdas: &[f64],
    remaining: &mut [f64],
) -> Result<StepAuctionResult, EnvError> {
    let n = lambdas.len();
    for &l in lambdas {
        if l < 0.0 {
            return Err(EnvError::NegativeCoefficient(l));
        }
    }
    let mut result = StepAuctionResult {
        wins: vec![0; n],
        costs: vec![0.0; n],
        won_value_sums: vec![0.0; n],
        winners: Vec::with_capacity(batch.per_impression.len()),
        prices: Vec::with_capacity(batch.per_impression.len()),
    };
    let mut bids = vec![0.0; n];
    for values in &batch.per_impression {
        debug_assert_eq!(values.len(), n);
        for a in 0..n {
            bids[a] = lambdas[a] * values[a];
        }
        let outcome = auction_impression(&bids, remaining)?;
        if let Some(w) = outcome.winner {
            remaining[w] -= outcome.cost;
            result.wins[w] += 1;
            result.costs[w] += outcome.cost;
            result.won_value_sums[w] += values[w];
        }
        result.prices.push(outcome.cost);
        result.winners.push(outcome.winner);
    }
    Ok(result)
}

/// Full record of one delivery period for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode_seed: u64,
    pub agent: usize,
    pub num_steps: usize,
    pub budget: f64,
    pub cpa_limit: f64,
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub step_costs: Vec<f64>,
    pub cum_costs: Vec<f64>,
    pub cum_values: Vec<f64>,
    pub wins: Vec<u64>,
    pub auctions: Vec<u64>,
}

impl EpisodeLog {
    pub fn total_cost(&self) -> f64 {
        self.cum_costs.last().copied().unwrap_or(0.0)
    }

    pub fn total_value(&self) -> f64 {
        self.cum_values.last().copied().unwrap_or(0.0)
    }

    pub fn total_wins(&self) -> u64 {
        self.wins.iter().sum()
    }

    /// Cumulative (cost, value) prefix per step, ready for scoring.
    pub fn prefix_stats(&self) -> Vec<PrefixStats> {
        self.cum_costs
            .iter()
            .zip(&self.cum_values)
            .map(|(&c, &v)| PrefixStats::new(c, v))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        let t = self.num_steps;
        self.states.len() == t
            && self.actions.len() == t
            && self.rewards.len() == t
            && self.cum_costs.len() == t
            && self.cum_values.len() == t
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform in [0, 1) from impression coordinates; independent of the
/// sampling streams so auction outcomes never shift later draws.
fn conversion_uniform(seed: u64, episode_seed: u64, step: usize, impression: usize, agent: usize) -> f64 {
    let mut h = splitmix64(seed ^ 0x5851_F42D_4C95_7F2D);
    h = splitmix64(h ^ episode_seed);
    h = splitmix64(h ^ step as u64);
    h = splitmix64(h ^ impression as u64);
    h = splitmix64(h ^ agent as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

struct AgentTracker {
    budget: f64,
    remaining: f64,
    cum_cost: f64,
    cum_value: f64,
    step_costs: Vec<f64>,
    step_wins: Vec<u64>,
    step_auctions: Vec<u64>,
    step_won_values: Vec<f64>,
    step_lambdas: Vec<f64>,
    step_rewards: Vec<f64>,
    max_step_reward: f64,
}

impl AgentTracker {
    fn new(budget: f64) -> Self {
        Self {
            budget,
            remaining: budget,
            cum_cost: 0.0,
            cum_value: 0.0,
            step_costs: Vec::new(),
            step_wins: Vec::new(),
            step_auctions: Vec::new(),
            step_won_values: Vec::new(),
            step_lambdas: Vec::new(),
            step_rewards: Vec::new(),
            max_step_reward: 0.0,
        }
    }
}

fn mean_over_last<T: Copy + Into<f64>>(xs: &[T], window: usize) -> (f64, usize) {
    let n = xs.len().min(window);
    if n == 0 {
        return (0.0, 0);
    }
    let total: f64 = xs[xs.len() - n..].iter().map(|&x| x.into()).sum();
    (total / n as f64, n)
}

/// One in-progress delivery period across all agents.
pub struct Episode {
    config: EnvConfig,
    episode_seed: u64,
    step: usize,
    trackers: Vec<AgentTracker>,
    value_rng: ChaCha8Rng,
    count_rng: ChaCha8Rng,
}

/// Per-agent results of one environment step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub wins: Vec<u64>,
    pub num_impressions: usize,
}

impl Episode {
    pub fn new(config: &EnvConfig, episode_seed: u64) -> Result<Self, EnvError> {
        Self::with_budgets(config, episode_seed, None)
    }

    /// `budget_override` replaces `budget_per_agent` per slot; used by the
    /// evaluation harness to scale a single agent's budget ratio.
    pub fn with_budgets(
        config: &EnvConfig,
        episode_seed: u64,
        budget_override: Option<&[f64]>,
    ) -> Result<Self, EnvError> {
        config.validate()?;
        if let Some(budgets) = budget_override {
            if budgets.len() != config.num_agents {
                return Err(EnvError::WrongAgentCount {
                    expected: config.num_agents,
                    got: budgets.len(),
                });
            }
        }
        let trackers = (0..config.num_agents)
            .map(|a| {
                let b = budget_override
                    .map(|bs| bs[a])
                    .unwrap_or(config.budget_per_agent);
                AgentTracker::new(b)
            })
            .collect();
        let base = splitmix64(config.seed ^ splitmix64(episode_seed));
        Ok(Self {
            config: config.clone(),
            episode_seed,
            step: 0,
            trackers,
            value_rng: ChaCha8Rng::seed_from_u64(splitmix64(base ^ 1)),
            count_rng: ChaCha8Rng::seed_from_u64(splitmix64(base ^ 2)),
        })
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.num_steps
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// The observation agent `a` sees before bidding at the current step.
    pub fn observation(&self, agent: usize) -> StepObservation {
        StepObservation {
            step: self.step,
            num_steps: self.config.num_steps,
            features: self.state_features(agent),
            budget: self.trackers[agent].budget,
            remaining_budget: self.trackers[agent].remaining,
            cum_cost: self.trackers[agent].cum_cost,
            cum_value: self.trackers[agent].cum_value,
        }
    }

    /// The fixed 16-feature state vector, each entry scaled to roughly
    /// [0, 1]: elapsed/remaining time, budget position and recent spend
    /// pace, CPA pressure, recent win/cost/value statistics, recent bid
    /// coefficients, and reward progress against the episode's running best.
    pub fn state_features(&self, agent: usize) -> [f64; STATE_DIM] {
        let tr = &self.trackers[agent];
        let cfg = &self.config;
        let t = self.step as f64;
        let total = cfg.num_steps as f64;
        let lam_max = cfg.lambda_max;

        let mut f = [0.0; STATE_DIM];
        f[0] = t / total;
        f[1] = 1.0 - t / total;
        f[2] = if tr.budget > 0.0 { tr.remaining / tr.budget } else { 0.0 };

        let per_step_budget = if tr.budget > 0.0 { tr.budget / total } else { 0.0 };
        let (recent_cost, _) = mean_over_last(&tr.step_costs, 3);
        f[3] = if per_step_budget > 0.0 {
            (recent_cost / per_step_budget).clamp(0.0, 4.0)
        } else {
            0.0
        };
        f[4] = if tr.budget > 0.0 { tr.cum_cost / tr.budget } else { 0.0 };

        let cpa = crate::score::compute_cpa(PrefixStats::new(tr.cum_cost, tr.cum_value));
        f[5] = if cpa.is_infinite() { 4.0 } else { (cpa / cfg.cpa_limit).clamp(0.0, 4.0) };

        let last_wins = tr.step_wins.last().copied().unwrap_or(0) as f64;
        let last_auctions = tr.step_auctions.last().copied().unwrap_or(0) as f64;
        f[6] = if last_auctions > 0.0 { last_wins / last_auctions } else { 0.0 };

        let n3 = tr.step_wins.len().min(3);
        if n3 > 0 {
            let w3: u64 = tr.step_wins[tr.step_wins.len() - n3..].iter().sum();
            let a3: u64 = tr.step_auctions[tr.step_auctions.len() - n3..].iter().sum();
            f[7] = if a3 > 0 { w3 as f64 / a3 as f64 } else { 0.0 };
        }

        let last_cost = tr.step_costs.last().copied().unwrap_or(0.0);
        f[8] = if last_wins > 0.0 { (last_cost / last_wins / lam_max).clamp(0.0, 1.0) } else { 0.0 };
        if n3 > 0 {
            let c3: f64 = tr.step_costs[tr.step_costs.len() - n3..].iter().sum();
            let w3: u64 = tr.step_wins[tr.step_wins.len() - n3..].iter().sum();
            f[9] = if w3 > 0 { (c3 / w3 as f64 / lam_max).clamp(0.0, 1.0) } else { 0.0 };
        }

        let last_won_value = tr.step_won_values.last().copied().unwrap_or(0.0);
        f[10] = if last_wins > 0.0 { last_won_value / last_wins } else { 0.0 };
        if n3 > 0 {
            let v3: f64 = tr.step_won_values[tr.step_won_values.len() - n3..].iter().sum();
            let w3: u64 = tr.step_wins[tr.step_wins.len() - n3..].iter().sum();
            f[11] = if w3 > 0 { v3 / w3 as f64 } else { 0.0 };
        }

        f[12] = tr.step_lambdas.last().copied().unwrap_or(0.0) / lam_max;
        let (lam3, _) = mean_over_last(&tr.step_lambdas, 3);
        f[13] = lam3 / lam_max;

        let last_reward = tr.step_rewards.last().copied().unwrap_or(0.0);
        f[14] = if tr.max_step_reward > 0.0 { last_reward / tr.max_step_reward } else { 0.0 };
        f[15] = if tr.max_step_reward > 0.0 && t > 0.0 {
            tr.cum_value / (tr.max_step_reward * t)
        } else {
            0.0
        };
        f
    }

    /// Samples this step's impressions. Exposed for deterministic replay in
    /// tests; `advance_with_batch` consumes the result.
    pub fn sample_batch(&mut self) -> ImpressionBatch {
        let poisson = Poisson::new(self.config.impressions_per_step).expect("validated mean");
        let count = poisson.sample(&mut self.count_rng) as usize;
        let beta = Beta::new(self.config.value_alpha, self.config.value_beta)
            .expect("validated shape parameters");
        let per_impression: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                (0..self.config.num_agents)
                    .map(|_| beta.sample(&mut self.value_rng).clamp(0.0, 1.0))
                    .collect()
            })
            .collect();
        ImpressionBatch { per_impression }
    }

    /// Runs one step with the given per-agent coefficients.
    pub fn step(&mut self, lambdas: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.finished() {
            return Err(EnvError::EpisodeFinished(self.step));
        }
        let batch = self.sample_batch();
        self.advance_with_batch(&batch, lambdas)
    }

    /// Like [`Episode::step`] but with a caller-supplied impression batch.
    pub fn advance_with_batch(
        &mut self,
        batch: &ImpressionBatch,
        lambdas: &[f64],
    ) -> Result<StepOutcome, EnvError> {
        if self.finished() {
            return Err(EnvError::EpisodeFinished(self.step));
        }
        if lambdas.len() != self.config.num_agents {
            return Err(EnvError::WrongAgentCount {
                expected: self.config.num_agents,
                got: lambdas.len(),
            });
        }
        batch.validate()?;

        let mut remaining: Vec<f64> = self.trackers.iter().map(|t| t.remaining).collect();
        let auction = run_step_auctions(batch, lambdas, &mut remaining)?;

        // Realize per-agent rewards: the private value of each won
        // impression, or a Bernoulli conversion of it in sparse mode.
        let n = self.config.num_agents;
        let mut rewards = vec![0.0; n];
        for (i, winner) in auction.winners.iter().enumerate() {
            let Some(w) = *winner else { continue };
            let value = batch.per_impression[i][w];
            if self.config.sparse_mode {
                let u = conversion_uniform(self.config.seed, self.episode_seed, self.step, i, w);
                if u < value * self.config.conversion_scale {
                    rewards[w] += 1.0;
                }
            } else {
                rewards[w] += value;
            }
        }

        for a in 0..n {
            let tr = &mut self.trackers[a];
            tr.remaining = remaining[a];
            tr.cum_cost = if tr.budget.is_finite() {
                (tr.budget - tr.remaining).max(0.0)
            } else {
                tr.cum_cost + auction.costs[a]
            };
            tr.cum_value += rewards[a];
            tr.step_costs.push(auction.costs[a]);
            tr.step_wins.push(auction.wins[a]);
            tr.step_auctions.push(batch.per_impression.len() as u64);
            tr.step_won_values.push(auction.won_value_sums[a]);
            tr.step_lambdas.push(lambdas[a]);
            tr.step_rewards.push(rewards[a]);
            if rewards[a] > tr.max_step_reward {
                tr.max_step_reward = rewards[a];
            }
        }
        self.step += 1;
        Ok(StepOutcome {
            rewards,
            costs: auction.costs,
            wins: auction.wins,
            num_impressions: batch.per_impression.len(),
        })
    }
}

/// Runs a full delivery period, driving each agent with its policy.
/// Deterministic given (config, episode_seed, policies).
pub fn run_episode(
    config: &EnvConfig,
    policies: &mut [Box<dyn BidPolicy + '_>],
    episode_seed: u64,
) -> Result<Vec<EpisodeLog>, EnvError> {
    run_episode_with_budgets(config, policies, episode_seed, None)
}

pub fn run_episode_with_budgets(
    config: &EnvConfig,
    policies: &mut [Box<dyn BidPolicy + '_>],
    episode_seed: u64,
    budget_override: Option<&[f64]>,
) -> Result<Vec<EpisodeLog>, EnvError> {
    if policies.len() != config.num_agents {
        return Err(EnvError::WrongAgentCount {
            expected: config.num_agents,
            got: policies.len(),
        });
    }
    let mut episode = Episode::with_budgets(config, episode_seed, budget_override)?;
    for policy in policies.iter_mut() {
        policy.begin_episode(episode_seed);
    }

    let n = config.num_agents;
    let mut logs: Vec<EpisodeLog> = (0..n)
        .map(|a| EpisodeLog {
            episode_seed,
            agent: a,
            num_steps: config.num_steps,
            budget: budget_override
                .map(|bs| bs[a])
                .unwrap_or(config.budget_per_agent),
            cpa_limit: config.cpa_limit,
            states: Vec::with_capacity(config.num_steps),
            actions: Vec::with_capacity(config.num_steps),
            rewards: Vec::with_capacity(config.num_steps),
            step_costs: Vec::with_capacity(config.num_steps),
            cum_costs: Vec::with_capacity(config.num_steps),
            cum_values: Vec::with_capacity(config.num_steps),
            wins: Vec::with_capacity(config.num_steps),
            auctions: Vec::with_capacity(config.num_steps),
        })
        .collect();

    while !episode.finished() {
        let mut lambdas = Vec::with_capacity(n);
        for (a, policy) in policies.iter_mut().enumerate() {
            let obs = episode.observation(a);
            let lambda = policy.bid_coefficient(&obs).max(0.0);
            logs[a].states.push(obs.features);
            lambdas.push(lambda);
        }
        let outcome = episode.step(&lambdas)?;
        for a in 0..n {
            let tr = &episode.trackers[a];
            logs[a].actions.push(lambdas[a]);
            logs[a].rewards.push(outcome.rewards[a]);
            logs[a].step_costs.push(outcome.costs[a]);
            logs[a].cum_costs.push(tr.cum_cost);
            logs[a].cum_values.push(tr.cum_value);
            logs[a].wins.push(outcome.wins[a]);
            logs[a].auctions.push(outcome.num_impressions as u64);
        }
    }
    Ok(logs)
}

/// Manifest stored alongside a newline-delimited episode log file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeLogManifest {
    pub format_version: u32,
    pub config: EnvConfig,
    pub num_episodes: usize,
    pub num_logs: usize,
}

pub const EPISODE_LOG_VERSION: u32 = 1;

/// Writes one JSON record per agent-episode plus a manifest carrying the
/// config and seed.
pub fn save_episode_logs(
    dir: &Path,
    config: &EnvConfig,
    logs: &[EpisodeLog],
    num_episodes: usize,
) -> Result<(), EnvError> {
    std::fs::create_dir_all(dir)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join("episodes.ndjson"))?);
    for log in logs {
        serde_json::to_writer(&mut file, log)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    let manifest = EpisodeLogManifest {
        format_version: EPISODE_LOG_VERSION,
        config: config.clone(),
        num_episodes,
        num_logs: logs.len(),
    };
    std::fs::write(
        dir.join("episodes_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_episode_logs(dir: &Path) -> Result<(EpisodeLogManifest, Vec<EpisodeLog>), EnvError> {
    let manifest: EpisodeLogManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("episodes_manifest.json"))?)?;
    if manifest.format_version != EPISODE_LOG_VERSION {
        return Err(EnvError::InvalidConfig(format!(
            "unsupported episode log version {}",
            manifest.format_version
        )));
    }
    let file = std::io::BufReader::new(std::fs::File::open(dir.join("episodes.ndjson"))?);
    let mut logs = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        logs.push(serde_json::from_str(&line)?);
    }
    Ok((manifest, logs))
}
