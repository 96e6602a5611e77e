//! CPA-penalized scoring and the score-based return-to-go.
//!
//! A delivery period is scored as `penalty(CPA) * total_value`, where the
//! penalty is `min((C/CPA)^gamma, 1)`. Generalizing the score to every prefix
//! of an episode gives a per-step score `S_t`, and the return-to-go for step
//! `t` is `r_t = S_T - S_{t-1}` (with `S_0 = 0`): the score still left to
//! collect. Variant `S1` drops the penalty entirely, which collapses the RTG
//! to the plain reward-sum form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("cpa_limit must be positive, got {0}")]
    NonPositiveCpaLimit(f64),
    #[error("gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("variant {variant:?} requires gamma {expected}, got {got}")]
    GammaMismatch {
        variant: ScoreVariant,
        expected: f64,
        got: f64,
    },
    #[error("cannot build an RTG sequence for an empty episode")]
    EmptyEpisode,
}

/// How heavily the CPA constraint weighs on the score.
///
/// `S1` ignores it, `S2` squares the penalty ratio (the headline metric),
/// `S3` raises it to the fifth power for strict-CPA objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreVariant {
    S1,
    S2,
    S3,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 3] = [ScoreVariant::S1, ScoreVariant::S2, ScoreVariant::S3];

    /// Penalty exponent for the variant; `None` means no penalty at all.
    pub fn penalty_exponent(self) -> Option<f64> {
        match self {
            ScoreVariant::S1 => None,
            ScoreVariant::S2 => Some(2.0),
            ScoreVariant::S3 => Some(5.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ScoreVariant::S1 => "s1",
            ScoreVariant::S2 => "s2",
            ScoreVariant::S3 => "s3",
        }
    }
}

impl std::str::FromStr for ScoreVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(ScoreVariant::S1),
            "s2" => Ok(ScoreVariant::S2),
            "s3" => Ok(ScoreVariant::S3),
            other => Err(format!("unknown score variant '{other}' (expected s1, s2 or s3)")),
        }
    }
}

/// Scoring parameters: the CPA limit `C`, the penalty exponent, and the
/// variant selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub cpa_limit: f64,
    pub gamma: f64,
    pub variant: ScoreVariant,
}

impl ScoreConfig {
    /// Builds a config with the exponent implied by the variant
    /// (`S1` carries a nominal gamma of 1; the penalty is identically 1).
    pub fn new(cpa_limit: f64, variant: ScoreVariant) -> Result<Self, ScoreError> {
        let gamma = variant.penalty_exponent().unwrap_or(1.0);
        let config = Self {
            cpa_limit,
            gamma,
            variant,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.cpa_limit > 0.0) {
            return Err(ScoreError::NonPositiveCpaLimit(self.cpa_limit));
        }
        if !(self.gamma > 0.0) {
            return Err(ScoreError::NonPositiveGamma(self.gamma));
        }
        if let Some(expected) = self.variant.penalty_exponent() {
            if self.gamma != expected {
                return Err(ScoreError::GammaMismatch {
                    variant: self.variant,
                    expected,
                    got: self.gamma,
                });
            }
        }
        Ok(())
    }
}

/// Cumulative cost and acquired value over a prefix of an episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefixStats {
    pub cum_cost: f64,
    pub cum_value: f64,
}

impl PrefixStats {
    pub fn new(cum_cost: f64, cum_value: f64) -> Self {
        Self {
            cum_cost,
            cum_value,
        }
    }
}

/// Per-step return-to-go values `r_1..r_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtgSequence {
    pub values: Vec<f64>,
}

impl RtgSequence {
    /// The initial RTG, which equals the total episode score.
    pub fn total(&self) -> f64 {
        self.values[0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cost per acquired value. Degenerate prefixes are defined explicitly:
/// an empty prefix has CPA 0 (so the penalty is 1), while cost with no value
/// yields +infinity (penalty 0).
pub fn compute_cpa(stats: PrefixStats) -> f64 {
    if stats.cum_value == 0.0 {
        if stats.cum_cost > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        stats.cum_cost / stats.cum_value
    }
}

/// `min((C/cpa)^gamma, 1)`, clamped to 1 whenever `cpa <= C`.
pub fn penalty(cpa: f64, config: &ScoreConfig) -> f64 {
    if config.variant.penalty_exponent().is_none() {
        return 1.0;
    }
    if cpa <= config.cpa_limit {
        return 1.0;
    }
    if cpa.is_infinite() {
        return 0.0;
    }
    let ratio = config.cpa_limit / cpa;
    ratio.powf(config.gamma).min(1.0)
}

/// Penalized prefix score `S_t = penalty(CPA_t) * cum_value`.
pub fn score_at(stats: PrefixStats, config: &ScoreConfig) -> f64 {
    penalty(compute_cpa(stats), config) * stats.cum_value
}

/// Builds the RTG sequence `r_t = S_T - S_{t-1}` from per-step cumulative
/// prefixes (`step_stats[t-1]` holds the sums through step `t`).
pub fn rtg_sequence(
    step_stats: &[PrefixStats],
    config: &ScoreConfig,
) -> Result<RtgSequence, ScoreError> {
    if step_stats.is_empty() {
        return Err(ScoreError::EmptyEpisode);
    }
    let scores: Vec<f64> = step_stats.iter().map(|s| score_at(*s, config)).collect();
    let final_score = *scores.last().unwrap();
    let mut values = Vec::with_capacity(scores.len());
    let mut previous = 0.0;
    for &s in &scores {
        values.push(final_score - previous);
        previous = s;
    }
    Ok(RtgSequence { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s2(cpa_limit: f64) -> ScoreConfig {
        ScoreConfig::new(cpa_limit, ScoreVariant::S2).unwrap()
    }

    #[test]
    fn cpa_is_the_cost_value_ratio() {
        assert_eq!(compute_cpa(PrefixStats::new(10.0, 5.0)), 2.0);
    }

    #[test]
    fn cpa_empty_prefix_is_zero() {
        assert_eq!(compute_cpa(PrefixStats::new(0.0, 0.0)), 0.0);
    }

    #[test]
    fn cpa_cost_without_value_is_infinite() {
        assert_eq!(compute_cpa(PrefixStats::new(3.0, 0.0)), f64::INFINITY);
    }

    #[test]
    fn penalty_clamps_below_the_limit() {
        let config = s2(2.0);
        assert_eq!(penalty(1.0, &config), 1.0);
        assert_eq!(penalty(0.0, &config), 1.0);
        assert_eq!(penalty(2.0, &config), 1.0);
    }

    #[test]
    fn penalty_squares_the_ratio() {
        let config = s2(2.0);
        assert_eq!(penalty(4.0, &config), 0.25);
    }

    #[test]
    fn penalty_fifth_power() {
        let config = ScoreConfig::new(2.0, ScoreVariant::S3).unwrap();
        assert_eq!(penalty(4.0, &config), 0.03125);
    }

    #[test]
    fn penalty_infinite_cpa_is_zero() {
        assert_eq!(penalty(f64::INFINITY, &s2(2.0)), 0.0);
    }

    #[test]
    fn score_with_satisfied_cpa_is_the_value() {
        let got = score_at(PrefixStats::new(10.0, 10.0), &s2(2.0));
        assert_eq!(got, 10.0);
    }

    #[test]
    fn score_with_violated_cpa_is_penalized() {
        // CPA = 4, penalty = (2/4)^2 = 0.25, score = 0.25 * 10.
        let got = score_at(PrefixStats::new(40.0, 10.0), &s2(2.0));
        assert_eq!(got, 2.5);
    }

    #[test]
    fn score_of_empty_prefix_is_zero() {
        for variant in ScoreVariant::ALL {
            let config = ScoreConfig::new(2.0, variant).unwrap();
            assert_eq!(score_at(PrefixStats::new(0.0, 0.0), &config), 0.0);
        }
    }

    #[test]
    fn rtg_telescopes_per_step_scores() {
        // Per-step scores S = [1, 3, 6] under S1 (costs zero).
        let stats = [
            PrefixStats::new(0.0, 1.0),
            PrefixStats::new(0.0, 3.0),
            PrefixStats::new(0.0, 6.0),
        ];
        let config = ScoreConfig::new(2.0, ScoreVariant::S1).unwrap();
        let rtg = rtg_sequence(&stats, &config).unwrap();
        assert_eq!(rtg.values, vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn rtg_of_all_zero_episode_is_zero() {
        let stats = vec![PrefixStats::default(); 5];
        let rtg = rtg_sequence(&stats, &s2(2.0)).unwrap();
        assert_eq!(rtg.values, vec![0.0; 5]);
    }

    #[test]
    fn rtg_single_step_equals_final_score() {
        let stats = [PrefixStats::new(0.0, 4.0)];
        let config = ScoreConfig::new(2.0, ScoreVariant::S1).unwrap();
        let rtg = rtg_sequence(&stats, &config).unwrap();
        assert_eq!(rtg.values, vec![4.0]);
    }

    #[test]
    fn rtg_rejects_empty_episode() {
        assert!(matches!(
            rtg_sequence(&[], &s2(2.0)),
            Err(ScoreError::EmptyEpisode)
        ));
    }

    #[test]
    fn config_rejects_bad_parameters() {
        assert!(ScoreConfig::new(0.0, ScoreVariant::S2).is_err());
        assert!(ScoreConfig {
            cpa_limit: 1.0,
            gamma: 3.0,
            variant: ScoreVariant::S2,
        }
        .validate()
        .is_err());
        assert!(ScoreConfig {
            cpa_limit: 1.0,
            gamma: -1.0,
            variant: ScoreVariant::S1,
        }
        .validate()
        .is_err());
    }

    #[test]
    fn penalty_is_nonincreasing_in_cpa() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let config = s2(1.5);
        let mut samples: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..20.0)).collect();
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut last = f64::INFINITY;
        for cpa in samples {
            let p = penalty(cpa, &config);
            assert!(p <= last + 1e-15, "penalty rose at cpa={cpa}");
            last = p;
        }
    }

    #[test]
    fn stricter_exponent_never_pays_more() {
        let loose = s2(2.0);
        let strict = ScoreConfig::new(2.0, ScoreVariant::S3).unwrap();
        for i in 1..50 {
            let cpa = 2.0 + i as f64 * 0.37;
            assert!(penalty(cpa, &strict) <= penalty(cpa, &loose));
        }
    }

    fn arbitrary_prefixes() -> impl Strategy<Value = Vec<PrefixStats>> {
        // Per-step increments keep prefixes nondecreasing.
        prop::collection::vec((0.0f64..5.0, 0.0f64..3.0), 1..40).prop_map(|increments| {
            let mut cost = 0.0;
            let mut value = 0.0;
            increments
                .into_iter()
                .map(|(dc, dv)| {
                    cost += dc;
                    value += dv;
                    PrefixStats::new(cost, value)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn rtg_differences_telescope(stats in arbitrary_prefixes(), variant_idx in 0usize..3) {
            let config = ScoreConfig::new(1.2, ScoreVariant::ALL[variant_idx]).unwrap();
            let rtg = rtg_sequence(&stats, &config).unwrap();
            let scores: Vec<f64> = stats.iter().map(|s| score_at(*s, &config)).collect();
            for t in 0..stats.len() - 1 {
                let lhs = rtg.values[t] - rtg.values[t + 1];
                let prev = if t == 0 { 0.0 } else { scores[t - 1] };
                let rhs = scores[t] - prev;
                prop_assert!((lhs - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn s1_rtg_matches_plain_reward_sum(stats in arbitrary_prefixes()) {
            let config = ScoreConfig::new(1.2, ScoreVariant::S1).unwrap();
            let rtg = rtg_sequence(&stats, &config).unwrap();
            // Recover per-step rewards from the value prefix and sum the tail.
            let mut rewards = Vec::with_capacity(stats.len());
            let mut prev = 0.0;
            for s in &stats {
                rewards.push(s.cum_value - prev);
                prev = s.cum_value;
            }
            for t in 0..stats.len() {
                let tail: f64 = rewards[t..].iter().sum();
                prop_assert!((rtg.values[t] - tail).abs() < 1e-9);
                prop_assert!(rtg.values[t] >= -1e-12);
            }
        }
    }
}
