//! Scripted competitor agents.
//!
//! Each policy maps the per-step observation to a bid coefficient. The
//! roster of scripted agents stands in for a population of distinct
//! strategies competing in the simulated market: constant coefficients,
//! linear schedules, seeded random walks, and a proportional-integral pacer
//! that targets uniform budget spend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown policy kind '{0}'")]
    UnknownKind(String),
    #[error("invalid policy parameters: {0}")]
    InvalidParams(String),
}

/// What a policy sees before bidding at one time step.
#[derive(Clone, Debug)]
pub struct StepObservation {
    pub step: usize,
    pub num_steps: usize,
    pub features: [f64; 16],
    pub budget: f64,
    pub remaining_budget: f64,
    pub cum_cost: f64,
    pub cum_value: f64,
}

/// A bidding agent: produces the coefficient multiplying its private
/// impression values.
pub trait BidPolicy: Send {
    /// Called once before each episode with a per-episode seed.
    fn begin_episode(&mut self, episode_seed: u64);
    fn bid_coefficient(&mut self, obs: &StepObservation) -> f64;
}

/// Declarative form of a scripted policy, as it appears in configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicySpec {
    ConstantLambda { lambda: f64 },
    LinearPacing { start: f64, end: f64 },
    RandomWalkLambda { start: f64, step: f64, seed: u64 },
    PidPacing { base: f64, kp: f64, ki: f64 },
}

impl PolicySpec {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let ok = match self {
            PolicySpec::ConstantLambda { lambda } => *lambda >= 0.0,
            PolicySpec::LinearPacing { start, end } => *start >= 0.0 && *end >= 0.0,
            PolicySpec::RandomWalkLambda { start, step, .. } => *start >= 0.0 && *step >= 0.0,
            PolicySpec::PidPacing { base, kp, ki } => *base >= 0.0 && *kp >= 0.0 && *ki >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(PolicyError::InvalidParams(format!("{self:?}")))
        }
    }

    pub fn build(&self) -> Result<ScriptedPolicy, PolicyError> {
        self.validate()?;
        Ok(ScriptedPolicy {
            spec: self.clone(),
            walk_lambda: 0.0,
            walk_rng: ChaCha8Rng::seed_from_u64(0),
            pid_lambda: 0.0,
            pid_integral: 0.0,
        })
    }
}

/// Parses a policy kind name, for config and CLI surfaces.
pub fn scripted_policy(kind: &str, params: &[f64], seed: u64) -> Result<ScriptedPolicy, PolicyError> {
    let need = |n: usize| -> Result<(), PolicyError> {
        if params.len() < n {
            Err(PolicyError::InvalidParams(format!(
                "{kind} needs {n} parameter(s), got {}",
                params.len()
            )))
        } else {
            Ok(())
        }
    };
    let spec = match kind {
        "constant-lambda" => {
            need(1)?;
            PolicySpec::ConstantLambda { lambda: params[0] }
        }
        "linear-pacing" => {
            need(2)?;
            PolicySpec::LinearPacing {
                start: params[0],
                end: params[1],
            }
        }
        "random-walk-lambda" => {
            need(2)?;
            PolicySpec::RandomWalkLambda {
                start: params[0],
                step: params[1],
                seed,
            }
        }
        "pid-pacing" => {
            need(3)?;
            PolicySpec::PidPacing {
                base: params[0],
                kp: params[1],
                ki: params[2],
            }
        }
        other => return Err(PolicyError::UnknownKind(other.to_string())),
    };
    spec.build()
}

/// Runtime state for one scripted agent.
pub struct ScriptedPolicy {
    spec: PolicySpec,
    walk_lambda: f64,
    walk_rng: ChaCha8Rng,
    pid_lambda: f64,
    pid_integral: f64,
}

impl ScriptedPolicy {
    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }
}

impl BidPolicy for ScriptedPolicy {
    fn begin_episode(&mut self, episode_seed: u64) {
        match &self.spec {
            PolicySpec::RandomWalkLambda { start, seed, .. } => {
                self.walk_lambda = *start;
                self.walk_rng =
                    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ episode_seed);
            }
            PolicySpec::PidPacing { base, .. } => {
                self.pid_lambda = *base;
                self.pid_integral = 0.0;
            }
            _ => {}
        }
    }

    fn bid_coefficient(&mut self, obs: &StepObservation) -> f64 {
        match &self.spec {
            PolicySpec::ConstantLambda { lambda } => *lambda,
            PolicySpec::LinearPacing { start, end } => {
                if obs.num_steps <= 1 {
                    *start
                } else {
                    let frac = obs.step as f64 / (obs.num_steps - 1) as f64;
                    start + (end - start) * frac
                }
            }
            PolicySpec::RandomWalkLambda { step, .. } => {
                if obs.step > 0 && *step > 0.0 {
                    let delta = self.walk_rng.gen_range(-*step..=*step);
                    self.walk_lambda = (self.walk_lambda + delta).max(0.0);
                }
                self.walk_lambda
            }
            PolicySpec::PidPacing { kp, ki, .. } => {
                if obs.step > 0 {
                    // Positive error means spending ahead of the uniform pace.
                    let elapsed = obs.step as f64 / obs.num_steps as f64;
                    let spent = if obs.budget > 0.0 {
                        obs.cum_cost / obs.budget
                    } else {
                        0.0
                    };
                    let err = spent - elapsed;
                    self.pid_integral += err;
                    let factor = 1.0 - kp * err - ki * self.pid_integral;
                    self.pid_lambda = (self.pid_lambda * factor).max(0.0);
                }
                self.pid_lambda
            }
        }
    }
}

/// Deterministic desk-scale roster: constants, schedules, walkers and
/// pacers, jittered per agent so repeated episodes cover a spread of
/// behaviors. Walkers and pacers matter for offline data quality: they
/// produce both drifting and self-correcting coefficient patterns.
pub fn default_roster(num_agents: usize, seed: u64) -> Vec<ScriptedPolicy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA076_1D64_78BD_642F);
    (0..num_agents)
        .map(|i| {
            let jitter = rng.gen_range(0.85..1.2);
            let spec = match i % 8 {
                // Coverage on both sides of the competitive sweet spot, with
                // most of the mass above it.
                0 => PolicySpec::ConstantLambda { lambda: 0.65 * jitter },
                1 => PolicySpec::ConstantLambda { lambda: 1.05 * jitter },
                2 => PolicySpec::ConstantLambda { lambda: 1.35 * jitter },
                3 => PolicySpec::LinearPacing {
                    start: 1.6 * jitter,
                    end: 0.8 * jitter,
                },
                4 => PolicySpec::LinearPacing {
                    start: 0.8 * jitter,
                    end: 1.6 * jitter,
                },
                5 => PolicySpec::RandomWalkLambda {
                    start: 1.1 * jitter,
                    step: 0.15,
                    seed: seed.wrapping_add(i as u64),
                },
                6 => PolicySpec::PidPacing {
                    base: 1.25 * jitter,
                    kp: 2.0,
                    ki: 0.2,
                },
                _ => PolicySpec::RandomWalkLambda {
                    start: 1.3 * jitter,
                    step: 0.25,
                    seed: seed.wrapping_add(i as u64),
                },
            };
            spec.build().expect("default roster specs are valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(step: usize, num_steps: usize, budget: f64, cum_cost: f64) -> StepObservation {
        StepObservation {
            step,
            num_steps,
            features: [0.0; 16],
            budget,
            remaining_budget: budget - cum_cost,
            cum_cost,
            cum_value: 0.0,
        }
    }

    #[test]
    fn constant_policy_is_constant() {
        let mut p = scripted_policy("constant-lambda", &[1.5], 0).unwrap();
        p.begin_episode(1);
        for t in 0..10 {
            assert_eq!(p.bid_coefficient(&obs(t, 10, 100.0, 0.0)), 1.5);
        }
    }

    #[test]
    fn zero_step_walk_is_constant() {
        let mut p = scripted_policy("random-walk-lambda", &[0.8, 0.0], 3).unwrap();
        p.begin_episode(7);
        for t in 0..10 {
            assert_eq!(p.bid_coefficient(&obs(t, 10, 100.0, 0.0)), 0.8);
        }
    }

    #[test]
    fn walk_is_reproducible_per_episode_seed() {
        let run = |episode_seed: u64| {
            let mut p = scripted_policy("random-walk-lambda", &[1.0, 0.3], 5).unwrap();
            p.begin_episode(episode_seed);
            (0..20)
                .map(|t| p.bid_coefficient(&obs(t, 20, 100.0, 0.0)))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn pid_reduces_lambda_after_overspend() {
        let mut p = scripted_policy("pid-pacing", &[1.2, 2.0, 0.2], 0).unwrap();
        p.begin_episode(0);
        let first = p.bid_coefficient(&obs(0, 10, 100.0, 0.0));
        // Spent 40% of budget after 10% of the period.
        let next = p.bid_coefficient(&obs(1, 10, 100.0, 40.0));
        assert!(next < first, "{next} !< {first}");
    }

    #[test]
    fn linear_pacing_interpolates() {
        let mut p = scripted_policy("linear-pacing", &[1.0, 2.0], 0).unwrap();
        p.begin_episode(0);
        assert_eq!(p.bid_coefficient(&obs(0, 11, 100.0, 0.0)), 1.0);
        assert!((p.bid_coefficient(&obs(5, 11, 100.0, 0.0)) - 1.5).abs() < 1e-12);
        assert_eq!(p.bid_coefficient(&obs(10, 11, 100.0, 0.0)), 2.0);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert_eq!(
            scripted_policy("bogus", &[], 0).err(),
            Some(PolicyError::UnknownKind("bogus".into()))
        );
    }

    #[test]
    fn default_roster_is_deterministic() {
        let a: Vec<_> = default_roster(8, 1).iter().map(|p| p.spec().clone()).collect();
        let b: Vec<_> = default_roster(8, 1).iter().map(|p| p.spec().clone()).collect();
        assert_eq!(a, b);
    }
}
