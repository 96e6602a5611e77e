// Temporary calibration probe; removed before shipping.
use gave_core::config::RunConfig;
use gave_core::eval::{generate_dataset, round_robin, EvalConfig};
use gave_core::score::ScoreVariant;
use gave_core::trainer::{train, TrainConfig, TrainVariant};

#[test]
#[ignore]
fn probe_tau_and_ordering() {
    let eval = EvalConfig {
        budget_ratios: vec![1.0],
        rounds: 2,
        variant: ScoreVariant::S2,
        ..EvalConfig::default()
    };
    let mut config = RunConfig::default();
    config.model.context = 5;
    config.dataset.context = 5;
    let score = config.score_config().unwrap();
    let dataset = generate_dataset(&config.env, &score, 150, 5).unwrap();

    for tau in [0.99, 0.95, 0.9, 0.8] {
        let mut model_config = config.model;
        model_config.tau = tau;
        let train_config = TrainConfig {
            batch_size: 32,
            max_steps: 2500,
            learning_rate: 3e-4,
            checkpoint_every: 2500,
            log_every: 500,
            seed: 3,
            variant: TrainVariant::Gave,
            ..TrainConfig::default()
        };
        let outcome = train(&dataset, &model_config, &train_config, None, None).unwrap();
        let result = round_robin(&outcome.final_checkpoint, &config.env, &eval, 1.0).unwrap();
        let mean_lambda: f64 =
            result.slots.iter().map(|s| s.mean_lambda).sum::<f64>() / result.slots.len() as f64;
        let last = outcome.metrics.last().unwrap();
        println!(
            "gave tau {tau}: score {:8.2}  lambda {:.3}  w {:.3}  beta {:.3}",
            result.mean_score,
            mean_lambda,
            last.w_mean.unwrap(),
            last.beta_mean,
        );
    }

    for variant in [TrainVariant::Dt, TrainVariant::GaveVa, TrainVariant::GaveV] {
        let train_config = TrainConfig {
            batch_size: 32,
            max_steps: 2500,
            learning_rate: 3e-4,
            checkpoint_every: 2500,
            log_every: 500,
            seed: 3,
            variant,
            ..TrainConfig::default()
        };
        let outcome = train(&dataset, &config.model, &train_config, None, None).unwrap();
        let result = round_robin(&outcome.final_checkpoint, &config.env, &eval, 1.0).unwrap();
        let mean_lambda: f64 =
            result.slots.iter().map(|s| s.mean_lambda).sum::<f64>() / result.slots.len() as f64;
        println!(
            "{:8}: score {:8.2}  lambda {:.3}",
            variant.label(),
            result.mean_score,
            mean_lambda,
        );
    }
}
