//! Relative credibility of a modality as its predictions are mixed with Dirichlet noise.

use credfuse::data::Split;
use credfuse::experiments::{
    reference_dataset, reference_model_config, run_noise_sweep, spearman, NoiseConfig, SweepConfig,
};
use credfuse::train::OptimizerKind;
use credfuse::{train, FusionMode, FusionModel, TrainConfig};

fn main() -> credfuse::Result<()> {
    let data = reference_dataset(0)?;
    let train_set = data.subset(Split::Train)?;
    let config = TrainConfig {
        optimizer: OptimizerKind::Adam,
        eta1: 0.01,
        eta2: 0.01,
        t_max: 400,
        ..TrainConfig::default()
    };
    let fresh = FusionModel::new(FusionMode::Cwm, &train_set, &reference_model_config(), 0)?;
    let system = train(fresh, &train_set, None, &config)?.model;

    let sweep = SweepConfig {
        noise: NoiseConfig {
            lambdas: vec![0.0, 0.5, 1.0],
            trials: 2,
            ..NoiseConfig::default()
        },
        retrain: TrainConfig {
            t_max: 200,
            track_credibility: false,
            ..config
        },
        retrain_all: false,
    };
    let result = run_noise_sweep(&data, &system, &sweep)?;
    for ((l, c), s) in result.lambdas.iter().zip(&result.credibility).zip(&result.stderr) {
        println!("lambda {l:.2}: credibility {c:.3?} (se {s:.3?})");
    }
    let noised: Vec<f64> = result.credibility.iter().map(|c| c[1]).collect();
    println!(
        "spearman(lambda, modality 2) = {:.3}",
        spearman(&result.lambdas, &noised)
    );
    Ok(())
}
