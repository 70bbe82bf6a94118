//! Validation credibility across training epochs with one modality pre-noised.

use credfuse::experiments::{reference_dataset, reference_model_config, run_credibility_epochs, NoiseConfig};
use credfuse::train::OptimizerKind;
use credfuse::{FusionMode, TrainConfig};

fn main() -> credfuse::Result<()> {
    let data = reference_dataset(1)?;
    let config = TrainConfig {
        optimizer: OptimizerKind::Adam,
        eta1: 0.003,
        eta2: 0.003,
        t_max: 340,
        ..TrainConfig::default()
    };
    let noise = NoiseConfig {
        lambdas: vec![0.2, 1.0],
        ..NoiseConfig::default()
    };
    for t in run_credibility_epochs(&data, FusionMode::Cwm, &reference_model_config(), &config, &noise)? {
        println!("lambda {}", t.lambda);
        println!("  initial  {:.3?}", t.initial);
        for (e, c) in t.epochs.iter().enumerate().step_by(4) {
            println!("  epoch {:>2} {:.3?}", e + 1, c);
        }
    }
    Ok(())
}
