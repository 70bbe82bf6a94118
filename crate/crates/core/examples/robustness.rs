//! F1 and AUROC decline of every fusion method when one modality is noised at test time.

use credfuse::experiments::{
    mean_decline, reference_dataset, reference_model_config, run_robustness, train_systems, NoiseConfig,
};
use credfuse::train::OptimizerKind;
use credfuse::{FusionMode, TrainConfig};

fn main() -> credfuse::Result<()> {
    let data = reference_dataset(2)?;
    let config = TrainConfig {
        optimizer: OptimizerKind::Adam,
        eta1: 0.01,
        eta2: 0.01,
        t_max: 400,
        ..TrainConfig::default()
    };
    let systems: Vec<_> = train_systems(&data, &FusionMode::ALL, &reference_model_config(), &config)?
        .into_iter()
        .map(|o| o.model)
        .collect();
    let noise = NoiseConfig {
        lambdas: vec![0.2, 0.5, 1.0],
        trials: 3,
        ..NoiseConfig::default()
    };
    let rows = run_robustness(&data, &systems, &noise)?;
    for mode in FusionMode::ALL {
        for l in [0.2, 0.5] {
            let (f1, se) = mean_decline(&rows, mode.name(), l, |m| m.macro_f1).expect("rows for every method");
            let (auc, _) = mean_decline(&rows, mode.name(), l, |m| m.macro_auroc).expect("rows for every method");
            println!(
                "{:>8} lambda {l}: F1 decline {f1:.4} ± {se:.4}, AUROC decline {auc:.4}",
                mode.name()
            );
        }
    }
    Ok(())
}
