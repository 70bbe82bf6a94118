//! Generates a synthetic two-modality dataset, trains a CWM system and reports test
//! metrics and mean credibility.

use credfuse::data::{generate_synthetic, split, Split, SynthConfig};
use credfuse::train::{credibility_summary, evaluate, OptimizerKind};
use credfuse::{train, FusionMode, FusionModel, ModelConfig, TrainConfig};

fn main() -> credfuse::Result<()> {
    let synth = SynthConfig {
        num_classes: 3,
        num_examples: 600,
        modality_noise: vec![1.0, 4.0],
        ..SynthConfig::default()
    };
    let data = split(&generate_synthetic(&synth)?, [0.6, 0.2, 0.2], 0)?;
    let (train_set, val, test) = (
        data.subset(Split::Train)?,
        data.subset(Split::Val)?,
        data.subset(Split::Test)?,
    );

    let model = FusionModel::new(FusionMode::Cwm, &train_set, &ModelConfig::default(), 0)?;
    let config = TrainConfig {
        optimizer: OptimizerKind::Adam,
        eta1: 0.01,
        eta2: 0.01,
        t_max: 600,
        ..TrainConfig::default()
    };
    let outcome = train(model, &train_set, Some(&val), &config)?;
    for r in outcome.history.iter().step_by(8) {
        println!(
            "epoch {:>3}  loss {:8.4}  val acc {:.3}",
            r.epoch,
            r.loss,
            r.val_accuracy.unwrap_or(f64::NAN)
        );
    }

    let (loss, metrics) = evaluate(&outcome.model, &test)?;
    println!(
        "test loss {loss:.4}, accuracy {:.3}, macro F1 {:.3}, AUROC {:.3}",
        metrics.accuracy, metrics.macro_f1, metrics.macro_auroc
    );
    let (mean, se) = credibility_summary(&outcome.model, &test)?;
    println!("mean relative credibility {mean:.3?} (se {se:.3?})");
    Ok(())
}
