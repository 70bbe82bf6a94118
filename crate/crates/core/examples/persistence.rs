//! Saves and reloads datasets, models and CSV tables.

use credfuse::data::{generate_synthetic, load_dataset, save_dataset, split, SynthConfig};
use credfuse::experiments::{load_metrics_csv, save_metrics_csv, MetricsRow};
use credfuse::model::{load_model, save_model};
use credfuse::train::evaluate;
use credfuse::{FusionMode, FusionModel, ModelConfig};

fn main() -> credfuse::Result<()> {
    let dir = std::env::temp_dir().join("credfuse-persistence-example");
    std::fs::create_dir_all(&dir)?;

    let data = split(&generate_synthetic(&SynthConfig::default())?, [0.6, 0.2, 0.2], 0)?;
    save_dataset(&data, dir.join("data.json"))?;
    assert_eq!(load_dataset(dir.join("data.json"))?, data);

    let model = FusionModel::new(FusionMode::Dpc, &data, &ModelConfig::default(), 0)?;
    save_model(&model, dir.join("model.json"))?;
    let reloaded = load_model(dir.join("model.json"))?;

    let rows = vec![MetricsRow {
        method: "dpc".into(),
        lambda: 1.0,
        trial: 0,
        metrics: evaluate(&reloaded, &data)?.1,
    }];
    save_metrics_csv(&rows, dir.join("metrics.csv"))?;
    assert_eq!(load_metrics_csv(dir.join("metrics.csv"))?, rows);
    println!("round trips ok in {}", dir.display());
    Ok(())
}
