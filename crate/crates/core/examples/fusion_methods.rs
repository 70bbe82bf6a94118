//! Fuses the same pair of unimodal predictions with every combiner.

use credfuse::fusion::{baseline_mlp, baseline_noisy_or, baseline_weighted_mean, fuse_cwm, fuse_dpc, Mlp};
use credfuse::{build_fusion_circuit, InitConfig, ProbVector};

fn main() -> credfuse::Result<()> {
    let circuit = build_fusion_circuit(2, 3, 4, 1, &InitConfig::default())?;
    let preds = [
        ProbVector::new(vec![0.6, 0.3, 0.1])?,
        ProbVector::new(vec![0.1, 0.3, 0.6])?,
    ];

    println!("dpc      {:.4?}", fuse_dpc(&circuit, &preds)?.values());
    println!("cwm      {:.4?}", fuse_cwm(&circuit, &preds)?.values());
    println!(
        "wm       {:.4?}",
        baseline_weighted_mean(&[0.5, -0.5], &preds)?.values()
    );
    println!("noisyor  {:.4?}", baseline_noisy_or(&preds)?.values());
    println!("mlp      {:.4?}", baseline_mlp(&Mlp::random(2, 3, 1), &preds)?.values());
    Ok(())
}
