//! Builds a small fusion circuit and runs joint, marginal and posterior queries.

use credfuse::inference::{log_joint, log_marginal, posterior_over_target};
use credfuse::{build_fusion_circuit, Evidence, InitConfig, ProbVector};

fn main() -> credfuse::Result<()> {
    let circuit = build_fusion_circuit(2, 3, 4, 7, &InitConfig::default())?;
    println!("{} nodes, {} parameters", circuit.len(), circuit.num_params());

    let p1 = ProbVector::new(vec![0.7, 0.2, 0.1])?;
    let p2 = ProbVector::new(vec![0.2, 0.5, 0.3])?;

    let full = Evidence::full(0, &[p1.clone(), p2.clone()]);
    println!("log P(y=0, p1, p2) = {:.4}", log_joint(&circuit, &full)?);

    let without_p2 = full.clone().without_modality(2);
    println!("log P(y=0, p1)     = {:.4}", log_marginal(&circuit, &without_p2)?);

    let posterior = posterior_over_target(&circuit, &[Some(p1), Some(p2)])?;
    println!("P(Y | p1, p2)      = {:.4?}", posterior.values());
    Ok(())
}
