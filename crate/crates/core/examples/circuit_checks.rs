//! Structural validation, leaf density bounds, the marginal dominance property and the
//! credibility/entropy bound.

use credfuse::circuit::{check_leaf_density_bound, DirichletLeaf, LeafDist};
use credfuse::fusion::theorem1_bound_check;
use credfuse::inference::check_marginal_dominance;
use credfuse::{build_fusion_circuit, InitConfig};

fn main() -> credfuse::Result<()> {
    // uniform Dirichlet leaves are the only ones bounded by one at K = 2
    let bounded = InitConfig {
        alpha_low: 1.0,
        alpha_high: 1.0,
        ..InitConfig::default()
    };
    let circuit = build_fusion_circuit(2, 2, 3, 5, &bounded)?;
    println!(
        "smooth {}, decomposable {}",
        circuit.validate_smooth().is_ok(),
        circuit.validate_decomposable().is_ok()
    );
    println!(
        "dominance violations: {}",
        check_marginal_dominance(&circuit, 50)?.len()
    );
    for e in theorem1_bound_check(&circuit, 5000, 50, 0)? {
        println!(
            "modality {}: E[C] = {:.4} ± {:.4} >= {:.4}: {}",
            e.modality, e.lhs, e.stderr, e.rhs, e.satisfied
        );
    }

    let mut peaked = circuit.clone();
    let leaf = peaked
        .leaves()
        .find(|(_, v, _)| !v.is_target())
        .map(|(id, _, _)| id)
        .expect("a Dirichlet leaf");
    let dist = LeafDist::Dirichlet(DirichletLeaf::new(vec![5.0, 5.0])?);
    println!(
        "Dir(5,5) max density {:.3}",
        check_leaf_density_bound(&dist).max_density
    );
    peaked.set_leaf(leaf, dist)?;
    println!(
        "dominance violations with a Dir(5,5) leaf: {}",
        check_marginal_dominance(&peaked, 50)?.len()
    );
    Ok(())
}
