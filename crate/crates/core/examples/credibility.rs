//! Credibility of each modality: how far the posterior moves when that modality is
//! marginalized out.

use credfuse::circuit::{CategoricalLeaf, DirichletLeaf, LeafDist};
use credfuse::fusion::credibility;
use credfuse::{Circuit, Node, ProbVector, VarId};

fn main() -> credfuse::Result<()> {
    // two components; modality 1 separates them, modality 2 has the same density in both
    let mut nodes = Vec::new();
    let mut products = Vec::new();
    for (y, alpha1) in [([0.9, 0.1], [4.0, 1.0]), ([0.1, 0.9], [1.0, 4.0])] {
        let start = nodes.len();
        nodes.push(Node::Leaf {
            var: VarId::TARGET,
            dist: LeafDist::Categorical(CategoricalLeaf::from_probs(&y)?),
        });
        nodes.push(Node::Leaf {
            var: VarId::modality(1),
            dist: LeafDist::Dirichlet(DirichletLeaf::new(alpha1.to_vec())?),
        });
        nodes.push(Node::Leaf {
            var: VarId::modality(2),
            dist: LeafDist::Dirichlet(DirichletLeaf::new(vec![2.0, 2.0])?),
        });
        nodes.push(Node::Product {
            children: vec![start, start + 1, start + 2],
        });
        products.push(nodes.len() - 1);
    }
    nodes.push(Node::Sum {
        children: products,
        weight_logits: vec![0.0, 0.0],
    });
    let root = nodes.len() - 1;
    let circuit = Circuit::new(nodes, root, 2, 2)?;

    let preds = [ProbVector::new(vec![0.8, 0.2])?, ProbVector::new(vec![0.3, 0.7])?];
    let report = credibility(&circuit, &preds)?;
    println!("raw credibility      {:.4?}", report.raw);
    println!("relative credibility {:.4?}", report.relative);
    println!("posterior            {:.4?}", report.posterior_full);
    Ok(())
}
