//! Exact log-space evaluation of the circuit: joints, marginals, the posterior over `Y`,
//! reverse-mode gradients, and brute-force oracles over a simplex grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{log_weights, Circuit, CircuitGrads, LeafDist, Node, VarId, ALPHA_FLOOR};
use crate::error::{Error, Result};
use crate::special::{digamma, log_sum_exp};

/// Probabilities are clamped into `[CLAMP, 1 - CLAMP]` and renormalized before any
/// Dirichlet evaluation.
pub const CLAMP: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-7;

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidEvidence(
                "probability vector needs at least 2 entries".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidEvidence(format!(
                "{values:?} has a negative or non-finite entry"
            )));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidEvidence(format!("{values:?} sums to {total}")));
        }
        Ok(ProbVector(values))
    }

    pub fn uniform(k: usize) -> Self {
        ProbVector(vec![1.0 / k as f64; k])
    }

    pub(crate) fn new_unchecked(values: Vec<f64>) -> Self {
        ProbVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Clamps into `[CLAMP, 1 - CLAMP]` and renormalizes.
pub fn clamp_simplex(p: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|x| x.clamp(CLAMP, 1.0 - CLAMP)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.into_iter().map(|x| x / total).collect()
}

/// A partial assignment: `modalities[j - 1]` holds the block of variable `j`; `None`
/// entries (and a `None` target) are marginalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Evidence {
    pub target: Option<usize>,
    pub modalities: Vec<Option<ProbVector>>,
}

impl Evidence {
    pub fn empty(num_modalities: usize) -> Self {
        Evidence {
            target: None,
            modalities: vec![None; num_modalities],
        }
    }

    pub fn full(target: usize, preds: &[ProbVector]) -> Self {
        Evidence {
            target: Some(target),
            modalities: preds.iter().cloned().map(Some).collect(),
        }
    }

    /// All modality blocks observed, target marginalized.
    pub fn observed(preds: &[ProbVector]) -> Self {
        Evidence {
            target: None,
            modalities: preds.iter().cloned().map(Some).collect(),
        }
    }

    pub fn with_target(mut self, target: Option<usize>) -> Self {
        self.target = target;
        self
    }

    pub fn without_modality(mut self, j: usize) -> Self {
        self.modalities[j - 1] = None;
        self
    }

    pub fn is_full(&self) -> bool {
        self.target.is_some() && self.modalities.iter().all(Option::is_some)
    }

    pub fn observes(&self, var: VarId) -> bool {
        if var.is_target() {
            self.target.is_some()
        } else {
            self.modalities.get(var.0 - 1).is_some_and(Option::is_some)
        }
    }

    pub fn check(&self, circuit: &Circuit) -> Result<()> {
        let k = circuit.num_classes();
        if self.modalities.len() != circuit.num_modalities() {
            return Err(Error::InvalidEvidence(format!(
                "{} modality slots for a circuit with M = {}",
                self.modalities.len(),
                circuit.num_modalities()
            )));
        }
        if let Some(y) = self.target {
            if y >= k {
                return Err(Error::InvalidEvidence(format!("class {y} out of range for K = {k}")));
            }
        }
        for (j, p) in self.modalities.iter().enumerate() {
            if let Some(p) = p {
                if p.len() != k {
                    return Err(Error::InvalidEvidence(format!(
                        "modality {} has {} entries, expected {k}",
                        j + 1,
                        p.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The value a single leaf is evaluated at.
#[derive(Clone, Copy, Debug)]
pub enum LeafValue<'a> {
    Class(usize),
    Simplex(&'a [f64]),
    Marginalized,
}

/// Log-density of one leaf. Simplex points are clamped; a marginalized leaf gives 0.
pub fn leaf_log_density(leaf: &LeafDist, value: LeafValue<'_>) -> Result<f64> {
    match (leaf, value) {
        (_, LeafValue::Marginalized) => Ok(0.0),
        (LeafDist::Categorical(c), LeafValue::Class(y)) => c
            .log_probs()
            .get(y)
            .copied()
            .ok_or_else(|| Error::InvalidEvidence(format!("class {y} out of range"))),
        (LeafDist::Dirichlet(d), LeafValue::Simplex(p)) => {
            if p.len() != d.num_classes() {
                return Err(Error::InvalidEvidence("simplex point has the wrong length".into()));
            }
            Ok(d.log_density_interior(&clamp_simplex(p)))
        }
        _ => Err(Error::InvalidEvidence("value does not match the leaf family".into())),
    }
}

/// Cached per-node log-values of one bottom-up pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub values: Vec<f64>,
    /// Clamped evidence blocks actually used by the Dirichlet leaves.
    clamped: Vec<Option<Vec<f64>>>,
    target: Option<usize>,
    root: usize,
}

impl ForwardPass {
    pub fn log_value(&self) -> f64 {
        self.values[self.root]
    }
}

/// One bottom-up sweep in topological order.
pub fn forward(circuit: &Circuit, evidence: &Evidence) -> Result<ForwardPass> {
    evidence.check(circuit)?;
    let clamped: Vec<Option<Vec<f64>>> = evidence
        .modalities
        .iter()
        .map(|p| p.as_ref().map(|p| clamp_simplex(p.values())))
        .collect();
    let log_clamped: Vec<Option<Vec<f64>>> = clamped
        .iter()
        .map(|q| q.as_ref().map(|q| q.iter().map(|x| x.ln()).collect()))
        .collect();

    let mut values: Vec<f64> = Vec::with_capacity(circuit.len());
    for (id, node) in circuit.nodes().iter().enumerate() {
        let v = match node {
            Node::Leaf { var, dist } => {
                let v = match dist {
                    LeafDist::Categorical(c) => match evidence.target {
                        Some(y) => c.log_probs()[y],
                        None => 0.0,
                    },
                    LeafDist::Dirichlet(d) => match &log_clamped[var.0 - 1] {
                        Some(lq) => {
                            d.log_normalizer() + d.alpha().iter().zip(lq).map(|(a, l)| (a - 1.0) * l).sum::<f64>()
                        }
                        None => 0.0,
                    },
                };
                if !v.is_finite() {
                    return Err(Error::NonFinite { node: id, value: v });
                }
                v
            }
            Node::Product { children } => children.iter().map(|&c| values[c]).sum(),
            Node::Sum {
                children,
                weight_logits,
            } => {
                let lse_w = log_sum_exp(weight_logits);
                let max = children
                    .iter()
                    .zip(weight_logits)
                    .map(|(&c, w)| w + values[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    let s: f64 = children
                        .iter()
                        .zip(weight_logits)
                        .map(|(&c, w)| (w + values[c] - max).exp())
                        .sum();
                    max + s.ln() - lse_w
                }
            }
        };
        values.push(v);
    }
    Ok(ForwardPass {
        values,
        clamped,
        target: evidence.target,
        root: circuit.root(),
    })
}

/// `log P(y, p_1..p_M)`; every variable must be observed.
pub fn log_joint(circuit: &Circuit, evidence: &Evidence) -> Result<f64> {
    if !evidence.is_full() {
        return Err(Error::InvalidEvidence("log_joint needs every variable observed".into()));
    }
    Ok(forward(circuit, evidence)?.log_value())
}

/// Log-density of the observed variables with every absent one integrated out.
pub fn log_marginal(circuit: &Circuit, evidence: &Evidence) -> Result<f64> {
    Ok(forward(circuit, evidence)?.log_value())
}

/// `P(Y | observed modalities)` by enumerating the `K` classes.
pub fn posterior_over_target(circuit: &Circuit, modalities: &[Option<ProbVector>]) -> Result<ProbVector> {
    let logs = target_log_joints(circuit, modalities)?;
    Ok(normalize_logs(&logs)?.0)
}

/// `log P(y, observed)` for every class `y`.
pub fn target_log_joints(circuit: &Circuit, modalities: &[Option<ProbVector>]) -> Result<Vec<f64>> {
    let mut ev = Evidence {
        target: None,
        modalities: modalities.to_vec(),
    };
    (0..circuit.num_classes())
        .map(|y| {
            ev.target = Some(y);
            log_marginal(circuit, &ev)
        })
        .collect()
}

/// Softmax of class log-joints, with the degenerate all `-inf` case reported.
fn normalize_logs(logs: &[f64]) -> Result<(ProbVector, f64)> {
    let lse = log_sum_exp(logs);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateEvidence);
    }
    Ok((ProbVector(logs.iter().map(|l| (l - lse).exp()).collect()), lse))
}

/// Gradients of a scalar with respect to circuit parameters and supplied evidence blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: CircuitGrads,
    /// Per modality `j - 1`, the gradient w.r.t. the (clamped) block; zeros when absent.
    pub evidence: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(circuit: &Circuit) -> Self {
        Gradients {
            params: CircuitGrads::zeros(circuit),
            evidence: vec![vec![0.0; circuit.num_classes()]; circuit.num_modalities()],
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        self.params.add_scaled(&other.params, scale);
        for (a, b) in self.evidence.iter_mut().zip(&other.evidence) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }
}

/// Reverse sweep of `log value(root)`, accumulating `theta_upstream` times the parameter
/// gradient and `evidence_upstream` times the evidence gradient into `out`.
pub fn backward_into(
    circuit: &Circuit,
    pass: &ForwardPass,
    theta_upstream: f64,
    evidence_upstream: f64,
    out: &mut Gradients,
) -> Result<()> {
    if pass.values.len() != circuit.len() || pass.root != circuit.root() {
        return Err(Error::Usage("forward pass does not belong to this circuit".into()));
    }
    if theta_upstream == 0.0 && evidence_upstream == 0.0 {
        return Ok(());
    }
    let v = &pass.values;
    let mut adj = vec![0.0; circuit.len()];
    adj[circuit.root()] = 1.0;
    for id in (0..circuit.len()).rev() {
        let a = adj[id];
        if a == 0.0 {
            continue;
        }
        match &circuit.nodes()[id] {
            Node::Product { children } => {
                for &c in children {
                    adj[c] += a;
                }
            }
            Node::Sum {
                children,
                weight_logits,
            } => {
                if v[id] == f64::NEG_INFINITY {
                    continue;
                }
                let lw = log_weights(weight_logits);
                let g = &mut out.params.nodes[id];
                for (k, (&c, l)) in children.iter().zip(&lw).enumerate() {
                    let r = (l + v[c] - v[id]).exp();
                    adj[c] += a * r;
                    g[k] += theta_upstream * a * (r - l.exp());
                }
            }
            Node::Leaf { var, dist } => match dist {
                LeafDist::Categorical(cat) => {
                    if let Some(y) = pass.target {
                        let g = &mut out.params.nodes[id];
                        for (k, lp) in cat.log_probs().iter().enumerate() {
                            let onehot = if k == y { 1.0 } else { 0.0 };
                            g[k] += theta_upstream * a * (onehot - lp.exp());
                        }
                    }
                }
                LeafDist::Dirichlet(d) => {
                    if let Some(q) = &pass.clamped[var.0 - 1] {
                        let alpha = d.alpha();
                        let psi0 = digamma(alpha.iter().sum());
                        let g = &mut out.params.nodes[id];
                        for (i, (&al, &qi)) in alpha.iter().zip(q).enumerate() {
                            // chain rule through alpha = softplus(raw) + floor
                            let dalpha_draw = 1.0 - (-(al - ALPHA_FLOOR)).exp();
                            g[i] += theta_upstream * a * (psi0 - digamma(al) + qi.ln()) * dalpha_draw;
                        }
                        let ge = &mut out.evidence[var.0 - 1];
                        for (i, (&al, &qi)) in alpha.iter().zip(q).enumerate() {
                            ge[i] += evidence_upstream * a * (al - 1.0) / qi;
                        }
                    }
                }
            },
        }
    }
    Ok(())
}

/// Gradient of `upstream · log value(root)` w.r.t. every parameter and supplied evidence block.
pub fn pc_backward(circuit: &Circuit, pass: &ForwardPass, upstream: f64) -> Result<Gradients> {
    let mut out = Gradients::zeros(circuit);
    backward_into(circuit, pass, upstream, upstream, &mut out)?;
    Ok(out)
}

/// Gradient of `log P(observed)` w.r.t. each supplied block, indexed by modality `j - 1`.
pub fn grad_wrt_evidence(circuit: &Circuit, evidence: &Evidence) -> Result<Vec<Vec<f64>>> {
    let pass = forward(circuit, evidence)?;
    let mut out = Gradients::zeros(circuit);
    backward_into(circuit, &pass, 0.0, 1.0, &mut out)?;
    Ok(out.evidence)
}

/// Posterior over `Y` together with the cached class passes needed to differentiate it.
#[derive(Clone, Debug)]
pub struct PosteriorPass {
    pub posterior: ProbVector,
    /// `log P(observed)`, the log-normalizer over classes.
    pub log_evidence: f64,
    passes: Vec<ForwardPass>,
}

pub fn posterior_forward(circuit: &Circuit, modalities: &[Option<ProbVector>]) -> Result<PosteriorPass> {
    let mut ev = Evidence {
        target: None,
        modalities: modalities.to_vec(),
    };
    let passes = (0..circuit.num_classes())
        .map(|y| {
            ev.target = Some(y);
            forward(circuit, &ev)
        })
        .collect::<Result<Vec<_>>>()?;
    let logs: Vec<f64> = passes.iter().map(ForwardPass::log_value).collect();
    let (posterior, log_evidence) = normalize_logs(&logs)?;
    Ok(PosteriorPass {
        posterior,
        log_evidence,
        passes,
    })
}

/// Back-propagates `upstream = dL/dposterior` through the posterior's softmax over class
/// log-joints into `out`, scaling the parameter and evidence parts separately.
pub fn posterior_backward_into(
    circuit: &Circuit,
    pass: &PosteriorPass,
    upstream: &[f64],
    theta_scale: f64,
    evidence_scale: f64,
    out: &mut Gradients,
) -> Result<()> {
    let p = pass.posterior.values();
    let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
    for (y, fp) in pass.passes.iter().enumerate() {
        let s = p[y] * (upstream[y] - dot);
        if s != 0.0 {
            backward_into(circuit, fp, theta_scale * s, evidence_scale * s, out)?;
        }
    }
    Ok(())
}

/// Grid of cell centroids covering the `K`-simplex with equal-volume cells.
///
/// Volumes are with respect to Lebesgue measure on the first `K - 1` coordinates.
/// Supported for `K = 2` (intervals) and `K = 3` (triangles).
pub fn simplex_grid(k: usize, resolution: usize) -> Result<(Vec<Vec<f64>>, f64)> {
    if resolution == 0 {
        return Err(Error::Refused("grid resolution must be positive".into()));
    }
    let n = resolution as f64;
    match k {
        2 => {
            let pts = (0..resolution)
                .map(|i| {
                    let x = (i as f64 + 0.5) / n;
                    vec![x, 1.0 - x]
                })
                .collect();
            Ok((pts, 1.0 / n))
        }
        3 => {
            let mut pts = Vec::with_capacity(resolution * resolution);
            for i in 0..resolution {
                for j in 0..resolution - i {
                    let (a, b) = ((i as f64 + 1.0 / 3.0) / n, (j as f64 + 1.0 / 3.0) / n);
                    pts.push(vec![a, b, 1.0 - a - b]);
                    if i + j + 2 <= resolution {
                        let (a, b) = ((i as f64 + 2.0 / 3.0) / n, (j as f64 + 2.0 / 3.0) / n);
                        pts.push(vec![a, b, 1.0 - a - b]);
                    }
                }
            }
            Ok((pts, 1.0 / (2.0 * n * n)))
        }
        _ => Err(Error::Refused(format!("simplex grid supports K = 2 or 3, got {k}"))),
    }
}

/// Joint evaluations above this count are refused.
pub const ORACLE_MAX_EVALUATIONS: usize = 50_000_000;

fn check_oracle_dims(circuit: &Circuit, max_modalities: usize) -> Result<()> {
    let (k, m) = (circuit.num_classes(), circuit.num_modalities());
    if k > 3 || m > max_modalities {
        return Err(Error::Refused(format!(
            "brute force needs K <= 3 and M <= {max_modalities}, got K = {k}, M = {m}"
        )));
    }
    Ok(())
}

/// Numerically integrates the joint density over absent modality blocks (midpoint rule on
/// [`simplex_grid`]) and sums over an absent target.
pub fn brute_force_marginal_oracle(circuit: &Circuit, evidence: &Evidence, grid_resolution: usize) -> Result<f64> {
    check_oracle_dims(circuit, 3)?;
    evidence.check(circuit)?;
    if evidence.is_full() {
        return Ok(log_joint(circuit, evidence)?.exp());
    }
    let k = circuit.num_classes();
    let (grid, vol) = simplex_grid(k, grid_resolution)?;
    let absent: Vec<usize> = (0..circuit.num_modalities())
        .filter(|&j| evidence.modalities[j].is_none())
        .collect();
    let classes: Vec<usize> = match evidence.target {
        Some(y) => vec![y],
        None => (0..k).collect(),
    };
    let cells = grid.len().checked_pow(absent.len() as u32).unwrap_or(usize::MAX);
    let cost = cells.saturating_mul(classes.len());
    if cost > ORACLE_MAX_EVALUATIONS {
        return Err(Error::Refused(format!(
            "brute-force integration needs {cost} joint evaluations"
        )));
    }
    let weight = vol.powi(absent.len() as i32);
    let total: f64 = (0..cells)
        .into_par_iter()
        .map(|cell| -> Result<f64> {
            let mut ev = evidence.clone();
            let mut rest = cell;
            for &j in &absent {
                ev.modalities[j] = Some(ProbVector(grid[rest % grid.len()].clone()));
                rest /= grid.len();
            }
            let mut acc = 0.0;
            for &y in &classes {
                ev.target = Some(y);
                acc += forward(circuit, &ev)?.log_value().exp();
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total * weight)
}

/// One point where a marginal falls below the joint.
#[derive(Clone, Debug, PartialEq)]
pub struct DominanceViolation {
    /// The marginalized variables.
    pub subset: Vec<VarId>,
    pub target: usize,
    pub modalities: Vec<ProbVector>,
    pub marginal: f64,
    pub joint: f64,
}

pub const DOMINANCE_TOL: f64 = 1e-9;

/// Checks `P(x^{-S}) >= P(x) - 1e-9` for every nonempty subset `S` of variables and every
/// point `x` of the full grid (all classes times grid cells for each modality).
pub fn check_marginal_dominance(circuit: &Circuit, grid_resolution: usize) -> Result<Vec<DominanceViolation>> {
    check_oracle_dims(circuit, 2)?;
    let (k, m) = (circuit.num_classes(), circuit.num_modalities());
    let (grid, _) = simplex_grid(k, grid_resolution)?;
    let cells = grid.len().checked_pow(m as u32).unwrap_or(usize::MAX);
    let num_subsets = (1usize << (m + 1)) - 1;
    let cost = cells.saturating_mul(k).saturating_mul(num_subsets + 1);
    if cost > ORACLE_MAX_EVALUATIONS {
        return Err(Error::Refused(format!("dominance check needs {cost} evaluations")));
    }
    let per_cell: Vec<Vec<DominanceViolation>> = (0..cells)
        .into_par_iter()
        .map(|cell| -> Result<Vec<DominanceViolation>> {
            let mut rest = cell;
            let mut point = Vec::with_capacity(m);
            for _ in 0..m {
                point.push(ProbVector(grid[rest % grid.len()].clone()));
                rest /= grid.len();
            }
            let mut found = Vec::new();
            for y in 0..k {
                let full = Evidence::full(y, &point);
                let joint = log_joint(circuit, &full)?.exp();
                for mask in 1..=num_subsets {
                    // bit 0 is Y, bit j is modality j
                    let mut ev = full.clone();
                    if mask & 1 != 0 {
                        ev.target = None;
                    }
                    for j in 1..=m {
                        if mask & (1 << j) != 0 {
                            ev.modalities[j - 1] = None;
                        }
                    }
                    let marginal = log_marginal(circuit, &ev)?.exp();
                    if marginal < joint - DOMINANCE_TOL {
                        found.push(DominanceViolation {
                            subset: (0..=m).filter(|v| mask & (1 << v) != 0).map(VarId).collect(),
                            target: y,
                            modalities: point.clone(),
                            marginal,
                            joint,
                        });
                    }
                }
            }
            Ok(found)
        })
        .collect::<Result<_>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_fusion_circuit, CategoricalLeaf, DirichletLeaf, InitConfig};
    use crate::special::ln_gamma;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn cat(p: &[f64]) -> LeafDist {
        LeafDist::Categorical(CategoricalLeaf::from_probs(p).unwrap())
    }

    fn dir(a: &[f64]) -> LeafDist {
        LeafDist::Dirichlet(DirichletLeaf::new(a.to_vec()).unwrap())
    }

    fn single_product(y: &[f64], alphas: &[&[f64]]) -> Circuit {
        let mut nodes = vec![Node::Leaf {
            var: VarId::TARGET,
            dist: cat(y),
        }];
        for (j, a) in alphas.iter().enumerate() {
            nodes.push(Node::Leaf {
                var: VarId::modality(j + 1),
                dist: dir(a),
            });
        }
        let children = (0..nodes.len()).collect();
        nodes.push(Node::Product { children });
        let root = nodes.len() - 1;
        Circuit::new(nodes, root, y.len(), alphas.len()).unwrap()
    }

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> ProbVector {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        pv(&raw.iter().map(|x| x / s).collect::<Vec<_>>())
    }

    /// Independent linear-space evaluation of the mixture-of-factorizations structure.
    fn linear_oracle(c: &Circuit, ev: &Evidence) -> f64 {
        fn dir_pdf(alpha: &[f64], p: &[f64]) -> f64 {
            let a0: f64 = alpha.iter().sum();
            let norm = (ln_gamma(a0) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>()).exp();
            norm * alpha.iter().zip(p).map(|(a, x)| x.powf(a - 1.0)).product::<f64>()
        }
        fn eval(c: &Circuit, id: usize, ev: &Evidence) -> f64 {
            match &c.nodes()[id] {
                Node::Leaf { var, dist } => match dist {
                    LeafDist::Categorical(cat) => ev.target.map_or(1.0, |y| cat.probs()[y]),
                    LeafDist::Dirichlet(d) => ev.modalities[var.0 - 1]
                        .as_ref()
                        .map_or(1.0, |p| dir_pdf(d.alpha(), p.values())),
                },
                Node::Product { children } => children.iter().map(|&ch| eval(c, ch, ev)).product(),
                Node::Sum { children, .. } => {
                    let w = c.sum_weights(id).unwrap();
                    children.iter().zip(w).map(|(&ch, w)| w * eval(c, ch, ev)).sum()
                }
            }
        }
        eval(c, c.root(), ev)
    }

    #[test]
    fn leaf_density_examples() {
        let got = leaf_log_density(&cat(&[0.2, 0.8]), LeafValue::Class(1)).unwrap();
        assert!((got - 0.8f64.ln()).abs() < 1e-15);
        let got = leaf_log_density(&dir(&[1.0, 1.0]), LeafValue::Simplex(&[0.3, 0.7])).unwrap();
        assert!(got.abs() < 1e-12);
        let lg = statrs::function::gamma::ln_gamma;
        let want = lg(4.0) - 2.0 * lg(2.0) + 2.0 * 0.5f64.ln();
        let got = leaf_log_density(&dir(&[2.0, 2.0]), LeafValue::Simplex(&[0.5, 0.5])).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.5f64.ln()).abs() < 1e-12);
        assert_eq!(
            leaf_log_density(&dir(&[0.5, 3.0]), LeafValue::Marginalized).unwrap(),
            0.0
        );
    }

    #[test]
    fn boundary_zero_is_clamped_not_divergent() {
        let got = leaf_log_density(&dir(&[0.5, 2.0]), LeafValue::Simplex(&[0.0, 1.0])).unwrap();
        assert!(got.is_finite());
        let strict = DirichletLeaf::new(vec![0.5, 2.0])
            .unwrap()
            .log_density_strict(&[0.0, 1.0]);
        assert!(matches!(strict, Err(Error::BoundaryDivergence { coordinate: 0, .. })));
    }

    #[test]
    fn joint_examples() {
        let c = single_product(&[0.7, 0.3], &[&[1.0, 1.0]]);
        let ev = Evidence::full(0, &[pv(&[0.5, 0.5])]);
        assert!((log_joint(&c, &ev).unwrap() - 0.7f64.ln()).abs() < 1e-12);
        let marg = log_marginal(
            &c,
            &Evidence {
                target: Some(0),
                modalities: vec![None],
            },
        )
        .unwrap();
        assert!((marg - 0.7f64.ln()).abs() < 1e-12);

        // mixture of two leaves with densities 0.2 and 0.4
        let nodes = vec![
            Node::Leaf {
                var: VarId::TARGET,
                dist: cat(&[0.2, 0.8]),
            },
            Node::Leaf {
                var: VarId::TARGET,
                dist: cat(&[0.4, 0.6]),
            },
            Node::Sum {
                children: vec![0, 1],
                weight_logits: vec![0.0, 0.0],
            },
        ];
        let c = Circuit::new(nodes, 2, 2, 1).unwrap();
        let ev = Evidence {
            target: Some(0),
            modalities: vec![None],
        };
        assert!((log_marginal(&c, &ev).unwrap() - 0.3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn marginal_over_single_block_is_its_dirichlet() {
        let c = single_product(&[0.7, 0.3], &[&[2.0, 3.0], &[1.5, 1.5]]);
        let p = pv(&[0.3, 0.7]);
        let ev = Evidence {
            target: None,
            modalities: vec![Some(p.clone()), None],
        };
        let want = DirichletLeaf::new(vec![2.0, 3.0])
            .unwrap()
            .log_density_strict(p.values())
            .unwrap();
        assert!((log_marginal(&c, &ev).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn log_space_matches_linear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let c = build_fusion_circuit(2, 2, 3, seed, &InitConfig::default()).unwrap();
            let preds = [random_simplex(&mut rng, 2), random_simplex(&mut rng, 2)];
            for y in 0..2 {
                let ev = Evidence::full(y, &preds);
                let got = log_joint(&c, &ev).unwrap().exp();
                let want = linear_oracle(&c, &ev);
                assert!((got - want).abs() <= 1e-10 * want, "{got} vs {want}");
            }
            let ev = Evidence {
                target: None,
                modalities: vec![Some(preds[0].clone()), None],
            };
            let want = linear_oracle(&c, &ev);
            assert!((log_marginal(&c, &ev).unwrap().exp() - want).abs() <= 1e-10 * want);
        }
    }

    #[test]
    fn marginal_over_target_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let c = build_fusion_circuit(2, 3, 4, seed, &InitConfig::default()).unwrap();
            let preds = [random_simplex(&mut rng, 3), random_simplex(&mut rng, 3)];
            let sum: f64 = (0..3)
                .map(|y| log_joint(&c, &Evidence::full(y, &preds)).unwrap().exp())
                .sum();
            let marg = log_marginal(&c, &Evidence::observed(&preds)).unwrap().exp();
            assert!((marg - sum).abs() <= 1e-10 * sum);
        }
    }

    #[test]
    fn target_marginal_is_normalized() {
        for seed in 0..10 {
            let c = build_fusion_circuit(3, 4, 5, seed, &InitConfig::default()).unwrap();
            let total: f64 = (0..4)
                .map(|y| {
                    log_marginal(&c, &Evidence::empty(3).with_target(Some(y)))
                        .unwrap()
                        .exp()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn posterior_examples() {
        let c = single_product(&[0.7, 0.3], &[&[3.0, 1.5]]);
        for p in [[0.1, 0.9], [0.5, 0.5], [0.99, 0.01]] {
            let post = posterior_over_target(&c, &[Some(pv(&p))]).unwrap();
            assert!((post[0] - 0.7).abs() < 1e-12 && (post[1] - 0.3).abs() < 1e-12);
        }

        // empty evidence: sum-weighted mixture of the categorical leaves
        let c = build_fusion_circuit(
            2,
            3,
            4,
            9,
            &InitConfig {
                weight_logit_std: 1.0,
                ..InitConfig::default()
            },
        )
        .unwrap();
        let post = posterior_over_target(&c, &[None, None]).unwrap();
        let root_w = c.sum_weights(c.root()).unwrap();
        let mut want = [0.0; 3];
        for (w, &prod) in root_w.iter().zip(c.nodes()[c.root()].children()) {
            let Node::Leaf {
                dist: LeafDist::Categorical(cat),
                ..
            } = &c.nodes()[c.nodes()[prod].children()[0]]
            else {
                panic!("first product child is the target leaf")
            };
            for (acc, p) in want.iter_mut().zip(cat.probs()) {
                *acc += w * p;
            }
        }
        for y in 0..3 {
            assert!((post[y] - want[y]).abs() < 1e-12);
        }
    }

    #[test]
    fn evidence_near_component_mode_raises_its_class() {
        let nodes = vec![
            Node::Leaf {
                var: VarId::TARGET,
                dist: cat(&[0.9, 0.1]),
            },
            Node::Leaf {
                var: VarId::modality(1),
                dist: dir(&[8.0, 2.0]),
            },
            Node::Product { children: vec![0, 1] },
            Node::Leaf {
                var: VarId::TARGET,
                dist: cat(&[0.1, 0.9]),
            },
            Node::Leaf {
                var: VarId::modality(1),
                dist: dir(&[2.0, 8.0]),
            },
            Node::Product { children: vec![3, 4] },
            Node::Sum {
                children: vec![2, 5],
                weight_logits: vec![0.0, 0.0],
            },
        ];
        let c = Circuit::new(nodes, 6, 2, 1).unwrap();
        let prior = posterior_over_target(&c, &[None]).unwrap();
        let post = posterior_over_target(&c, &[Some(pv(&[0.875, 0.125]))]).unwrap();
        // enumeration by hand in linear space
        let d0 = linear_oracle(&c, &Evidence::full(0, &[pv(&[0.875, 0.125])]));
        let d1 = linear_oracle(&c, &Evidence::full(1, &[pv(&[0.875, 0.125])]));
        assert!((post[0] - d0 / (d0 + d1)).abs() < 1e-12);
        assert!(post[0] > prior[0]);
    }

    #[test]
    fn evidence_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.5 + 5e-8]).is_ok());
        let c = single_product(&[0.5, 0.5], &[&[1.0, 1.0]]);
        assert!(log_marginal(
            &c,
            &Evidence {
                target: Some(2),
                modalities: vec![None]
            }
        )
        .is_err());
        assert!(log_marginal(
            &c,
            &Evidence {
                target: None,
                modalities: vec![]
            }
        )
        .is_err());
        assert!(log_joint(
            &c,
            &Evidence {
                target: Some(0),
                modalities: vec![None]
            }
        )
        .is_err());
    }

    #[test]
    fn uniform_leaf_has_zero_evidence_gradient() {
        let c = single_product(&[0.5, 0.5], &[&[1.0, 1.0]]);
        let g = grad_wrt_evidence(&c, &Evidence::full(1, &[pv(&[0.2, 0.8])])).unwrap();
        assert_eq!(g[0], vec![0.0, 0.0]);
    }

    #[test]
    fn dirichlet_evidence_gradient_hand_formula() {
        let c = single_product(&[0.5, 0.5], &[&[2.0, 2.0]]);
        let g = grad_wrt_evidence(&c, &Evidence::full(0, &[pv(&[0.25, 0.75])])).unwrap();
        assert!((g[0][0] - 4.0).abs() < 1e-9 && (g[0][1] - 4.0 / 3.0).abs() < 1e-9);
        // tangent direction (1, -1): derivative of log density along it
        let f = |t: f64| log_joint(&c, &Evidence::full(0, &[pv(&[0.25 + t, 0.75 - t])])).unwrap();
        let h = 1e-5;
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((fd - (g[0][0] - g[0][1])).abs() < 1e-6);
    }

    #[test]
    fn evidence_gradient_matches_tangent_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..50 {
            let k = 2 + (seed as usize % 3);
            let c = build_fusion_circuit(2, k, 3, seed, &InitConfig::default()).unwrap();
            let preds = [random_simplex(&mut rng, k), random_simplex(&mut rng, k)];
            let target = if seed % 2 == 0 {
                Some(rng.random_range(0..k))
            } else {
                None
            };
            let ev = Evidence::observed(&preds).with_target(target);
            let g = grad_wrt_evidence(&c, &ev).unwrap();
            for j in 0..2 {
                // tangent direction e_a - e_b
                let (a, b) = (0, k - 1);
                let f = |t: f64| {
                    let mut v = preds[j].values().to_vec();
                    v[a] += t;
                    v[b] -= t;
                    let mut e = ev.clone();
                    e.modalities[j] = Some(ProbVector(v));
                    log_marginal(&c, &e).unwrap()
                };
                let h = 1e-5;
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let an = g[j][a] - g[j][b];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn categorical_leaf_gradient_is_onehot_minus_probs() {
        let c = single_product(&[0.2, 0.5, 0.3], &[&[1.0, 1.0, 1.0]]);
        let ev = Evidence::full(1, &[pv(&[0.2, 0.3, 0.5])]);
        let g = pc_backward(&c, &forward(&c, &ev).unwrap(), 1.0).unwrap();
        let want = [-0.2, 0.5, -0.3];
        for (a, b) in g.params.nodes[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dirichlet_alpha_gradient_matches_finite_differences() {
        let p = [0.4, 0.6];
        let f = |a: &[f64]| DirichletLeaf::new(a.to_vec()).unwrap().log_density_strict(&p).unwrap();
        let alpha = [1.5, 2.5];
        let c = single_product(&[0.5, 0.5], &[&alpha]);
        let g = pc_backward(&c, &forward(&c, &Evidence::full(0, &[pv(&p)])).unwrap(), 1.0).unwrap();
        for i in 0..2 {
            let mut up = alpha;
            let mut dn = alpha;
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            let fd = (f(&up) - f(&dn)) / 2e-5;
            let d_alpha_d_raw = 1.0 - (-(alpha[i] - ALPHA_FLOOR)).exp();
            let analytic = g.params.nodes[1][i] / d_alpha_d_raw;
            assert!((fd - analytic).abs() <= 1e-4 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..20 {
            let k = 2 + seed as usize % 2;
            let init = InitConfig {
                weight_logit_std: 0.7,
                ..InitConfig::default()
            };
            let c = build_fusion_circuit(2, k, 3, seed, &init).unwrap();
            let preds = [random_simplex(&mut rng, k), random_simplex(&mut rng, k)];
            let ev = Evidence::full(rng.random_range(0..k), &preds);
            let g = pc_backward(&c, &forward(&c, &ev).unwrap(), 1.0)
                .unwrap()
                .params
                .flatten();
            let theta = c.params();
            for i in 0..theta.len() {
                let at = |d: f64| {
                    let mut t = theta.clone();
                    t[i] += d;
                    let mut cc = c.clone();
                    cc.set_params(&t).unwrap();
                    log_joint(&cc, &ev).unwrap()
                };
                let fd = (at(1e-5) - at(-1e-5)) / 2e-5;
                assert!(
                    (fd - g[i]).abs() <= 1e-4 * fd.abs().max(1.0),
                    "param {i}: {fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn simplex_grid_cells_tile_the_simplex() {
        for (k, n, want) in [(2, 7, 1.0), (3, 9, 0.5)] {
            let (pts, vol) = simplex_grid(k, n).unwrap();
            assert!((pts.len() as f64 * vol - want).abs() < 1e-12);
            assert!(pts
                .iter()
                .all(|p| p.iter().all(|x| *x > 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        }
        assert!(simplex_grid(4, 10).is_err());
    }

    #[test]
    fn oracle_full_evidence_is_exact() {
        let c = build_fusion_circuit(2, 2, 2, 1, &InitConfig::default()).unwrap();
        let ev = Evidence::full(1, &[pv(&[0.3, 0.7]), pv(&[0.6, 0.4])]);
        assert_eq!(
            brute_force_marginal_oracle(&c, &ev, 5).unwrap(),
            log_joint(&c, &ev).unwrap().exp()
        );
    }

    #[test]
    fn oracle_matches_marginal_on_factorized_circuit() {
        let c = single_product(&[0.7, 0.3], &[&[2.0, 3.0], &[1.5, 1.2]]);
        let ev = Evidence {
            target: Some(0),
            modalities: vec![Some(pv(&[0.2, 0.8])), None],
        };
        let fast = log_marginal(&c, &ev).unwrap().exp();
        let slow = brute_force_marginal_oracle(&c, &ev, 200).unwrap();
        assert!((fast - slow).abs() <= 1e-3 * fast);
    }

    #[test]
    fn oracle_refuses_large_problems() {
        let c = build_fusion_circuit(2, 4, 1, 0, &InitConfig::default()).unwrap();
        assert!(matches!(
            brute_force_marginal_oracle(&c, &Evidence::empty(2), 10),
            Err(Error::Refused(_))
        ));
        let c = build_fusion_circuit(3, 3, 1, 0, &InitConfig::default()).unwrap();
        assert!(matches!(
            brute_force_marginal_oracle(&c, &Evidence::empty(3), 200),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn oracle_gap_shrinks_with_resolution() {
        for seed in 0..10 {
            let c = build_fusion_circuit(2, 2, 3, seed, &InitConfig::default()).unwrap();
            let ev = Evidence {
                target: Some(1),
                modalities: vec![None, Some(pv(&[0.35, 0.65]))],
            };
            let exact = log_marginal(&c, &ev).unwrap().exp();
            let gaps: Vec<f64> = [10, 20, 40, 80]
                .iter()
                .map(|&n| (brute_force_marginal_oracle(&c, &ev, n).unwrap() - exact).abs())
                .collect();
            assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {gaps:?}");
        }
    }

    #[test]
    fn dominance_holds_for_uniform_leaves() {
        let c = build_fusion_circuit(2, 2, 3, 4, &InitConfig::symmetric()).unwrap();
        assert!(check_marginal_dominance(&c, 20).unwrap().is_empty());
    }

    #[test]
    fn dominance_fails_near_a_peaked_leaf() {
        let c = single_product(&[0.5, 0.5], &[&[5.0, 5.0], &[1.0, 1.0]]);
        let v = check_marginal_dominance(&c, 20).unwrap();
        assert!(!v.is_empty());
        assert!(v.iter().all(|d| (d.modalities[0][0] - 0.5).abs() < 0.35));
    }
}
