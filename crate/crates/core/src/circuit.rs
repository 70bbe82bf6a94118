//! Circuit data model: an arena of sum, product and leaf nodes over the target `Y`
//! (variable 0) and the per-modality probability blocks `p_1..p_M` (variables 1..M).
//!
//! Nodes are stored in topological order: every child id is smaller than its parent's id.
//! Smoothness and decomposability are not enforced by construction; they are reported by
//! [`Circuit::validate_smooth`] and [`Circuit::validate_decomposable`].

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_gamma, log_softmax, log_sum_exp, softmax, softplus, softplus_inv};

pub type NodeId = usize;

/// Floor added to `softplus(raw)` when Dirichlet concentrations are trained unconstrained.
pub const ALPHA_FLOOR: f64 = 1e-4;

/// A circuit variable. `VarId(0)` is the target, `VarId(j)` for `j >= 1` is modality `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarId(pub usize);

impl VarId {
    pub const TARGET: VarId = VarId(0);

    pub fn modality(j: usize) -> VarId {
        assert!(j >= 1, "modality ids start at 1");
        VarId(j)
    }

    pub fn is_target(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_target() {
            write!(f, "Y")
        } else {
            write!(f, "p{}", self.0)
        }
    }
}

/// Set of variables a node depends on.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Scope(pub BTreeSet<VarId>);

impl Scope {
    pub fn single(var: VarId) -> Self {
        Scope(BTreeSet::from([var]))
    }

    pub fn full(num_modalities: usize) -> Self {
        Scope((0..=num_modalities).map(VarId).collect())
    }

    pub fn is_disjoint(&self, other: &Scope) -> bool {
        self.0.is_disjoint(&other.0)
    }

    pub fn contains(&self, var: VarId) -> bool {
        self.0.contains(&var)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalLeaf {
    log_probs: Vec<f64>,
}

impl CategoricalLeaf {
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::from_log_probs(probs.iter().map(|p| p.ln()).collect())
    }

    /// Checks normalization of already-normalized log-probabilities.
    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.len() < 2 {
            return Err(Error::InvalidParameter(
                "categorical leaf needs at least 2 classes".into(),
            ));
        }
        if log_probs.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidParameter(
                "categorical log-probabilities must be finite".into(),
            ));
        }
        let total: f64 = log_probs.iter().map(|l| l.exp()).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "categorical probabilities sum to {total}"
            )));
        }
        Ok(CategoricalLeaf { log_probs })
    }

    /// Normalizes arbitrary finite logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::from_log_probs(log_softmax(logits))
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.log_probs)
    }

    pub fn num_classes(&self) -> usize {
        self.log_probs.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirichletLeaf {
    alpha: Vec<f64>,
    log_norm: f64,
}

impl DirichletLeaf {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidParameter(
                "Dirichlet leaf needs at least 2 components".into(),
            ));
        }
        if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "Dirichlet concentration {a} is not positive"
            )));
        }
        let log_norm = ln_gamma(alpha.iter().sum()) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();
        Ok(DirichletLeaf { alpha, log_norm })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// `ln Γ(Σα) − Σ ln Γ(α_i)`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    /// Log-density at `p` without boundary clamping.
    ///
    /// A zero coordinate whose concentration is below one is a divergence and is reported
    /// as an error; a zero coordinate with concentration above one gives `-inf`.
    pub fn log_density_strict(&self, p: &[f64]) -> Result<f64> {
        let mut acc = self.log_norm;
        for (i, (&a, &x)) in self.alpha.iter().zip(p).enumerate() {
            if a == 1.0 {
                continue;
            }
            if x == 0.0 {
                if a < 1.0 {
                    return Err(Error::BoundaryDivergence {
                        coordinate: i,
                        alpha: a,
                    });
                }
                return Ok(f64::NEG_INFINITY);
            }
            acc += (a - 1.0) * x.ln();
        }
        Ok(acc)
    }

    pub(crate) fn log_density_interior(&self, p: &[f64]) -> f64 {
        self.log_norm + self.alpha.iter().zip(p).map(|(a, x)| (a - 1.0) * x.ln()).sum::<f64>()
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LeafDist {
    Categorical(CategoricalLeaf),
    Dirichlet(DirichletLeaf),
}

impl LeafDist {
    pub fn family(&self) -> &'static str {
        match self {
            LeafDist::Categorical(_) => "categorical",
            LeafDist::Dirichlet(_) => "dirichlet",
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            LeafDist::Categorical(c) => c.num_classes(),
            LeafDist::Dirichlet(d) => d.num_classes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Sum {
        children: Vec<NodeId>,
        /// Mixture weights are `softmax(weight_logits)`.
        weight_logits: Vec<f64>,
    },
    Product {
        children: Vec<NodeId>,
    },
    Leaf {
        var: VarId,
        dist: LeafDist,
    },
}

impl Node {
    pub fn children(&self) -> &[NodeId] {
        match self {
            Node::Sum { children, .. } | Node::Product { children } => children,
            Node::Leaf { .. } => &[],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Node::Sum { .. } => "sum",
            Node::Product { .. } => "product",
            Node::Leaf { .. } => "leaf",
        }
    }

    fn num_params(&self) -> usize {
        match self {
            Node::Sum { weight_logits, .. } => weight_logits.len(),
            Node::Product { .. } => 0,
            Node::Leaf { dist, .. } => dist.num_classes(),
        }
    }
}

/// Initialization of a freshly built fusion circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Standard deviation of the root mixture logits (0 gives uniform weights).
    pub weight_logit_std: f64,
    /// Standard deviation of the categorical leaf logits (0 gives uniform leaves).
    pub categorical_logit_std: f64,
    /// Dirichlet concentrations are drawn uniformly from `[alpha_low, alpha_high]`.
    pub alpha_low: f64,
    pub alpha_high: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            weight_logit_std: 0.0,
            categorical_logit_std: 0.5,
            alpha_low: 1.0,
            alpha_high: 2.0,
        }
    }
}

impl InitConfig {
    /// Every component identical: uniform weights, uniform categoricals, `Dir(1, …, 1)`.
    pub fn symmetric() -> Self {
        InitConfig {
            weight_logit_std: 0.0,
            categorical_logit_std: 0.0,
            alpha_low: 1.0,
            alpha_high: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.weight_logit_std >= 0.0
            && self.categorical_logit_std >= 0.0
            && self.alpha_low > 0.0
            && self.alpha_high >= self.alpha_low
            && self.alpha_high.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad init config {self:?}")))
        }
    }
}

/// Outcome of a structural validator: the offending node ids, empty when the property holds.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Validation {
    pub offending: Vec<NodeId>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.offending.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityBound {
    pub bounded: bool,
    /// Supremum of the leaf density (`inf` when it diverges).
    pub max_density: f64,
}

/// Reports whether a leaf density is bounded by one and its maximum value.
///
/// Dirichlet densities are taken with respect to Lebesgue measure on the first `K-1`
/// coordinates, so `Dir(1, …, 1)` has density `(K-1)!`.
pub fn check_leaf_density_bound(leaf: &LeafDist) -> DensityBound {
    match leaf {
        LeafDist::Categorical(c) => {
            let max = c.probs().into_iter().fold(0.0, f64::max);
            DensityBound {
                bounded: true,
                max_density: max,
            }
        }
        LeafDist::Dirichlet(d) => {
            let alpha = d.alpha();
            if alpha.iter().any(|&a| a < 1.0) {
                return DensityBound {
                    bounded: false,
                    max_density: f64::INFINITY,
                };
            }
            let k = alpha.len() as f64;
            let a0: f64 = alpha.iter().sum();
            let mode: Vec<f64> = if a0 == k {
                vec![1.0 / k; alpha.len()]
            } else {
                alpha.iter().map(|a| (a - 1.0) / (a0 - k)).collect()
            };
            let max_density = d.log_density_strict(&mode).map(f64::exp).unwrap_or(f64::INFINITY);
            DensityBound {
                bounded: max_density <= 1.0 + 1e-12,
                max_density,
            }
        }
    }
}

/// Gradients mirroring the circuit parameters: one vector per node (empty for products).
///
/// Sum nodes: logits. Categorical leaves: logits. Dirichlet leaves: raw (pre-softplus)
/// concentrations.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitGrads {
    pub nodes: Vec<Vec<f64>>,
}

impl CircuitGrads {
    pub fn zeros(circuit: &Circuit) -> Self {
        CircuitGrads {
            nodes: circuit.nodes.iter().map(|n| vec![0.0; n.num_params()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.nodes.iter().flatten().copied().collect()
    }

    pub fn add_scaled(&mut self, other: &CircuitGrads, scale: f64) {
        for (a, b) in self.nodes.iter_mut().zip(&other.nodes) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.nodes.iter_mut().flatten().for_each(|x| *x *= s);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    nodes: Vec<Node>,
    root: NodeId,
    num_classes: usize,
    num_modalities: usize,
}

impl Circuit {
    /// Assembles a circuit from topologically ordered nodes.
    ///
    /// Checks arities, child ordering, variable ranges and leaf families; smoothness and
    /// decomposability are left to the validators.
    pub fn new(nodes: Vec<Node>, root: NodeId, num_classes: usize, num_modalities: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidDimensions(format!("K = {num_classes}, need K >= 2")));
        }
        if num_modalities < 1 {
            return Err(Error::InvalidDimensions("M = 0, need M >= 1".into()));
        }
        if root >= nodes.len() {
            return Err(Error::MalformedCircuit(format!("root {root} out of range")));
        }
        for (id, node) in nodes.iter().enumerate() {
            match node {
                Node::Sum {
                    children,
                    weight_logits,
                } => {
                    if children.is_empty() {
                        return Err(Error::MalformedCircuit(format!("sum node {id} has no children")));
                    }
                    if weight_logits.len() != children.len() {
                        return Err(Error::MalformedCircuit(format!(
                            "sum node {id}: {} logits for {} children",
                            weight_logits.len(),
                            children.len()
                        )));
                    }
                    if weight_logits.iter().any(|w| !w.is_finite()) {
                        return Err(Error::MalformedCircuit(format!("sum node {id}: non-finite logit")));
                    }
                }
                Node::Product { children } => {
                    if children.is_empty() {
                        return Err(Error::MalformedCircuit(format!("product node {id} has no children")));
                    }
                }
                Node::Leaf { var, dist } => {
                    if var.0 > num_modalities {
                        return Err(Error::MalformedCircuit(format!("leaf {id}: variable {} > M", var.0)));
                    }
                    let family_ok = matches!(
                        (var.is_target(), dist),
                        (true, LeafDist::Categorical(_)) | (false, LeafDist::Dirichlet(_))
                    );
                    if !family_ok {
                        return Err(Error::MalformedCircuit(format!(
                            "leaf {id}: {} leaf on variable {var}",
                            dist.family()
                        )));
                    }
                    if dist.num_classes() != num_classes {
                        return Err(Error::MalformedCircuit(format!(
                            "leaf {id}: {} classes, circuit has {num_classes}",
                            dist.num_classes()
                        )));
                    }
                }
            }
            if let Some(&c) = node.children().iter().find(|&&c| c >= id) {
                return Err(Error::MalformedCircuit(format!(
                    "node {id} references child {c}, which does not precede it"
                )));
            }
        }
        Ok(Circuit {
            nodes,
            root,
            num_classes,
            num_modalities,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Mixture weights of a sum node.
    pub fn sum_weights(&self, id: NodeId) -> Option<Vec<f64>> {
        match &self.nodes[id] {
            Node::Sum { weight_logits, .. } => Some(softmax(weight_logits)),
            _ => None,
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, VarId, &LeafDist)> {
        self.nodes.iter().enumerate().filter_map(|(id, n)| match n {
            Node::Leaf { var, dist } => Some((id, *var, dist)),
            _ => None,
        })
    }

    pub fn leaf_mut(&mut self, id: NodeId) -> Option<&mut LeafDist> {
        match &mut self.nodes[id] {
            Node::Leaf { dist, .. } => Some(dist),
            _ => None,
        }
    }

    /// Replaces the distribution of a leaf, keeping its family and class count.
    pub fn set_leaf(&mut self, id: NodeId, new: LeafDist) -> Result<()> {
        let k = self.num_classes;
        match &mut self.nodes[id] {
            Node::Leaf { dist, .. } => {
                if std::mem::discriminant(dist) != std::mem::discriminant(&new) || new.num_classes() != k {
                    return Err(Error::InvalidParameter(format!("leaf {id}: incompatible replacement")));
                }
                *dist = new;
                Ok(())
            }
            _ => Err(Error::InvalidParameter(format!("node {id} is not a leaf"))),
        }
    }

    pub fn set_weight_logits(&mut self, id: NodeId, logits: Vec<f64>) -> Result<()> {
        match &mut self.nodes[id] {
            Node::Sum { weight_logits, .. } if weight_logits.len() == logits.len() => {
                *weight_logits = logits;
                Ok(())
            }
            _ => Err(Error::InvalidParameter(format!(
                "node {id}: not a sum of matching arity"
            ))),
        }
    }

    /// Per-node scopes: leaf → its variable, product → union, sum → union of its children
    /// (equal to each child's scope when the sum is smooth).
    pub fn compute_scopes(&self) -> Vec<Scope> {
        let mut scopes: Vec<Scope> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let scope = match node {
                Node::Leaf { var, .. } => Scope::single(*var),
                Node::Sum { children, .. } | Node::Product { children } => {
                    let mut s = BTreeSet::new();
                    for &c in children {
                        s.extend(scopes[c].0.iter().copied());
                    }
                    Scope(s)
                }
            };
            scopes.push(scope);
        }
        scopes
    }

    pub fn validate_smooth(&self) -> Validation {
        let scopes = self.compute_scopes();
        let offending = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(id, n)| matches!(n, Node::Sum { .. }) && n.children().iter().any(|&c| scopes[c] != scopes[*id]))
            .map(|(id, _)| id)
            .collect();
        Validation { offending }
    }

    pub fn validate_decomposable(&self) -> Validation {
        let scopes = self.compute_scopes();
        let offending = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                let Node::Product { children } = n else { return false };
                children
                    .iter()
                    .enumerate()
                    .any(|(i, &a)| children[i + 1..].iter().any(|&b| !scopes[a].is_disjoint(&scopes[b])))
            })
            .map(|(id, _)| id)
            .collect();
        Validation { offending }
    }

    /// Smooth, decomposable, and rooted at the full scope `{0..M}`.
    pub fn validate(&self) -> Result<()> {
        let smooth = self.validate_smooth();
        if !smooth.is_ok() {
            return Err(Error::Validation(format!(
                "sum nodes {:?} are not smooth",
                smooth.offending
            )));
        }
        let dec = self.validate_decomposable();
        if !dec.is_ok() {
            return Err(Error::Validation(format!(
                "product nodes {:?} are not decomposable",
                dec.offending
            )));
        }
        let root_scope = &self.compute_scopes()[self.root];
        if *root_scope != Scope::full(self.num_modalities) {
            return Err(Error::Validation("root scope is not {0..M}".into()));
        }
        Ok(())
    }

    /// Leaves whose density exceeds one somewhere.
    pub fn unbounded_leaves(&self) -> Vec<NodeId> {
        self.leaves()
            .filter(|(_, _, d)| !check_leaf_density_bound(d).bounded)
            .map(|(id, _, _)| id)
            .collect()
    }

    // --- unconstrained parameter view, used by training and gradient checks ---

    pub fn num_params(&self) -> usize {
        self.nodes.iter().map(Node::num_params).sum()
    }

    /// Unconstrained parameters in node order (sum logits, categorical log-probs,
    /// Dirichlet raw concentrations).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for node in &self.nodes {
            match node {
                Node::Sum { weight_logits, .. } => out.extend_from_slice(weight_logits),
                Node::Product { .. } => {}
                Node::Leaf {
                    dist: LeafDist::Categorical(c),
                    ..
                } => out.extend_from_slice(c.log_probs()),
                Node::Leaf {
                    dist: LeafDist::Dirichlet(d),
                    ..
                } => out.extend(d.alpha().iter().map(|a| softplus_inv(a - ALPHA_FLOOR))),
            }
        }
        out
    }

    /// Overwrites every parameter from an unconstrained vector laid out as in [`Circuit::params`].
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::InvalidDimensions(format!(
                "{} parameters for a circuit with {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for node in &mut self.nodes {
            let n = node.num_params();
            let chunk = &params[offset..offset + n];
            offset += n;
            match node {
                Node::Sum { weight_logits, .. } => weight_logits.copy_from_slice(chunk),
                Node::Product { .. } => {}
                Node::Leaf { dist, .. } => *dist = leaf_from_unconstrained(dist, chunk)?,
            }
        }
        Ok(())
    }

    /// Adds `delta` to the unconstrained parameters. Nodes whose delta is entirely zero are
    /// left bit-for-bit untouched.
    pub fn apply_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.num_params() {
            return Err(Error::InvalidDimensions(
                "delta length does not match parameters".into(),
            ));
        }
        let mut offset = 0;
        for node in &mut self.nodes {
            let n = node.num_params();
            let chunk = &delta[offset..offset + n];
            offset += n;
            if chunk.iter().all(|d| *d == 0.0) {
                continue;
            }
            match node {
                Node::Sum { weight_logits, .. } => {
                    weight_logits.iter_mut().zip(chunk).for_each(|(w, d)| *w += d);
                }
                Node::Product { .. } => {}
                Node::Leaf { dist, .. } => {
                    let current: Vec<f64> = match &*dist {
                        LeafDist::Categorical(c) => c.log_probs().to_vec(),
                        LeafDist::Dirichlet(d) => d.alpha().iter().map(|a| softplus_inv(a - ALPHA_FLOOR)).collect(),
                    };
                    let updated: Vec<f64> = current.iter().zip(chunk).map(|(c, d)| c + d).collect();
                    *dist = leaf_from_unconstrained(dist, &updated)?;
                }
            }
        }
        Ok(())
    }
}

fn leaf_from_unconstrained(dist: &LeafDist, raw: &[f64]) -> Result<LeafDist> {
    Ok(match dist {
        LeafDist::Categorical(_) => {
            if raw.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("non-finite categorical logit".into()));
            }
            LeafDist::Categorical(CategoricalLeaf::from_logits(raw)?)
        }
        LeafDist::Dirichlet(_) => LeafDist::Dirichlet(DirichletLeaf::new(
            raw.iter().map(|r| softplus(*r) + ALPHA_FLOOR).collect(),
        )?),
    })
}

/// Mixture of fully factorized products: a root sum over `components` products, each over
/// one categorical leaf for `Y` and one Dirichlet leaf per modality.
pub fn build_fusion_circuit(
    num_modalities: usize,
    num_classes: usize,
    components: usize,
    seed: u64,
    init: &InitConfig,
) -> Result<Circuit> {
    if num_modalities < 1 || num_classes < 2 || components < 1 {
        return Err(Error::InvalidDimensions(format!(
            "M = {num_modalities}, K = {num_classes}, C = {components}; need M >= 1, K >= 2, C >= 1"
        )));
    }
    init.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut nodes = Vec::with_capacity(1 + components * (num_modalities + 2));
    let mut products = Vec::with_capacity(components);
    for _ in 0..components {
        let logits: Vec<f64> = (0..num_classes)
            .map(|_| init.categorical_logit_std * normal.sample(&mut rng))
            .collect();
        let mut children = Vec::with_capacity(num_modalities + 1);
        children.push(nodes.len());
        nodes.push(Node::Leaf {
            var: VarId::TARGET,
            dist: LeafDist::Categorical(CategoricalLeaf::from_logits(&logits)?),
        });
        for j in 1..=num_modalities {
            let alpha: Vec<f64> = (0..num_classes)
                .map(|_| {
                    if init.alpha_high > init.alpha_low {
                        rng.random_range(init.alpha_low..init.alpha_high)
                    } else {
                        init.alpha_low
                    }
                })
                .collect();
            children.push(nodes.len());
            nodes.push(Node::Leaf {
                var: VarId::modality(j),
                dist: LeafDist::Dirichlet(DirichletLeaf::new(alpha)?),
            });
        }
        products.push(nodes.len());
        nodes.push(Node::Product { children });
    }
    let weight_logits = (0..components)
        .map(|_| init.weight_logit_std * normal.sample(&mut rng))
        .collect();
    let root = nodes.len();
    nodes.push(Node::Sum {
        children: products,
        weight_logits,
    });
    Circuit::new(nodes, root, num_classes, num_modalities)
}

/// Log mixture weights of a sum node's logits.
pub(crate) fn log_weights(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_cat(probs: &[f64]) -> Node {
        Node::Leaf {
            var: VarId::TARGET,
            dist: LeafDist::Categorical(CategoricalLeaf::from_probs(probs).unwrap()),
        }
    }

    fn leaf_dir(j: usize, alpha: &[f64]) -> Node {
        Node::Leaf {
            var: VarId::modality(j),
            dist: LeafDist::Dirichlet(DirichletLeaf::new(alpha.to_vec()).unwrap()),
        }
    }

    #[test]
    fn builder_node_counts() {
        let c = build_fusion_circuit(2, 3, 1, 0, &InitConfig::default()).unwrap();
        let count = |k: &str| c.nodes().iter().filter(|n| n.kind() == k).count();
        assert_eq!((count("sum"), count("product"), count("leaf")), (1, 1, 3));
        assert_eq!(c.compute_scopes()[c.root()], Scope::full(2));

        let c = build_fusion_circuit(1, 2, 2, 0, &InitConfig::default()).unwrap();
        assert_eq!(c.len(), 7);
        let count = |k: &str| c.nodes().iter().filter(|n| n.kind() == k).count();
        assert_eq!((count("sum"), count("product"), count("leaf")), (1, 2, 4));
    }

    #[test]
    fn builder_output_is_smooth_and_decomposable() {
        let c = build_fusion_circuit(3, 10, 8, 42, &InitConfig::default()).unwrap();
        assert!(c.validate_smooth().is_ok());
        assert!(c.validate_decomposable().is_ok());
        c.validate().unwrap();
    }

    #[test]
    fn builder_rejects_bad_dimensions() {
        assert!(matches!(
            build_fusion_circuit(0, 3, 1, 0, &InitConfig::default()),
            Err(Error::InvalidDimensions(_))
        ));
        assert!(build_fusion_circuit(1, 1, 1, 0, &InitConfig::default()).is_err());
        assert!(build_fusion_circuit(1, 2, 0, 0, &InitConfig::default()).is_err());
    }

    #[test]
    fn builder_is_deterministic() {
        let a = build_fusion_circuit(2, 4, 5, 9, &InitConfig::default()).unwrap();
        let b = build_fusion_circuit(2, 4, 5, 9, &InitConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = build_fusion_circuit(2, 4, 5, 10, &InitConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scope_examples() {
        let nodes = vec![
            leaf_cat(&[0.5, 0.5]),
            leaf_dir(1, &[1.0, 1.0]),
            Node::Product { children: vec![0, 1] },
        ];
        let c = Circuit::new(nodes, 2, 2, 1).unwrap();
        let s = c.compute_scopes();
        assert_eq!(s[0], Scope::single(VarId(0)));
        assert_eq!(s[2], Scope::full(1));
        assert_eq!(c.compute_scopes(), s, "idempotent");
    }

    #[test]
    fn sum_over_equal_scoped_products_is_smooth() {
        let c = build_fusion_circuit(2, 2, 2, 0, &InitConfig::default()).unwrap();
        assert_eq!(c.compute_scopes()[c.root()], Scope::full(2));
        assert!(c.validate_smooth().is_ok());
    }

    #[test]
    fn non_smooth_sum_is_reported() {
        let nodes = vec![
            leaf_cat(&[0.5, 0.5]),
            leaf_dir(1, &[1.0, 1.0]),
            Node::Sum {
                children: vec![0, 1],
                weight_logits: vec![0.0, 0.0],
            },
        ];
        let c = Circuit::new(nodes, 2, 2, 1).unwrap();
        assert_eq!(c.validate_smooth().offending, vec![2]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn product_over_same_variable_is_not_decomposable() {
        let nodes = vec![
            leaf_dir(1, &[1.0, 1.0]),
            leaf_dir(1, &[2.0, 1.0]),
            Node::Product { children: vec![0, 1] },
        ];
        let c = Circuit::new(nodes, 2, 2, 1).unwrap();
        assert_eq!(c.validate_decomposable().offending, vec![2]);

        let ok = Circuit::new(
            vec![
                leaf_cat(&[0.3, 0.7]),
                leaf_dir(1, &[1.0, 1.0]),
                Node::Product { children: vec![0, 1] },
            ],
            2,
            2,
            1,
        )
        .unwrap();
        assert!(ok.validate_decomposable().is_ok());
    }

    #[test]
    fn new_rejects_bad_structure() {
        let forward_ref = vec![Node::Product { children: vec![1] }, leaf_cat(&[0.5, 0.5])];
        assert!(matches!(
            Circuit::new(forward_ref, 0, 2, 1),
            Err(Error::MalformedCircuit(_))
        ));
        let wrong_family = vec![Node::Leaf {
            var: VarId(1),
            dist: LeafDist::Categorical(CategoricalLeaf::from_probs(&[0.5, 0.5]).unwrap()),
        }];
        assert!(Circuit::new(wrong_family, 0, 2, 1).is_err());
        let empty_sum = vec![Node::Sum {
            children: vec![],
            weight_logits: vec![],
        }];
        assert!(Circuit::new(empty_sum, 0, 2, 1).is_err());
    }

    #[test]
    fn density_bound_examples() {
        let uniform = LeafDist::Dirichlet(DirichletLeaf::new(vec![1.0, 1.0]).unwrap());
        let b = check_leaf_density_bound(&uniform);
        assert!(b.bounded);
        assert!((b.max_density - 1.0).abs() < 1e-12);

        let peaked = LeafDist::Dirichlet(DirichletLeaf::new(vec![2.0, 2.0]).unwrap());
        let b = check_leaf_density_bound(&peaked);
        assert!(!b.bounded);
        // Γ(4)/(Γ(2)Γ(2)) · 0.5 · 0.5, with lgamma from an independent implementation
        let lg = statrs::function::gamma::ln_gamma;
        let oracle = (lg(4.0) - 2.0 * lg(2.0)).exp() * 0.25;
        assert!((oracle - 1.5).abs() < 1e-12);
        assert!((b.max_density - oracle).abs() < 1e-12);

        let cat = LeafDist::Categorical(CategoricalLeaf::from_probs(&[0.3, 0.7]).unwrap());
        let b = check_leaf_density_bound(&cat);
        assert!(b.bounded);
        assert!((b.max_density - 0.7).abs() < 1e-12);

        let spiky = LeafDist::Dirichlet(DirichletLeaf::new(vec![0.5, 3.0]).unwrap());
        assert_eq!(check_leaf_density_bound(&spiky).max_density, f64::INFINITY);

        // K = 3 uniform has density 2 on the 2-simplex
        let u3 = LeafDist::Dirichlet(DirichletLeaf::new(vec![1.0; 3]).unwrap());
        let b = check_leaf_density_bound(&u3);
        assert!(!b.bounded);
        assert!((b.max_density - 2.0).abs() < 1e-12);
    }

    /// Grid maximum of a Dirichlet density over simplex points at spacing 1e-3, boundary
    /// included (with `0 · ln 0 = 0` for unit concentrations).
    fn grid_max_density(alpha: &[f64]) -> f64 {
        let lg = statrs::function::gamma::ln_gamma;
        let a0: f64 = alpha.iter().sum();
        let norm = lg(a0) - alpha.iter().map(|&a| lg(a)).sum::<f64>();
        let logpdf = |p: &[f64]| {
            norm + alpha
                .iter()
                .zip(p)
                .map(|(a, x)| if *a == 1.0 { 0.0 } else { (a - 1.0) * x.ln() })
                .sum::<f64>()
        };
        let n = 1000;
        let mut best = f64::NEG_INFINITY;
        match alpha.len() {
            2 => {
                for i in 0..=n {
                    let t = i as f64 / n as f64;
                    best = best.max(logpdf(&[t, 1.0 - t]));
                }
            }
            3 => {
                for i in 0..=n {
                    for j in 0..=n - i {
                        let (a, b) = (i as f64 / n as f64, j as f64 / n as f64);
                        best = best.max(logpdf(&[a, b, (1.0 - a - b).max(0.0)]));
                    }
                }
            }
            _ => unreachable!(),
        }
        best.exp()
    }

    #[test]
    fn density_bound_matches_grid_search() {
        let cases: [&[f64]; 7] = [
            &[1.0, 1.0],
            &[2.0, 2.0],
            &[1.0, 3.0],
            &[5.0, 5.0],
            &[1.5, 2.5, 4.0],
            &[3.0, 1.0, 3.0],
            &[1.0, 1.0, 1.0],
        ];
        for alpha in cases {
            let leaf = LeafDist::Dirichlet(DirichletLeaf::new(alpha.to_vec()).unwrap());
            let report = check_leaf_density_bound(&leaf);
            let grid = grid_max_density(alpha);
            assert!(
                (report.max_density - grid).abs() < 1e-6,
                "{alpha:?}: closed form {} grid {grid}",
                report.max_density
            );
        }
    }

    #[test]
    fn strict_density_reports_boundary_divergence() {
        let d = DirichletLeaf::new(vec![0.5, 2.0]).unwrap();
        assert!(matches!(
            d.log_density_strict(&[0.0, 1.0]),
            Err(Error::BoundaryDivergence { coordinate: 0, .. })
        ));
        assert_eq!(d.log_density_strict(&[1.0, 0.0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn apply_zero_delta_is_bit_exact() {
        let mut c = build_fusion_circuit(2, 3, 4, 1, &InitConfig::default()).unwrap();
        let before = c.clone();
        c.apply_delta(&vec![0.0; c.num_params()]).unwrap();
        assert_eq!(c, before);
        let neg_zero = vec![-0.0; c.num_params()];
        c.apply_delta(&neg_zero).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn params_round_trip_closely() {
        let mut c = build_fusion_circuit(2, 3, 3, 5, &InitConfig::default()).unwrap();
        let p = c.params();
        let before = c.clone();
        c.set_params(&p).unwrap();
        for ((_, _, a), (_, _, b)) in c.leaves().zip(before.leaves()) {
            if let (LeafDist::Dirichlet(a), LeafDist::Dirichlet(b)) = (a, b) {
                for (x, y) in a.alpha().iter().zip(b.alpha()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sum_weights_stay_on_simplex(logits in proptest::collection::vec(-700.0f64..700.0, 1..12)) {
            let w = softmax(&logits);
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn alphas_stay_positive_under_any_update(raw_delta in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let mut c = build_fusion_circuit(1, 2, 1, 0, &InitConfig::default()).unwrap();
            let mut delta = vec![0.0; c.num_params()];
            // layout: categorical(2), dirichlet(2), sum(1)
            delta[..4].copy_from_slice(&raw_delta[..4]);
            c.apply_delta(&delta).unwrap();
            for (_, _, d) in c.leaves() {
                if let LeafDist::Dirichlet(d) = d {
                    prop_assert!(d.alpha().iter().all(|a| *a > 0.0));
                }
            }
        }
    }
}
