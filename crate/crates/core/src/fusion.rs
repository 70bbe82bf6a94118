//! Credibility of each modality, the two circuit-based fusion functions, the three
//! baseline combiners, and a Monte-Carlo check of the credibility/entropy bound.

use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::circuit::{check_leaf_density_bound, Circuit};
use crate::error::{Error, Result};
use crate::inference::{
    log_marginal, posterior_backward_into, posterior_forward, simplex_grid, Evidence, Gradients, PosteriorPass,
    ProbVector, CLAMP,
};
use crate::special::{softmax, softmax_backward};

/// `Σ p_i ln(p_i / q_i)` with `q` clamped at 1e-12 and `0 ln 0 = 0`.
///
/// Summed as `Σ q_i φ(p_i / q_i)` with `φ(r) = r ln r - r + 1`, which equals the above for
/// normalized inputs. Every term is nonnegative, so nearby distributions keep full relative
/// precision instead of cancelling first-order terms.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let qi = qi.max(CLAMP);
            if pi <= 0.0 {
                return qi;
            }
            let d = (pi - qi) / qi;
            qi * ((1.0 + d) * d.ln_1p() - d)
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibilityReport {
    pub raw: Vec<f64>,
    pub relative: Vec<f64>,
    pub posterior_full: Vec<f64>,
    pub posteriors_loo: Vec<Vec<f64>>,
}

const DEGENERATE_TOTAL: f64 = 1e-15;

/// Absolute slack on the bound comparison, absorbing roundoff in the grid sums.
pub const BOUND_SLACK: f64 = 1e-9;

/// `raw / Σ raw`, or uniform when the total is below 1e-15.
pub fn relative_credibility(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Contract("relative credibility of zero modalities".into()));
    }
    if let Some(c) = raw.iter().find(|c| !(c.is_finite() && **c >= -1e-12)) {
        return Err(Error::Contract(format!("credibility {c} is negative or non-finite")));
    }
    let clipped: Vec<f64> = raw.iter().map(|c| c.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= DEGENERATE_TOTAL {
        return Ok(vec![1.0 / raw.len() as f64; raw.len()]);
    }
    Ok(clipped.iter().map(|c| c / total).collect())
}

/// Cached passes behind a credibility report, reused for differentiation.
#[derive(Clone, Debug)]
pub struct CredibilityPass {
    pub report: CredibilityReport,
    full: PosteriorPass,
    loo: Vec<PosteriorPass>,
}

pub fn credibility_forward(circuit: &Circuit, preds: &[ProbVector]) -> Result<CredibilityPass> {
    let observed: Vec<Option<ProbVector>> = preds.iter().cloned().map(Some).collect();
    let full = posterior_forward(circuit, &observed)?;
    let loo = (0..preds.len())
        .map(|j| {
            let mut ev = observed.clone();
            ev[j] = None;
            posterior_forward(circuit, &ev)
        })
        .collect::<Result<Vec<_>>>()?;
    let f = full.posterior.values();
    let raw: Vec<f64> = loo.iter().map(|g| kl_divergence(f, g.posterior.values())).collect();
    let relative = relative_credibility(&raw)?;
    let report = CredibilityReport {
        raw,
        relative,
        posterior_full: f.to_vec(),
        posteriors_loo: loo.iter().map(|g| g.posterior.values().to_vec()).collect(),
    };
    Ok(CredibilityPass { report, full, loo })
}

/// Per-modality credibility: KL from the full posterior to the posterior with modality `j`
/// marginalized out.
pub fn credibility(circuit: &Circuit, preds: &[ProbVector]) -> Result<CredibilityReport> {
    Ok(credibility_forward(circuit, preds)?.report)
}

/// `P(Y | p_1..p_M)`.
pub fn fuse_dpc(circuit: &Circuit, preds: &[ProbVector]) -> Result<ProbVector> {
    let observed: Vec<Option<ProbVector>> = preds.iter().cloned().map(Some).collect();
    Ok(posterior_forward(circuit, &observed)?.posterior)
}

pub fn convex_combination(weights: &[f64], preds: &[ProbVector]) -> ProbVector {
    let k = preds[0].len();
    let mut out = vec![0.0; k];
    for (w, p) in weights.iter().zip(preds) {
        for (o, v) in out.iter_mut().zip(p.values()) {
            *o += w * v;
        }
    }
    ProbVector::new_unchecked(out)
}

/// Credibility-weighted mean of the unimodal predictions.
pub fn fuse_cwm(circuit: &Circuit, preds: &[ProbVector]) -> Result<ProbVector> {
    let report = credibility(circuit, preds)?;
    Ok(convex_combination(&report.relative, preds))
}

/// Back-propagates `dL/d(cwm output)` through the credibility weights into the circuit
/// (scaled by `theta_scale`, `evidence_scale`) and returns the direct `dL/dp_j` terms;
/// evidence-side terms are accumulated in `out.evidence`.
pub fn cwm_backward_into(
    circuit: &Circuit,
    pass: &CredibilityPass,
    preds: &[ProbVector],
    upstream: &[f64],
    theta_scale: f64,
    evidence_scale: f64,
    out: &mut Gradients,
) -> Result<Vec<Vec<f64>>> {
    let w = &pass.report.relative;
    let direct: Vec<Vec<f64>> = w.iter().map(|wj| upstream.iter().map(|g| wj * g).collect()).collect();
    let raw = &pass.report.raw;
    let total: f64 = raw.iter().map(|c| c.max(0.0)).sum();
    if total <= DEGENERATE_TOTAL {
        return Ok(direct);
    }
    let dw: Vec<f64> = preds
        .iter()
        .map(|p| p.values().iter().zip(upstream).map(|(a, b)| a * b).sum())
        .collect();
    let mean_dw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
    let dc: Vec<f64> = dw.iter().map(|d| (d - mean_dw) / total).collect();

    let f = pass.full.posterior.values();
    let k = f.len();
    let mut up_full = vec![0.0; k];
    for (j, loo) in pass.loo.iter().enumerate() {
        if dc[j] == 0.0 {
            continue;
        }
        let g = loo.posterior.values();
        let mut up_loo = vec![0.0; k];
        for i in 0..k {
            if f[i] > 0.0 {
                up_full[i] += dc[j] * (f[i].ln() - g[i].max(CLAMP).ln() + 1.0);
                if g[i] >= CLAMP {
                    up_loo[i] = -dc[j] * f[i] / g[i];
                }
            }
        }
        posterior_backward_into(circuit, loo, &up_loo, theta_scale, evidence_scale, out)?;
    }
    posterior_backward_into(circuit, &pass.full, &up_full, theta_scale, evidence_scale, out)?;
    Ok(direct)
}

/// `Σ softmax(weight_logits)_j p_j`.
pub fn baseline_weighted_mean(weight_logits: &[f64], preds: &[ProbVector]) -> Result<ProbVector> {
    if weight_logits.len() != preds.len() || preds.is_empty() {
        return Err(Error::InvalidDimensions("one weight logit per modality".into()));
    }
    Ok(convex_combination(&softmax(weight_logits), preds))
}

/// Returns `(dL/dlogits, dL/dp_j)` for the weighted mean.
pub fn weighted_mean_backward(
    weight_logits: &[f64],
    preds: &[ProbVector],
    upstream: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let w = softmax(weight_logits);
    let dw: Vec<f64> = preds
        .iter()
        .map(|p| p.values().iter().zip(upstream).map(|(a, b)| a * b).sum())
        .collect();
    let dp = w.iter().map(|wj| upstream.iter().map(|g| wj * g).collect()).collect();
    (softmax_backward(&w, &dw), dp)
}

fn noisy_or_scores(preds: &[ProbVector]) -> Vec<f64> {
    let k = preds[0].len();
    (0..k)
        .map(|y| 1.0 - preds.iter().map(|p| 1.0 - p[y]).product::<f64>())
        .collect()
}

/// Per-class `1 - Π_j (1 - p_j[y])`, normalized over classes.
pub fn baseline_noisy_or(preds: &[ProbVector]) -> Result<ProbVector> {
    if preds.is_empty() {
        return Err(Error::InvalidDimensions("noisy-or needs at least one modality".into()));
    }
    let s = noisy_or_scores(preds);
    let total: f64 = s.iter().sum();
    Ok(ProbVector::new_unchecked(s.iter().map(|v| v / total).collect()))
}

/// `dL/dp_j` for the normalized noisy-or.
pub fn noisy_or_backward(preds: &[ProbVector], upstream: &[f64]) -> Vec<Vec<f64>> {
    let s = noisy_or_scores(preds);
    let total: f64 = s.iter().sum();
    let dot: f64 = s.iter().zip(upstream).map(|(a, b)| a / total * b).sum();
    let ds: Vec<f64> = upstream.iter().map(|g| (g - dot) / total).collect();
    (0..preds.len())
        .map(|j| {
            (0..s.len())
                .map(|y| {
                    let others: f64 = preds
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != j)
                        .map(|(_, p)| 1.0 - p[y])
                        .product();
                    ds[y] * others
                })
                .collect()
        })
        .collect()
}

pub const MLP_HIDDEN: usize = 64;

/// Two hidden ReLU layers of 64 units over the concatenated predictions, softmax output.
/// Each layer stores `out` rows of `in` weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub w3: Vec<Vec<f64>>,
    pub b3: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpPass {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub output: ProbVector,
}

fn affine(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bi)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

impl Mlp {
    pub fn zeros(num_modalities: usize, num_classes: usize) -> Self {
        let input = num_modalities * num_classes;
        Mlp {
            w1: vec![vec![0.0; input]; MLP_HIDDEN],
            b1: vec![0.0; MLP_HIDDEN],
            w2: vec![vec![0.0; MLP_HIDDEN]; MLP_HIDDEN],
            b2: vec![0.0; MLP_HIDDEN],
            w3: vec![vec![0.0; MLP_HIDDEN]; num_classes],
            b3: vec![0.0; num_classes],
        }
    }

    /// He-initialized weights, zero biases.
    pub fn random(num_modalities: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = num_modalities * num_classes;
        let mut layer = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("finite std");
            (0..rows)
                .map(|_| (0..cols).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        Mlp {
            w1: layer(MLP_HIDDEN, input),
            b1: vec![0.0; MLP_HIDDEN],
            w2: layer(MLP_HIDDEN, MLP_HIDDEN),
            b2: vec![0.0; MLP_HIDDEN],
            w3: layer(num_classes, MLP_HIDDEN),
            b3: vec![0.0; num_classes],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.first().map_or(0, Vec::len)
    }

    pub fn forward(&self, preds: &[ProbVector]) -> Result<MlpPass> {
        let input: Vec<f64> = preds.iter().flat_map(|p| p.values().iter().copied()).collect();
        if input.len() != self.input_dim() {
            return Err(Error::InvalidDimensions(format!(
                "MLP expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let relu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.max(0.0)).collect() };
        let h1 = relu(affine(&self.w1, &self.b1, &input));
        let h2 = relu(affine(&self.w2, &self.b2, &h1));
        let output = ProbVector::new_unchecked(softmax(&affine(&self.w3, &self.b3, &h2)));
        Ok(MlpPass { input, h1, h2, output })
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in [(&self.w1, &self.b1), (&self.w2, &self.b2), (&self.w3, &self.b3)] {
            out.extend(w.iter().flatten());
            out.extend(b.iter());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        [(&self.w1, &self.b1), (&self.w2, &self.b2), (&self.w3, &self.b3)]
            .iter()
            .map(|(w, b)| w.len() * w.first().map_or(0, Vec::len) + b.len())
            .sum()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::InvalidDimensions("MLP parameter count".into()));
        }
        let mut it = params.iter().copied();
        for (w, b) in [
            (&mut self.w1, &mut self.b1),
            (&mut self.w2, &mut self.b2),
            (&mut self.w3, &mut self.b3),
        ] {
            w.iter_mut()
                .flatten()
                .chain(b.iter_mut())
                .for_each(|x| *x = it.next().expect("length checked"));
        }
        Ok(())
    }

    /// Returns the flattened parameter gradient (layout of [`Mlp::params`]) and `dL/dp_j`.
    pub fn backward(&self, pass: &MlpPass, upstream: &[f64], num_classes: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let dz3 = softmax_backward(pass.output.values(), upstream);
        let back = |w: &[Vec<f64>], dz: &[f64], width: usize| -> Vec<f64> {
            let mut dx = vec![0.0; width];
            for (row, d) in w.iter().zip(dz) {
                for (x, a) in dx.iter_mut().zip(row) {
                    *x += a * d;
                }
            }
            dx
        };
        let outer =
            |dz: &[f64], x: &[f64]| -> Vec<f64> { dz.iter().flat_map(|d| x.iter().map(move |v| d * v)).collect() };

        let dh2 = back(&self.w3, &dz3, MLP_HIDDEN);
        let dz2: Vec<f64> = dh2
            .iter()
            .zip(&pass.h2)
            .map(|(d, h)| if *h > 0.0 { *d } else { 0.0 })
            .collect();
        let dh1 = back(&self.w2, &dz2, MLP_HIDDEN);
        let dz1: Vec<f64> = dh1
            .iter()
            .zip(&pass.h1)
            .map(|(d, h)| if *h > 0.0 { *d } else { 0.0 })
            .collect();
        let dinput = back(&self.w1, &dz1, pass.input.len());

        let mut grad = outer(&dz1, &pass.input);
        grad.extend(&dz1);
        grad.extend(outer(&dz2, &pass.h1));
        grad.extend(&dz2);
        grad.extend(outer(&dz3, &pass.h2));
        grad.extend(&dz3);
        let dp = dinput.chunks(num_classes).map(<[f64]>::to_vec).collect();
        (grad, dp)
    }
}

pub fn baseline_mlp(mlp: &Mlp, preds: &[ProbVector]) -> Result<ProbVector> {
    Ok(mlp.forward(preds)?.output)
}

/// Estimate of one modality's side of the credibility/entropy bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub modality: usize,
    /// Mean credibility over the samples.
    pub lhs: f64,
    pub stderr: f64,
    /// Negative conditional entropy of this modality's block given the others.
    pub rhs: f64,
    pub satisfied: bool,
}

/// Checks `E[C_j] >= -H(F_j | F_-j)` for each modality of a `K = 2, M = 2` circuit whose
/// leaves are all bounded by one. Samples come from the grid-discretized modality marginal.
pub fn theorem1_bound_check(
    circuit: &Circuit,
    num_samples: usize,
    grid_resolution: usize,
    seed: u64,
) -> Result<Vec<BoundEstimate>> {
    let unbounded = circuit.unbounded_leaves();
    if !unbounded.is_empty() {
        return Err(Error::Refused(format!("leaves {unbounded:?} have densities above one")));
    }
    theorem1_estimate(circuit, num_samples, grid_resolution, seed)
}

/// [`theorem1_bound_check`] without the bounded-leaf precondition.
pub fn theorem1_estimate(
    circuit: &Circuit,
    num_samples: usize,
    grid_resolution: usize,
    seed: u64,
) -> Result<Vec<BoundEstimate>> {
    let (k, m) = (circuit.num_classes(), circuit.num_modalities());
    if k != 2 || m != 2 {
        return Err(Error::Refused(format!(
            "bound estimator needs K = 2 and M = 2, got K = {k}, M = {m}"
        )));
    }
    if num_samples < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let (grid, _) = simplex_grid(k, grid_resolution)?;
    let n = grid.len();
    let pv = |i: usize| ProbVector::new_unchecked(grid[i].clone());

    // log f(p1, p2) over the product grid and the single-block marginals
    let mut log_joint = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let ev = Evidence {
                target: None,
                modalities: vec![Some(pv(a)), Some(pv(b))],
            };
            log_joint[a * n + b] = log_marginal(circuit, &ev)?;
        }
    }
    let single = |j: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut modalities = vec![None, None];
                modalities[j] = Some(pv(i));
                log_marginal(
                    circuit,
                    &Evidence {
                        target: None,
                        modalities,
                    },
                )
            })
            .collect()
    };
    let log_m1 = single(0)?;
    let log_m2 = single(1)?;

    let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_joint.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut rhs = [0.0; 2];
    for a in 0..n {
        for b in 0..n {
            let w = weights[a * n + b] / total;
            let lj = log_joint[a * n + b];
            // dropping modality 1 leaves p2, and vice versa
            rhs[0] += w * (lj - log_m2[b]);
            rhs[1] += w * (lj - log_m1[a]);
        }
    }

    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Refused(format!("sampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: Vec<Option<[f64; 2]>> = vec![None; n * n];
    let mut sums = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..num_samples {
        let cell = dist.sample(&mut rng);
        let c = match cache[cell] {
            Some(c) => c,
            None => {
                let raw = credibility(circuit, &[pv(cell / n), pv(cell % n)])?.raw;
                let c = [raw[0], raw[1]];
                cache[cell] = Some(c);
                c
            }
        };
        for j in 0..2 {
            sums[j] += c[j];
            sq[j] += c[j] * c[j];
        }
    }
    let ns = num_samples as f64;
    Ok((0..2)
        .map(|j| {
            let mean = sums[j] / ns;
            let var = ((sq[j] - ns * mean * mean) / (ns - 1.0)).max(0.0);
            let stderr = (var / ns).sqrt();
            BoundEstimate {
                modality: j + 1,
                lhs: mean,
                stderr,
                rhs: rhs[j],
                satisfied: mean >= rhs[j] - 3.0 * stderr - BOUND_SLACK,
            }
        })
        .collect())
}

/// Every leaf of `circuit` passes the unit density bound.
pub fn all_leaves_bounded(circuit: &Circuit) -> bool {
    circuit.leaves().all(|(_, _, d)| check_leaf_density_bound(d).bounded)
}
