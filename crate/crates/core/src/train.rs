//! End-to-end learning of the unimodal predictors and the combiner with two learning
//! rates, plus a central-difference gradient checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Example, ModalityInput, MultimodalDataset};
use crate::error::{Error, Result};
use crate::fusion::{
    baseline_noisy_or, baseline_weighted_mean, convex_combination, credibility_forward, cwm_backward_into,
    noisy_or_backward, weighted_mean_backward,
};
use crate::inference::{
    backward_into, forward, posterior_backward_into, posterior_forward, Evidence, Gradients, ProbVector,
};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{Combiner, FusionMode, FusionModel};
use crate::predictor::{cross_entropy, Predictor};

/// Largest componentwise relative error between `analytic` and central differences of `f`
/// at `point`. The denominator is floored at 1e-3 so near-zero components compare absolutely.
pub fn finite_difference_check(f: impl Fn(&[f64]) -> f64, point: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Usage(format!("unknown optimizer {s:?} (sgd, adam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Predictor learning rate.
    pub eta1: f64,
    /// Combiner learning rate.
    pub eta2: f64,
    pub batch_size: usize,
    pub t_max: usize,
    pub seed: u64,
    pub likelihood_weight: f64,
    pub optimizer: OptimizerKind,
    /// Keep the fused loss from reaching the predictors.
    pub block_joint_to_predictors: bool,
    /// Stop after this many epochs without a lower validation loss.
    pub patience: Option<usize>,
    /// Record validation credibility in the history (circuit combiners only).
    pub track_credibility: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta1: 0.05,
            eta2: 0.05,
            batch_size: 32,
            t_max: 2000,
            seed: 0,
            likelihood_weight: 1.0,
            optimizer: OptimizerKind::Sgd,
            block_joint_to_predictors: false,
            patience: None,
            track_credibility: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.eta1) || !ok(self.eta2) || !ok(self.likelihood_weight) {
            return Err(Error::InvalidParameter(
                "learning rates and likelihood weight must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidParameter("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradients shaped like the model: one flattened vector per predictor (empty for
/// passthroughs) and the combiner's flattened parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub predictors: Vec<Vec<f64>>,
    pub combiner: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros_like(model: &FusionModel) -> Self {
        ParamGradients {
            predictors: model.predictor_params().iter().map(|p| vec![0.0; p.len()]).collect(),
            combiner: vec![0.0; model.combiner_params().len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.predictors
            .iter()
            .flatten()
            .chain(&self.combiner)
            .copied()
            .collect()
    }

    fn add(&mut self, other: &ParamGradients) {
        for (a, b) in self.predictors.iter_mut().zip(&other.predictors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.combiner.iter_mut().zip(&other.combiner).for_each(|(x, y)| *x += y);
    }

    fn scale(&mut self, s: f64) {
        self.predictors
            .iter_mut()
            .flatten()
            .chain(self.combiner.iter_mut())
            .for_each(|x| *x *= s);
    }

    fn is_finite(&self) -> bool {
        self.predictors
            .iter()
            .flatten()
            .chain(&self.combiner)
            .all(|x| x.is_finite())
    }
}

impl FusionModel {
    pub fn predictor_params(&self) -> Vec<Vec<f64>> {
        self.predictors
            .iter()
            .map(|p| match p {
                Predictor::Linear(lin) => lin.params(),
                Predictor::Passthrough => Vec::new(),
            })
            .collect()
    }

    pub fn combiner_params(&self) -> Vec<f64> {
        match &self.combiner {
            Combiner::Circuit(c) => c.params(),
            Combiner::WeightedMean(l) => l.clone(),
            Combiner::NoisyOr => Vec::new(),
            Combiner::Mlp(m) => m.params(),
        }
    }

    /// All parameters, predictors first, in the layout of [`ParamGradients::flatten`].
    pub fn flat_params(&self) -> Vec<f64> {
        self.predictor_params()
            .into_iter()
            .flatten()
            .chain(self.combiner_params())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let mut offset = 0;
        for p in &mut self.predictors {
            if let Predictor::Linear(lin) = p {
                let n = lin.params().len();
                lin.set_params(params.get(offset..offset + n).ok_or_else(too_short)?)?;
                offset += n;
            }
        }
        let rest = &params[offset.min(params.len())..];
        match &mut self.combiner {
            Combiner::Circuit(c) => c.set_params(rest),
            Combiner::WeightedMean(l) if l.len() == rest.len() => {
                l.copy_from_slice(rest);
                Ok(())
            }
            Combiner::NoisyOr if rest.is_empty() => Ok(()),
            Combiner::Mlp(m) => m.set_params(rest),
            _ => Err(too_short()),
        }
    }

    /// Adds `delta` to the parameters; entries that are exactly zero leave their parameter
    /// bit-for-bit unchanged.
    fn apply_delta(&mut self, predictors: &[Vec<f64>], combiner: &[f64]) -> Result<()> {
        for (p, d) in self.predictors.iter_mut().zip(predictors) {
            if let Predictor::Linear(lin) = p {
                for (w, dw) in lin.weights.iter_mut().flatten().chain(lin.bias.iter_mut()).zip(d) {
                    if *dw != 0.0 {
                        *w += dw;
                    }
                }
            }
        }
        match &mut self.combiner {
            Combiner::Circuit(c) => c.apply_delta(combiner)?,
            Combiner::WeightedMean(l) => add_nonzero(l, combiner),
            Combiner::NoisyOr => {}
            Combiner::Mlp(m) => {
                if combiner.iter().any(|d| *d != 0.0) {
                    let mut p = m.params();
                    add_nonzero(&mut p, combiner);
                    m.set_params(&p)?;
                }
            }
        }
        Ok(())
    }
}

fn too_short() -> Error {
    Error::InvalidDimensions("parameter vector does not match the model".into())
}

fn add_nonzero(x: &mut [f64], d: &[f64]) {
    for (a, b) in x.iter_mut().zip(d) {
        if *b != 0.0 {
            *a += b;
        }
    }
}

/// Batch objective split into its terms; `total = fused + Σ unimodal + likelihood_weight · neg_log_likelihood`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean cross-entropy of the fused prediction.
    pub fused: f64,
    /// Mean cross-entropy per modality.
    pub unimodal: Vec<f64>,
    /// Mean `-log P(y, p_1..p_M)` under the circuit; zero for other combiners.
    pub neg_log_likelihood: f64,
}

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub likelihood_weight: f64,
    pub cross_entropy: bool,
    pub block_joint_to_predictors: bool,
}

impl From<&TrainConfig> for LossTerms {
    fn from(c: &TrainConfig) -> Self {
        LossTerms {
            likelihood_weight: c.likelihood_weight,
            cross_entropy: true,
            block_joint_to_predictors: c.block_joint_to_predictors,
        }
    }
}

struct ExampleResult {
    fused: f64,
    unimodal: Vec<f64>,
    nll: f64,
    grads: ParamGradients,
}

fn example_loss_and_grads(model: &FusionModel, example: &Example, terms: &LossTerms) -> Result<ExampleResult> {
    let m = model.num_modalities();
    let k = model.num_classes;
    let y = example.label;
    let mut raw = Vec::with_capacity(m);
    let mut preds = Vec::with_capacity(m);
    for (j, input) in example.modalities.iter().enumerate() {
        let (p, r) = model.predict_modality(j, input)?;
        preds.push(p);
        raw.push(r);
    }
    let ce_on = if terms.cross_entropy { 1.0 } else { 0.0 };
    let mut grads = ParamGradients::zeros_like(model);
    let mut dp: Vec<Vec<f64>> = vec![vec![0.0; k]; m];
    let mut unimodal = Vec::with_capacity(m);
    for (j, p) in preds.iter().enumerate() {
        let (l, g) = cross_entropy(p.values(), y);
        unimodal.push(l);
        dp[j].iter_mut().zip(&g).for_each(|(a, b)| *a += ce_on * b);
    }

    let ev_scale = if terms.block_joint_to_predictors { 0.0 } else { ce_on };
    let mut joint_dp: Vec<Vec<f64>> = vec![vec![0.0; k]; m];
    let mut nll = 0.0;
    let fused = match (&model.combiner, model.fusion) {
        (Combiner::Circuit(circuit), mode) => {
            let mut cg = Gradients::zeros(circuit);
            let fused = match mode {
                FusionMode::Cwm => {
                    let pass = credibility_forward(circuit, &preds)?;
                    let out = convex_combination(&pass.report.relative, &preds);
                    let (l, g) = cross_entropy(out.values(), y);
                    let up: Vec<f64> = g.iter().map(|v| v * ce_on).collect();
                    let direct = cwm_backward_into(circuit, &pass, &preds, &up, 1.0, ev_scale, &mut cg)?;
                    for (a, b) in joint_dp.iter_mut().zip(&direct) {
                        a.iter_mut().zip(b).for_each(|(x, z)| *x += z);
                    }
                    l
                }
                _ => {
                    let observed: Vec<Option<ProbVector>> = preds.iter().cloned().map(Some).collect();
                    let pass = posterior_forward(circuit, &observed)?;
                    let (l, g) = cross_entropy(pass.posterior.values(), y);
                    let up: Vec<f64> = g.iter().map(|v| v * ce_on).collect();
                    posterior_backward_into(circuit, &pass, &up, 1.0, ev_scale, &mut cg)?;
                    l
                }
            };
            if !terms.block_joint_to_predictors {
                for (a, b) in joint_dp.iter_mut().zip(&cg.evidence) {
                    a.iter_mut().zip(b).for_each(|(x, z)| *x += z);
                }
            }
            if terms.likelihood_weight > 0.0 {
                let pass = forward(circuit, &Evidence::full(y, &preds))?;
                nll = -pass.log_value();
                backward_into(circuit, &pass, -terms.likelihood_weight, 0.0, &mut cg)?;
            }
            grads.combiner = cg.params.flatten();
            fused
        }
        (Combiner::WeightedMean(logits), _) => {
            let out = baseline_weighted_mean(logits, &preds)?;
            let (l, g) = cross_entropy(out.values(), y);
            let up: Vec<f64> = g.iter().map(|v| v * ce_on).collect();
            let (dl, dpj) = weighted_mean_backward(logits, &preds, &up);
            grads.combiner = dl;
            joint_dp = dpj;
            l
        }
        (Combiner::NoisyOr, _) => {
            let out = baseline_noisy_or(&preds)?;
            let (l, g) = cross_entropy(out.values(), y);
            let up: Vec<f64> = g.iter().map(|v| v * ce_on).collect();
            joint_dp = noisy_or_backward(&preds, &up);
            l
        }
        (Combiner::Mlp(mlp), _) => {
            let pass = mlp.forward(&preds)?;
            let (l, g) = cross_entropy(pass.output.values(), y);
            let up: Vec<f64> = g.iter().map(|v| v * ce_on).collect();
            let (dtheta, dpj) = mlp.backward(&pass, &up, k);
            grads.combiner = dtheta;
            joint_dp = dpj;
            l
        }
    };
    if !terms.block_joint_to_predictors {
        for (a, b) in dp.iter_mut().zip(&joint_dp) {
            a.iter_mut().zip(b).for_each(|(x, z)| *x += z);
        }
    }

    for (j, (pred, input)) in model.predictors.iter().zip(&example.modalities).enumerate() {
        if let (Predictor::Linear(lin), Some(r)) = (pred, &raw[j]) {
            let (features, lambda) = match input {
                ModalityInput::Features(x) => (x, 1.0),
                ModalityInput::Noised { features, lambda, .. } => (features, *lambda),
                ModalityInput::Probs(_) => unreachable!("linear predictors never see probability inputs"),
            };
            let upstream: Vec<f64> = dp[j].iter().map(|g| g * lambda).collect();
            let mut g = lin.zero_grads();
            lin.backward_into(features, r.values(), &upstream, &mut g);
            grads.predictors[j] = g.flatten();
        }
    }
    Ok(ExampleResult {
        fused,
        unimodal,
        nll,
        grads,
    })
}

/// Mean objective over `batch` and its gradient with respect to every model parameter.
/// Examples are processed in parallel and reduced in batch order.
pub fn loss_and_grads(
    model: &FusionModel,
    batch: &[&Example],
    terms: &LossTerms,
) -> Result<(LossBreakdown, ParamGradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let results = batch
        .par_iter()
        .enumerate()
        .map(|(i, e)| example_loss_and_grads(model, e, terms).map_err(|err| Error::at_example(i, err)))
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len() as f64;
    let mut grads = ParamGradients::zeros_like(model);
    let mut fused = 0.0;
    let mut nll = 0.0;
    let mut unimodal = vec![0.0; model.num_modalities()];
    for r in &results {
        grads.add(&r.grads);
        fused += r.fused;
        nll += r.nll;
        unimodal.iter_mut().zip(&r.unimodal).for_each(|(a, b)| *a += b);
    }
    grads.scale(1.0 / b);
    fused /= b;
    nll /= b;
    unimodal.iter_mut().for_each(|u| *u /= b);
    let ce_on = if terms.cross_entropy { 1.0 } else { 0.0 };
    let total = ce_on * (fused + unimodal.iter().sum::<f64>()) + terms.likelihood_weight * nll;
    Ok((
        LossBreakdown {
            total,
            fused,
            unimodal,
            neg_log_likelihood: nll,
        },
        grads,
    ))
}

#[derive(Clone, Debug)]
struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        Optimizer {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn delta(&mut self, lr: f64, grad: &[f64]) -> Vec<f64> {
        match self.kind {
            OptimizerKind::Sgd => grad.iter().map(|g| -lr * g).collect(),
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                grad.iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(g, (m, v))| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        -lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
                    })
                    .collect()
            }
        }
    }
}

/// One line of the training history, written at the end of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iter: usize,
    /// Mean total objective over the epoch's iterations.
    pub loss: f64,
    pub unimodal_losses: Vec<f64>,
    /// Mean relative credibility per modality on the validation set (or the training set
    /// when there is none); empty for combiners without a circuit.
    pub mean_credibility: Vec<f64>,
    pub credibility_stderr: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub history: Vec<EpochRecord>,
}

/// Iterations per epoch, `⌈N / B⌉`.
pub fn iterations_per_epoch(num_examples: usize, batch_size: usize) -> usize {
    num_examples.div_ceil(batch_size).max(1)
}

/// Per-modality mean and standard error of the relative credibility over `dataset`.
pub fn credibility_summary(model: &FusionModel, dataset: &MultimodalDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let reports = dataset
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            model
                .credibility(e)
                .map(|r| r.relative)
                .map_err(|err| Error::at_example(i, err))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_and_stderr(&reports))
}

/// Columnwise mean and standard error of the mean of equal-length rows.
pub fn mean_and_stderr(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let width = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..width).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let stderr = (0..width)
        .map(|j| {
            if rows.len() < 2 {
                return 0.0;
            }
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    (mean, stderr)
}

/// Mean fused cross-entropy and metrics of `model` on `dataset`.
pub fn evaluate(model: &FusionModel, dataset: &MultimodalDataset) -> Result<(f64, MetricsReport)> {
    let preds = model.predict_all(dataset)?;
    let labels = dataset.labels();
    let loss = preds
        .iter()
        .zip(&labels)
        .map(|(p, &y)| cross_entropy(p.values(), y).0)
        .sum::<f64>()
        / preds.len() as f64;
    Ok((loss, compute_metrics(&preds, &labels)?))
}

/// Runs `config.t_max` mini-batch steps on `train`, sampling uniformly with replacement.
/// `val`, when given, is evaluated at the end of every epoch.
pub fn train(
    model: FusionModel,
    train_set: &MultimodalDataset,
    val: Option<&MultimodalDataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidDimensions("training set is empty".into()));
    }
    if val.is_some_and(|v| v.is_empty()) {
        return Err(Error::InvalidDimensions("validation set is empty".into()));
    }
    let mut model = model;
    let terms = LossTerms::from(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_pred = model.predictor_params().iter().map(Vec::len).sum();
    let mut opt_pred = Optimizer::new(config.optimizer, n_pred);
    let mut opt_comb = Optimizer::new(config.optimizer, model.combiner_params().len());
    let per_epoch = iterations_per_epoch(train_set.len(), config.batch_size);
    let mut history = Vec::new();
    let mut epoch_loss = 0.0;
    let mut epoch_uni = vec![0.0; model.num_modalities()];
    let mut epoch_iters = 0usize;
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;

    for iter in 1..=config.t_max {
        let batch: Vec<&Example> = (0..config.batch_size)
            .map(|_| &train_set.examples[rng.random_range(0..train_set.len())])
            .collect();
        let (loss, grads) = loss_and_grads(&model, &batch, &terms).map_err(|e| match e {
            Error::AtExample { index, source } => Error::NonFiniteLoss {
                iter,
                detail: format!("batch example {index}: {source}"),
            },
            other => other,
        })?;
        if !loss.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                detail: format!(
                    "loss {} (fused {}, unimodal {:?}, nll {}), finite gradients: {}",
                    loss.total,
                    loss.fused,
                    loss.unimodal,
                    loss.neg_log_likelihood,
                    grads.is_finite()
                ),
            });
        }
        let flat_pred: Vec<f64> = grads.predictors.iter().flatten().copied().collect();
        let dpred_flat = opt_pred.delta(config.eta1, &flat_pred);
        let mut dpred = Vec::with_capacity(grads.predictors.len());
        let mut offset = 0;
        for g in &grads.predictors {
            dpred.push(dpred_flat[offset..offset + g.len()].to_vec());
            offset += g.len();
        }
        let dcomb = opt_comb.delta(config.eta2, &grads.combiner);
        model.apply_delta(&dpred, &dcomb)?;

        epoch_loss += loss.total;
        epoch_uni.iter_mut().zip(&loss.unimodal).for_each(|(a, b)| *a += b);
        epoch_iters += 1;
        if iter % per_epoch == 0 || iter == config.t_max {
            let n = epoch_iters as f64;
            let mut record = EpochRecord {
                epoch: iter.div_ceil(per_epoch),
                iter,
                loss: epoch_loss / n,
                unimodal_losses: epoch_uni.iter().map(|u| u / n).collect(),
                mean_credibility: Vec::new(),
                credibility_stderr: Vec::new(),
                val_accuracy: None,
                val_loss: None,
                val_metrics: None,
            };
            if config.track_credibility && model.fusion.uses_circuit() {
                (record.mean_credibility, record.credibility_stderr) =
                    credibility_summary(&model, val.unwrap_or(train_set))?;
            }
            if let Some(v) = val {
                let (vl, metrics) = evaluate(&model, v)?;
                record.val_accuracy = Some(metrics.accuracy);
                record.val_loss = Some(vl);
                record.val_metrics = Some(metrics);
            }
            let val_loss = record.val_loss;
            history.push(record);
            epoch_loss = 0.0;
            epoch_uni.iter_mut().for_each(|u| *u = 0.0);
            epoch_iters = 0;
            if let (Some(patience), Some(vl)) = (config.patience, val_loss) {
                if vl < best_val {
                    best_val = vl;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= patience {
                        break;
                    }
                }
            }
        }
    }
    Ok(TrainOutcome { model, history })
}
