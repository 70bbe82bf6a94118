//! Experiment runners: credibility under injected noise, credibility across training epochs,
//! and robustness of every fusion method, with their CSV tables.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{inject_noise, sample_dirichlet, split, ModalityInput, MultimodalDataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::json::format_real;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{FusionMode, FusionModel, ModelConfig};
use crate::special::sub_seed;
use crate::train::{credibility_summary, mean_and_stderr, train, TrainConfig, TrainOutcome};

/// Settings shared by the noise protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub lambdas: Vec<f64>,
    /// 1-based index of the modality that receives noise.
    pub noised_modality: usize,
    pub trials: usize,
    pub seed: u64,
    /// Dirichlet concentration of the noise; all ones when absent.
    pub noise_alpha: Option<Vec<f64>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            noised_modality: 2,
            trials: 3,
            seed: 0,
            noise_alpha: None,
        }
    }
}

impl NoiseConfig {
    fn check(&self, num_modalities: usize, num_classes: usize) -> Result<Vec<f64>> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidParameter(format!(
                "lambda grid {:?} must be nonempty and inside [0, 1]",
                self.lambdas
            )));
        }
        if self.lambdas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "lambda grid must be strictly increasing".into(),
            ));
        }
        if self.noised_modality == 0 || self.noised_modality > num_modalities {
            return Err(Error::InvalidParameter(format!(
                "noised modality {} is not in 1..={num_modalities}",
                self.noised_modality
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("need at least one trial".into()));
        }
        let alpha = self.noise_alpha.clone().unwrap_or_else(|| vec![1.0; num_classes]);
        if alpha.len() != num_classes {
            return Err(Error::InvalidDimensions("noise alpha needs one entry per class".into()));
        }
        Ok(alpha)
    }

    fn points(&self) -> Vec<(usize, f64, usize)> {
        self.lambdas
            .iter()
            .enumerate()
            .flat_map(|(li, &l)| (0..self.trials).map(move |t| (li, l, t)))
            .collect()
    }
}

/// Per-point seed: lambda index and trial select distinct streams.
fn point_seed(seed: u64, lambda_index: usize, trial: usize) -> u64 {
    sub_seed(sub_seed(seed, lambda_index as u64), trial as u64)
}

/// Replaces modality `j` (0-based) of a probability dataset with `λ p + (1-λ) N`.
pub fn noise_probabilities(
    dataset: &MultimodalDataset,
    j: usize,
    lambda: f64,
    alpha: &[f64],
    seed: u64,
) -> Result<MultimodalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for (i, e) in out.examples.iter_mut().enumerate() {
        match &e.modalities[j] {
            ModalityInput::Probs(p) => {
                e.modalities[j] = ModalityInput::Probs(inject_noise(p, lambda, alpha, &mut rng)?);
            }
            _ => {
                return Err(Error::at_example(
                    i,
                    Error::Usage("noise needs probability inputs".into()),
                ))
            }
        }
    }
    Ok(out)
}

/// Marks modality `j` (0-based) of a feature dataset to have its predicted distribution
/// mixed with a fixed per-example Dirichlet draw.
pub fn noise_features(
    dataset: &MultimodalDataset,
    j: usize,
    lambda: f64,
    alpha: &[f64],
    seed: u64,
) -> Result<MultimodalDataset> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} is outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for (i, e) in out.examples.iter_mut().enumerate() {
        let features = match &e.modalities[j] {
            ModalityInput::Features(x) => x.clone(),
            ModalityInput::Noised { features, .. } => features.clone(),
            ModalityInput::Probs(_) => {
                return Err(Error::at_example(
                    i,
                    Error::Usage("feature noise needs feature inputs".into()),
                ));
            }
        };
        let noise = sample_dirichlet(alpha, &mut rng)?;
        e.modalities[j] = ModalityInput::Noised {
            features,
            lambda,
            noise,
        };
    }
    Ok(out)
}

/// Trains one system per fusion mode on the train split, validating on the val split.
pub fn train_systems(
    dataset: &MultimodalDataset,
    modes: &[FusionMode],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<Vec<TrainOutcome>> {
    let train_set = dataset.subset(Split::Train)?;
    let val = dataset.subset(Split::Val)?;
    modes
        .par_iter()
        .map(|&mode| {
            let fresh = FusionModel::new(mode, &train_set, model, sub_seed(config.seed, 1))?;
            train(fresh, &train_set, Some(&val), config)
        })
        .collect()
}

/// Test metrics of one method at one noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub lambda: f64,
    pub trial: usize,
    pub metrics: MetricsReport,
}

/// One point of a credibility table; `epoch` is set for trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibilityRow {
    pub lambda: f64,
    pub epoch: Option<usize>,
    /// 1-based.
    pub modality: usize,
    pub mean_relative_credibility: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub lambdas: Vec<f64>,
    /// Per lambda, mean relative credibility per modality pooled over trials and test examples.
    pub credibility: Vec<Vec<f64>>,
    /// Standard error matching `credibility`.
    pub stderr: Vec<Vec<f64>>,
    /// CWM and DPC metrics of the retrained circuit per lambda and trial.
    pub metrics: Vec<MetricsRow>,
}

impl SweepResult {
    pub fn credibility_rows(&self) -> Vec<CredibilityRow> {
        let mut rows = Vec::new();
        for (li, &lambda) in self.lambdas.iter().enumerate() {
            for (j, (&mean, &stderr)) in self.credibility[li].iter().zip(&self.stderr[li]).enumerate() {
                rows.push(CredibilityRow {
                    lambda,
                    epoch: None,
                    modality: j + 1,
                    mean_relative_credibility: mean,
                    stderr,
                });
            }
        }
        rows
    }
}

/// Settings of the noise sweep beyond the noise grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub noise: NoiseConfig,
    /// Optimization of the retraining step; `eta1` only matters with `retrain_all`.
    pub retrain: TrainConfig,
    /// Retrain predictors and circuit on noised features instead of the circuit alone.
    pub retrain_all: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            noise: NoiseConfig::default(),
            retrain: TrainConfig {
                t_max: 500,
                track_credibility: false,
                ..reference_train_config(0)
            },
            retrain_all: false,
        }
    }
}

/// For each lambda and trial: noise the chosen modality's predictions on the train and test
/// splits, retrain the circuit of `system` (warm start, predictors frozen) on the noised
/// train split, and measure credibility and metrics on the noised test split.
pub fn run_noise_sweep(dataset: &MultimodalDataset, system: &FusionModel, config: &SweepConfig) -> Result<SweepResult> {
    if !system.fusion.uses_circuit() {
        return Err(Error::Usage(format!(
            "noise sweep needs a circuit system, got {}",
            system.fusion
        )));
    }
    let alpha = config.noise.check(system.num_modalities(), system.num_classes)?;
    let j = config.noise.noised_modality - 1;
    let probs = if config.retrain_all {
        None
    } else {
        Some(system.to_probs_dataset(dataset)?)
    };
    let points = config.noise.points();
    let outcomes = points
        .par_iter()
        .map(|&(li, lambda, trial)| -> Result<(Vec<Vec<f64>>, Vec<MetricsRow>)> {
            let seed = point_seed(config.noise.seed, li, trial);
            let (noised, start) = match &probs {
                Some(p) => (
                    noise_probabilities(p, j, lambda, &alpha, seed)?,
                    system.with_passthrough_predictors(),
                ),
                None => (noise_features(dataset, j, lambda, &alpha, seed)?, system.clone()),
            };
            let retrain = TrainConfig {
                seed: sub_seed(seed, 7),
                ..config.retrain.clone()
            };
            let model = train(start, &noised.subset(Split::Train)?, None, &retrain)?.model;
            let test = noised.subset(Split::Test)?;
            let credibility = test
                .examples
                .par_iter()
                .map(|e| model.credibility(e).map(|r| r.relative))
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for mode in [FusionMode::Cwm, FusionMode::Dpc] {
                let m = FusionModel {
                    fusion: mode,
                    ..model.clone()
                };
                rows.push(MetricsRow {
                    method: mode.name().to_string(),
                    lambda,
                    trial,
                    metrics: compute_metrics(&m.predict_all(&test)?, &test.labels())?,
                });
            }
            Ok((credibility, rows))
        })
        .collect::<Vec<_>>();
    let mut credibility = Vec::new();
    let mut stderr = Vec::new();
    let mut metrics = Vec::new();
    let mut pooled: Vec<Vec<f64>> = Vec::new();
    for (point, outcome) in points.iter().zip(outcomes) {
        let (cred, rows) = outcome.map_err(|e| Error::Contract(format!("lambda {}: {e}", point.1)))?;
        pooled.extend(cred);
        metrics.extend(rows);
        if point.2 + 1 == config.noise.trials {
            let (mean, se) = mean_and_stderr(&pooled);
            credibility.push(mean);
            stderr.push(se);
            pooled.clear();
        }
    }
    Ok(SweepResult {
        lambdas: config.noise.lambdas.clone(),
        credibility,
        stderr,
        metrics,
    })
}

/// Validation credibility of one training run with noise pre-applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibilityTrajectory {
    pub lambda: f64,
    /// Before any update.
    pub initial: Vec<f64>,
    pub initial_stderr: Vec<f64>,
    /// One entry per epoch.
    pub epochs: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
}

impl CredibilityTrajectory {
    pub fn rows(&self) -> Vec<CredibilityRow> {
        let all = std::iter::once((&self.initial, &self.initial_stderr)).chain(self.epochs.iter().zip(&self.stderr));
        all.enumerate()
            .flat_map(|(epoch, (mean, se))| {
                mean.iter()
                    .zip(se)
                    .enumerate()
                    .map(move |(j, (&m, &s))| CredibilityRow {
                        lambda: self.lambda,
                        epoch: Some(epoch),
                        modality: j + 1,
                        mean_relative_credibility: m,
                        stderr: s,
                    })
            })
            .collect()
    }
}

/// For each lambda, trains a fresh system on the train split with noise applied to one
/// modality's predictions and records mean validation relative credibility every epoch.
/// `config.noise.trials` is ignored; each lambda is one run seeded from `config.noise.seed`.
pub fn run_credibility_epochs(
    dataset: &MultimodalDataset,
    fusion: FusionMode,
    model: &ModelConfig,
    train_config: &TrainConfig,
    noise: &NoiseConfig,
) -> Result<Vec<CredibilityTrajectory>> {
    if !fusion.uses_circuit() {
        return Err(Error::Usage(format!(
            "credibility needs a circuit system, got {fusion}"
        )));
    }
    let alpha = noise.check(dataset.num_modalities, dataset.num_classes)?;
    let j = noise.noised_modality - 1;
    noise
        .lambdas
        .par_iter()
        .enumerate()
        .map(|(li, &lambda)| {
            let seed = point_seed(noise.seed, li, 0);
            let noised = noise_features(dataset, j, lambda, &alpha, seed)?;
            let train_set = noised.subset(Split::Train)?;
            let val = noised.subset(Split::Val)?;
            let fresh = FusionModel::new(fusion, &train_set, model, sub_seed(noise.seed, 1))?;
            let (initial, initial_stderr) = credibility_summary(&fresh, &val)?;
            let cfg = TrainConfig {
                seed: sub_seed(noise.seed, 2),
                track_credibility: true,
                patience: None,
                ..train_config.clone()
            };
            let out = train(fresh, &train_set, Some(&val), &cfg)?;
            Ok(CredibilityTrajectory {
                lambda,
                initial,
                initial_stderr,
                epochs: out.history.iter().map(|r| r.mean_credibility.clone()).collect(),
                stderr: out.history.iter().map(|r| r.credibility_stderr.clone()).collect(),
            })
        })
        .collect()
}

/// Evaluates every system on the test split with one modality's predictions noised. The
/// same noise draws are shared by all systems at a given lambda and trial.
pub fn run_robustness(
    dataset: &MultimodalDataset,
    systems: &[FusionModel],
    noise: &NoiseConfig,
) -> Result<Vec<MetricsRow>> {
    let first = systems
        .first()
        .ok_or_else(|| Error::Usage("no systems to evaluate".into()))?;
    let alpha = noise.check(first.num_modalities(), first.num_classes)?;
    let j = noise.noised_modality - 1;
    let test = dataset.subset(Split::Test)?;
    let labels = test.labels();
    let clean: Vec<Vec<_>> = systems
        .iter()
        .map(|s| {
            test.examples
                .iter()
                .map(|e| s.unimodal_predictions(e))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let points = noise.points();
    let per_point = points
        .par_iter()
        .map(|&(li, lambda, trial)| -> Result<Vec<MetricsRow>> {
            let mut rng = ChaCha8Rng::seed_from_u64(point_seed(noise.seed, li, trial));
            let draws = (0..test.len())
                .map(|_| sample_dirichlet(&alpha, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            systems
                .iter()
                .zip(&clean)
                .map(|(system, preds)| {
                    let fused = preds
                        .iter()
                        .zip(&draws)
                        .map(|(p, n)| {
                            let mut p = p.clone();
                            p[j] = crate::data::mix(&p[j], lambda, n);
                            system.fuse(&p)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(MetricsRow {
                        method: system.fusion.name().to_string(),
                        lambda,
                        trial,
                        metrics: compute_metrics(&fused, &labels)?,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

/// Mean and standard error over trials of `metric(λ = 1) - metric(λ)` for one method.
pub fn mean_decline(
    rows: &[MetricsRow],
    method: &str,
    lambda: f64,
    metric: impl Fn(&MetricsReport) -> f64,
) -> Option<(f64, f64)> {
    let at = |l: f64| -> Vec<&MetricsRow> { rows.iter().filter(|r| r.method == method && r.lambda == l).collect() };
    let clean = at(1.0);
    let noised = at(lambda);
    if clean.is_empty() || noised.is_empty() {
        return None;
    }
    let declines: Vec<Vec<f64>> = noised
        .iter()
        .map(|r| {
            let base = clean.iter().find(|c| c.trial == r.trial).unwrap_or(&clean[0]);
            vec![metric(&base.metrics) - metric(&r.metrics)]
        })
        .collect();
    let (mean, se) = mean_and_stderr(&declines);
    Some((mean[0], se[0]))
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut k = i;
            while k + 1 < order.len() && v[order[k + 1]] == v[order[i]] {
                k += 1;
            }
            for &idx in &order[i..=k] {
                r[idx] = (i + k) as f64 / 2.0 + 1.0;
            }
            i = k + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

const METRICS_HEADER: [&str; 8] = [
    "method",
    "lambda",
    "trial",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "auroc",
];
const CREDIBILITY_HEADER: [&str; 5] = ["lambda", "epoch", "modality", "mean_relative_credibility", "stderr"];

pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.method.clone(),
            format_real(r.lambda),
            r.trial.to_string(),
            format_real(m.accuracy),
            format_real(m.macro_precision),
            format_real(m.macro_recall),
            format_real(m.macro_f1),
            format_real(m.macro_auroc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    write_metrics_csv(rows, std::fs::File::create(path)?)
}

fn parse_real(field: &str, path: &Path, line: u64) -> Result<f64> {
    field.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        line: line as usize,
        msg: format!("not a number: {field:?}"),
    })
}

pub fn load_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: line as usize,
                msg: "wrong number of columns".into(),
            });
        }
        let real = |i: usize| parse_real(&rec[i], path, line);
        rows.push(MetricsRow {
            method: rec[0].to_string(),
            lambda: real(1)?,
            trial: real(2)? as usize,
            metrics: MetricsReport {
                accuracy: real(3)?,
                macro_precision: real(4)?,
                macro_recall: real(5)?,
                macro_f1: real(6)?,
                macro_auroc: real(7)?,
            },
        });
    }
    Ok(rows)
}

pub fn write_credibility_csv<W: std::io::Write>(rows: &[CredibilityRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CREDIBILITY_HEADER)?;
    for r in rows {
        w.write_record([
            format_real(r.lambda),
            r.epoch.map(|e| e.to_string()).unwrap_or_default(),
            r.modality.to_string(),
            format_real(r.mean_relative_credibility),
            format_real(r.stderr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_credibility_csv(rows: &[CredibilityRow], path: impl AsRef<Path>) -> Result<()> {
    write_credibility_csv(rows, std::fs::File::create(path)?)
}

pub fn load_credibility_csv(path: impl AsRef<Path>) -> Result<Vec<CredibilityRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != CREDIBILITY_HEADER.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: line as usize,
                msg: "wrong number of columns".into(),
            });
        }
        let real = |i: usize| parse_real(&rec[i], path, line);
        rows.push(CredibilityRow {
            lambda: real(0)?,
            epoch: if rec[1].is_empty() {
                None
            } else {
                Some(real(1)? as usize)
            },
            modality: real(2)? as usize,
            mean_relative_credibility: real(3)?,
            stderr: real(4)?,
        });
    }
    Ok(rows)
}

/// The two-modality synthetic benchmark used by the trend experiments, already split
/// 60/20/20.
pub fn reference_dataset(seed: u64) -> Result<MultimodalDataset> {
    let ds = crate::data::generate_synthetic(&reference_synth_config(seed))?;
    split(&ds, [0.6, 0.2, 0.2], sub_seed(seed, 99))
}

pub fn reference_synth_config(seed: u64) -> SynthConfig {
    SynthConfig {
        num_classes: 3,
        num_modalities: 2,
        num_examples: 900,
        dim: 8,
        class_separation: 3.0,
        modality_noise: vec![1.5, 1.5],
        seed,
    }
}

pub fn reference_model_config() -> ModelConfig {
    ModelConfig {
        components: 6,
        ..ModelConfig::default()
    }
}

pub fn reference_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        eta1: 0.001,
        eta2: 0.001,
        t_max: 3000,
        seed,
        optimizer: crate::train::OptimizerKind::Adam,
        ..TrainConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn small() -> MultimodalDataset {
        let ds = generate_synthetic(&SynthConfig {
            num_classes: 2,
            num_modalities: 2,
            num_examples: 90,
            dim: 3,
            class_separation: 3.0,
            modality_noise: vec![1.0, 1.0],
            seed: 1,
        })
        .unwrap();
        split(&ds, [0.6, 0.2, 0.2], 1).unwrap()
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            t_max: 40,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            components: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sweep_at_lambda_one_matches_a_noise_free_run() {
        let ds = small();
        let system = train_systems(&ds, &[FusionMode::Cwm], &model_cfg(), &quick_train())
            .unwrap()
            .remove(0)
            .model;
        let cfg = SweepConfig {
            noise: NoiseConfig {
                lambdas: vec![1.0],
                trials: 1,
                ..NoiseConfig::default()
            },
            retrain: TrainConfig {
                t_max: 20,
                ..quick_train()
            },
            retrain_all: false,
        };
        let result = run_noise_sweep(&ds, &system, &cfg).unwrap();
        // noise-free control: retrain on the clean predictions with the same seed
        let probs = system.to_probs_dataset(&ds).unwrap();
        let retrain = TrainConfig {
            seed: sub_seed(point_seed(0, 0, 0), 7),
            track_credibility: false,
            ..cfg.retrain.clone()
        };
        let control = train(
            system.with_passthrough_predictors(),
            &probs.subset(Split::Train).unwrap(),
            None,
            &retrain,
        )
        .unwrap()
        .model;
        let (mean, _) = credibility_summary(&control, &probs.subset(Split::Test).unwrap()).unwrap();
        assert_eq!(result.credibility[0], mean);
        assert!((result.credibility[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_rows_sum_to_one_and_are_deterministic() {
        let ds = small();
        let system = train_systems(&ds, &[FusionMode::Dpc], &model_cfg(), &quick_train())
            .unwrap()
            .remove(0)
            .model;
        let cfg = SweepConfig {
            noise: NoiseConfig {
                lambdas: vec![0.0, 0.5, 1.0],
                trials: 2,
                ..NoiseConfig::default()
            },
            retrain: TrainConfig {
                t_max: 10,
                ..quick_train()
            },
            retrain_all: false,
        };
        let a = run_noise_sweep(&ds, &system, &cfg).unwrap();
        let b = run_noise_sweep(&ds, &system, &cfg).unwrap();
        assert_eq!(a, b);
        for row in &a.credibility {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(a.metrics.len(), 3 * 2 * 2);
        let all = SweepConfig {
            retrain_all: true,
            ..cfg
        };
        assert_eq!(run_noise_sweep(&ds, &system, &all).unwrap().credibility.len(), 3);
    }

    #[test]
    fn trajectories_have_one_entry_per_epoch() {
        let ds = small();
        let cfg = TrainConfig {
            t_max: 12,
            batch_size: 18,
            ..TrainConfig::default()
        };
        let noise = NoiseConfig {
            lambdas: vec![0.2, 1.0],
            ..NoiseConfig::default()
        };
        let out = run_credibility_epochs(&ds, FusionMode::Cwm, &model_cfg(), &cfg, &noise).unwrap();
        // 54 training examples, batches of 18: three iterations per epoch
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|t| t.epochs.len() == 4));
        assert_eq!(out[0].rows().len(), 5 * 2);
    }

    #[test]
    fn symmetric_start_gives_uniform_credibility() {
        let ds = small();
        let sym = ModelConfig {
            init: crate::circuit::InitConfig::symmetric(),
            ..model_cfg()
        };
        let noise = NoiseConfig {
            lambdas: vec![0.5],
            ..NoiseConfig::default()
        };
        let cfg = TrainConfig {
            t_max: 3,
            ..quick_train()
        };
        let out = run_credibility_epochs(&ds, FusionMode::Cwm, &sym, &cfg, &noise).unwrap();
        for c in &out[0].initial {
            assert!((c - 0.5).abs() <= 0.1);
        }
    }

    #[test]
    fn robustness_clean_rows_match_clean_metrics() {
        let ds = small();
        let systems: Vec<FusionModel> = train_systems(&ds, &FusionMode::ALL, &model_cfg(), &quick_train())
            .unwrap()
            .into_iter()
            .map(|o| o.model)
            .collect();
        let noise = NoiseConfig {
            lambdas: vec![0.2, 1.0],
            trials: 2,
            ..NoiseConfig::default()
        };
        let rows = run_robustness(&ds, &systems, &noise).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 5);
        let test = ds.subset(Split::Test).unwrap();
        for s in &systems {
            let clean = compute_metrics(&s.predict_all(&test).unwrap(), &test.labels()).unwrap();
            for r in rows.iter().filter(|r| r.lambda == 1.0 && r.method == s.fusion.name()) {
                assert_eq!(r.metrics, clean);
            }
            assert!(mean_decline(&rows, s.fusion.name(), 0.2, |m| m.macro_f1).is_some());
        }
    }

    #[test]
    fn csv_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = vec![MetricsRow {
            method: "cwm".into(),
            lambda: 0.25,
            trial: 2,
            metrics: MetricsReport {
                accuracy: 1.0 / 3.0,
                macro_precision: 0.1 + 0.2,
                macro_recall: std::f64::consts::PI / 4.0,
                macro_f1: 1e-300,
                macro_auroc: 0.5,
            },
        }];
        let p = dir.path().join("m.csv");
        save_metrics_csv(&metrics, &p).unwrap();
        assert_eq!(load_metrics_csv(&p).unwrap(), metrics);
        let cred = vec![
            CredibilityRow {
                lambda: 0.2,
                epoch: Some(3),
                modality: 2,
                mean_relative_credibility: 2.0 / 3.0,
                stderr: 1e-17,
            },
            CredibilityRow {
                lambda: 1.0,
                epoch: None,
                modality: 1,
                mean_relative_credibility: 0.1,
                stderr: 0.0,
            },
        ];
        let p = dir.path().join("c.csv");
        save_credibility_csv(&cred, &p).unwrap();
        assert_eq!(load_credibility_csv(&p).unwrap(), cred);
    }

    #[test]
    fn bad_noise_configs_are_rejected() {
        let bad = NoiseConfig {
            lambdas: vec![0.5, 0.2],
            ..NoiseConfig::default()
        };
        assert!(bad.check(2, 2).is_err());
        let bad = NoiseConfig {
            noised_modality: 3,
            ..NoiseConfig::default()
        };
        assert!(bad.check(2, 2).is_err());
    }
}
