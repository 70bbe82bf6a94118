//! Command-line surface. Every flag can also be given in a TOML file passed with
//! `--config`, under a table named after the subcommand; flags on the command line win.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::circuit::check_leaf_density_bound;
use crate::data::{generate_synthetic, load_dataset, save_dataset, split, MultimodalDataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::experiments::{
    mean_decline, run_credibility_epochs, run_noise_sweep, run_robustness, save_credibility_csv, save_metrics_csv,
    write_metrics_csv, MetricsRow, NoiseConfig, SweepConfig,
};
use crate::inference::check_marginal_dominance;
use crate::json;
use crate::model::{load_model, save_model, FusionMode, FusionModel, ModelConfig};
use crate::train::{evaluate, train, OptimizerKind, TrainConfig};

/// Environment variable holding the default seed.
pub const SEED_ENV: &str = "CREDFUSE_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "credfuse",
    version,
    about = "Credibility-aware late fusion with probabilistic circuits"
)]
pub struct Cli {
    /// TOML file with one table per subcommand
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multimodal dataset
    Gen(GenArgs),
    /// Train a fusion system
    Train(TrainArgs),
    /// Evaluate a trained system
    Eval(EvalArgs),
    /// Per-example and mean credibility of each modality
    Credibility(CredibilityArgs),
    /// Credibility against injected noise, retraining the circuit at each noise level
    SweepNoise(SweepNoiseArgs),
    /// Validation credibility across training epochs
    SweepEpochs(SweepEpochsArgs),
    /// Metrics of several systems under injected noise
    Robustness(RobustnessArgs),
    /// Structural and density checks of a trained circuit
    Validate(ValidateArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct GenArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub modalities: Option<usize>,
    #[arg(long)]
    pub examples: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    /// Feature noise per modality, comma separated
    #[arg(long, value_delimiter = ',')]
    pub noise: Option<Vec<f64>>,
    /// Train/val/test fractions
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    /// Leave the examples untagged
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub no_split: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainFlags {
    /// dpc, cwm, wm, noisyor or mlp
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub eta1: Option<f64>,
    #[arg(long)]
    pub eta2: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub likelihood_weight: Option<f64>,
    /// sgd or adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Keep the fused loss from reaching the predictors
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub block_joint: bool,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// History file (line-delimited JSON); printed to stdout when absent
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, val, test or all
    #[arg(long)]
    pub split: Option<String>,
    /// Metrics CSV file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct CredibilityArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Per-example reports (line-delimited JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct NoiseFlags {
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// 1-based modality receiving noise
    #[arg(long)]
    pub modality: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Dirichlet concentration of the noise, comma separated
    #[arg(long, value_delimiter = ',')]
    pub noise_alpha: Option<Vec<f64>>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SweepNoiseArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Credibility CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics CSV
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Retrain predictors as well as the circuit
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub retrain_all: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SweepEpochsArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained systems, comma separated
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseFlags,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct ValidateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Also brute-force the marginal dominance property at this grid resolution
    #[arg(long)]
    pub dominance_grid: Option<usize>,
}

/// Overlays the flags given on the command line onto the subcommand's table of the config
/// file.
fn merge<T: Serialize + DeserializeOwned>(cli: &T, config: Option<&toml::Table>, section: &str) -> Result<T> {
    let mut merged = match config.and_then(|c| c.get(section)) {
        Some(toml::Value::Table(t)) => serde_json::to_value(t)?,
        Some(_) => return Err(Error::Usage(format!("config entry [{section}] must be a table"))),
        None => serde_json::Value::Object(Default::default()),
    };
    if let (serde_json::Value::Object(base), serde_json::Value::Object(over)) =
        (&mut merged, serde_json::to_value(cli)?)
    {
        for (k, v) in over {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| Error::Usage(format!("config [{section}]: {e}")))
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn default_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn parse_split(s: Option<&str>) -> Result<Option<Split>> {
    match s.unwrap_or("test") {
        "all" => Ok(None),
        other => other.parse().map(Some),
    }
}

fn select(dataset: &MultimodalDataset, split_tag: Option<Split>) -> Result<MultimodalDataset> {
    match split_tag {
        Some(s) => dataset.subset(s),
        None => Ok(dataset.clone()),
    }
}

fn train_config(flags: &TrainFlags, seed: u64) -> Result<TrainConfig> {
    let base = TrainConfig::default();
    let optimizer = match &flags.optimizer {
        Some(o) => o.parse::<OptimizerKind>()?,
        None => base.optimizer,
    };
    let cfg = TrainConfig {
        eta1: flags.eta1.unwrap_or(base.eta1),
        eta2: flags.eta2.unwrap_or(base.eta2),
        batch_size: flags.batch.unwrap_or(base.batch_size),
        t_max: flags.iters.unwrap_or(base.t_max),
        seed,
        likelihood_weight: flags.likelihood_weight.unwrap_or(base.likelihood_weight),
        optimizer,
        block_joint_to_predictors: flags.block_joint,
        patience: flags.patience,
        track_credibility: true,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn model_config(flags: &TrainFlags) -> ModelConfig {
    let base = ModelConfig::default();
    ModelConfig {
        components: flags.components.unwrap_or(base.components),
        ..base
    }
}

fn fusion_mode(flags: &TrainFlags, default: FusionMode) -> Result<FusionMode> {
    flags.fusion.as_deref().map_or(Ok(default), str::parse)
}

fn noise_config(flags: &NoiseFlags, default_lambdas: &[f64], seed: u64) -> NoiseConfig {
    let base = NoiseConfig::default();
    NoiseConfig {
        lambdas: flags.lambdas.clone().unwrap_or_else(|| default_lambdas.to_vec()),
        noised_modality: flags.modality.unwrap_or(base.noised_modality),
        trials: flags.trials.unwrap_or(base.trials),
        seed: flags.noise_seed.unwrap_or(seed),
        noise_alpha: flags.noise_alpha.clone(),
    }
}

fn metrics_text(rows: &[MetricsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Runs one parsed invocation, writing reports to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let config: Option<toml::Table> = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Some(text.parse::<toml::Table>().map_err(|e| Error::Format {
                path: path.clone(),
                line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
                msg: e.message().to_string(),
            })?)
        }
        None => None,
    };
    let cfg = config.as_ref();
    match cli.command {
        Command::Gen(a) => gen(merge(&a, cfg, "gen")?, out),
        Command::Train(a) => train_cmd(merge(&a, cfg, "train")?, out),
        Command::Eval(a) => eval_cmd(merge(&a, cfg, "eval")?, out),
        Command::Credibility(a) => credibility_cmd(merge(&a, cfg, "credibility")?, out),
        Command::SweepNoise(a) => sweep_noise_cmd(merge(&a, cfg, "sweep-noise")?, out),
        Command::SweepEpochs(a) => sweep_epochs_cmd(merge(&a, cfg, "sweep-epochs")?, out),
        Command::Robustness(a) => robustness_cmd(merge(&a, cfg, "robustness")?, out),
        Command::Validate(a) => validate_cmd(merge(&a, cfg, "validate")?, out),
    }
}

fn gen(a: GenArgs, out: &mut dyn Write) -> Result<()> {
    let path = required(&a.out, "out")?;
    let m = a.modalities.unwrap_or(2);
    let config = SynthConfig {
        num_classes: a.classes.unwrap_or(2),
        num_modalities: m,
        num_examples: a.examples.unwrap_or(1000),
        dim: a.dim.unwrap_or(8),
        class_separation: a.separation.unwrap_or(3.0),
        modality_noise: a.noise.clone().unwrap_or_else(|| vec![1.0; m]),
        seed: a.seed.map_or_else(default_seed, Ok)?,
    };
    let mut ds = generate_synthetic(&config)?;
    if !a.no_split {
        let f = a.split.clone().unwrap_or_else(|| vec![0.6, 0.2, 0.2]);
        let fractions: [f64; 3] = f
            .try_into()
            .map_err(|_| Error::Usage("--split takes three fractions".into()))?;
        ds = split(&ds, fractions, config.seed)?;
    }
    save_dataset(&ds, path)?;
    writeln!(out, "wrote {} examples to {}", ds.len(), path.display())?;
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(required(&a.data, "data")?)?;
    let model_path = required(&a.out, "out")?;
    let seed = a.train.seed.map_or_else(default_seed, Ok)?;
    let cfg = train_config(&a.train, seed)?;
    let (train_set, val) = if data.splits.is_empty() {
        (data.clone(), None)
    } else {
        (data.subset(Split::Train)?, Some(data.subset(Split::Val)?))
    };
    let fresh = FusionModel::new(
        fusion_mode(&a.train, FusionMode::Cwm)?,
        &train_set,
        &model_config(&a.train),
        seed,
    )?;
    let outcome = train(fresh, &train_set, val.as_ref(), &cfg)?;
    let mut lines = String::new();
    for r in &outcome.history {
        lines += &json::to_string_compact(r)?;
        lines.push('\n');
    }
    match &a.history {
        Some(p) => std::fs::write(p, lines)?,
        None => out.write_all(lines.as_bytes())?,
    }
    save_model(&outcome.model, model_path)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(required(&a.model, "model")?)?;
    let data = load_dataset(required(&a.data, "data")?)?;
    let subset = select(&data, parse_split(a.split.as_deref())?)?;
    let (_, metrics) = evaluate(&model, &subset)?;
    let rows = [MetricsRow {
        method: model.fusion.name().to_string(),
        lambda: 1.0,
        trial: 0,
        metrics: metrics.clone(),
    }];
    writeln!(out, "{}", json::to_string_pretty(&metrics)?)?;
    out.write_all(metrics_text(&rows)?.as_bytes())?;
    if let Some(p) = &a.out {
        save_metrics_csv(&rows, p)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ExampleCredibility<'a> {
    index: usize,
    label: usize,
    #[serde(flatten)]
    report: &'a crate::fusion::CredibilityReport,
}

fn credibility_cmd(a: CredibilityArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(required(&a.model, "model")?)?;
    let data = load_dataset(required(&a.data, "data")?)?;
    let subset = select(&data, parse_split(Some(a.split.as_deref().unwrap_or("all")))?)?;
    let reports = subset
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| model.credibility(e).map_err(|err| Error::at_example(i, err)))
        .collect::<Result<Vec<_>>>()?;
    let mut lines = String::new();
    for (i, (r, e)) in reports.iter().zip(&subset.examples).enumerate() {
        lines += &json::to_string_compact(&ExampleCredibility {
            index: i,
            label: e.label,
            report: r,
        })?;
        lines.push('\n');
    }
    match &a.out {
        Some(p) => std::fs::write(p, lines)?,
        None => out.write_all(lines.as_bytes())?,
    }
    let (raw, _) = crate::train::mean_and_stderr(&reports.iter().map(|r| r.raw.clone()).collect::<Vec<_>>());
    let (relative, stderr) =
        crate::train::mean_and_stderr(&reports.iter().map(|r| r.relative.clone()).collect::<Vec<_>>());
    #[derive(Serialize)]
    struct Summary {
        examples: usize,
        mean_raw: Vec<f64>,
        mean_relative: Vec<f64>,
        stderr_relative: Vec<f64>,
    }
    writeln!(
        out,
        "{}",
        json::to_string_pretty(&Summary {
            examples: reports.len(),
            mean_raw: raw,
            mean_relative: relative,
            stderr_relative: stderr,
        })?
    )?;
    Ok(())
}

fn sweep_noise_cmd(a: SweepNoiseArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(required(&a.data, "data")?)?;
    let system = load_model(required(&a.model, "model")?)?;
    let seed = a.train.seed.map_or_else(default_seed, Ok)?;
    let base = SweepConfig::default();
    let mut retrain = base.retrain.clone();
    let t = &a.train;
    retrain.eta1 = t.eta1.unwrap_or(retrain.eta1);
    retrain.eta2 = t.eta2.unwrap_or(retrain.eta2);
    retrain.batch_size = t.batch.unwrap_or(retrain.batch_size);
    retrain.t_max = t.iters.unwrap_or(retrain.t_max);
    retrain.likelihood_weight = t.likelihood_weight.unwrap_or(retrain.likelihood_weight);
    if let Some(o) = &t.optimizer {
        retrain.optimizer = o.parse()?;
    }
    let cfg = SweepConfig {
        noise: noise_config(&a.noise, &base.noise.lambdas, seed),
        retrain,
        retrain_all: a.retrain_all,
    };
    let result = run_noise_sweep(&data, &system, &cfg)?;
    let rows = result.credibility_rows();
    if let Some(p) = &a.out {
        save_credibility_csv(&rows, p)?;
    }
    if let Some(p) = &a.metrics_out {
        save_metrics_csv(&result.metrics, p)?;
    }
    let mut buf = Vec::new();
    crate::experiments::write_credibility_csv(&rows, &mut buf)?;
    out.write_all(&buf)?;
    Ok(())
}

fn sweep_epochs_cmd(a: SweepEpochsArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(required(&a.data, "data")?)?;
    let seed = a.train.seed.map_or_else(default_seed, Ok)?;
    let cfg = train_config(&a.train, seed)?;
    let noise = noise_config(&a.noise, &[0.2, 1.0], seed);
    let fusion = fusion_mode(&a.train, FusionMode::Cwm)?;
    let trajectories = run_credibility_epochs(&data, fusion, &model_config(&a.train), &cfg, &noise)?;
    let rows: Vec<_> = trajectories.iter().flat_map(|t| t.rows()).collect();
    if let Some(p) = &a.out {
        save_credibility_csv(&rows, p)?;
    }
    let mut buf = Vec::new();
    crate::experiments::write_credibility_csv(&rows, &mut buf)?;
    out.write_all(&buf)?;
    Ok(())
}

fn robustness_cmd(a: RobustnessArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(required(&a.data, "data")?)?;
    let systems = required(&a.models, "models")?
        .iter()
        .map(load_model)
        .collect::<Result<Vec<_>>>()?;
    let noise = noise_config(&a.noise, &[0.0, 0.2, 0.5, 0.8, 1.0], default_seed()?);
    let rows = run_robustness(&data, &systems, &noise)?;
    if let Some(p) = &a.out {
        save_metrics_csv(&rows, p)?;
    }
    out.write_all(metrics_text(&rows)?.as_bytes())?;
    for s in &systems {
        for &l in noise.lambdas.iter().filter(|l| **l < 1.0) {
            if let (Some(f1), Some(auc)) = (
                mean_decline(&rows, s.fusion.name(), l, |m| m.macro_f1),
                mean_decline(&rows, s.fusion.name(), l, |m| m.macro_auroc),
            ) {
                writeln!(
                    out,
                    "# {} lambda {l}: f1 decline {:.4} ± {:.4}, auroc decline {:.4} ± {:.4}",
                    s.fusion, f1.0, f1.1, auc.0, auc.1
                )?;
            }
        }
    }
    Ok(())
}

fn validate_cmd(a: ValidateArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(required(&a.model, "model")?)?;
    let circuit = model
        .circuit()
        .ok_or_else(|| Error::Usage(format!("{} system has no circuit to validate", model.fusion)))?;
    let smooth = circuit.validate_smooth();
    let decomposable = circuit.validate_decomposable();
    let unbounded = circuit.unbounded_leaves();
    writeln!(
        out,
        "smooth: {}",
        if smooth.is_ok() {
            "ok".into()
        } else {
            format!("FAIL at nodes {:?}", smooth.offending)
        }
    )?;
    writeln!(
        out,
        "decomposable: {}",
        if decomposable.is_ok() {
            "ok".into()
        } else {
            format!("FAIL at nodes {:?}", decomposable.offending)
        }
    )?;
    let leaves = circuit.leaves().count();
    writeln!(
        out,
        "leaf density bound: {} of {leaves} leaves bounded by one",
        leaves - unbounded.len()
    )?;
    for (id, _, dist) in circuit.leaves().filter(|(id, _, _)| unbounded.contains(id)) {
        writeln!(
            out,
            "  leaf {id}: max density {}",
            check_leaf_density_bound(dist).max_density
        )?;
    }
    let mut failed = !smooth.is_ok() || !decomposable.is_ok();
    if let Some(res) = a.dominance_grid {
        let violations = check_marginal_dominance(circuit, res)?;
        writeln!(out, "marginal dominance (grid {res}): {} violations", violations.len())?;
        if !unbounded.is_empty() && !violations.is_empty() {
            writeln!(
                out,
                "  violations are permitted: some leaves exceed the unit density bound"
            )?;
        }
        failed |= unbounded.is_empty() && !violations.is_empty();
    }
    if failed {
        return Err(Error::Validation("one or more checks failed".into()));
    }
    Ok(())
}
