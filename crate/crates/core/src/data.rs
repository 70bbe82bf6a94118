//! Multimodal datasets: synthetic generation, Dirichlet noise injection, JSONL and CSV
//! files, and seeded train/val/test splitting.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ProbVector;
use crate::json::{format_real, to_string_compact};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const LOAD_SIMPLEX_TOL: f64 = 1e-5;

/// One modality of one example.
#[derive(Clone, Debug, PartialEq)]
pub enum ModalityInput {
    Features(Vec<f64>),
    Probs(ProbVector),
    /// Features whose predicted distribution is replaced by `lambda·p + (1-lambda)·noise`.
    /// Only exists in memory.
    Noised {
        features: Vec<f64>,
        lambda: f64,
        noise: ProbVector,
    },
}

impl ModalityInput {
    pub fn len(&self) -> usize {
        match self {
            ModalityInput::Features(f) | ModalityInput::Noised { features: f, .. } => f.len(),
            ModalityInput::Probs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            ModalityInput::Features(_) => "features",
            ModalityInput::Probs(_) => "probs",
            ModalityInput::Noised { .. } => "noised",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub modalities: Vec<ModalityInput>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub num_classes: usize,
    pub num_modalities: usize,
    /// Vector length of each modality (feature dimension, or `K` for probabilities).
    pub dims: Vec<usize>,
    pub examples: Vec<Example>,
    /// Either empty (unsplit) or one tag per example.
    pub splits: Vec<Split>,
}

impl MultimodalDataset {
    /// Builds a dataset and checks labels and per-modality shapes.
    pub fn new(num_classes: usize, dims: Vec<usize>, examples: Vec<Example>) -> Result<Self> {
        let ds = MultimodalDataset {
            num_classes,
            num_modalities: dims.len(),
            dims,
            examples,
            splits: Vec::new(),
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn check(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_modalities < 1 {
            return Err(Error::InvalidDimensions("need K >= 2 and M >= 1".into()));
        }
        if self.examples.is_empty() {
            return Err(Error::InvalidDimensions("dataset is empty".into()));
        }
        if !self.splits.is_empty() && self.splits.len() != self.examples.len() {
            return Err(Error::InvalidDimensions("one split tag per example".into()));
        }
        let kinds: Vec<&str> = self.examples[0].modalities.iter().map(ModalityInput::kind).collect();
        for (i, ex) in self.examples.iter().enumerate() {
            self.check_example(ex, &kinds).map_err(|e| Error::at_example(i, e))?;
        }
        Ok(())
    }

    fn check_example(&self, ex: &Example, kinds: &[&str]) -> Result<()> {
        if ex.label >= self.num_classes {
            return Err(Error::InvalidParameter(format!("label {} out of range", ex.label)));
        }
        if ex.modalities.len() != self.num_modalities {
            return Err(Error::InvalidDimensions(format!(
                "{} modalities, expected {}",
                ex.modalities.len(),
                self.num_modalities
            )));
        }
        for (j, (m, d)) in ex.modalities.iter().zip(&self.dims).enumerate() {
            if m.len() != *d {
                return Err(Error::InvalidDimensions(format!(
                    "modality {} has length {}, expected {d}",
                    j + 1,
                    m.len()
                )));
            }
            if m.kind() != kinds[j] {
                return Err(Error::InvalidDimensions(format!(
                    "modality {} mixes input kinds",
                    j + 1
                )));
            }
            if let ModalityInput::Probs(p) = m {
                if p.len() != self.num_classes {
                    return Err(Error::InvalidDimensions("probability block must have K entries".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Examples tagged with `split`, as an unsplit dataset.
    pub fn subset(&self, split: Split) -> Result<MultimodalDataset> {
        if self.splits.is_empty() {
            return Err(Error::Usage("dataset has not been split".into()));
        }
        let examples: Vec<Example> = self
            .examples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(e, _)| e.clone())
            .collect();
        if examples.is_empty() {
            return Err(Error::Contract(format!("split {split} is empty")));
        }
        Ok(MultimodalDataset {
            examples,
            splits: Vec::new(),
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> MultimodalDataset {
        MultimodalDataset {
            num_classes: self.num_classes,
            num_modalities: self.num_modalities,
            dims: self.dims.clone(),
            examples: Vec::new(),
            splits: Vec::new(),
        }
    }

    /// A dataset with the same metadata and the given examples.
    pub fn with_examples(&self, examples: Vec<Example>) -> MultimodalDataset {
        MultimodalDataset {
            examples,
            ..self.clone_meta()
        }
    }
}

/// Configuration of the Gaussian class-mean generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_modalities: usize,
    pub num_examples: usize,
    /// Feature dimension of every modality.
    pub dim: usize,
    /// Radius of the sphere the class means are drawn on.
    pub class_separation: f64,
    /// Feature-noise standard deviation per modality.
    pub modality_noise: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 2,
            num_modalities: 2,
            num_examples: 1000,
            dim: 8,
            class_separation: 3.0,
            modality_noise: vec![1.0, 10.0],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_examples == 0 {
            return Err(Error::InvalidDimensions("N = 0 gives an empty dataset".into()));
        }
        if self.num_classes < 2 || self.num_modalities < 1 || self.dim < 1 {
            return Err(Error::InvalidDimensions("need K >= 2, M >= 1, dim >= 1".into()));
        }
        if self.modality_noise.len() != self.num_modalities {
            return Err(Error::InvalidDimensions("one noise level per modality".into()));
        }
        if self.modality_noise.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter(
                "noise levels must be finite and nonnegative".into(),
            ));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(Error::InvalidParameter("class separation must be positive".into()));
        }
        Ok(())
    }
}

/// Per class and modality a mean on the sphere of radius `class_separation`; features are
/// the class mean plus isotropic Gaussian noise. Labels cycle through the classes and are
/// then shuffled.
pub fn generate_synthetic(config: &SynthConfig) -> Result<MultimodalDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (k, m, d) = (config.num_classes, config.num_modalities, config.dim);
    let means: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|_| {
            (0..k)
                .map(|_| loop {
                    let v: Vec<f64> = (0..d).map(|_| std_normal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        break v.iter().map(|x| config.class_separation * x / norm).collect();
                    }
                })
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..config.num_examples).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let examples = labels
        .into_iter()
        .map(|y| Example {
            label: y,
            modalities: (0..m)
                .map(|j| {
                    let sigma = config.modality_noise[j];
                    ModalityInput::Features(
                        means[j][y]
                            .iter()
                            .map(|mu| mu + sigma * std_normal.sample(&mut rng))
                            .collect(),
                    )
                })
                .collect(),
        })
        .collect();
    MultimodalDataset::new(k, vec![d; m], examples)
}

/// Draws from `Dir(alpha)` by normalizing independent `Gamma(alpha_i, 1)` variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<ProbVector> {
    if alpha.len() < 2 || alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::InvalidParameter(format!("Dirichlet parameters {alpha:?}")));
    }
    loop {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(ProbVector::new_unchecked(draws.iter().map(|g| g / total).collect()));
        }
    }
}

/// `lambda·p + (1-lambda)·N` with `N ~ Dir(alpha)`.
pub fn inject_noise<R: Rng + ?Sized>(p: &ProbVector, lambda: f64, alpha: &[f64], rng: &mut R) -> Result<ProbVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} is outside [0, 1]")));
    }
    if alpha.len() != p.len() {
        return Err(Error::InvalidDimensions("alpha must have one entry per class".into()));
    }
    let noise = sample_dirichlet(alpha, rng)?;
    Ok(mix(p, lambda, &noise))
}

pub(crate) fn mix(p: &ProbVector, lambda: f64, noise: &ProbVector) -> ProbVector {
    if lambda == 1.0 {
        return p.clone();
    }
    ProbVector::new_unchecked(
        p.values()
            .iter()
            .zip(noise.values())
            .map(|(a, n)| lambda * a + (1.0 - lambda) * n)
            .collect(),
    )
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    #[serde(rename = "K")]
    num_classes: usize,
    #[serde(rename = "M")]
    num_modalities: usize,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModalityRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    label: usize,
    modalities: Vec<ModalityRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// One header line followed by one JSON record per example.
pub fn save_dataset(dataset: &MultimodalDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.check()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        schema_version: DATASET_SCHEMA_VERSION,
        num_classes: dataset.num_classes,
        num_modalities: dataset.num_modalities,
        dims: dataset.dims.clone(),
    };
    writeln!(out, "{}", to_string_compact(&header)?)?;
    for (i, ex) in dataset.examples.iter().enumerate() {
        let modalities = ex
            .modalities
            .iter()
            .map(|m| match m {
                ModalityInput::Features(f) => Ok(ModalityRecord {
                    features: Some(f.clone()),
                    probs: None,
                }),
                ModalityInput::Probs(p) => Ok(ModalityRecord {
                    features: None,
                    probs: Some(p.values().to_vec()),
                }),
                ModalityInput::Noised { .. } => Err(Error::at_example(
                    i,
                    Error::Contract("noised inputs are not stored; save predicted probabilities instead".into()),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        let record = Record {
            label: ex.label,
            modalities,
            split: dataset.splits.get(i).copied(),
        };
        writeln!(out, "{}", to_string_compact(&record)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<MultimodalDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let fail = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (hline, htext) = lines.next().ok_or_else(|| fail(1, "missing header".into()))?;
    let header: Header = serde_json::from_str(&htext?).map_err(|e| fail(hline, format!("header: {e}")))?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: header.schema_version,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    if header.dims.len() != header.num_modalities {
        return Err(fail(hline, "dims must have M entries".into()));
    }
    let mut examples = Vec::new();
    let mut splits = Vec::new();
    let mut kinds: Option<Vec<bool>> = None;
    for (line, text) in lines {
        let record: Record = serde_json::from_str(&text?).map_err(|e| fail(line, e.to_string()))?;
        if record.label >= header.num_classes {
            return Err(fail(
                line,
                format!("label {} out of range for K = {}", record.label, header.num_classes),
            ));
        }
        if record.modalities.len() != header.num_modalities {
            return Err(fail(
                line,
                format!(
                    "{} modality entries, expected {}",
                    record.modalities.len(),
                    header.num_modalities
                ),
            ));
        }
        let mut modalities = Vec::with_capacity(header.num_modalities);
        for (j, m) in record.modalities.into_iter().enumerate() {
            let input = match (m.features, m.probs) {
                (Some(f), None) => ModalityInput::Features(f),
                (None, Some(p)) => {
                    let total: f64 = p.iter().sum();
                    if (total - 1.0).abs() > LOAD_SIMPLEX_TOL || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(fail(line, format!("modality {}: probabilities sum to {total}", j + 1)));
                    }
                    let p = if (total - 1.0).abs() > 1e-7 {
                        p.iter().map(|v| v / total).collect()
                    } else {
                        p
                    };
                    ModalityInput::Probs(ProbVector::new(p).map_err(|e| fail(line, e.to_string()))?)
                }
                _ => {
                    return Err(fail(
                        line,
                        format!("modality {}: need exactly one of features/probs", j + 1),
                    ))
                }
            };
            if input.len() != header.dims[j] {
                return Err(fail(
                    line,
                    format!(
                        "modality {} has length {}, expected {}",
                        j + 1,
                        input.len(),
                        header.dims[j]
                    ),
                ));
            }
            modalities.push(input);
        }
        let is_probs: Vec<bool> = modalities
            .iter()
            .map(|m| matches!(m, ModalityInput::Probs(_)))
            .collect();
        match &kinds {
            None => kinds = Some(is_probs),
            Some(k) if *k != is_probs => return Err(fail(line, "modality kinds differ from earlier records".into())),
            _ => {}
        }
        if let Some(s) = record.split {
            splits.push(s);
        }
        examples.push(Example {
            modalities,
            label: record.label,
        });
    }
    if !splits.is_empty() && splits.len() != examples.len() {
        return Err(fail(0, "either every record carries a split tag or none does".into()));
    }
    let mut ds = MultimodalDataset::new(header.num_classes, header.dims, examples)?;
    ds.splits = splits;
    Ok(ds)
}

/// Tags examples train/val/test. Seeded; stratified by class when every class has at least
/// three examples.
pub fn split(dataset: &MultimodalDataset, fractions: [f64; 3], seed: u64) -> Result<MultimodalDataset> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n = dataset.len();
    let sizes = largest_remainder(n, &fractions);
    if sizes.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "fractions {fractions:?} leave a split empty for N = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let k = dataset.num_classes;
    let mut counts = vec![0usize; k];
    for e in &dataset.examples {
        counts[e.label] += 1;
    }
    if counts.iter().all(|&c| c >= 3) {
        // interleave classes: the r-th member of a class of size n_c sits at (r + 1/2) / n_c
        let mut seen = vec![0usize; k];
        let mut keyed: Vec<(f64, usize, usize)> = order
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let y = dataset.examples[i].label;
                let r = seen[y];
                seen[y] += 1;
                ((r as f64 + 0.5) / counts[y] as f64, pos, i)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order = keyed.into_iter().map(|(_, _, i)| i).collect();
    }
    let mut splits = vec![Split::Train; n];
    let tags = [Split::Train, Split::Val, Split::Test];
    let mut pos = 0;
    for (size, tag) in sizes.iter().zip(tags) {
        for &i in &order[pos..pos + size] {
            splits[i] = tag;
        }
        pos += size;
    }
    let mut out = dataset.clone();
    out.splits = splits;
    Ok(out)
}

fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, e)| (i, e - e.floor())).collect();
    rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = n - sizes.iter().sum::<usize>();
    for (i, _) in rest.into_iter().take(short) {
        sizes[i] += 1;
    }
    sizes
}

/// CSV with columns `label, m1_p0, …, mM_p{K-1}`; every modality must hold probabilities.
pub fn save_probs_csv(dataset: &MultimodalDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    for j in 1..=dataset.num_modalities {
        for k in 0..dataset.num_classes {
            header.push(format!("m{j}_p{k}"));
        }
    }
    w.write_record(&header)?;
    for (i, ex) in dataset.examples.iter().enumerate() {
        let mut row = vec![ex.label.to_string()];
        for m in &ex.modalities {
            let ModalityInput::Probs(p) = m else {
                return Err(Error::at_example(
                    i,
                    Error::Contract("CSV export needs probability inputs".into()),
                ));
            };
            row.extend(p.values().iter().map(|v| format_real(*v)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_probs_csv(path: impl AsRef<Path>, num_classes: usize, num_modalities: usize) -> Result<MultimodalDataset> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let fail = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if r.headers()?.len() != 1 + num_classes * num_modalities {
        return Err(fail(1, "unexpected column count".into()));
    }
    let mut examples = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| fail(line, format!("{s:?}: {e}")));
        let label: usize = rec[0].parse().map_err(|e| fail(line, format!("label: {e}")))?;
        let mut modalities = Vec::with_capacity(num_modalities);
        for j in 0..num_modalities {
            let vals = (0..num_classes)
                .map(|k| parse(&rec[1 + j * num_classes + k]))
                .collect::<Result<Vec<_>>>()?;
            modalities.push(ModalityInput::Probs(
                ProbVector::new(vals).map_err(|e| fail(line, e.to_string()))?,
            ));
        }
        examples.push(Example { modalities, label });
    }
    MultimodalDataset::new(num_classes, vec![num_classes; num_modalities], examples)
}
