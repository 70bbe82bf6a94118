//! A complete late-fusion system: one predictor per modality plus a combiner, with its
//! model file format.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::circuit::{build_fusion_circuit, Circuit, InitConfig};
use crate::circuit_io::CircuitDoc;
use crate::data::{mix, Example, ModalityInput, MultimodalDataset};
use crate::error::{Error, Result};
use crate::fusion::{
    baseline_mlp, baseline_noisy_or, baseline_weighted_mean, credibility, fuse_cwm, fuse_dpc, CredibilityReport, Mlp,
};
use crate::inference::ProbVector;
use crate::json;
use crate::predictor::{Predictor, UnimodalPredictor};
use crate::special::sub_seed;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "dpc")]
    Dpc,
    #[serde(rename = "cwm")]
    Cwm,
    #[serde(rename = "wm")]
    WeightedMean,
    #[serde(rename = "noisyor")]
    NoisyOr,
    #[serde(rename = "mlp")]
    Mlp,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Cwm,
        FusionMode::Dpc,
        FusionMode::WeightedMean,
        FusionMode::NoisyOr,
        FusionMode::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Dpc => "dpc",
            FusionMode::Cwm => "cwm",
            FusionMode::WeightedMean => "wm",
            FusionMode::NoisyOr => "noisyor",
            FusionMode::Mlp => "mlp",
        }
    }

    pub fn uses_circuit(self) -> bool {
        matches!(self, FusionMode::Dpc | FusionMode::Cwm)
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown fusion mode {s:?} (dpc, cwm, wm, noisyor, mlp)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Combiner {
    /// Direct-PC or credibility-weighted mean over a circuit.
    Circuit(Circuit),
    WeightedMean(Vec<f64>),
    NoisyOr,
    Mlp(Mlp),
}

/// How a fresh system is initialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub components: usize,
    pub init: InitConfig,
    /// Standard deviation of the initial linear predictor weights.
    pub predictor_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            components: 4,
            init: InitConfig::default(),
            predictor_init_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub fusion: FusionMode,
    pub num_classes: usize,
    pub predictors: Vec<Predictor>,
    pub combiner: Combiner,
}

impl FusionModel {
    /// A fresh system shaped for `dataset`: linear predictors for feature modalities,
    /// passthroughs for probability modalities.
    pub fn new(fusion: FusionMode, dataset: &MultimodalDataset, config: &ModelConfig, seed: u64) -> Result<Self> {
        let (k, m) = (dataset.num_classes, dataset.num_modalities);
        let first = dataset
            .examples
            .first()
            .ok_or_else(|| Error::InvalidDimensions("dataset is empty".into()))?;
        let predictors = first
            .modalities
            .iter()
            .zip(&dataset.dims)
            .enumerate()
            .map(|(j, (input, &d))| match input {
                ModalityInput::Probs(_) => Predictor::Passthrough,
                _ => Predictor::Linear(UnimodalPredictor::random(
                    d,
                    k,
                    config.predictor_init_std,
                    sub_seed(seed, j as u64 + 1),
                )),
            })
            .collect();
        let combiner = match fusion {
            FusionMode::Dpc | FusionMode::Cwm => Combiner::Circuit(build_fusion_circuit(
                m,
                k,
                config.components,
                sub_seed(seed, 0),
                &config.init,
            )?),
            FusionMode::WeightedMean => Combiner::WeightedMean(vec![0.0; m]),
            FusionMode::NoisyOr => Combiner::NoisyOr,
            FusionMode::Mlp => Combiner::Mlp(Mlp::random(m, k, sub_seed(seed, 0))),
        };
        Ok(FusionModel {
            fusion,
            num_classes: k,
            predictors,
            combiner,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.predictors.len()
    }

    pub fn circuit(&self) -> Option<&Circuit> {
        match &self.combiner {
            Combiner::Circuit(c) => Some(c),
            _ => None,
        }
    }

    pub fn circuit_mut(&mut self) -> Option<&mut Circuit> {
        match &mut self.combiner {
            Combiner::Circuit(c) => Some(c),
            _ => None,
        }
    }

    /// Unimodal predictive distribution of modality `j` (0-based) together with its raw,
    /// pre-noise predictor output when a predictor ran.
    pub(crate) fn predict_modality(&self, j: usize, input: &ModalityInput) -> Result<(ProbVector, Option<ProbVector>)> {
        match (&self.predictors[j], input) {
            (Predictor::Passthrough, ModalityInput::Probs(p)) => {
                if p.len() != self.num_classes {
                    return Err(Error::InvalidDimensions(format!("modality {} block length", j + 1)));
                }
                Ok((p.clone(), None))
            }
            (Predictor::Linear(lin), ModalityInput::Features(x)) => {
                let p = lin.forward(x)?;
                Ok((p.clone(), Some(p)))
            }
            (
                Predictor::Linear(lin),
                ModalityInput::Noised {
                    features,
                    lambda,
                    noise,
                },
            ) => {
                let p = lin.forward(features)?;
                Ok((mix(&p, *lambda, noise), Some(p)))
            }
            _ => Err(Error::Contract(format!(
                "modality {} input kind does not match its predictor",
                j + 1
            ))),
        }
    }

    pub fn unimodal_predictions(&self, example: &Example) -> Result<Vec<ProbVector>> {
        if example.modalities.len() != self.num_modalities() {
            return Err(Error::InvalidDimensions("example modality count".into()));
        }
        example
            .modalities
            .iter()
            .enumerate()
            .map(|(j, m)| Ok(self.predict_modality(j, m)?.0))
            .collect()
    }

    /// Fused distribution from unimodal predictions.
    pub fn fuse(&self, preds: &[ProbVector]) -> Result<ProbVector> {
        match (&self.combiner, self.fusion) {
            (Combiner::Circuit(c), FusionMode::Dpc) => fuse_dpc(c, preds),
            (Combiner::Circuit(c), FusionMode::Cwm) => fuse_cwm(c, preds),
            (Combiner::WeightedMean(l), _) => baseline_weighted_mean(l, preds),
            (Combiner::NoisyOr, _) => baseline_noisy_or(preds),
            (Combiner::Mlp(mlp), _) => baseline_mlp(mlp, preds),
            _ => Err(Error::Contract("combiner does not match fusion mode".into())),
        }
    }

    pub fn predict(&self, example: &Example) -> Result<ProbVector> {
        self.fuse(&self.unimodal_predictions(example)?)
    }

    /// Credibility report; only available for circuit combiners.
    pub fn credibility(&self, example: &Example) -> Result<CredibilityReport> {
        let c = self
            .circuit()
            .ok_or_else(|| Error::Usage(format!("{} fusion has no circuit to assess credibility", self.fusion)))?;
        credibility(c, &self.unimodal_predictions(example)?)
    }

    /// Per-example fused predictions in dataset order (parallel, order preserving).
    pub fn predict_all(&self, dataset: &MultimodalDataset) -> Result<Vec<ProbVector>> {
        use rayon::prelude::*;
        dataset
            .examples
            .par_iter()
            .enumerate()
            .map(|(i, e)| self.predict(e).map_err(|err| Error::at_example(i, err)))
            .collect()
    }

    /// Replaces every modality with its unimodal prediction.
    pub fn to_probs_dataset(&self, dataset: &MultimodalDataset) -> Result<MultimodalDataset> {
        let examples = dataset
            .examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let preds = self.unimodal_predictions(e).map_err(|err| Error::at_example(i, err))?;
                Ok(Example {
                    label: e.label,
                    modalities: preds.into_iter().map(ModalityInput::Probs).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = MultimodalDataset::new(
            dataset.num_classes,
            vec![dataset.num_classes; dataset.num_modalities],
            examples,
        )?;
        out.splits = dataset.splits.clone();
        Ok(out)
    }

    /// Same combiner, predictors replaced by passthroughs.
    pub fn with_passthrough_predictors(&self) -> FusionModel {
        FusionModel {
            predictors: vec![Predictor::Passthrough; self.num_modalities()],
            ..self.clone()
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CombinerDoc {
    Circuit(CircuitDoc),
    WeightedMean { weight_logits: Vec<f64> },
    NoisyOr,
    Mlp(Mlp),
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    schema_version: u32,
    fusion: FusionMode,
    #[serde(rename = "K")]
    num_classes: usize,
    predictors: Vec<Predictor>,
    combiner: CombinerDoc,
}

pub fn model_to_json(model: &FusionModel) -> Result<String> {
    let combiner = match &model.combiner {
        Combiner::Circuit(c) => CombinerDoc::Circuit(CircuitDoc::from(c)),
        Combiner::WeightedMean(l) => CombinerDoc::WeightedMean {
            weight_logits: l.clone(),
        },
        Combiner::NoisyOr => CombinerDoc::NoisyOr,
        Combiner::Mlp(m) => CombinerDoc::Mlp(m.clone()),
    };
    json::to_string_pretty(&ModelDoc {
        schema_version: MODEL_SCHEMA_VERSION,
        fusion: model.fusion,
        num_classes: model.num_classes,
        predictors: model.predictors.clone(),
        combiner,
    })
}

pub fn model_from_json(text: &str) -> Result<FusionModel> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    if doc.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: doc.schema_version,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    let combiner = match doc.combiner {
        CombinerDoc::Circuit(c) => Combiner::Circuit(c.into_circuit()?),
        CombinerDoc::WeightedMean { weight_logits } => Combiner::WeightedMean(weight_logits),
        CombinerDoc::NoisyOr => Combiner::NoisyOr,
        CombinerDoc::Mlp(m) => Combiner::Mlp(m),
    };
    let model = FusionModel {
        fusion: doc.fusion,
        num_classes: doc.num_classes,
        predictors: doc.predictors,
        combiner,
    };
    let consistent = match (&model.combiner, model.fusion) {
        (Combiner::Circuit(c), f) => {
            f.uses_circuit() && c.num_modalities() == model.num_modalities() && c.num_classes() == model.num_classes
        }
        (Combiner::WeightedMean(l), FusionMode::WeightedMean) => l.len() == model.num_modalities(),
        (Combiner::NoisyOr, FusionMode::NoisyOr) => true,
        (Combiner::Mlp(m), FusionMode::Mlp) => m.input_dim() == model.num_modalities() * model.num_classes,
        _ => false,
    };
    if !consistent {
        return Err(Error::MalformedCircuit(
            "combiner does not match the fusion mode or shapes".into(),
        ));
    }
    Ok(model)
}

pub fn save_model(model: &FusionModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_json(model)? + "\n")?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FusionModel> {
    model_from_json(&std::fs::read_to_string(path)?)
}
