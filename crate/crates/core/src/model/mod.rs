//! Stage 3: training plugins, model artifacts, evaluation and the
//! prediction view.

pub mod autoencoder;
pub mod evaluation;
pub mod kmeans;
pub mod knn;
pub mod metrics;
pub mod softmax;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::collection::package::{read_zip, write_zip};
use crate::collection::RunContext;
use crate::domain::{content_id, ArtifactId, Seed};
use crate::error::{Error, FieldError, Result};
use crate::linalg::rows;
use crate::preprocessing::load_processed;
use crate::registry::{ParamSet, PluginDescriptor, PluginExecutor, PluginStage, Registry};
use crate::store::{ArtifactKind, ArtifactStore, ProvenanceRecord};

pub use evaluation::{evaluate, load_evaluation, prediction_view, project, EvaluationReport, PredictionView};

pub const ALGORITHM_CLASSES: [&str; 3] = ["autoencoder", "classical", "clustering"];

const VERSION: &str = "1.0.0";

/// Callback after every training epoch. Returning an error stops training.
pub trait TrainingProgress: Sync {
    fn epoch_done(&self, epoch: usize, loss: f64) -> Result<()>;
}

pub struct NoProgress;

impl TrainingProgress for NoProgress {
    fn epoch_done(&self, _: usize, _: f64) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub columns: Vec<String>,
    pub x: DMatrix<f64>,
    pub labels: Vec<String>,
    /// Sorted classes over both partitions.
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// What a plugin's training run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// (outputs, inputs) per layer.
    pub layers: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    pub latent_dim: usize,
    pub training_log: Vec<EpochLoss>,
}

pub struct Prediction {
    pub label: String,
    pub confidence: f64,
}

/// Training rows a model predicts against.
pub struct Reference<'a> {
    pub latent: &'a DMatrix<f64>,
    pub labels: &'a [String],
    pub classes: &'a [String],
}

impl Reference<'_> {
    /// Mean latent row per label.
    pub fn class_centroids(&self) -> BTreeMap<String, Vec<f64>> {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for (row, label) in rows(self.latent).into_iter().zip(self.labels) {
            let e = sums
                .entry(label.clone())
                .or_insert_with(|| (vec![0.0; self.latent.ncols()], 0));
            for (s, v) in e.0.iter_mut().zip(row) {
                *s += v;
            }
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(l, (s, n))| (l, s.into_iter().map(|v| v / n as f64).collect()))
            .collect()
    }

    fn fallback(&self) -> Prediction {
        Prediction {
            label: self.classes.first().cloned().unwrap_or_default(),
            confidence: 0.0,
        }
    }
}

pub trait Model: Send + Sync {
    fn latent(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// Reconstruction of the input, for models that have one.
    fn reconstruct(&self, _x: &DMatrix<f64>) -> Option<Result<DMatrix<f64>>> {
        None
    }

    /// Predicts from latent rows. `exclude[i]` names a reference row query
    /// `i` must not match, used when a training row is its own query.
    fn predict(&self, reference: &Reference, latent: &DMatrix<f64>, exclude: &[Option<usize>]) -> Vec<Prediction>;
}

pub trait TrainPlugin: Send + Sync {
    /// Cross-parameter checks beyond kind and range.
    fn check(&self, _params: &ParamSet) -> Vec<FieldError> {
        Vec::new()
    }

    fn train(&self, params: &ParamSet, data: &TrainingData, seed: Seed, progress: &dyn TrainingProgress) -> Result<TrainedModel>;

    fn load(&self, artifact: &ModelArtifact) -> Result<Box<dyn Model>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub name: String,
    pub algorithm_class: String,
    pub algorithm_id: String,
    pub plugin_version: String,
    pub hyperparams: ParamSet,
    pub processed_dataset: ArtifactId,
    pub seed: Seed,
    pub columns: Vec<String>,
    pub classes: Vec<String>,
    pub latent_dim: usize,
    pub layers: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub meta: ModelMeta,
    pub weights: Vec<f64>,
    pub training_log: Vec<EpochLoss>,
}

impl ModelArtifact {
    pub fn to_zip(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec_pretty(&self.meta)?;
        let weights: Vec<u8> = self.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
        let log = serde_json::to_vec_pretty(&self.training_log)?;
        write_zip(&[
            ("model.json", meta.as_slice()),
            ("weights.bin", weights.as_slice()),
            ("training_log.json", log.as_slice()),
        ])
    }

    pub fn from_zip(bytes: &[u8]) -> Result<Self> {
        let files = read_zip(bytes)?;
        let file = |name: &str| files.get(name).ok_or_else(|| Error::Parse(format!("{name} missing from model")));
        let meta: ModelMeta = serde_json::from_slice(file("model.json")?)?;
        let raw = file("weights.bin")?;
        if raw.len() % 8 != 0 {
            return Err(Error::Parse("weights.bin: length is not a multiple of 8".into()));
        }
        let weights = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let training_log = serde_json::from_slice(file("training_log.json")?)?;
        Ok(Self {
            meta,
            weights,
            training_log,
        })
    }
}

pub fn builtin_plugins() -> Vec<(PluginDescriptor, PluginExecutor)> {
    let d = |id: &str, class: &str, title: &str, description: &str, params| PluginDescriptor {
        plugin_id: id.into(),
        version: VERSION.into(),
        stage: PluginStage::Train,
        algorithm_class: Some(class.into()),
        title: title.into(),
        description: description.into(),
        params,
        feature_sensitive: false,
    };
    vec![
        (
            d(
                "autoencoder",
                "autoencoder",
                "Autoencoder",
                "Fully connected encoder and mirrored decoder trained to reconstruct the input. Test rows take the label of the nearest training row in latent space.",
                autoencoder::params(),
            ),
            PluginExecutor::Train(Arc::new(autoencoder::AutoencoderPlugin)),
        ),
        (
            d(
                "knn",
                "classical",
                "k-nearest neighbors",
                "Labels each row by majority vote of its nearest training rows.",
                knn::params(),
            ),
            PluginExecutor::Train(Arc::new(knn::KnnPlugin)),
        ),
        (
            d(
                "softmax_regression",
                "classical",
                "Softmax regression",
                "Linear multinomial classifier fitted by full-batch gradient descent on cross-entropy.",
                softmax::params(),
            ),
            PluginExecutor::Train(Arc::new(softmax::SoftmaxPlugin)),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub processed_dataset: ArtifactId,
    pub algorithm_class: String,
    pub algorithm_id: String,
    #[serde(default, deserialize_with = "crate::registry::deserialize_raw_params")]
    pub hyperparams: Vec<(String, String)>,
    pub seed: Seed,
    pub model_name: String,
}

pub fn model_key(name: &str) -> String {
    format!("model/{name}")
}

/// Checks the config against the registry and returns typed hyperparameters.
pub fn validate_train_config(registry: &Registry, config: &TrainConfig) -> Result<ParamSet> {
    let mut errors = Vec::new();
    if config.model_name.trim().is_empty() {
        errors.push(FieldError::new("model_name", "empty"));
    }
    if !ALGORITHM_CLASSES.contains(&config.algorithm_class.as_str()) {
        errors.push(FieldError::new(
            "algorithm_class",
            format!("not one of {}", ALGORITHM_CLASSES.join(", ")),
        ));
    }
    match registry.descriptor(PluginStage::Train, &config.algorithm_id) {
        Err(_) => errors.push(FieldError::new(
            "algorithm_id",
            format!("unknown algorithm {:?}", config.algorithm_id),
        )),
        Ok(d) if d.algorithm_class.as_deref() != Some(config.algorithm_class.as_str()) => {
            errors.push(FieldError::new("algorithm_class", "does not match the algorithm"));
        }
        Ok(_) => match registry.validate(&config.algorithm_id, PluginStage::Train, &config.hyperparams) {
            Ok(params) if errors.is_empty() => return Ok(params),
            Ok(_) => {}
            Err(Error::Validation(e)) => errors.extend(e),
            Err(e) => return Err(e),
        },
    }
    Err(Error::Validation(errors))
}

pub fn load_model_artifact(store: &ArtifactStore, id: &ArtifactId) -> Result<ModelArtifact> {
    let summary = store.summary(id)?;
    if summary.kind != ArtifactKind::Model {
        return Err(Error::invalid(format!("{id} is a {}, not a model", summary.kind.name())));
    }
    ModelArtifact::from_zip(&store.get(id)?)
}

pub fn load_model(registry: &Registry, artifact: &ModelArtifact) -> Result<Box<dyn Model>> {
    registry.trainer(&artifact.meta.algorithm_id)?.load(artifact)
}

/// Trains a model on the training partition of a processed dataset and
/// stores it under its unique name.
pub fn train(
    store: &ArtifactStore,
    registry: &Registry,
    config: &TrainConfig,
    run: &RunContext,
    progress: &dyn TrainingProgress,
) -> Result<ArtifactId> {
    let params = validate_train_config(registry, config)?;
    let key = model_key(&config.model_name);
    let dataset = load_processed(store, &config.processed_dataset)?;
    let data = TrainingData {
        classes: dataset.classes(),
        columns: dataset.train.columns.clone(),
        x: dataset.train.data.clone(),
        labels: dataset.train.labels.clone(),
    };
    let plugin = registry.trainer(&config.algorithm_id)?;
    let version = registry.descriptor(PluginStage::Train, &config.algorithm_id)?.version.clone();
    let started = store.now();
    let trained = plugin.train(&params, &data, config.seed, progress)?;
    let artifact = ModelArtifact {
        meta: ModelMeta {
            name: config.model_name.clone(),
            algorithm_class: config.algorithm_class.clone(),
            algorithm_id: config.algorithm_id.clone(),
            plugin_version: version.clone(),
            hyperparams: params.clone(),
            processed_dataset: config.processed_dataset.clone(),
            seed: config.seed,
            columns: data.columns,
            classes: data.classes,
            latent_dim: trained.latent_dim,
            layers: trained.layers,
        },
        weights: trained.weights,
        training_log: trained.training_log,
    };
    let payload = artifact.to_zip()?;
    let id = content_id(&payload);
    if let Some(existing) = store.get_ref_id(&key) {
        if existing != id {
            return Err(Error::Conflict(format!("model name {:?} is taken", config.model_name)));
        }
    }
    let mut record_params = vec![
        ("model_name".to_string(), config.model_name.clone()),
        ("algorithm_class".to_string(), config.algorithm_class.clone()),
        ("processed_dataset".to_string(), config.processed_dataset.to_string()),
    ];
    record_params.extend(params.encode());
    let mut record = ProvenanceRecord::begin(
        "train",
        &config.algorithm_id,
        &version,
        record_params,
        config.seed,
        &run.user,
        started,
    );
    record = record.finished(store.now());
    let id = store.put(&payload, ArtifactKind::Model, std::slice::from_ref(&config.processed_dataset), record)?;
    store.claim_name(&key, &id)?;
    Ok(id)
}

/// Gradient check of a stored model; only autoencoders have one.
pub fn gradient_check(artifact: &ModelArtifact, x: &DMatrix<f64>, h: f64) -> Result<f64> {
    if artifact.meta.algorithm_class != "autoencoder" {
        return Err(Error::Unsupported(format!(
            "gradient check of a {} model",
            artifact.meta.algorithm_id
        )));
    }
    autoencoder::network_from_artifact(artifact)?.gradient_check(x, h)
}
