//! Automatic evaluation of a trained model and the scatter view built on it.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::kmeans::{contingency, kmeans, purity, MAX_ITER, TOL};
use super::metrics::{confusion, metrics, ConfusionMatrix, MetricsReport};
use super::{load_model, load_model_artifact, Reference};
use crate::collection::package::{read_zip, write_zip};
use crate::collection::RunContext;
use crate::domain::{derive_seed, ArtifactId};
use crate::error::{Error, Result};
use crate::linalg::{dist, rows, select_rows, Pca};
use crate::preprocessing::load_processed;
use crate::registry::Registry;
use crate::store::{ArtifactKind, ArtifactStore, ProvenanceRecord};

/// PCA coordinates of every row, fitted on the `fit_rows` only. Missing
/// dimensions, when the latent space is narrower than `dims`, are zero.
pub fn project(latent: &DMatrix<f64>, dims: usize, fit_rows: &[usize]) -> Result<DMatrix<f64>> {
    if !(2..=3).contains(&dims) {
        return Err(Error::invalid(format!("dims must be 2 or 3, got {dims}")));
    }
    if fit_rows.is_empty() {
        return Err(Error::invalid("no rows to fit the projection on"));
    }
    let k = dims.min(latent.ncols());
    let pca = Pca::fit(&select_rows(latent, fit_rows), k)?;
    let z = pca.transform(latent);
    Ok(DMatrix::from_fn(latent.nrows(), dims, |i, j| if j < k { z[(i, j)] } else { 0.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub package_id: ArtifactId,
    pub partition: Partition,
    pub true_label: String,
    pub predicted_label: String,
    pub confidence: f64,
    pub latent: Vec<f64>,
    pub coords_2d: Vec<f64>,
    pub coords_3d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: usize,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
    pub purity: f64,
    pub contingency: Vec<ClusterRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: ArtifactId,
    pub processed_dataset: ArtifactId,
    pub algorithm_class: String,
    pub algorithm_id: String,
    pub classes: Vec<String>,
    /// Fraction of test rows predicted correctly.
    pub test_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    /// Mean squared reconstruction error over test cells, autoencoders only.
    pub reconstruction_error: Option<f64>,
    /// Training rows first, then test rows. Training rows are predicted
    /// without themselves as a neighbor.
    pub points: Vec<EvalPoint>,
    pub class_centroids_2d: BTreeMap<String, Vec<f64>>,
    pub class_centroids_3d: BTreeMap<String, Vec<f64>>,
    pub kmeans: ClusteringReport,
}

pub fn evaluation_key(model_id: &ArtifactId) -> String {
    format!("evaluation/{model_id}")
}

fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n + b.nrows(), a.ncols(), |i, j| if i < n { a[(i, j)] } else { b[(i - n, j)] })
}

fn centroids_of(coords: &DMatrix<f64>, labels: &[String]) -> BTreeMap<String, Vec<f64>> {
    Reference {
        latent: coords,
        labels,
        classes: &[],
    }
    .class_centroids()
}

/// Builds and stores the evaluation report of a model. `kmeans_k`
/// defaults to the number of classes.
pub fn evaluate(
    store: &ArtifactStore,
    registry: &Registry,
    model_id: &ArtifactId,
    kmeans_k: Option<usize>,
    run: &RunContext,
) -> Result<ArtifactId> {
    let started = store.now();
    let artifact = load_model_artifact(store, model_id)?;
    let meta = &artifact.meta;
    let dataset = load_processed(store, &meta.processed_dataset)?;
    let model = load_model(registry, &artifact)?;
    let (train, test) = (&dataset.train, &dataset.test);

    let train_latent = model.latent(&train.data)?;
    let test_latent = model.latent(&test.data)?;
    let reference = Reference {
        latent: &train_latent,
        labels: &train.labels,
        classes: &meta.classes,
    };
    let own: Vec<Option<usize>> = (0..train.ids.len()).map(Some).collect();
    let train_pred = model.predict(&reference, &train_latent, &own);
    let test_pred = model.predict(&reference, &test_latent, &vec![None; test.ids.len()]);

    let classes: BTreeSet<String> = meta.classes.iter().cloned().collect();
    let predicted: Vec<String> = test_pred.iter().map(|p| p.label.clone()).collect();
    let cm = confusion(&predicted, &test.labels, &classes)?;
    let correct = predicted.iter().zip(&test.labels).filter(|(p, t)| p == t).count();
    let test_accuracy = if test.labels.is_empty() {
        0.0
    } else {
        correct as f64 / test.labels.len() as f64
    };
    let reconstruction_error = match model.reconstruct(&test.data) {
        Some(r) => {
            let r = r?;
            let cells = (r.nrows() * r.ncols()).max(1) as f64;
            Some((r - &test.data).iter().map(|v| v * v).sum::<f64>() / cells)
        }
        None => None,
    };

    let all = stack(&train_latent, &test_latent);
    let fit: Vec<usize> = (0..train.ids.len()).collect();
    let c2 = project(&all, 2, &fit)?;
    let c3 = project(&all, 3, &fit)?;
    let train_c2 = select_rows(&c2, &fit);
    let train_c3 = select_rows(&c3, &fit);

    let k = kmeans_k.unwrap_or(classes.len());
    let km = kmeans(&all, k, derive_seed(meta.seed, "kmeans")?, MAX_ITER, TOL)?;
    let all_labels: Vec<String> = train.labels.iter().chain(&test.labels).cloned().collect();
    let clustering = ClusteringReport {
        k,
        purity: purity(&km.assignments, &all_labels),
        contingency: contingency(&km.assignments, &all_labels)
            .into_iter()
            .map(|(cluster, counts)| ClusterRow { cluster, counts })
            .collect(),
        assignments: km.assignments,
        centroids: km.centroids,
        inertia: km.inertia,
        inertia_history: km.inertia_history,
    };

    let latent_rows = rows(&all);
    let c2_rows = rows(&c2);
    let c3_rows = rows(&c3);
    let points = train
        .ids
        .iter()
        .map(|id| (id, Partition::Train))
        .chain(test.ids.iter().map(|id| (id, Partition::Test)))
        .zip(&all_labels)
        .zip(train_pred.iter().chain(&test_pred))
        .enumerate()
        .map(|(i, (((id, partition), truth), pred))| EvalPoint {
            package_id: id.clone(),
            partition,
            true_label: truth.clone(),
            predicted_label: pred.label.clone(),
            confidence: pred.confidence,
            latent: latent_rows[i].clone(),
            coords_2d: c2_rows[i].clone(),
            coords_3d: c3_rows[i].clone(),
        })
        .collect();

    let report = EvaluationReport {
        model_id: model_id.clone(),
        processed_dataset: meta.processed_dataset.clone(),
        algorithm_class: meta.algorithm_class.clone(),
        algorithm_id: meta.algorithm_id.clone(),
        classes: meta.classes.clone(),
        test_accuracy,
        metrics: metrics(&cm),
        confusion: cm,
        reconstruction_error,
        points,
        class_centroids_2d: centroids_of(&train_c2, &train.labels),
        class_centroids_3d: centroids_of(&train_c3, &train.labels),
        kmeans: clustering,
    };
    let json = serde_json::to_vec_pretty(&report)?;
    let payload = write_zip(&[("evaluation.json", json.as_slice())])?;
    let record = ProvenanceRecord::begin(
        "evaluate",
        &meta.algorithm_id,
        &meta.plugin_version,
        vec![
            ("model".to_string(), model_id.to_string()),
            ("kmeans_k".to_string(), k.to_string()),
        ],
        meta.seed,
        &run.user,
        started,
    )
    .finished(store.now());
    let id = store.put(
        &payload,
        ArtifactKind::Evaluation,
        &[model_id.clone(), meta.processed_dataset.clone()],
        record,
    )?;
    store.set_ref(&evaluation_key(model_id), serde_json::Value::String(id.to_string()))?;
    Ok(id)
}

pub fn load_evaluation(store: &ArtifactStore, model_id: &ArtifactId) -> Result<EvaluationReport> {
    let id = store
        .get_ref_id(&evaluation_key(model_id))
        .ok_or_else(|| Error::not_found(format!("evaluation of model {model_id}")))?;
    let files = read_zip(&store.get(&id)?)?;
    let json = files
        .get("evaluation.json")
        .ok_or_else(|| Error::Parse("evaluation.json missing from evaluation".into()))?;
    Ok(serde_json::from_slice(json)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrowColor {
    Green,
    Red,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPoint {
    pub package_id: ArtifactId,
    pub partition: Partition,
    pub coords: Vec<f64>,
    pub true_label: String,
    pub predicted_label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrow {
    pub from: ArtifactId,
    pub from_coords: Vec<f64>,
    pub to: Vec<f64>,
    pub color: ArrowColor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub package_id: ArtifactId,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionView {
    pub model_id: ArtifactId,
    pub dims: usize,
    pub show_incorrect: bool,
    pub points: Vec<ViewPoint>,
    pub arrows: Vec<Arrow>,
    pub focal: Option<ArtifactId>,
    pub neighbors: Vec<Neighbor>,
}

/// Scatter payload of an evaluated model. Neighbors of the focal package
/// are drawn from the points shown, measured in the full latent space.
pub fn prediction_view(
    store: &ArtifactStore,
    model_id: &ArtifactId,
    dims: usize,
    focal: Option<&ArtifactId>,
    k_neighbors: usize,
    show_incorrect: bool,
) -> Result<PredictionView> {
    if !(2..=3).contains(&dims) {
        return Err(Error::invalid(format!("dims must be 2 or 3, got {dims}")));
    }
    if k_neighbors == 0 {
        return Err(Error::invalid("k_neighbors must be positive"));
    }
    let report = load_evaluation(store, model_id)?;
    let centroids = if dims == 2 {
        &report.class_centroids_2d
    } else {
        &report.class_centroids_3d
    };
    let visible: Vec<&EvalPoint> = report
        .points
        .iter()
        .filter(|p| show_incorrect || p.predicted_label == p.true_label)
        .collect();
    let coords = |p: &EvalPoint| if dims == 2 { p.coords_2d.clone() } else { p.coords_3d.clone() };
    let points = visible
        .iter()
        .map(|p| ViewPoint {
            package_id: p.package_id.clone(),
            partition: p.partition,
            coords: coords(p),
            true_label: p.true_label.clone(),
            predicted_label: p.predicted_label.clone(),
            confidence: p.confidence,
        })
        .collect();
    let arrows = visible
        .iter()
        .map(|p| Arrow {
            from: p.package_id.clone(),
            from_coords: coords(p),
            to: centroids.get(&p.predicted_label).cloned().unwrap_or_else(|| coords(p)),
            color: if p.predicted_label == p.true_label {
                ArrowColor::Green
            } else {
                ArrowColor::Red
            },
        })
        .collect();
    let neighbors = match focal {
        None => Vec::new(),
        Some(f) => {
            let center = report
                .points
                .iter()
                .find(|p| &p.package_id == f)
                .ok_or_else(|| Error::not_found(format!("package {f} in the evaluated dataset")))?;
            let mut near: Vec<Neighbor> = visible
                .iter()
                .filter(|p| &p.package_id != f)
                .map(|p| Neighbor {
                    package_id: p.package_id.clone(),
                    distance: dist(&p.latent, &center.latent),
                })
                .collect();
            near.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.package_id.cmp(&b.package_id)));
            near.truncate(k_neighbors);
            near
        }
    };
    Ok(PredictionView {
        model_id: model_id.clone(),
        dims,
        show_incorrect,
        points,
        arrows,
        focal: focal.cloned(),
        neighbors,
    })
}
