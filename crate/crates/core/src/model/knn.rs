//! k-nearest-neighbor classifier over the raw feature rows.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{Model, ModelArtifact, Prediction, Reference, TrainPlugin, TrainedModel, TrainingData, TrainingProgress};
use crate::domain::Seed;
use crate::error::{Error, Result};
use crate::linalg::{rows, sq_dist};
use crate::registry::{ParamDescriptor, ParamSet};

pub(crate) fn params() -> Vec<ParamDescriptor> {
    vec![
        ParamDescriptor::int("k", 1, 1, 10_000, "Number of neighbors that vote."),
        ParamDescriptor::choice("distance", "euclidean", &["euclidean"], "Distance between feature rows."),
    ]
}

pub struct KnnPlugin;

impl TrainPlugin for KnnPlugin {
    fn train(&self, _: &ParamSet, data: &TrainingData, _: Seed, _: &dyn TrainingProgress) -> Result<TrainedModel> {
        if data.x.nrows() == 0 {
            return Err(Error::invalid("no training rows"));
        }
        Ok(TrainedModel {
            layers: Vec::new(),
            weights: Vec::new(),
            latent_dim: data.x.ncols(),
            training_log: Vec::new(),
        })
    }

    fn load(&self, artifact: &ModelArtifact) -> Result<Box<dyn Model>> {
        Ok(Box::new(KnnModel {
            k: artifact.meta.hyperparams.int("k") as usize,
            columns: artifact.meta.columns.len(),
        }))
    }
}

pub struct KnnModel {
    pub k: usize,
    pub columns: usize,
}

impl Model for KnnModel {
    fn latent(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.columns {
            return Err(Error::invalid(format!(
                "matrix has {} columns, model expects {}",
                x.ncols(),
                self.columns
            )));
        }
        Ok(x.clone())
    }

    /// Majority label of the k nearest training rows. Equal distances are
    /// broken by row order, equal vote counts by the label that sorts first.
    fn predict(&self, reference: &Reference, latent: &DMatrix<f64>, exclude: &[Option<usize>]) -> Vec<Prediction> {
        let train = rows(reference.latent);
        rows(latent)
            .iter()
            .zip(exclude)
            .map(|(q, skip)| {
                let mut near: Vec<(f64, usize)> = train
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| Some(*i) != *skip)
                    .map(|(i, t)| (sq_dist(q, t), i))
                    .collect();
                near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                near.truncate(self.k);
                if near.is_empty() {
                    return reference.fallback();
                }
                let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
                for (_, i) in &near {
                    *votes.entry(reference.labels[*i].as_str()).or_default() += 1;
                }
                let (label, count) = votes
                    .iter()
                    .fold(None, |best: Option<(&str, usize)>, (l, c)| match best {
                        Some((_, bc)) if bc >= *c => best,
                        _ => Some((l, *c)),
                    })
                    .expect("at least one vote");
                Prediction {
                    label: label.to_string(),
                    confidence: count as f64 / near.len() as f64,
                }
            })
            .collect()
    }
}
