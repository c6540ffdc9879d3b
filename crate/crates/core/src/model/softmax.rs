//! Multinomial logistic regression trained by full-batch gradient descent.

use nalgebra::DMatrix;

use super::{EpochLoss, Model, ModelArtifact, Prediction, Reference, TrainPlugin, TrainedModel, TrainingData, TrainingProgress};
use crate::domain::Seed;
use crate::error::{Error, Result};
use crate::registry::{ParamDescriptor, ParamSet};

pub(crate) fn params() -> Vec<ParamDescriptor> {
    vec![
        ParamDescriptor::float("learning_rate", 0.1, 1e-6, 10.0, "Gradient descent step size."),
        ParamDescriptor::int("epochs", 200, 0, 100_000, "Full passes over the training rows."),
        ParamDescriptor::float("l2", 0.0, 0.0, 1e6, "Weight decay strength on the weight matrix."),
    ]
}

/// Row-wise softmax of `z`, shifted by each row's maximum.
pub fn softmax_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = z.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

fn logits(w: &DMatrix<f64>, b: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = x * w.transpose();
    for mut row in z.row_iter_mut() {
        row += b;
    }
    z
}

/// Weights (classes × columns) and biases, stored like a single dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    pub w: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl SoftmaxModel {
    fn from_flat(classes: usize, columns: usize, weights: &[f64]) -> Result<Self> {
        if weights.len() != classes * columns + classes {
            return Err(Error::Parse(format!(
                "{} weights for a {classes}x{columns} softmax layer",
                weights.len()
            )));
        }
        Ok(Self {
            w: DMatrix::from_row_slice(classes, columns, &weights[..classes * columns]),
            b: DMatrix::from_row_slice(1, classes, &weights[classes * columns..]),
        })
    }

    fn flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.w.transpose().iter().copied().collect();
        out.extend(self.b.iter());
        out
    }

    pub fn probabilities(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.w.ncols() {
            return Err(Error::invalid(format!(
                "matrix has {} columns, model expects {}",
                x.ncols(),
                self.w.ncols()
            )));
        }
        Ok(softmax_rows(&logits(&self.w, &self.b, x)))
    }
}

pub struct SoftmaxPlugin;

impl TrainPlugin for SoftmaxPlugin {
    fn train(&self, params: &ParamSet, data: &TrainingData, _seed: Seed, progress: &dyn TrainingProgress) -> Result<TrainedModel> {
        let lr = params.float("learning_rate");
        let l2 = params.float("l2");
        let epochs = params.int("epochs") as usize;
        let (n, d) = data.x.shape();
        let c = data.classes.len();
        if n == 0 {
            return Err(Error::invalid("no training rows"));
        }
        let y = DMatrix::from_fn(n, c, |i, k| if data.labels[i] == data.classes[k] { 1.0 } else { 0.0 });
        let mut m = SoftmaxModel {
            w: DMatrix::zeros(c, d),
            b: DMatrix::zeros(1, c),
        };
        let mut log = Vec::with_capacity(epochs);
        for epoch in 1..=epochs {
            let p = softmax_rows(&logits(&m.w, &m.b, &data.x));
            let ce: f64 = (0..n)
                .map(|i| {
                    let k = (0..c).find(|k| y[(i, *k)] == 1.0).expect("label is a class");
                    -p[(i, k)].max(f64::MIN_POSITIVE).ln()
                })
                .sum::<f64>()
                / n as f64;
            let loss = ce + 0.5 * l2 * m.w.norm_squared();
            if !loss.is_finite() {
                return Err(Error::Diverged(epoch));
            }
            let diff = (p - &y) / n as f64;
            let gw = diff.transpose() * &data.x + &m.w * l2;
            let gb = DMatrix::from_fn(1, c, |_, k| diff.column(k).sum());
            m.w -= gw * lr;
            m.b -= gb * lr;
            if m.w.iter().chain(m.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Diverged(epoch));
            }
            log.push(EpochLoss { epoch, loss });
            progress.epoch_done(epoch, loss)?;
        }
        Ok(TrainedModel {
            layers: vec![(c, d)],
            weights: m.flat(),
            latent_dim: c,
            training_log: log,
        })
    }

    fn load(&self, artifact: &ModelArtifact) -> Result<Box<dyn Model>> {
        let meta = &artifact.meta;
        Ok(Box::new(SoftmaxModel::from_flat(meta.classes.len(), meta.columns.len(), &artifact.weights)?))
    }
}

impl Model for SoftmaxModel {
    fn latent(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.probabilities(x)
    }

    /// Most probable class; equal probabilities go to the class that sorts first.
    fn predict(&self, reference: &Reference, latent: &DMatrix<f64>, _exclude: &[Option<usize>]) -> Vec<Prediction> {
        latent
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                Prediction {
                    label: reference.classes[best].clone(),
                    confidence: row[best],
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rows_sum_to_one() {
        let z = DMatrix::from_row_slice(2, 3, &[1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3]);
        let p = softmax_rows(&z);
        for row in p.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..6), shift in -100.0f64..100.0) {
            let z = DMatrix::from_row_slice(1, v.len(), &v);
            let p = softmax_rows(&z);
            let q = softmax_rows(&z.add_scalar(shift));
            let argmax = |m: &DMatrix<f64>| m.row(0).iter().enumerate().fold(0, |b, (i, x)| if *x > m[(0, b)] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&q));
            prop_assert!((p.row(0).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_layout_round_trips() {
        let m = SoftmaxModel {
            w: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            b: DMatrix::from_row_slice(1, 2, &[7.0, 8.0]),
        };
        assert_eq!(m.flat(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(SoftmaxModel::from_flat(2, 3, &m.flat()).unwrap(), m);
    }
}
