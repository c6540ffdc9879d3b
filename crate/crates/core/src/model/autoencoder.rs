//! Fully connected autoencoder trained by mini-batch backpropagation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{EpochLoss, Model, ModelArtifact, Prediction, Reference, TrainPlugin, TrainedModel, TrainingData, TrainingProgress};
use crate::domain::{scoped_rng, Seed};
use crate::error::{Error, FieldError, Result};
use crate::linalg::{dist, rows};
use crate::registry::{ParamDescriptor, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    Bce,
}

impl Loss {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "bce" => Ok(Loss::Bce),
            other => Err(Error::invalid(format!("unknown loss {other:?}"))),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Layer shapes and a flat parameter vector. Each layer stores its weight
/// matrix row-major (outputs × inputs) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub shapes: Vec<(usize, usize)>,
    pub params: Vec<f64>,
    pub activation: Activation,
    pub loss: Loss,
    /// Number of leading layers forming the encoder.
    pub encoder_depth: usize,
}

/// Shapes of an autoencoder whose decoder mirrors the encoder widths.
pub fn architecture(input_dim: usize, encoder_layers: &[usize]) -> Vec<(usize, usize)> {
    let mut widths = vec![input_dim];
    widths.extend_from_slice(encoder_layers);
    widths.extend(encoder_layers.iter().rev().skip(1));
    widths.push(input_dim);
    widths.windows(2).map(|w| (w[1], w[0])).collect()
}

pub fn param_count(shapes: &[(usize, usize)]) -> usize {
    shapes.iter().map(|(o, i)| o * i + o).sum()
}

struct Trace {
    /// Pre-activations per layer.
    z: Vec<DMatrix<f64>>,
    /// Layer inputs, starting with the batch itself.
    a: Vec<DMatrix<f64>>,
}

impl Network {
    /// Xavier-uniform weights and zero biases.
    pub fn init(input_dim: usize, encoder_layers: &[usize], activation: Activation, loss: Loss, seed: Seed) -> Result<Self> {
        if input_dim == 0 || encoder_layers.is_empty() || encoder_layers.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let shapes = architecture(input_dim, encoder_layers);
        let mut rng = scoped_rng(seed, "init")?;
        let mut params = Vec::with_capacity(param_count(&shapes));
        for (out, inp) in &shapes {
            let limit = (6.0 / (out + inp) as f64).sqrt();
            for _ in 0..out * inp {
                params.push(rng.random_range(-limit..=limit));
            }
            params.extend(std::iter::repeat_n(0.0, *out));
        }
        Ok(Self {
            shapes,
            params,
            activation,
            loss,
            encoder_depth: encoder_layers.len(),
        })
    }

    pub fn from_parts(shapes: Vec<(usize, usize)>, params: Vec<f64>, activation: Activation, loss: Loss) -> Result<Self> {
        if shapes.is_empty() || shapes.len() % 2 != 0 {
            return Err(Error::Parse("autoencoder needs an even, non-zero layer count".into()));
        }
        if shapes.windows(2).any(|w| w[0].0 != w[1].1) || shapes[0].1 != shapes[shapes.len() - 1].0 {
            return Err(Error::Parse("layer shapes do not chain".into()));
        }
        if params.len() != param_count(&shapes) {
            return Err(Error::Parse(format!(
                "{} weights for an architecture needing {}",
                params.len(),
                param_count(&shapes)
            )));
        }
        let encoder_depth = shapes.len() / 2;
        Ok(Self {
            shapes,
            params,
            activation,
            loss,
            encoder_depth,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].1
    }

    pub fn latent_dim(&self) -> usize {
        self.shapes[self.encoder_depth - 1].0
    }

    fn layer(&self, params: &[f64], l: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let offset: usize = self.shapes[..l].iter().map(|(o, i)| o * i + o).sum();
        let (out, inp) = self.shapes[l];
        let w = DMatrix::from_row_slice(out, inp, &params[offset..offset + out * inp]);
        let b = DMatrix::from_row_slice(1, out, &params[offset + out * inp..offset + out * inp + out]);
        (w, b)
    }

    fn is_output(&self, l: usize) -> bool {
        l + 1 == self.shapes.len()
    }

    fn forward_with(&self, params: &[f64], x: &DMatrix<f64>, layers: usize) -> Trace {
        let mut trace = Trace {
            z: Vec::with_capacity(layers),
            a: vec![x.clone()],
        };
        for l in 0..layers {
            let (w, b) = self.layer(params, l);
            let mut z = trace.a[l].clone() * w.transpose();
            for mut row in z.row_iter_mut() {
                row += &b;
            }
            let a = if self.is_output(l) {
                match self.loss {
                    Loss::Mse => z.clone(),
                    Loss::Bce => z.map(sigmoid),
                }
            } else {
                z.map(|v| self.activation.apply(v))
            };
            trace.z.push(z);
            trace.a.push(a);
        }
        trace
    }

    fn check_width(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "matrix has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(x)?;
        Ok(self.forward_with(&self.params, x, self.encoder_depth).a.pop().expect("one layer"))
    }

    pub fn reconstruct(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(x)?;
        Ok(self.forward_with(&self.params, x, self.shapes.len()).a.pop().expect("one layer"))
    }

    fn loss_of(&self, z_out: &DMatrix<f64>, out: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
        let n = (x.nrows() * x.ncols()).max(1) as f64;
        let total: f64 = match self.loss {
            Loss::Mse => out.iter().zip(x.iter()).map(|(o, t)| (o - t) * (o - t)).sum(),
            Loss::Bce => z_out.iter().zip(x.iter()).map(|(z, t)| softplus(*z) - t * z).sum(),
        };
        total / n
    }

    /// Mean loss of the batch under the given parameters.
    pub fn loss_with(&self, params: &[f64], x: &DMatrix<f64>) -> f64 {
        let t = self.forward_with(params, x, self.shapes.len());
        self.loss_of(t.z.last().expect("one layer"), t.a.last().expect("one layer"), x)
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, params: &[f64], x: &DMatrix<f64>) -> (f64, Vec<f64>) {
        let depth = self.shapes.len();
        let t = self.forward_with(params, x, depth);
        let out = &t.a[depth];
        let loss = self.loss_of(&t.z[depth - 1], out, x);
        let n = (x.nrows() * x.ncols()).max(1) as f64;
        let mut delta = match self.loss {
            Loss::Mse => (out - x) * (2.0 / n),
            Loss::Bce => (out - x) / n,
        };
        let mut grad = vec![0.0; params.len()];
        let mut offsets = Vec::with_capacity(depth);
        let mut acc = 0;
        for (o, i) in &self.shapes {
            offsets.push(acc);
            acc += o * i + o;
        }
        for l in (0..depth).rev() {
            let (out_dim, in_dim) = self.shapes[l];
            let gw = delta.transpose() * &t.a[l];
            let off = offsets[l];
            for r in 0..out_dim {
                for c in 0..in_dim {
                    grad[off + r * in_dim + c] = gw[(r, c)];
                }
                grad[off + out_dim * in_dim + r] = delta.column(r).sum();
            }
            if l > 0 {
                let (w, _) = self.layer(params, l);
                let back = &delta * w;
                let act = self.activation;
                delta = back.zip_map(&t.z[l - 1], |d, z| d * act.derivative(z));
            }
        }
        (loss, grad)
    }

    /// Largest relative difference between the analytic gradient and
    /// central finite differences over all parameters.
    pub fn gradient_check(&self, x: &DMatrix<f64>, h: f64) -> Result<f64> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::invalid("step h must be positive"));
        }
        self.check_width(x)?;
        let (_, analytic) = self.loss_and_gradient(&self.params, x);
        let mut p = self.params.clone();
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let plus = self.loss_with(&p, x);
            p[i] = orig - h;
            let minus = self.loss_with(&p, x);
            p[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { learning_rate: f64, momentum: f64 },
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.kind {
            Optimizer::Sgd { learning_rate, momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *v = momentum * *v - learning_rate * g;
                    *p += *v;
                }
            }
            Optimizer::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
}

pub struct TrainOptions {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
}

/// Trains in place. Each epoch visits the rows in a fresh seeded order;
/// the last batch may be smaller than `batch_size`.
pub fn fit(
    net: &mut Network,
    x: &DMatrix<f64>,
    options: &TrainOptions,
    seed: Seed,
    progress: &dyn TrainingProgress,
) -> Result<Vec<EpochLoss>> {
    net.check_width(x)?;
    if options.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = scoped_rng(seed, "shuffle")?;
    let mut state = OptimizerState::new(options.optimizer, net.params.len());
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut log = Vec::with_capacity(options.epochs);
    for epoch in 1..=options.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in order.chunks(options.batch_size) {
            let xb = crate::linalg::select_rows(x, batch);
            let (loss, grad) = net.loss_and_gradient(&net.params, &xb);
            if !loss.is_finite() {
                return Err(Error::Diverged(epoch));
            }
            weighted += loss * batch.len() as f64;
            state.step(&mut net.params, &grad);
        }
        let mean = if x.nrows() == 0 { 0.0 } else { weighted / x.nrows() as f64 };
        if !mean.is_finite() || net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged(epoch));
        }
        log.push(EpochLoss { epoch, loss: mean });
        progress.epoch_done(epoch, mean)?;
    }
    Ok(log)
}

pub(crate) fn params() -> Vec<ParamDescriptor> {
    vec![
        ParamDescriptor::int_list(
            "encoder_layers",
            &[16, 4],
            1,
            4096,
            "Encoder layer widths from input side to latent; the last width is the latent dimension. The decoder mirrors them.",
        ),
        ParamDescriptor::choice("activation", "relu", &["relu", "sigmoid"], "Activation of every hidden layer."),
        ParamDescriptor::choice(
            "loss",
            "mse",
            &["mse", "bce"],
            "Reconstruction loss. bce puts a sigmoid on the output layer and expects inputs in [0, 1].",
        ),
        ParamDescriptor::choice("optimizer", "adam", &["sgd", "adam"], "Update rule applied after each batch."),
        ParamDescriptor::float("learning_rate", 0.001, 1e-6, 10.0, "Step size of the optimizer."),
        ParamDescriptor::int("batch_size", 32, 1, 1_000_000, "Rows per gradient step."),
        ParamDescriptor::int("epochs", 50, 0, 100_000, "Passes over the training rows."),
        ParamDescriptor::float("momentum", 0.0, 0.0, 0.999, "Momentum of sgd; ignored by adam."),
        ParamDescriptor::float("beta1", 0.9, 0.0, 0.999_999, "Adam decay rate of the first moment."),
        ParamDescriptor::float("beta2", 0.999, 0.0, 0.999_999, "Adam decay rate of the second moment."),
        ParamDescriptor::float("epsilon", 1e-8, 1e-12, 1.0, "Adam denominator offset."),
    ]
}

pub struct AutoencoderPlugin;

fn network_settings(params: &ParamSet) -> Result<(Vec<usize>, Activation, Loss)> {
    let layers = params.int_list("encoder_layers").iter().map(|w| *w as usize).collect();
    Ok((layers, Activation::parse(params.text("activation"))?, Loss::parse(params.text("loss"))?))
}

impl TrainPlugin for AutoencoderPlugin {
    fn check(&self, params: &ParamSet) -> Vec<FieldError> {
        let layers = params.int_list("encoder_layers");
        if layers.len() > 16 {
            return vec![FieldError::new("encoder_layers", "at most 16 layers")];
        }
        Vec::new()
    }

    fn train(&self, params: &ParamSet, data: &TrainingData, seed: Seed, progress: &dyn TrainingProgress) -> Result<TrainedModel> {
        let (layers, activation, loss) = network_settings(params)?;
        let mut net = Network::init(data.x.ncols(), &layers, activation, loss, seed)?;
        let learning_rate = params.float("learning_rate");
        let optimizer = match params.text("optimizer") {
            "sgd" => Optimizer::Sgd {
                learning_rate,
                momentum: params.float("momentum"),
            },
            _ => Optimizer::Adam {
                learning_rate,
                beta1: params.float("beta1"),
                beta2: params.float("beta2"),
                epsilon: params.float("epsilon"),
            },
        };
        let options = TrainOptions {
            optimizer,
            batch_size: params.int("batch_size") as usize,
            epochs: params.int("epochs") as usize,
        };
        let log = fit(&mut net, &data.x, &options, seed, progress)?;
        Ok(TrainedModel {
            latent_dim: net.latent_dim(),
            layers: net.shapes.clone(),
            weights: net.params,
            training_log: log,
        })
    }

    fn load(&self, artifact: &ModelArtifact) -> Result<Box<dyn Model>> {
        Ok(Box::new(AutoencoderModel {
            net: network_from_artifact(artifact)?,
        }))
    }
}

pub fn network_from_artifact(artifact: &ModelArtifact) -> Result<Network> {
    let (_, activation, loss) = network_settings(&artifact.meta.hyperparams)?;
    Network::from_parts(artifact.meta.layers.clone(), artifact.weights.clone(), activation, loss)
}

pub struct AutoencoderModel {
    pub net: Network,
}

impl Model for AutoencoderModel {
    fn latent(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.net.encode(x)
    }

    fn reconstruct(&self, x: &DMatrix<f64>) -> Option<Result<DMatrix<f64>>> {
        Some(self.net.reconstruct(x))
    }

    /// Label of the nearest training latent; confidence falls with the
    /// distance to the latent centroid of that label's training rows.
    fn predict(&self, reference: &Reference, latent: &DMatrix<f64>, exclude: &[Option<usize>]) -> Vec<Prediction> {
        let train = rows(reference.latent);
        let centroids = reference.class_centroids();
        rows(latent)
            .iter()
            .zip(exclude)
            .map(|(q, skip)| {
                let best = train
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| Some(*i) != *skip)
                    .map(|(i, t)| (dist(q, t), i))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                match best {
                    Some((_, i)) => {
                        let label = reference.labels[i].clone();
                        let d = dist(q, &centroids[&label]);
                        Prediction {
                            label,
                            confidence: 1.0 / (1.0 + d),
                        }
                    }
                    None => reference.fallback(),
                }
            })
            .collect()
    }
}
