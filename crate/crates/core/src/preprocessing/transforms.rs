//! Builtin preprocessing plugins.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde_json::json;

use crate::error::{Error, FieldError, Result};
use crate::linalg::{column_means, Pca};
use crate::registry::{ParamDescriptor, ParamSet, PluginDescriptor, PluginExecutor, PluginStage};

/// A preprocessing step. `fit` sees only training rows.
pub trait TransformPlugin: Send + Sync {
    /// Cross-parameter checks beyond kind and range.
    fn check(&self, _params: &ParamSet) -> Vec<FieldError> {
        Vec::new()
    }

    fn fit(&self, params: &ParamSet, train: &DMatrix<f64>, columns: &[String]) -> Result<Box<dyn FittedTransform>>;
}

pub trait FittedTransform {
    fn output_columns(&self) -> Vec<String>;
    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64>;
    /// Fitted statistics, kept for audit.
    fn audit(&self) -> serde_json::Value;
}

fn descriptor(id: &str, title: &str, description: &str, params: Vec<ParamDescriptor>, sensitive: bool) -> PluginDescriptor {
    PluginDescriptor {
        plugin_id: id.into(),
        version: "1.0.0".into(),
        stage: PluginStage::Preprocess,
        algorithm_class: None,
        title: title.into(),
        description: description.into(),
        params,
        feature_sensitive: sensitive,
    }
}

pub fn builtin_plugins() -> Vec<(PluginDescriptor, PluginExecutor)> {
    vec![
        (
            descriptor(
                "minmax_scaler",
                "Min-max scaler",
                "Rescales each column linearly so its training minimum and maximum map to the ends of the feature range.",
                vec![ParamDescriptor::int_list(
                    "feature_range",
                    &[0, 1],
                    -1_000_000,
                    1_000_000,
                    "Target interval as two integers, low then high.",
                )],
                true,
            ),
            PluginExecutor::Transform(Arc::new(MinMaxScaler)),
        ),
        (
            descriptor(
                "standard_scaler",
                "Standard scaler",
                "Centers each column on its training mean and divides by its population standard deviation.",
                vec![],
                true,
            ),
            PluginExecutor::Transform(Arc::new(StandardScaler)),
        ),
        (
            descriptor(
                "binarizer",
                "Binarizer",
                "Maps values above the threshold to 1 and all others to 0.",
                vec![ParamDescriptor::float(
                    "threshold",
                    0.5,
                    -1e12,
                    1e12,
                    "Values strictly greater than this become 1.",
                )],
                true,
            ),
            PluginExecutor::Transform(Arc::new(Binarizer)),
        ),
        (
            descriptor(
                "tfidf_transform",
                "TF-IDF weighting",
                "Multiplies each cell by the inverse document frequency of its column over the training rows.",
                vec![ParamDescriptor::boolean(
                    "smooth",
                    true,
                    "Add one to document counts, as if an extra document contained every term.",
                )],
                true,
            ),
            PluginExecutor::Transform(Arc::new(Tfidf)),
        ),
        (
            descriptor(
                "variance_threshold",
                "Variance threshold",
                "Drops columns whose training variance does not exceed the threshold.",
                vec![ParamDescriptor::float(
                    "threshold",
                    0.0,
                    0.0,
                    1e12,
                    "Columns with variance at or below this value are removed.",
                )],
                true,
            ),
            PluginExecutor::Transform(Arc::new(VarianceThreshold)),
        ),
        (
            descriptor(
                "pca_reduce",
                "PCA reduction",
                "Projects the centered columns onto the leading principal components of the training rows.",
                vec![ParamDescriptor::int(
                    "n_components",
                    2,
                    1,
                    100_000,
                    "Number of components to keep.",
                )],
                true,
            ),
            PluginExecutor::Transform(Arc::new(PcaReduce)),
        ),
    ]
}

fn map_columns(m: &DMatrix<f64>, f: impl Fn(usize, f64) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| f(j, m[(i, j)]))
}

struct MinMaxScaler;

struct FittedMinMax {
    columns: Vec<String>,
    min: Vec<f64>,
    max: Vec<f64>,
    range: (f64, f64),
}

impl TransformPlugin for MinMaxScaler {
    fn check(&self, params: &ParamSet) -> Vec<FieldError> {
        match params.int_list("feature_range") {
            [lo, hi] if lo < hi => Vec::new(),
            [_, _] => vec![FieldError::new("feature_range", "low must be below high")],
            _ => vec![FieldError::new("feature_range", "expected exactly two values")],
        }
    }

    fn fit(&self, params: &ParamSet, train: &DMatrix<f64>, columns: &[String]) -> Result<Box<dyn FittedTransform>> {
        let r = params.int_list("feature_range");
        let (min, max): (Vec<f64>, Vec<f64>) = (0..train.ncols())
            .map(|j| {
                let c = train.column(j);
                if c.is_empty() {
                    (0.0, 0.0)
                } else {
                    (c.min(), c.max())
                }
            })
            .unzip();
        Ok(Box::new(FittedMinMax {
            columns: columns.to_vec(),
            min,
            max,
            range: (r[0] as f64, r[1] as f64),
        }))
    }
}

impl FittedTransform for FittedMinMax {
    fn output_columns(&self) -> Vec<String> {
        self.columns.clone()
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let (lo, hi) = self.range;
        map_columns(m, |j, x| {
            let span = self.max[j] - self.min[j];
            if span == 0.0 {
                lo
            } else {
                (x - self.min[j]) / span * (hi - lo) + lo
            }
        })
    }

    fn audit(&self) -> serde_json::Value {
        let constant: Vec<usize> = (0..self.min.len()).filter(|j| self.min[*j] == self.max[*j]).collect();
        json!({"min": self.min, "max": self.max, "feature_range": [self.range.0, self.range.1], "constant_columns": constant})
    }
}

struct StandardScaler;

struct FittedStandard {
    columns: Vec<String>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    constant: Vec<usize>,
}

impl TransformPlugin for StandardScaler {
    fn fit(&self, _: &ParamSet, train: &DMatrix<f64>, columns: &[String]) -> Result<Box<dyn FittedTransform>> {
        let n = train.nrows().max(1) as f64;
        let mean: Vec<f64> = column_means(train).iter().copied().collect();
        let mut scale = Vec::with_capacity(mean.len());
        let mut constant = Vec::new();
        for (j, mu) in mean.iter().enumerate() {
            let var = train.column(j).iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            if var > 0.0 {
                scale.push(var.sqrt());
            } else {
                scale.push(1.0);
                constant.push(j);
            }
        }
        Ok(Box::new(FittedStandard {
            columns: columns.to_vec(),
            mean,
            scale,
            constant,
        }))
    }
}

impl FittedTransform for FittedStandard {
    fn output_columns(&self) -> Vec<String> {
        self.columns.clone()
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        map_columns(m, |j, x| (x - self.mean[j]) / self.scale[j])
    }

    fn audit(&self) -> serde_json::Value {
        json!({"mean": self.mean, "scale": self.scale, "constant_columns": self.constant})
    }
}

struct Binarizer;

struct FittedBinarizer {
    columns: Vec<String>,
    threshold: f64,
}

impl TransformPlugin for Binarizer {
    fn fit(&self, params: &ParamSet, _: &DMatrix<f64>, columns: &[String]) -> Result<Box<dyn FittedTransform>> {
        Ok(Box::new(FittedBinarizer {
            columns: columns.to_vec(),
            threshold: params.float("threshold"),
        }))
    }
}

impl FittedTransform for FittedBinarizer {
    fn output_columns(&self) -> Vec<String> {
        self.columns.clone()
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        map_columns(m, |_, x| if x > self.threshold { 1.0 } else { 0.0 })
    }

    fn audit(&self) -> serde_json::Value {
        json!({"threshold": self.threshold})
    }
}

struct Tfidf;

struct FittedTfidf {
    columns: Vec<String>,
    idf: Vec<f64>,
}

impl TransformPlugin for Tfidf {
    fn fit(&self, params: &ParamSet, train: &DMatrix<f64>, columns: &[String]) -> Result<Box<dyn FittedTransform>> {
        let n = train.nrows() as f64;
        let smooth = params.boolean("smooth");
        let idf = (0..train.ncols())
            .map(|j| {
                let df = train.column(j).iter().filter(|x| **x != 0.0).count() as f64;
                if smooth {
                    ((1.0 + n) / (1.0 + df)).ln() + 1.0
                } else {
                    // a term absent from every training row counts as seen once
                    (n.max(1.0) / df.max(1.0)).ln() + 1.0
                }
            })
            .collect();
        Ok(Box::new(FittedTfidf {
            columns: columns.to_vec(),
            idf,
        }))
    }
}

impl FittedTransform for FittedTfidf {
    fn output_columns(&self) -> Vec<String> {
        self.columns.clone()
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        map_columns(m, |j, x| x * self.idf[j])
    }

    fn audit(&self) -> serde_json::Value {
        json!({"idf": self.idf})
    }
}

struct VarianceThreshold;

struct FittedVariance {
    columns: Vec<String>,
    keep: Vec<usize>,
    variances: Vec<f64>,
}

impl TransformPlugin for VarianceThreshold {
    fn fit(&self, params: &ParamSet, train: &DMatrix<f64>, columns: &[String]) -> Result<Box<dyn FittedTransform>> {
        let threshold = params.float("threshold");
        let n = train.nrows().max(1) as f64;
        let means = column_means(train);
        let variances: Vec<f64> = (0..train.ncols())
            .map(|j| train.column(j).iter().map(|x| (x - means[j]).powi(2)).sum::<f64>() / n)
            .collect();
        let keep = (0..variances.len()).filter(|j| variances[*j] > threshold).collect();
        Ok(Box::new(FittedVariance {
            columns: columns.to_vec(),
            keep,
            variances,
        }))
    }
}

impl FittedTransform for FittedVariance {
    fn output_columns(&self) -> Vec<String> {
        self.keep.iter().map(|j| self.columns[*j].clone()).collect()
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.select_columns(&self.keep)
    }

    fn audit(&self) -> serde_json::Value {
        let removed: Vec<&String> = (0..self.columns.len())
            .filter(|j| !self.keep.contains(j))
            .map(|j| &self.columns[j])
            .collect();
        json!({"variances": self.variances, "removed": removed})
    }
}

struct PcaReduce;

struct FittedPca {
    pca: Pca,
}

impl TransformPlugin for PcaReduce {
    fn fit(&self, params: &ParamSet, train: &DMatrix<f64>, _columns: &[String]) -> Result<Box<dyn FittedTransform>> {
        let k = params.int("n_components") as usize;
        if k > train.ncols() {
            return Err(Error::invalid(format!(
                "n_components {k} exceeds column count {}",
                train.ncols()
            )));
        }
        Ok(Box::new(FittedPca {
            pca: Pca::fit(train, k)?,
        }))
    }
}

impl FittedTransform for FittedPca {
    fn output_columns(&self) -> Vec<String> {
        (0..self.pca.components.len()).map(|i| format!("pca:{i}")).collect()
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.pca.transform(m)
    }

    fn audit(&self) -> serde_json::Value {
        serde_json::to_value(&self.pca).expect("pca serializes")
    }
}
