//! Conditional-mean estimators `w -> E[Y | W = w]` behind the index payout
//! `phi_beta(w) = beta * E[Y | W = w]`, plus the conditional Laplace
//! transform used to price basis risk.

pub mod boost;
pub mod forest;
pub mod laplace;
pub mod linear;
pub mod tree;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::claims::{ClaimDataset, ClaimRecord, ServiceType, SERVICE_LEVELS};
use crate::error::{Error, Result};
use crate::stats;

pub use boost::{BoostParams, GradientBoosting};
pub use forest::{ForestParams, RandomForest};
pub use laplace::{fit_cond_laplace, overcompensation_bound, CondLaplaceModel, LeafPartition, OVERFLOW_GUARD};
pub use linear::{LinearModel, LinearSpec};
pub use tree::{Columns, RegressionTree, TreeParams};

/// Minimum number of claims accepted by [`fit_conditional_mean`].
pub const MIN_TRAINING_ROWS: usize = 30;

/// The index `W` of one claim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexFeatures {
    pub duration: f64,
    pub service_type: ServiceType,
    pub backup_activated: bool,
    pub backup_quality: f64,
    pub backup_excess: f64,
}

/// Column order of the tree feature vector.
pub const TREE_FEATURE_NAMES: [&str; 9] = ["T", "X=t1", "X=t2", "X=t3", "X=t4", "X=t5", "delta", "B", "Lambda"];

impl IndexFeatures {
    /// `[T, one-hot(X) over t1..t5, delta, B, Lambda]`.
    pub fn tree_row(&self) -> [f64; 9] {
        let mut row = [0.0; 9];
        row[0] = self.duration;
        row[1 + self.service_type.level()] = 1.0;
        row[1 + SERVICE_LEVELS] = f64::from(u8::from(self.backup_activated));
        row[2 + SERVICE_LEVELS] = self.backup_quality;
        row[3 + SERVICE_LEVELS] = self.backup_excess;
        row
    }
}

impl From<&ClaimRecord> for IndexFeatures {
    fn from(r: &ClaimRecord) -> Self {
        Self {
            duration: r.duration,
            service_type: r.service_type,
            backup_activated: r.backup_activated,
            backup_quality: r.backup_quality,
            backup_excess: r.backup_excess,
        }
    }
}

pub fn features_of(ds: &ClaimDataset) -> Vec<IndexFeatures> {
    ds.records().iter().map(IndexFeatures::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Linear,
    Tree,
    Forest,
    Boosted,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Linear, Method::Tree, Method::Forest, Method::Boosted];

    pub fn name(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Tree => "tree",
            Method::Forest => "forest",
            Method::Boosted => "boosted",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "lm" => Ok(Method::Linear),
            "tree" | "cart" => Ok(Method::Tree),
            "forest" | "rf" => Ok(Method::Forest),
            "boosted" | "xgboost" | "gbm" => Ok(Method::Boosted),
            other => Err(Error::config(format!("unknown model method `{other}`"))),
        }
    }
}

/// Hyperparameters of all four estimators.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub linear: LinearSpec,
    pub tree: TreeParams,
    pub forest: ForestParams,
    pub boosted: BoostParams,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        self.forest.validate()?;
        self.boosted.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regressor {
    Linear(LinearModel),
    Tree(RegressionTree),
    Forest(RandomForest),
    Boosted(GradientBoosting),
}

impl Regressor {
    pub fn fit(features: &[IndexFeatures], y: &[f64], method: Method, hyper: &Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if features.len() != y.len() {
            return Err(Error::config("features and targets differ in length"));
        }
        if method == Method::Linear {
            return Ok(Regressor::Linear(LinearModel::fit(features, y, hyper.linear)?));
        }
        let rows: Vec<[f64; 9]> = features.iter().map(IndexFeatures::tree_row).collect();
        let x = Columns::from_rows(&rows);
        Ok(match method {
            Method::Tree => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Regressor::Tree(RegressionTree::fit(&x, y, &hyper.tree, &mut rng)?)
            }
            Method::Forest => Regressor::Forest(RandomForest::fit(&x, y, &hyper.forest, seed)?),
            Method::Boosted => Regressor::Boosted(GradientBoosting::fit(&x, y, &hyper.boosted, seed)?),
            Method::Linear => unreachable!(),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Regressor::Linear(_) => Method::Linear,
            Regressor::Tree(_) => Method::Tree,
            Regressor::Forest(_) => Method::Forest,
            Regressor::Boosted(_) => Method::Boosted,
        }
    }

    /// Raw prediction, not clamped.
    pub fn predict(&self, w: &IndexFeatures) -> f64 {
        match self {
            Regressor::Linear(m) => m.predict(w),
            Regressor::Tree(t) => t.predict(&w.tree_row()),
            Regressor::Forest(f) => f.predict(&w.tree_row()),
            Regressor::Boosted(b) => b.predict(&w.tree_row()),
        }
    }
}

const MODEL_FORMAT: &str = "idxcover-payout-model/1";

/// A fitted conditional-mean model. Immutable once fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoutModel {
    format: String,
    pub method: Method,
    pub hyper: Hyper,
    pub seed: u64,
    pub training_rows: usize,
    pub regressor: Regressor,
}

impl PayoutModel {
    /// Conditional-mean estimate, clamped at 0.
    pub fn predict_mean(&self, w: &IndexFeatures) -> f64 {
        self.regressor.predict(w).max(0.0)
    }

    /// `beta * max(E_hat[Y | w], 0)`.
    pub fn predict_phi(&self, w: &IndexFeatures, beta: f64) -> Result<f64> {
        check_beta(beta)?;
        Ok(beta * self.predict_mean(w))
    }

    pub fn predict_all(&self, ds: &ClaimDataset) -> Vec<f64> {
        ds.records().iter().map(|r| self.predict_mean(&IndexFeatures::from(r))).collect()
    }

    /// The tree carrying the partition, for single-tree models.
    pub fn as_tree(&self) -> Option<&RegressionTree> {
        match &self.regressor {
            Regressor::Tree(t) => Some(t),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format != MODEL_FORMAT {
            return Err(Error::config(format!("unsupported model format `{}`", m.format)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("payout scale beta must lie in (0, 1], got {beta}")))
    }
}

/// Fits `E[Y | W]` with the chosen estimator. Deterministic in `(ds, method, hyper, seed)`.
pub fn fit_conditional_mean(ds: &ClaimDataset, method: Method, hyper: &Hyper, seed: u64) -> Result<PayoutModel> {
    if ds.len() < MIN_TRAINING_ROWS {
        return Err(Error::DegenerateFit(format!(
            "need at least {MIN_TRAINING_ROWS} claims, got {}",
            ds.len()
        )));
    }
    let y = ds.losses();
    if y.iter().all(|v| *v == y[0]) {
        return Err(Error::DegenerateFit("all losses are equal".into()));
    }
    let regressor = Regressor::fit(&features_of(ds), &y, method, hyper, seed)?;
    Ok(PayoutModel {
        format: MODEL_FORMAT.into(),
        method,
        hyper: *hyper,
        seed,
        training_rows: ds.len(),
        regressor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub rmse: f64,
    pub r_squared: f64,
    pub mae: f64,
    pub correlation: f64,
}

/// Metrics of `predictions` against `targets`.
pub fn metrics(predictions: &[f64], targets: &[f64]) -> ModelMetrics {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let (mut sse, mut sae, mut sst) = (0.0, 0.0, 0.0);
    for (p, y) in predictions.iter().zip(targets) {
        sse += (y - p) * (y - p);
        sae += (y - p).abs();
        sst += (y - mean) * (y - mean);
    }
    ModelMetrics {
        rmse: (sse / n).sqrt(),
        r_squared: if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN },
        mae: sae / n,
        correlation: stats::pearson(predictions, targets).unwrap_or(f64::NAN),
    }
}

/// In-sample metrics of the clamped conditional-mean predictions.
pub fn evaluate(model: &PayoutModel, ds: &ClaimDataset) -> ModelMetrics {
    metrics(&model.predict_all(ds), &ds.losses())
}
