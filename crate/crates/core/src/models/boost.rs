//! Gradient boosting of depth-limited regression trees on squared error.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{Columns, RegressionTree, TreeParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Row fraction drawn without replacement for each tree.
    pub subsample: f64,
    pub min_samples_leaf: usize,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self { n_trees: 300, max_depth: 4, learning_rate: 0.1, subsample: 0.8, min_samples_leaf: 1 }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 || self.max_depth < 1 || self.min_samples_leaf < 1 {
            return Err(Error::config("boosting needs n_trees, max_depth, min_samples_leaf >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::config(format!("learning rate must lie in (0, 1], got {}", self.learning_rate)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::config(format!("subsample must lie in (0, 1], got {}", self.subsample)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoosting {
    base: f64,
    learning_rate: f64,
    trees: Vec<RegressionTree>,
}

impl GradientBoosting {
    pub fn fit(x: &Columns, y: &[f64], params: &BoostParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let n = x.n_rows();
        if n == 0 {
            return Err(Error::DegenerateFit("no training rows".into()));
        }
        let sorted = x.presort();
        let base = y.iter().sum::<f64>() / n as f64;
        let mut pred = vec![base; n];
        let mut residual = vec![0.0; n];
        let tp = TreeParams {
            max_depth: params.max_depth,
            min_samples_split: 2 * params.min_samples_leaf,
            min_samples_leaf: params.min_samples_leaf,
            complexity: 0.0,
            max_features: None,
        };
        let m = ((params.subsample * n as f64).round() as usize).clamp(1, n);
        let row_cache: Vec<Vec<f64>> = (0..n).map(|i| x.row(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trees = Vec::with_capacity(params.n_trees);
        for _ in 0..params.n_trees {
            for i in 0..n {
                residual[i] = y[i] - pred[i];
            }
            let rows: Vec<u32> = if m == n {
                (0..n as u32).collect()
            } else {
                sample(&mut rng, n, m).into_iter().map(|i| i as u32).collect()
            };
            let tree = RegressionTree::fit_sample(x, &residual, &rows, &sorted, &tp, &mut rng)?;
            for (i, p) in pred.iter_mut().enumerate() {
                *p += params.learning_rate * tree.predict(&row_cache[i]);
            }
            trees.push(tree);
        }
        Ok(Self { base, learning_rate: params.learning_rate, trees })
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.base + self.learning_rate * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }
}
