//! Bagged regression trees with per-split feature subsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{Columns, RegressionTree, TreeParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_features: usize,
    pub min_samples_leaf: usize,
    pub max_depth: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 300, max_features: 2, min_samples_leaf: 20, max_depth: 30 }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 || self.max_features < 1 || self.min_samples_leaf < 1 || self.max_depth < 1 {
            return Err(Error::config("forest needs n_trees, max_features, min_samples_leaf, max_depth >= 1"));
        }
        Ok(())
    }

    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_samples_split: 2 * self.min_samples_leaf,
            min_samples_leaf: self.min_samples_leaf,
            complexity: 0.0,
            max_features: Some(self.max_features),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<RegressionTree>,
}

impl RandomForest {
    /// Tree `k` draws its bootstrap and feature subsets from stream `k` of `seed`,
    /// so the fit does not depend on thread scheduling.
    pub fn fit(x: &Columns, y: &[f64], params: &ForestParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let sorted = x.presort();
        let tp = params.tree_params();
        let n = x.n_rows();
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let sample: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
                RegressionTree::fit_sample(x, y, &sample, &sorted, &tp, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { trees })
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }
}
