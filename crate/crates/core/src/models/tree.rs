//! CART regression tree with squared-error splits over presorted features.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Minimum SSE reduction of a split, as a fraction of the root SSE.
    pub complexity: f64,
    /// Features drawn at each split; `None` scans all of them.
    pub max_features: Option<usize>,
}

impl Default for TreeParams {
    /// Mirrors the usual single-tree defaults: minimum split 20, minimum leaf
    /// 7, complexity 0.01.
    fn default() -> Self {
        Self { max_depth: 30, min_samples_split: 20, min_samples_leaf: 7, complexity: 0.01, max_features: None }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::config("tree depth must be >= 1"));
        }
        if self.min_samples_leaf < 1 || self.min_samples_split < 2 {
            return Err(Error::config("tree needs min_samples_leaf >= 1 and min_samples_split >= 2"));
        }
        if !(self.complexity >= 0.0) {
            return Err(Error::config("tree complexity must be >= 0"));
        }
        if self.max_features == Some(0) {
            return Err(Error::config("max_features must be >= 1"));
        }
        Ok(())
    }
}

const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    /// Mean target of the training rows reaching this node.
    pub value: f64,
    pub samples: u32,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.left == NO_CHILD
    }
}

/// Fitted tree. Rows go left when `x[feature] <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    n_features: usize,
}

/// Column-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Columns {
    cols: Vec<Vec<f64>>,
    rows: usize,
}

impl Columns {
    pub fn from_rows<const D: usize>(rows: &[[f64; D]]) -> Self {
        let mut cols = vec![Vec::with_capacity(rows.len()); D];
        for r in rows {
            for (c, v) in cols.iter_mut().zip(r) {
                c.push(*v);
            }
        }
        Self { cols, rows: rows.len() }
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }

    pub fn get(&self, row: usize, feature: usize) -> f64 {
        self.cols[feature][row]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.cols.iter().map(|c| c[row]).collect()
    }

    /// Per-feature row indices sorted by value (ties by row index).
    pub fn presort(&self) -> Vec<Vec<u32>> {
        self.cols
            .iter()
            .map(|c| {
                let mut idx: Vec<u32> = (0..self.rows as u32).collect();
                idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect()
    }
}

struct Builder<'a, R> {
    x: &'a Columns,
    y: &'a [f64],
    params: TreeParams,
    min_gain: f64,
    rng: &'a mut R,
    nodes: Vec<Node>,
    // Scratch membership flags, indexed by row.
    goes_left: Vec<bool>,
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl RegressionTree {
    /// Fits on all rows of `x`.
    pub fn fit<R: Rng>(x: &Columns, y: &[f64], params: &TreeParams, rng: &mut R) -> Result<Self> {
        let sorted = x.presort();
        Self::fit_presorted(x, y, sorted, params, rng)
    }

    /// Fits on the multiset of rows in `sample` (duplicates allowed).
    pub fn fit_sample<R: Rng>(x: &Columns, y: &[f64], sample: &[u32], full_sort: &[Vec<u32>], params: &TreeParams, rng: &mut R) -> Result<Self> {
        let mut mult = vec![0u32; x.n_rows()];
        for &i in sample {
            mult[i as usize] += 1;
        }
        let sorted = full_sort
            .iter()
            .map(|order| {
                let mut v = Vec::with_capacity(sample.len());
                for &i in order {
                    for _ in 0..mult[i as usize] {
                        v.push(i);
                    }
                }
                v
            })
            .collect();
        Self::fit_presorted(x, y, sorted, params, rng)
    }

    fn fit_presorted<R: Rng>(x: &Columns, y: &[f64], sorted: Vec<Vec<u32>>, params: &TreeParams, rng: &mut R) -> Result<Self> {
        params.validate()?;
        if x.n_rows() != y.len() {
            return Err(Error::config("feature rows and targets differ in length"));
        }
        if sorted.first().is_none_or(|s| s.is_empty()) {
            return Err(Error::DegenerateFit("no training rows".into()));
        }
        let rows = &sorted[0];
        let n = rows.len() as f64;
        let sum: f64 = rows.iter().map(|&i| y[i as usize]).sum();
        let sum_sq: f64 = rows.iter().map(|&i| y[i as usize] * y[i as usize]).sum();
        let root_sse = (sum_sq - sum * sum / n).max(0.0);
        let min_gain = (params.complexity * root_sse).max(1e-12 * (1.0 + root_sse));
        let mut b = Builder {
            x,
            y,
            params: *params,
            min_gain,
            rng,
            nodes: Vec::new(),
            goes_left: vec![false; x.n_rows()],
        };
        b.grow(sorted, 0);
        Ok(Self { nodes: b.nodes, n_features: x.n_features() })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Node index of the leaf reached by `row`.
    pub fn leaf_of(&self, row: &[f64]) -> usize {
        let mut k = 0usize;
        loop {
            let node = &self.nodes[k];
            if node.is_leaf() {
                return k;
            }
            k = if row[node.feature as usize] <= node.threshold { node.left } else { node.right } as usize;
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.nodes[self.leaf_of(row)].value
    }

    /// Indices of all leaves, in depth-first order.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&k| self.nodes[k].is_leaf()).collect()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], k: usize) -> usize {
            let n = &nodes[k];
            if n.is_leaf() {
                0
            } else {
                1 + walk(nodes, n.left as usize).max(walk(nodes, n.right as usize))
            }
        }
        walk(&self.nodes, 0)
    }

    /// Replaces every leaf value through `f(leaf_index)`.
    pub fn map_leaves(&mut self, mut f: impl FnMut(usize, &Node) -> f64) {
        for k in 0..self.nodes.len() {
            if self.nodes[k].is_leaf() {
                let v = f(k, &self.nodes[k]);
                self.nodes[k].value = v;
            }
        }
    }
}

impl<R: Rng> Builder<'_, R> {
    fn grow(&mut self, sorted: Vec<Vec<u32>>, depth: usize) -> u32 {
        let rows = &sorted[0];
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&i| self.y[i as usize]).sum();
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            feature: 0,
            threshold: 0.0,
            left: NO_CHILD,
            right: NO_CHILD,
            value: sum / n as f64,
            samples: n as u32,
        });
        if depth >= self.params.max_depth || n < self.params.min_samples_split || n < 2 * self.params.min_samples_leaf {
            return id;
        }
        let Some(split) = self.best_split(&sorted, sum) else {
            return id;
        };
        for &i in &sorted[split.feature] {
            self.goes_left[i as usize] = self.x.get(i as usize, split.feature) <= split.threshold;
        }
        let mut left = Vec::with_capacity(sorted.len());
        let mut right = Vec::with_capacity(sorted.len());
        for order in sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = order.into_iter().partition(|&i| self.goes_left[i as usize]);
            left.push(l);
            right.push(r);
        }
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        let node = &mut self.nodes[id as usize];
        node.feature = split.feature as u32;
        node.threshold = split.threshold;
        node.left = l;
        node.right = r;
        id
    }

    fn best_split(&mut self, sorted: &[Vec<u32>], sum: f64) -> Option<Split> {
        let d = sorted.len();
        let features: Vec<usize> = match self.params.max_features {
            Some(m) if m < d => {
                let mut f = sample(self.rng, d, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        };
        let n = sorted[0].len();
        let min_leaf = self.params.min_samples_leaf;
        let base = sum * sum / n as f64;
        let mut best: Option<Split> = None;
        for f in features {
            let order = &sorted[f];
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                let i = order[k] as usize;
                left_sum += self.y[i];
                let n_left = k + 1;
                if n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let here = self.x.get(i, f);
                let next = self.x.get(order[k + 1] as usize, f);
                if here == next {
                    continue;
                }
                let right_sum = sum - left_sum;
                let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64 - base;
                if gain > self.min_gain && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = here + (next - here) / 2.0;
                    let threshold = if mid < next { mid } else { here };
                    best = Some(Split { feature: f, threshold, gain });
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step_data() -> (Columns, Vec<f64>) {
        let rows: Vec<[f64; 2]> = (0..200).map(|i| [i as f64, (i % 3) as f64]).collect();
        let y = rows.iter().map(|r| if r[0] < 100.0 { 1.0 } else { 5.0 }).collect();
        (Columns::from_rows(&rows), y)
    }

    #[test]
    fn recovers_a_step() {
        let (x, y) = step_data();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = RegressionTree::fit(&x, &y, &TreeParams::default(), &mut rng).unwrap();
        assert_eq!(t.leaves().len(), 2);
        assert_eq!(t.predict(&[10.0, 0.0]), 1.0);
        assert_eq!(t.predict(&[150.0, 2.0]), 5.0);
        assert_eq!(t.nodes()[0].threshold, 99.5);
    }

    #[test]
    fn constant_target_stays_a_stump() {
        let (x, _) = step_data();
        let y = vec![3.0; 200];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = RegressionTree::fit(&x, &y, &TreeParams::default(), &mut rng).unwrap();
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.depth(), 0);
    }

    #[test]
    fn leaf_values_are_leaf_means() {
        let rows: Vec<[f64; 1]> = (0..300).map(|i| [(i % 37) as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| (r[0] * 0.7).sin() * 10.0 + r[0]).collect();
        let x = Columns::from_rows(&rows);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = TreeParams { complexity: 0.0, min_samples_leaf: 5, ..TreeParams::default() };
        let t = RegressionTree::fit(&x, &y, &params, &mut rng).unwrap();
        for leaf in t.leaves() {
            let members: Vec<f64> = (0..300).filter(|&i| t.leaf_of(&x.row(i)) == leaf).map(|i| y[i]).collect();
            assert!(members.len() >= 5);
            let m = members.iter().sum::<f64>() / members.len() as f64;
            assert!((m - t.nodes()[leaf].value).abs() < 1e-9);
            assert_eq!(members.len(), t.nodes()[leaf].samples as usize);
        }
    }

    #[test]
    fn depth_limit_respected() {
        let rows: Vec<[f64; 1]> = (0..500).map(|i| [i as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] * r[0]).collect();
        let x = Columns::from_rows(&rows);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = TreeParams { max_depth: 3, complexity: 0.0, min_samples_leaf: 1, min_samples_split: 2, max_features: None };
        let t = RegressionTree::fit(&x, &y, &params, &mut rng).unwrap();
        assert_eq!(t.depth(), 3);
        assert_eq!(t.leaves().len(), 8);
    }

    #[test]
    fn rejects_bad_params() {
        let (x, y) = step_data();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = TreeParams { max_depth: 0, ..TreeParams::default() };
        assert!(matches!(RegressionTree::fit(&x, &y, &p, &mut rng), Err(Error::Config(_))));
    }
}
