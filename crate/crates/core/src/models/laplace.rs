//! Conditional Laplace transform `psi_Y(alpha | w) = E[exp(alpha Y) | W = w]`.
//!
//! Two estimators are provided. [`fit_cond_laplace`] refits a regressor on the
//! transformed target `exp(alpha Y)`. [`LeafPartition`] keeps a fitted tree's
//! cells and evaluates the leaf-wise empirical transform at any `alpha`, which
//! makes sweeps over `alpha` cheap and gives exact leaf-wise Jensen.

use serde::{Deserialize, Serialize};

use super::{features_of, Hyper, IndexFeatures, Method, PayoutModel, RegressionTree, Regressor};
use crate::claims::ClaimDataset;
use crate::error::{Error, Result};
use crate::stats::log_mean_exp;

/// Largest admissible `alpha * max(Y)`.
pub const OVERFLOW_GUARD: f64 = 700.0;

pub(crate) fn check_alpha(alpha: f64, max_loss: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("risk aversion must be >= 0, got {alpha}")));
    }
    if alpha * max_loss > OVERFLOW_GUARD {
        return Err(Error::AlphaTooLarge { alpha, max_alpha: OVERFLOW_GUARD / max_loss });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "lowercase")]
enum Estimator {
    /// Tree whose leaf values hold `log psi`.
    Partition { tree: RegressionTree },
    /// Regressor of `exp(alpha Y - shift)`; predictions floored at `log_floor`.
    Refit { regressor: Regressor, shift: f64, log_floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondLaplaceModel {
    pub alpha: f64,
    pub method: Method,
    estimator: Estimator,
}

impl CondLaplaceModel {
    /// `log psi_hat(alpha | w)`.
    pub fn log_psi(&self, w: &IndexFeatures) -> f64 {
        match &self.estimator {
            Estimator::Partition { tree } => tree.predict(&w.tree_row()),
            Estimator::Refit { regressor, shift, log_floor } => {
                let raw = regressor.predict(w);
                if raw > 0.0 {
                    (raw.ln() + shift).max(*log_floor)
                } else {
                    *log_floor
                }
            }
        }
    }

    pub fn psi(&self, w: &IndexFeatures) -> f64 {
        self.log_psi(w).exp()
    }

    /// Conditional exponential premium `m_Y(alpha | w) = log psi / alpha`.
    pub fn m(&self, w: &IndexFeatures) -> f64 {
        self.log_psi(w) / self.alpha
    }

    /// Number of claims where `m_Y(alpha | w) < E_hat[Y | w]`.
    pub fn jensen_violations(&self, mean: &PayoutModel, ds: &ClaimDataset) -> usize {
        ds.records()
            .iter()
            .map(IndexFeatures::from)
            .filter(|w| self.m(w) < mean.predict_mean(w) - 1e-9)
            .count()
    }
}

/// Fits `psi_Y(alpha | .)` by regressing `exp(alpha Y)` on `W`.
pub fn fit_cond_laplace(ds: &ClaimDataset, alpha: f64, method: Method, hyper: &Hyper, seed: u64) -> Result<CondLaplaceModel> {
    let max_loss = ds.max_loss();
    check_alpha(alpha, max_loss)?;
    if alpha == 0.0 {
        return Err(Error::domain("conditional Laplace fit needs alpha > 0"));
    }
    let shift = alpha * max_loss;
    let y: Vec<f64> = ds.records().iter().map(|r| (alpha * r.loss - shift).exp()).collect();
    let y_min = ds.records().iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    let regressor = Regressor::fit(&features_of(ds), &y, method, hyper, seed)?;
    Ok(CondLaplaceModel { alpha, method, estimator: Estimator::Refit { regressor, shift, log_floor: alpha * y_min } })
}

/// The cells of a fitted tree together with the training losses in each cell.
#[derive(Debug, Clone)]
pub struct LeafPartition {
    tree: RegressionTree,
    slot_of_node: Vec<usize>,
    leaf_nodes: Vec<usize>,
    losses: Vec<Vec<f64>>,
    claim_slots: Vec<usize>,
}

impl LeafPartition {
    pub fn new(tree: &RegressionTree, ds: &ClaimDataset) -> Self {
        let leaf_nodes = tree.leaves();
        let mut slot_of_node = vec![usize::MAX; tree.nodes().len()];
        for (slot, &node) in leaf_nodes.iter().enumerate() {
            slot_of_node[node] = slot;
        }
        let mut losses = vec![Vec::new(); leaf_nodes.len()];
        let claim_slots: Vec<usize> = ds
            .records()
            .iter()
            .map(|r| {
                let slot = slot_of_node[tree.leaf_of(&IndexFeatures::from(r).tree_row())];
                losses[slot].push(r.loss);
                slot
            })
            .collect();
        Self { tree: tree.clone(), slot_of_node, leaf_nodes, losses, claim_slots }
    }

    /// Partition of a single-tree payout model.
    pub fn of_model(model: &PayoutModel, ds: &ClaimDataset) -> Result<Self> {
        model
            .as_tree()
            .map(|t| Self::new(t, ds))
            .ok_or_else(|| Error::config(format!("a leaf partition needs a tree model, got {}", model.method)))
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_nodes.len()
    }

    pub fn tree(&self) -> &RegressionTree {
        &self.tree
    }

    pub fn slot(&self, w: &IndexFeatures) -> usize {
        self.slot_of_node[self.tree.leaf_of(&w.tree_row())]
    }

    /// Leaf slot of every training claim, in dataset order.
    pub fn claim_slots(&self) -> &[usize] {
        &self.claim_slots
    }

    pub fn leaf_losses(&self, slot: usize) -> &[f64] {
        &self.losses[slot]
    }

    /// Leaf-wise `log mean exp(alpha Y)`; empty leaves fall back to the fitted mean.
    pub fn log_psi_by_leaf(&self, alpha: f64) -> Vec<f64> {
        self.leaf_nodes
            .iter()
            .zip(&self.losses)
            .map(|(&node, ys)| {
                if ys.is_empty() {
                    alpha * self.tree.nodes()[node].value
                } else {
                    log_mean_exp(ys.iter().map(|y| alpha * y))
                }
            })
            .collect()
    }

    pub fn at(&self, alpha: f64) -> Result<CondLaplaceModel> {
        let max_loss = self.losses.iter().flatten().fold(0.0_f64, |a, &b| a.max(b));
        check_alpha(alpha, max_loss)?;
        if alpha == 0.0 {
            return Err(Error::domain("conditional Laplace model needs alpha > 0"));
        }
        let values = self.log_psi_by_leaf(alpha);
        let mut tree = self.tree.clone();
        let slots = &self.slot_of_node;
        tree.map_leaves(|node, _| values[slots[node]]);
        Ok(CondLaplaceModel { alpha, method: Method::Tree, estimator: Estimator::Partition { tree } })
    }
}

/// Chernoff bound on `P(Y < beta E[Y|W] | W = w)`:
/// `min_rho psi(rho|w) exp(-rho (1-beta) E_hat[Y|w])`, clamped to at most 1.
pub fn overcompensation_bound(laps: &[CondLaplaceModel], mean: &PayoutModel, w: &IndexFeatures, beta: f64) -> Result<f64> {
    super::check_beta(beta)?;
    if laps.is_empty() {
        return Err(Error::config("Chernoff bound needs a non-empty rho grid"));
    }
    let m = mean.predict_mean(w);
    let log_bound = laps
        .iter()
        .map(|lap| lap.log_psi(w) - lap.alpha * (1.0 - beta) * m)
        .fold(f64::INFINITY, f64::min);
    Ok(log_bound.exp().min(1.0))
}
