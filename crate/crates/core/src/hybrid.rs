//! Hybrid index/indemnity cover.
//!
//! A claim is compensated by the index when the predicted gap
//! `Delta(w) = m_Y(alpha|w) - phi_beta(w)` is at most a threshold `e`, and by
//! the (delayed) actual loss otherwise. The gap targets come from a
//! [`PreferenceModel`]; the Delta-model then smooths them over `W`, either as a
//! regression tree that flags whole leaves or as a boosted ensemble that
//! flags individual claims.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::{ClaimDataset, StratumFilter};
use crate::error::{Error, Result};
use crate::models::{check_beta, Hyper, IndexFeatures, Method, Regressor, TREE_FEATURE_NAMES};
use crate::stats::log_mean_exp;
use crate::utility::{log_laplace_psi, log_mix, PreferenceModel, PricingParams};

/// How the Delta-model groups claims.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    /// Regression tree; a leaf is flagged as a whole.
    Tree,
    /// Boosted ensemble; each claim is flagged on its own prediction.
    Boosted,
}

impl DeltaMode {
    pub fn method(self) -> Method {
        match self {
            DeltaMode::Tree => Method::Tree,
            DeltaMode::Boosted => Method::Boosted,
        }
    }
}

impl fmt::Display for DeltaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeltaMode::Tree => "tree",
            DeltaMode::Boosted => "boosted",
        })
    }
}

impl FromStr for DeltaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tree" | "cart" => Ok(DeltaMode::Tree),
            "boosted" | "xgboost" | "gbm" => Ok(DeltaMode::Boosted),
            other => Err(Error::config(format!("unknown Delta-model mode '{other}' (tree | boosted)"))),
        }
    }
}

/// Whether claims are split by backup success before fitting the Delta-model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratification {
    Pooled,
    #[default]
    ByBackup,
}

impl Stratification {
    pub fn strata(self) -> &'static [StratumFilter] {
        match self {
            Stratification::Pooled => &[StratumFilter::All],
            Stratification::ByBackup => &[StratumFilter::BackupActivated, StratumFilter::BackupFailed],
        }
    }
}

impl FromStr for Stratification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pooled" | "all" => Ok(Stratification::Pooled),
            "by_backup" | "backup" | "delta" | "split" => Ok(Stratification::ByBackup),
            other => Err(Error::config(format!("unknown stratification '{other}' (pooled | by_backup)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub alpha: f64,
    pub beta: f64,
    pub e: f64,
    pub mode: DeltaMode,
    pub stratification: Stratification,
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::domain(format!("hybrid alpha must be > 0, got {}", self.alpha)));
        }
        check_beta(self.beta)?;
        check_e(self.e)
    }
}

fn check_e(e: f64) -> Result<()> {
    if e >= 0.0 && e.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("threshold e must be >= 0, got {e}")))
    }
}

/// Delta-model fitted on one stratum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaModel {
    pub mode: DeltaMode,
    pub stratum: StratumFilter,
    pub alpha: f64,
    pub beta: f64,
    pub claim_frequency: f64,
    /// Dataset rows in the stratum.
    pub rows: Vec<usize>,
    pub losses: Vec<f64>,
    /// `E_hat[Y | w]` per stratum row.
    pub mean: Vec<f64>,
    pub targets: Vec<f64>,
    pub predictions: Vec<f64>,
    pub regressor: Regressor,
}

/// Fits `Delta(w)` on the claims of `stratum`; targets use the full-data
/// mean and Laplace estimates carried by `pm`.
pub fn fit_delta_model(
    pm: &PreferenceModel<'_>,
    alpha: f64,
    beta: f64,
    mode: DeltaMode,
    stratum: StratumFilter,
    hyper: &Hyper,
    seed: u64,
) -> Result<DeltaModel> {
    check_beta(beta)?;
    let ds = pm.dataset();
    let gaps = pm.claim_gaps(alpha, beta)?;
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| stratum.keeps(&ds.records()[i])).collect();
    if rows.is_empty() {
        return Err(Error::EmptySelection(format!("no claims in stratum {stratum}")));
    }
    let features: Vec<IndexFeatures> = rows.iter().map(|&i| IndexFeatures::from(&ds.records()[i])).collect();
    let targets: Vec<f64> = rows.iter().map(|&i| gaps[i]).collect();
    let regressor = Regressor::fit(&features, &targets, mode.method(), hyper, seed)?;
    let predictions = features.iter().map(|w| regressor.predict(w)).collect();
    Ok(DeltaModel {
        mode,
        stratum,
        alpha,
        beta,
        claim_frequency: ds.claim_frequency(),
        losses: rows.iter().map(|&i| ds.records()[i].loss).collect(),
        mean: rows.iter().map(|&i| pm.mean_predictions()[i]).collect(),
        rows,
        targets,
        predictions,
        regressor,
    })
}

/// Claims flagged for index compensation at threshold `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub e: f64,
    pub flagged: Vec<bool>,
    pub p_e: f64,
}

impl Partition {
    pub fn count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }
}

/// Slack and maximal index loading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaE {
    pub eta: f64,
    pub theta_max: f64,
}

/// Hybrid premium next to the pure indemnity premium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridPremium {
    pub pi_h: f64,
    pub pi_y: f64,
    /// `Some(theta_max)` when the loading exceeds it.
    pub exceeds_theta_max: Option<f64>,
}

impl DeltaModel {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn partition(&self, e: f64) -> Result<Partition> {
        check_e(e)?;
        let flagged: Vec<bool> = self.predictions.iter().map(|&d| d <= e).collect();
        let p_e = flagged.iter().filter(|&&f| f).count() as f64 / self.len() as f64;
        Ok(Partition { e, flagged, p_e })
    }

    /// `eta_e = 1 - beta + theta_Y - e / (E[Y | W_e] p_e)`, per claim.
    pub fn eta_e(&self, part: &Partition, theta_y: f64) -> Result<EtaE> {
        let flagged_sum: f64 = self.losses.iter().zip(&part.flagged).filter(|(_, &f)| f).map(|(y, _)| y).sum();
        if part.count() == 0 {
            return Err(Error::EmptyIndexSet { e: part.e });
        }
        let share_mass = flagged_sum / self.len() as f64;
        let eta = if part.e == 0.0 { 1.0 - self.beta + theta_y } else { 1.0 - self.beta + theta_y - part.e / share_mass };
        Ok(EtaE { eta, theta_max: eta / self.beta })
    }

    /// `p [(1+theta_Y) E[Y; not W_e] + (1+theta) E[phi_beta; W_e]]` on the annual mixture.
    pub fn hybrid_premium(&self, part: &Partition, theta: f64, theta_y: f64) -> Result<HybridPremium> {
        if !(theta >= -1.0 && theta_y >= -1.0) {
            return Err(Error::domain("loadings must be >= -1"));
        }
        let n = self.len() as f64;
        let q = self.claim_frequency;
        let (mut indemnity, mut index) = (0.0, 0.0);
        for ((y, m), &f) in self.losses.iter().zip(&self.mean).zip(&part.flagged) {
            if f {
                index += self.beta * m;
            } else {
                indemnity += y;
            }
        }
        let pi_h = q * ((1.0 + theta_y) * indemnity + (1.0 + theta) * index) / n;
        let pi_y = q * (1.0 + theta_y) * self.losses.iter().sum::<f64>() / n;
        let exceeds_theta_max = match self.eta_e(part, theta_y) {
            Ok(t) if theta > t.theta_max => Some(t.theta_max),
            _ => None,
        };
        Ok(HybridPremium { pi_h, pi_y, exceeds_theta_max })
    }

    /// Thresholds at which the flagged set changes, ascending.
    pub fn candidate_thresholds(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.predictions.iter().map(|d| d.max(0.0)).collect();
        c.sort_by(f64::total_cmp);
        c.dedup();
        c
    }

    /// Smallest `e` whose share `p_e` is closest to `target`.
    pub fn e_for_share(&self, target: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::domain(format!("target share must lie in [0, 1], got {target}")));
        }
        let mut best = (0.0, f64::INFINITY);
        for e in std::iter::once(0.0).chain(self.candidate_thresholds()) {
            let gap = (self.partition(e)?.p_e - target).abs();
            if gap < best.1 {
                best = (e, gap);
            }
        }
        Ok(best.0)
    }

    /// The `e` maximizing `p_e` subject to `theta_max >= floor`; `None` if no
    /// threshold qualifies.
    pub fn e_max_share(&self, theta_y: f64, floor: f64) -> Result<Option<f64>> {
        let mut best: Option<(f64, f64)> = None;
        for e in std::iter::once(0.0).chain(self.candidate_thresholds()) {
            let part = self.partition(e)?;
            let Ok(t) = self.eta_e(&part, theta_y) else { continue };
            if t.theta_max >= floor && best.is_none_or(|(_, p)| part.p_e > p) {
                best = Some((e, part.p_e));
            }
        }
        Ok(best.map(|(e, _)| e))
    }

    /// Indented rendering of the tree with per-leaf size share, Delta and decision.
    pub fn render_tree(&self, e: f64) -> Result<String> {
        let Regressor::Tree(tree) = &self.regressor else {
            return Err(Error::config("tree rendering needs a tree Delta-model"));
        };
        let nodes = tree.nodes();
        let total = f64::from(nodes[0].samples.max(1));
        let mut out = String::new();
        let mut stack = vec![(0usize, 0usize, String::from("root"))];
        while let Some((k, depth, label)) = stack.pop() {
            let node = &nodes[k];
            let pad = "  ".repeat(depth);
            let size = 100.0 * f64::from(node.samples) / total;
            if node.is_leaf() {
                let decision = if node.value <= e { "index" } else { "indemnity" };
                let _ = writeln!(out, "{pad}{label}: size={size:.2}% delta={:.4} -> {decision}", node.value);
            } else {
                let _ = writeln!(out, "{pad}{label}: size={size:.2}% delta={:.4}", node.value);
                let name = TREE_FEATURE_NAMES[node.feature as usize];
                let t = node.threshold;
                stack.push((node.right as usize, depth + 1, format!("{name} > {t:.4}")));
                stack.push((node.left as usize, depth + 1, format!("{name} <= {t:.4}")));
            }
        }
        Ok(out)
    }
}

/// One row of the `e` sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub e: f64,
    pub p_e: f64,
    /// `None` when the index set is empty.
    pub theta_max: Option<f64>,
}

/// `(p_e, theta_max)` along `e_grid` for each `beta`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_e(
    pm: &PreferenceModel<'_>,
    alpha: f64,
    betas: &[f64],
    e_grid: &[f64],
    mode: DeltaMode,
    stratum: StratumFilter,
    theta_y: f64,
    hyper: &Hyper,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if e_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("e grid must be strictly increasing"));
    }
    let per_beta = betas
        .par_iter()
        .map(|&beta| {
            let dm = fit_delta_model(pm, alpha, beta, mode, stratum, hyper, seed)?;
            e_grid
                .iter()
                .map(|&e| {
                    let part = dm.partition(e)?;
                    let theta_max = dm.eta_e(&part, theta_y).ok().map(|t| t.theta_max);
                    Ok(SweepRow { beta, e, p_e: part.p_e, theta_max })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_beta.into_iter().flatten().collect())
}

/// Per-claim outcome of the identification algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Zero-based dataset row.
    pub claim: usize,
    pub delta: f64,
    pub index: bool,
    pub stratum: StratumFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridSummary {
    pub stratum: StratumFilter,
    pub mode: DeltaMode,
    pub alpha: f64,
    pub beta: f64,
    pub e: f64,
    pub claims: usize,
    pub p_e: f64,
    pub eta_e: Option<f64>,
    pub theta_max: Option<f64>,
    /// Loading used for the premium: `theta_max` clamped at 0, or 0 when the index set is empty.
    pub theta: f64,
    pub pi_h: f64,
    pub pi_y: f64,
}

/// Result of the identification algorithm on one stratum.
#[derive(Debug, Clone)]
pub struct Algorithm1 {
    pub summary: HybridSummary,
    pub model: DeltaModel,
    pub partition: Partition,
    pub decisions: Vec<Decision>,
}

/// How the threshold `e*` is chosen for one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EStar {
    Fixed { e: f64 },
    /// Threshold whose share is closest to `p_e`.
    MatchShare { p_e: f64 },
    /// Largest share with `theta_max >= theta_floor`; `e = 0` if none qualifies.
    MaxShare { theta_floor: f64 },
}

/// Fits the Delta-model at `(alpha, beta)` on `stratum`, flags claims at the
/// chosen `e*`, and reports `p_e`, `theta_max` and the hybrid premium.
#[allow(clippy::too_many_arguments)]
pub fn run_stratum(
    pm: &PreferenceModel<'_>,
    cfg: &HybridConfig,
    stratum: StratumFilter,
    rule: EStar,
    theta_y: f64,
    hyper: &Hyper,
    seed: u64,
) -> Result<Algorithm1> {
    cfg.validate()?;
    let model = fit_delta_model(pm, cfg.alpha, cfg.beta, cfg.mode, stratum, hyper, seed)?;
    let e = match rule {
        EStar::Fixed { e } => e,
        EStar::MatchShare { p_e } => model.e_for_share(p_e)?,
        EStar::MaxShare { theta_floor } => model.e_max_share(theta_y, theta_floor)?.unwrap_or(0.0),
    };
    let partition = model.partition(e)?;
    let eta = model.eta_e(&partition, theta_y).ok();
    let theta = eta.map_or(0.0, |t| t.theta_max.max(0.0));
    let premium = model.hybrid_premium(&partition, theta, theta_y)?;
    let decisions = model
        .rows
        .iter()
        .zip(&model.predictions)
        .zip(&partition.flagged)
        .map(|((&claim, &delta), &index)| Decision { claim, delta, index, stratum })
        .collect();
    let summary = HybridSummary {
        stratum,
        mode: cfg.mode,
        alpha: cfg.alpha,
        beta: cfg.beta,
        e,
        claims: model.len(),
        p_e: partition.p_e,
        eta_e: eta.map(|t| t.eta),
        theta_max: eta.map(|t| t.theta_max),
        theta,
        pi_h: premium.pi_h,
        pi_y: premium.pi_y,
    };
    Ok(Algorithm1 { summary, model, partition, decisions })
}

/// Runs every stratum of the configuration at the fixed threshold `cfg.e`.
pub fn run_algorithm1(pm: &PreferenceModel<'_>, cfg: &HybridConfig, theta_y: f64, hyper: &Hyper, seed: u64) -> Result<Vec<Algorithm1>> {
    cfg.stratification
        .strata()
        .iter()
        .map(|&stratum| run_stratum(pm, cfg, stratum, EStar::Fixed { e: cfg.e }, theta_y, hyper, seed))
        .collect()
}

/// Dataset-wide index flags from per-stratum runs.
pub fn merge_flags(n: usize, runs: &[Algorithm1]) -> Vec<bool> {
    let mut flags = vec![false; n];
    for run in runs {
        for d in &run.decisions {
            flags[d.claim] = d.index;
        }
    }
    flags
}

/// Whether an agent with aversion `alpha` prefers the hybrid payoff (index
/// on `flagged` claims, delayed loss elsewhere) to delayed indemnity.
/// Premiums are taken on the preference model's basis.
pub fn hybrid_prefers(pm: &PreferenceModel<'_>, flagged: &[bool], alpha: f64, params: &PricingParams) -> Result<bool> {
    params.validate()?;
    let ds: &ClaimDataset = pm.dataset();
    if flagged.len() != ds.len() {
        return Err(Error::config("flag vector does not match the dataset"));
    }
    let q = pm.basis().frequency(ds);
    let log_psi = pm.claim_log_psi(alpha)?;
    let mean = pm.mean_predictions();
    let alpha_prime = -(-params.tau).exp_m1() * alpha;
    let terms = (0..ds.len()).map(|i| {
        if flagged[i] {
            log_psi[i] - alpha * params.beta * mean[i]
        } else {
            alpha_prime * ds.records()[i].loss
        }
    });
    let lhs = log_mix(q, log_mean_exp(terms));
    let n = ds.len() as f64;
    let (mut indemnity, mut index, mut total) = (0.0, 0.0, 0.0);
    for (i, r) in ds.records().iter().enumerate() {
        total += r.loss;
        if flagged[i] {
            index += params.beta * mean[i];
        } else {
            indemnity += r.loss;
        }
    }
    let pi_y = q * (1.0 + params.theta_y) * total / n;
    let pi_h = q * ((1.0 + params.theta_y) * indemnity + (1.0 + params.theta) * index) / n;
    let rhs = log_laplace_psi(ds, alpha_prime, pm.basis())? + alpha * (pi_y - pi_h);
    Ok(lhs < rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{read_claims, ColumnMap};
    use crate::models::{fit_conditional_mean, LeafPartition, PayoutModel, TreeParams};
    use crate::utility::Basis;
    use approx::assert_abs_diff_eq;
    use idxcover_testkit as kit;
    use proptest::prelude::*;

    fn fixture(n: usize, seed: u64) -> ClaimDataset {
        read_claims(kit::to_csv(&kit::claims(n, seed)).as_bytes(), b',', &ColumnMap::default(), 0.06).unwrap()
    }

    fn fine_tree() -> Hyper {
        Hyper { tree: TreeParams { complexity: 0.0, ..TreeParams::default() }, ..Hyper::default() }
    }

    fn tree_setup(ds: &ClaimDataset, hyper: &Hyper) -> PayoutModel {
        fit_conditional_mean(ds, Method::Tree, hyper, 0).unwrap()
    }

    fn pm<'a>(ds: &'a ClaimDataset, model: &PayoutModel, basis: Basis) -> PreferenceModel<'a> {
        PreferenceModel::new(ds, model, LeafPartition::of_model(model, ds).unwrap(), basis)
    }

    #[test]
    fn perfect_index_has_zero_gap() {
        let ds = read_claims(kit::to_csv(&kit::deterministic_claims(400, 1)).as_bytes(), b',', &ColumnMap::default(), 0.06).unwrap();
        let model = tree_setup(&ds, &fine_tree());
        let pm = pm(&ds, &model, Basis::Claims);
        let dm = fit_delta_model(&pm, 0.01, 1.0, DeltaMode::Tree, StratumFilter::All, &fine_tree(), 0).unwrap();
        for (t, p) in dm.targets.iter().zip(&dm.predictions) {
            assert_abs_diff_eq!(*t, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(*p, 0.0, epsilon = 1e-9);
        }
        let part = dm.partition(0.0).unwrap();
        assert_eq!(part.p_e, 1.0);
        let t = dm.eta_e(&part, 0.4).unwrap();
        assert_abs_diff_eq!(t.eta, 0.4);
        assert_abs_diff_eq!(t.theta_max, 0.4);
    }

    #[test]
    fn targets_dominate_unpaid_share() {
        let ds = fixture(1500, 2);
        let model = tree_setup(&ds, &Hyper::default());
        let pm = pm(&ds, &model, Basis::Claims);
        let dm = fit_delta_model(&pm, 0.01, 0.9, DeltaMode::Tree, StratumFilter::All, &Hyper::default(), 0).unwrap();
        for (t, m) in dm.targets.iter().zip(&dm.mean) {
            assert!(*t >= 0.1 * m - 1e-9);
        }
    }

    #[test]
    fn partition_extremes() {
        let ds = fixture(1200, 3);
        let model = tree_setup(&ds, &Hyper::default());
        let pm = pm(&ds, &model, Basis::Claims);
        let dm = fit_delta_model(&pm, 0.01, 0.9, DeltaMode::Boosted, StratumFilter::BackupActivated, &Hyper::default(), 0).unwrap();
        assert!(dm.predictions.iter().all(|&d| d > 0.0));
        let empty = dm.partition(0.0).unwrap();
        assert_eq!(empty.p_e, 0.0);
        assert!(matches!(dm.eta_e(&empty, 0.4), Err(Error::EmptyIndexSet { .. })));
        let prem = dm.hybrid_premium(&empty, 0.1, 0.4).unwrap();
        assert_abs_diff_eq!(prem.pi_h, prem.pi_y, epsilon = 1e-12);
        let max = dm.predictions.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(dm.partition(max).unwrap().p_e, 1.0);
        assert!(dm.partition(-1.0).is_err());
        assert!(dm.rows.iter().all(|&i| ds.records()[i].backup_activated));
    }

    #[test]
    fn premium_cases() {
        let ds = fixture(1500, 4);
        let model = tree_setup(&ds, &Hyper::default());
        let pm = pm(&ds, &model, Basis::Claims);
        let full = fit_delta_model(&pm, 0.01, 1.0, DeltaMode::Tree, StratumFilter::All, &Hyper::default(), 0).unwrap();
        let all = full.partition(f64::MAX / 2.0).unwrap();
        let prem = full.hybrid_premium(&all, 0.4, 0.4).unwrap();
        assert_abs_diff_eq!(prem.pi_h, prem.pi_y, epsilon = 1e-9 * prem.pi_y);

        let dm = fit_delta_model(&pm, 0.01, 0.9, DeltaMode::Tree, StratumFilter::All, &Hyper::default(), 0).unwrap();
        let e = dm.e_for_share(0.5).unwrap();
        let part = dm.partition(e).unwrap();
        assert!(part.p_e > 0.0 && part.p_e < 1.0);
        let prem = dm.hybrid_premium(&part, 0.2, 0.4).unwrap();
        assert!(prem.pi_h < prem.pi_y);
        let t = dm.eta_e(&part, 0.4).unwrap();
        assert!(t.theta_max <= (1.0 - 0.9 + 0.4) / 0.9 + 1e-12);
        let over = dm.hybrid_premium(&part, t.theta_max + 0.1, 0.4).unwrap();
        assert_eq!(over.exceeds_theta_max, Some(t.theta_max));
    }

    #[test]
    fn e_helpers() {
        let ds = fixture(1500, 5);
        let model = fit_conditional_mean(&ds, Method::Boosted, &Hyper::default(), 0).unwrap();
        let tree = tree_setup(&ds, &Hyper::default());
        let pm = PreferenceModel::new(&ds, &model, LeafPartition::of_model(&tree, &ds).unwrap(), Basis::Claims);
        let dm = fit_delta_model(&pm, 0.01, 0.9, DeltaMode::Boosted, StratumFilter::All, &Hyper::default(), 0).unwrap();
        let e = dm.e_for_share(0.7).unwrap();
        assert!((dm.partition(e).unwrap().p_e - 0.7).abs() < 0.01);
        if let Some(e) = dm.e_max_share(0.4, 0.2).unwrap() {
            let part = dm.partition(e).unwrap();
            assert!(dm.eta_e(&part, 0.4).unwrap().theta_max >= 0.2);
            for c in dm.candidate_thresholds() {
                let p = dm.partition(c).unwrap();
                if p.p_e > part.p_e {
                    assert!(dm.eta_e(&p, 0.4).unwrap().theta_max < 0.2);
                }
            }
        }
        assert_eq!(dm.e_max_share(0.4, 10.0).unwrap(), None);
    }

    #[test]
    fn algorithm_and_rendering() {
        let ds = fixture(1500, 6);
        let model = tree_setup(&ds, &Hyper::default());
        let pm = pm(&ds, &model, Basis::Claims);
        let cfg = HybridConfig { alpha: 0.01, beta: 0.9, e: 3.0, mode: DeltaMode::Tree, stratification: Stratification::ByBackup };
        let runs = run_algorithm1(&pm, &cfg, 0.4, &Hyper::default(), 0).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs.iter().map(|r| r.summary.claims).sum::<usize>(), ds.len());
        let text = runs[0].model.render_tree(cfg.e).unwrap();
        assert!(text.starts_with("root: size=100.00%"));
        let leaves = text.lines().filter(|l| l.contains("->")).count();
        let Regressor::Tree(tree) = &runs[0].model.regressor else { panic!() };
        assert_eq!(leaves, tree.leaves().len());
        let flags = merge_flags(ds.len(), &runs);
        assert_eq!(flags.iter().filter(|&&f| f).count(), runs.iter().map(|r| r.partition.count()).sum::<usize>());

        let zero = HybridConfig { e: 0.0, ..cfg };
        for run in run_algorithm1(&pm, &zero, 0.4, &Hyper::default(), 0).unwrap() {
            assert_eq!(run.summary.p_e, 0.0);
            assert_eq!(run.summary.theta_max, None);
            assert_abs_diff_eq!(run.summary.pi_h, run.summary.pi_y, epsilon = 1e-12);
        }
        let matched = run_stratum(&pm, &cfg, StratumFilter::All, EStar::MatchShare { p_e: 0.6 }, 0.4, &Hyper::default(), 0).unwrap();
        assert!((matched.summary.p_e - 0.6).abs() < 0.2);
        let boosted = HybridConfig { mode: DeltaMode::Boosted, ..cfg };
        let runs = run_algorithm1(&pm, &boosted, 0.4, &Hyper::default(), 0).unwrap();
        assert!(runs[0].model.render_tree(3.0).is_err());
    }

    #[test]
    fn sweep_shape() {
        let ds = fixture(1200, 7);
        let model = tree_setup(&ds, &Hyper::default());
        let pm = pm(&ds, &model, Basis::Claims);
        let grid: Vec<f64> = (0..30).map(|k| k as f64 * 0.5).collect();
        let rows = sweep_e(&pm, 0.01, &[0.8, 0.9, 1.0], &grid, DeltaMode::Tree, StratumFilter::All, 0.4, &Hyper::default(), 0).unwrap();
        assert_eq!(rows.len(), 90);
        for chunk in rows.chunks(30) {
            assert!(chunk.windows(2).all(|w| w[1].p_e >= w[0].p_e));
            let beta = chunk[0].beta;
            assert!(chunk.iter().flat_map(|r| r.theta_max).all(|t| t <= (1.4 - beta) / beta + 1e-12));
        }
        assert!(sweep_e(&pm, 0.01, &[0.9], &[1.0, 0.5], DeltaMode::Tree, StratumFilter::All, 0.4, &Hyper::default(), 0).is_err());
    }

    #[test]
    fn conditional_preference_implication() {
        // Flagging on exact leaf-constant gaps keeps whole leaves, so the
        // sufficient condition applies verbatim.
        let ds = fixture(1500, 8);
        let model = tree_setup(&ds, &Hyper::default());
        let pm = pm(&ds, &model, Basis::Claims);
        let theta_y = 0.4;
        let mut checked = 0;
        for (alpha, beta) in [(0.005, 1.0), (0.003, 0.9), (0.02, 0.9)] {
            let gaps = pm.claim_gaps(alpha, beta).unwrap();
            let mut sorted = gaps.clone();
            sorted.sort_by(f64::total_cmp);
            for q in [0.1, 0.5, 0.7, 0.9] {
                let e = sorted[(q * (sorted.len() - 1) as f64) as usize];
                let flags: Vec<bool> = gaps.iter().map(|&g| g <= e).collect();
                let flagged_loss: f64 = ds.records().iter().zip(&flags).filter(|(_, &f)| f).map(|(r, _)| r.loss).sum();
                let eta = 1.0 - beta + theta_y - e / (flagged_loss / ds.len() as f64);
                if eta < 0.0 {
                    continue;
                }
                for theta in [0.0, 0.5 * eta / beta, eta / beta] {
                    for k in 1..=20 {
                        let a = alpha * k as f64 / 20.0;
                        for tau in [0.0, 0.5, 3.0] {
                            let params = PricingParams { theta_y, theta, beta, tau };
                            assert!(hybrid_prefers(&pm, &flags, a, &params).unwrap(), "e={e} theta={theta} a={a} tau={tau}");
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn nesting_and_affine_premium(e1 in 0.0_f64..40.0, de in 0.0_f64..40.0, t1 in 0.0_f64..0.4, t2 in 0.0_f64..0.4) {
            let ds = fixture(600, 9);
            let model = tree_setup(&ds, &Hyper::default());
            let pm = pm(&ds, &model, Basis::Claims);
            let dm = fit_delta_model(&pm, 0.01, 0.9, DeltaMode::Boosted, StratumFilter::All, &Hyper::default(), 0).unwrap();
            let a = dm.partition(e1).unwrap();
            let b = dm.partition(e1 + de).unwrap();
            prop_assert!(a.flagged.iter().zip(&b.flagged).all(|(x, y)| !x || *y));
            let p1 = dm.hybrid_premium(&b, t1, 0.4).unwrap().pi_h;
            let p2 = dm.hybrid_premium(&b, t2, 0.4).unwrap().pi_h;
            let index: f64 = dm.mean.iter().zip(&b.flagged).filter(|(_, &f)| f).map(|(m, _)| 0.9 * m).sum();
            let slope = dm.claim_frequency * index / dm.len() as f64;
            prop_assert!((p2 - p1 - slope * (t2 - t1)).abs() <= 1e-9 * p1.abs().max(1.0));
        }
    }
}
