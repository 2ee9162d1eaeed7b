//! Exponential-utility demand for index insurance.
//!
//! Unconditional expectations are taken on a [`Basis`]: either the annual
//! mixture (no claim with probability `1 - p`) or the claim distribution
//! itself. Everything that compares two quantities uses one basis throughout.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::ClaimDataset;
use crate::error::{Error, Result};
use crate::models::laplace::check_alpha;
use crate::models::{CondLaplaceModel, IndexFeatures, LeafPartition, PayoutModel, OVERFLOW_GUARD};
use crate::scalar::Scalar;
use crate::stats::{self, log_mean_exp, ROOT_TOL};

/// Law under which unconditional expectations are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// `(1 - p) g(0) + p E[g(Y) | claim]`.
    #[default]
    Annual,
    /// `E[g(Y) | claim]`.
    Claims,
}

impl Basis {
    pub fn frequency(self, ds: &ClaimDataset) -> f64 {
        match self {
            Basis::Annual => ds.claim_frequency(),
            Basis::Claims => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Basis::Annual => "annual",
            Basis::Claims => "claims",
        }
    }
}

impl std::str::FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "annual" | "mixture" => Ok(Basis::Annual),
            "claims" | "claims-only" | "claims_only" => Ok(Basis::Claims),
            other => Err(Error::config(format!("unknown basis `{other}`"))),
        }
    }
}

/// `log((1 - q) + q exp(log_mean))`.
pub(crate) fn log_mix(q: f64, log_mean: f64) -> f64 {
    if q >= 1.0 {
        return log_mean;
    }
    let a = (1.0 - q).ln();
    let b = q.ln() + log_mean;
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `E[Y]` on the basis.
pub fn expected_loss(ds: &ClaimDataset, basis: Basis) -> f64 {
    basis.frequency(ds) * ds.mean_loss()
}

/// `log Psi_Y(alpha)`.
pub fn log_laplace_psi(ds: &ClaimDataset, alpha: f64, basis: Basis) -> Result<f64> {
    check_alpha(alpha, ds.max_loss())?;
    let q = basis.frequency(ds);
    if alpha * ds.max_loss() < 1.0 {
        let excess: f64 = ds.records().iter().map(|r| (alpha * r.loss).exp_m1()).sum::<f64>() / ds.len() as f64;
        return Ok((q * excess).ln_1p());
    }
    Ok(log_mix(q, log_mean_exp(ds.records().iter().map(|r| alpha * r.loss))))
}

/// `Psi_Y(alpha) = E[exp(alpha Y)]`.
pub fn laplace_psi(ds: &ClaimDataset, alpha: f64, basis: Basis) -> Result<f64> {
    Ok(log_laplace_psi(ds, alpha, basis)?.exp())
}

/// `log F(alpha)` with `F = Psi' = E[Y exp(alpha Y)]`.
pub fn log_laplace_f(ds: &ClaimDataset, alpha: f64, basis: Basis) -> Result<f64> {
    check_alpha(alpha, ds.max_loss())?;
    let q = basis.frequency(ds);
    Ok(q.ln() + log_mean_exp(ds.records().iter().map(|r| alpha * r.loss + r.loss.ln())))
}

pub fn laplace_f(ds: &ClaimDataset, alpha: f64, basis: Basis) -> Result<f64> {
    Ok(log_laplace_f(ds, alpha, basis)?.exp())
}

/// Largest admissible risk aversion under the overflow guard.
pub fn max_alpha(ds: &ClaimDataset) -> f64 {
    OVERFLOW_GUARD / ds.max_loss()
}

/// Solves `F(alpha) = exp(log_target)` by bisection on `[0, max_alpha]`.
pub fn f_inverse_log(ds: &ClaimDataset, log_target: f64, basis: Basis) -> Result<f64> {
    let lo = log_laplace_f(ds, 0.0, basis)?;
    let hi_alpha = max_alpha(ds);
    let hi = log_laplace_f(ds, hi_alpha, basis)?;
    if log_target < lo {
        return Err(Error::domain(format!("F^-1 target {} is below F(0) = {}", log_target.exp(), lo.exp())));
    }
    if log_target > hi {
        return Err(Error::AlphaTooLarge { alpha: f64::INFINITY, max_alpha: hi_alpha });
    }
    if log_target == lo {
        return Ok(0.0);
    }
    stats::find_root_bracketed(
        |a| log_laplace_f(ds, a, basis).unwrap_or(f64::NAN) - log_target,
        0.0,
        hi_alpha,
        ROOT_TOL * 1e-2,
    )
}

pub fn f_inverse(ds: &ClaimDataset, target: f64, basis: Basis) -> Result<f64> {
    if !(target > 0.0) {
        return Err(Error::domain(format!("F^-1 target must be > 0, got {target}")));
    }
    f_inverse_log(ds, target.ln(), basis)
}

/// `log Psi_Y(alpha) / alpha`.
pub fn exponential_premium(ds: &ClaimDataset, alpha: f64, basis: Basis) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("exponential premium needs alpha > 0, got {alpha}")));
    }
    Ok(log_laplace_psi(ds, alpha, basis)? / alpha)
}

/// Smallest aversion willing to pay `pi_y`: root of `premium(alpha) = pi_y`.
pub fn calibrate_alpha_minus(ds: &ClaimDataset, pi_y: f64, basis: Basis) -> Result<f64> {
    let pure = expected_loss(ds, basis);
    if !(pi_y > pure) {
        return Err(Error::NoRoot(format!("premium {pi_y} does not exceed the pure premium {pure}")));
    }
    solve_premium(ds, pi_y, basis)
}

fn solve_premium(ds: &ClaimDataset, target: f64, basis: Basis) -> Result<f64> {
    let hi = max_alpha(ds);
    let lo = 1e-12 * hi;
    let f = |a: f64| exponential_premium(ds, a, basis).map_or(f64::NAN, |v| v - target);
    if f(hi) < 0.0 {
        return Err(Error::NoRoot(format!(
            "premium {target} is above the exponential premium at the largest admissible alpha {hi}"
        )));
    }
    if f(lo) >= 0.0 {
        return Ok(lo);
    }
    stats::find_root_bracketed(f, lo, hi, ROOT_TOL * 1e-2)
}

/// Rate `lambda` such that a share `acceptance_share` of the population
/// accepts `premium_multiplier` times the premium paid at `alpha_minus`.
pub fn calibrate_lambda(
    ds: &ClaimDataset,
    alpha_minus: f64,
    premium_multiplier: f64,
    acceptance_share: f64,
    basis: Basis,
) -> Result<f64> {
    if !(premium_multiplier > 1.0) {
        return Err(Error::domain(format!("premium multiplier must exceed 1, got {premium_multiplier}")));
    }
    if !(acceptance_share > 0.0 && acceptance_share < 1.0) {
        return Err(Error::domain(format!("acceptance share must lie in (0, 1), got {acceptance_share}")));
    }
    let alpha_star = solve_premium(ds, premium_multiplier * exponential_premium(ds, alpha_minus, basis)?, basis)?;
    if alpha_star <= alpha_minus {
        return Err(Error::Infeasible(format!(
            "alpha* = {alpha_star} does not exceed alpha_- = {alpha_minus}"
        )));
    }
    Ok(-acceptance_share.ln() / (alpha_star - alpha_minus))
}

/// Result of the premium/aversion calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub basis: Basis,
    pub claim_frequency: f64,
    pub theta_y: f64,
    pub expected_loss: f64,
    pub pi_y: f64,
    pub alpha_minus: f64,
    pub alpha_star: f64,
    pub lambda: f64,
}

impl Calibration {
    pub fn run(ds: &ClaimDataset, theta_y: f64, premium_multiplier: f64, acceptance_share: f64, basis: Basis) -> Result<Self> {
        if !(theta_y > 0.0) {
            return Err(Error::domain(format!("theta_Y must be > 0, got {theta_y}")));
        }
        let expected_loss = expected_loss(ds, basis);
        let pi_y = (1.0 + theta_y) * expected_loss;
        let alpha_minus = calibrate_alpha_minus(ds, pi_y, basis)?;
        let lambda = calibrate_lambda(ds, alpha_minus, premium_multiplier, acceptance_share, basis)?;
        Ok(Self {
            basis,
            claim_frequency: ds.claim_frequency(),
            theta_y,
            expected_loss,
            pi_y,
            alpha_minus,
            alpha_star: alpha_minus - acceptance_share.ln() / lambda,
            lambda,
        })
    }

    pub fn aversion(&self) -> Result<AversionDistribution<f64>> {
        AversionDistribution::new(self.alpha_minus, self.lambda)
    }
}

/// How a mean-aversion sweep moves the law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanShift {
    /// Move `alpha_-`, keep `lambda`.
    #[default]
    Shift,
    /// Keep `alpha_-`, rescale `lambda`.
    Rescale,
}

/// Shifted exponential law of risk aversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AversionDistribution<T> {
    alpha_minus: T,
    lambda: T,
}

impl<T: Scalar> AversionDistribution<T> {
    pub fn new(alpha_minus: T, lambda: T) -> Result<Self> {
        if !(alpha_minus > T::zero() && alpha_minus.is_finite()) || !(lambda > T::zero() && lambda.is_finite()) {
            return Err(Error::domain(format!("aversion law needs alpha_- > 0 and lambda > 0, got ({alpha_minus}, {lambda})")));
        }
        Ok(Self { alpha_minus, lambda })
    }

    pub fn alpha_minus(&self) -> T {
        self.alpha_minus
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn mean(&self) -> T {
        self.alpha_minus + self.lambda.recip()
    }

    /// `mu((0, x])`.
    pub fn cdf(&self, x: T) -> T {
        if x <= self.alpha_minus {
            T::zero()
        } else {
            -(-self.lambda * (x - self.alpha_minus)).exp_m1()
        }
    }

    pub fn density(&self, x: T) -> T {
        if x < self.alpha_minus {
            T::zero()
        } else {
            self.lambda * (-self.lambda * (x - self.alpha_minus)).exp()
        }
    }

    pub fn quantile(&self, u: T) -> Result<T> {
        if !(u >= T::zero() && u < T::one()) {
            return Err(Error::domain(format!("quantile level must lie in [0, 1), got {u}")));
        }
        Ok(self.alpha_minus - (-u).ln_1p() / self.lambda)
    }

    /// Law with the requested mean.
    pub fn with_mean(&self, mean: T, mode: MeanShift) -> Result<Self> {
        match mode {
            MeanShift::Shift => Self::new(mean - self.lambda.recip(), self.lambda),
            MeanShift::Rescale => {
                if !(mean > self.alpha_minus) {
                    return Err(Error::domain(format!("mean {mean} must exceed alpha_- = {}", self.alpha_minus)));
                }
                Self::new(self.alpha_minus, (mean - self.alpha_minus).recip())
            }
        }
    }

    /// Evenly spaced grid on `[alpha_-, alpha_- + 8 / lambda]`.
    pub fn support_grid(&self, points: usize) -> Vec<T> {
        let points = points.max(2);
        let width = T::lit(8.0) / self.lambda;
        let step = width / T::from_usize(points - 1).unwrap_or_else(T::one);
        (0..points)
            .map(|k| self.alpha_minus + step * T::from_usize(k).unwrap_or_else(T::zero))
            .collect()
    }
}

/// `N mu((0, alpha_bound])`.
pub fn demand_count<T: Scalar>(population: u64, mu: &AversionDistribution<T>, alpha_bound: T) -> T {
    T::from_u64(population).unwrap_or_else(T::max_value) * mu.cdf(alpha_bound)
}

/// `N int 1{prefers(alpha)} dmu(alpha)` from indicator values on a grid.
/// Each cell carries its exact `mu` mass weighted by the average of its end
/// indicators; mass below the grid and the tail above it take the end values.
pub fn integrate_indicator<T: Scalar>(population: u64, mu: &AversionDistribution<T>, grid: &[T], indicator: &[bool]) -> Result<T> {
    if grid.is_empty() || grid.len() != indicator.len() {
        return Err(Error::config("aversion grid is empty or does not match the indicator values"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("aversion grid must be strictly increasing"));
    }
    let tol = T::lit(1e-9) * mu.mean();
    let needed = mu.alpha_minus() + T::lit(8.0) / mu.lambda();
    if grid[0] > mu.alpha_minus() + tol || grid[grid.len() - 1] < needed - tol {
        return Err(Error::config(format!(
            "aversion grid [{}, {}] does not cover [{}, {}]",
            grid[0],
            grid[grid.len() - 1],
            mu.alpha_minus(),
            needed
        )));
    }
    let one = |b: bool| if b { T::one() } else { T::zero() };
    let half = T::lit(0.5);
    let mut mass = mu.cdf(grid[0]) * one(indicator[0]);
    for k in 1..grid.len() {
        let cell = mu.cdf(grid[k]) - mu.cdf(grid[k - 1]);
        mass = mass + cell * half * (one(indicator[k - 1]) + one(indicator[k]));
    }
    mass = mass + (T::one() - mu.cdf(grid[grid.len() - 1])) * one(indicator[grid.len() - 1]);
    Ok(T::from_u64(population).unwrap_or_else(T::max_value) * mass)
}

/// Pricing knobs of the index/indemnity comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricingParams {
    pub theta_y: f64,
    pub theta: f64,
    pub beta: f64,
    pub tau: f64,
}

impl PricingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_y > 0.0) {
            return Err(Error::domain(format!("theta_Y must be > 0, got {}", self.theta_y)));
        }
        if !(self.theta >= 0.0) {
            return Err(Error::domain(format!("theta must be >= 0, got {}", self.theta)));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::domain(format!("tau must be >= 0, got {}", self.tau)));
        }
        crate::models::check_beta(self.beta)
    }

    pub fn with_theta(self, theta: f64) -> Self {
        Self { theta, ..self }
    }

    pub fn with_tau(self, tau: f64) -> Self {
        Self { tau, ..self }
    }
}

/// `pi_Y = (1 + theta_Y) E[Y]` and `pi_phi = (1 + theta) beta E[Y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    pub expected_loss: f64,
    pub pi_y: f64,
    pub pi_phi: f64,
}

impl Prices {
    pub fn new(ds: &ClaimDataset, params: &PricingParams, basis: Basis) -> Result<Self> {
        params.validate()?;
        let expected_loss = expected_loss(ds, basis);
        Ok(Self {
            expected_loss,
            pi_y: (1.0 + params.theta_y) * expected_loss,
            pi_phi: (1.0 + params.theta) * params.beta * expected_loss,
        })
    }
}

/// `log E[psi(alpha|W) exp(-alpha phi_beta(W))]` from per-claim values.
fn log_lhs(q: f64, alpha: f64, beta: f64, log_psi: impl Iterator<Item = f64>, mean: &[f64]) -> f64 {
    log_mix(q, log_mean_exp(log_psi.zip(mean).map(|(lp, m)| lp - alpha * beta * m)))
}

/// `log(Psi(alpha') exp(alpha (pi_Y - pi_phi)))` with `alpha' = (1 - e^-tau) alpha`.
fn log_rhs(ds: &ClaimDataset, alpha: f64, tau: f64, prices: &Prices, basis: Basis) -> Result<f64> {
    let alpha_prime = -(-tau).exp_m1() * alpha;
    Ok(log_laplace_psi(ds, alpha_prime, basis)? + alpha * (prices.pi_y - prices.pi_phi))
}

fn check_same_alpha(lap: &CondLaplaceModel, alpha: f64) -> Result<()> {
    if (lap.alpha - alpha).abs() > 1e-12 * alpha.abs().max(1.0) {
        return Err(Error::config(format!("Laplace model fitted at alpha = {}, evaluated at {alpha}", lap.alpha)));
    }
    Ok(())
}

/// Whether an agent with aversion `alpha` strictly prefers the index product.
pub fn prefers_index(
    ds: &ClaimDataset,
    mean: &PayoutModel,
    lap: &CondLaplaceModel,
    alpha: f64,
    params: &PricingParams,
    basis: Basis,
) -> Result<bool> {
    check_same_alpha(lap, alpha)?;
    check_alpha(alpha, ds.max_loss())?;
    let prices = Prices::new(ds, params, basis)?;
    let w: Vec<IndexFeatures> = ds.records().iter().map(IndexFeatures::from).collect();
    let m: Vec<f64> = w.iter().map(|w| mean.predict_mean(w)).collect();
    let lhs = log_lhs(basis.frequency(ds), alpha, params.beta, w.iter().map(|w| lap.log_psi(w)), &m);
    Ok(lhs < log_rhs(ds, alpha, params.tau, &prices, basis)?)
}

/// Slack of the preference condition:
/// `1 - beta + theta_Y - sup_w (m_Y(alpha|w) - phi_beta(w)) / E[Y]`.
/// On the annual basis the no-claim outcome contributes a zero to the sup.
pub fn eta(
    ds: &ClaimDataset,
    mean: &PayoutModel,
    lap: &CondLaplaceModel,
    alpha: f64,
    beta: f64,
    theta_y: f64,
    basis: Basis,
) -> Result<f64> {
    check_same_alpha(lap, alpha)?;
    crate::models::check_beta(beta)?;
    let e = expected_loss(ds, basis);
    if !(e > 0.0) {
        return Err(Error::domain("expected loss must be > 0"));
    }
    let start = if basis == Basis::Annual { 0.0 } else { f64::NEG_INFINITY };
    let sup = ds
        .records()
        .iter()
        .map(IndexFeatures::from)
        .map(|w| lap.m(&w) - beta * mean.predict_mean(&w))
        .fold(start, f64::max);
    Ok(1.0 - beta + theta_y - sup / e)
}

/// `E[m_Y(alpha|W) - phi_beta(W)] / E[Y]`, which is at least `1 - beta`.
pub fn desc_ratio(ds: &ClaimDataset, mean: &PayoutModel, lap: &CondLaplaceModel, beta: f64, basis: Basis) -> Result<f64> {
    crate::models::check_beta(beta)?;
    let q = basis.frequency(ds);
    let gap = ds
        .records()
        .iter()
        .map(IndexFeatures::from)
        .map(|w| lap.m(&w) - beta * mean.predict_mean(&w))
        .sum::<f64>()
        / ds.len() as f64;
    Ok(q * gap / expected_loss(ds, basis))
}

/// Which extension formula [`h_beta_tau`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HVariant {
    /// `F^-1(F(alpha0) e^-tau e^{-alpha0 (pi_Y - pi_phi)}) - alpha0`.
    #[default]
    AsStated,
    /// Largest `alpha` with `F(alpha) <= (1 - e^-tau) e^{alpha (pi_Y - pi_phi)} F(alpha0 (1 - e^-tau))`, minus `alpha0`.
    ProofDerived,
}

impl std::str::FromStr for HVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "as-stated" | "as_stated" | "stated" => Ok(HVariant::AsStated),
            "proof-derived" | "proof_derived" | "proof" => Ok(HVariant::ProofDerived),
            other => Err(Error::config(format!("unknown h variant `{other}`"))),
        }
    }
}

/// Extension `h_beta(tau) >= 0` of the aversion range over which the
/// preference holds.
pub fn h_beta_tau(ds: &ClaimDataset, alpha0: f64, params: &PricingParams, basis: Basis, variant: HVariant) -> Result<f64> {
    if !(alpha0 > 0.0) {
        return Err(Error::domain(format!("alpha0 must be > 0, got {alpha0}")));
    }
    let prices = Prices::new(ds, params, basis)?;
    let gap = prices.pi_y - prices.pi_phi;
    match variant {
        HVariant::AsStated => {
            let log_target = log_laplace_f(ds, alpha0, basis)? - params.tau - alpha0 * gap;
            if log_target <= log_laplace_f(ds, 0.0, basis)? {
                return Ok(0.0);
            }
            match f_inverse_log(ds, log_target, basis) {
                Ok(a) => Ok((a - alpha0).max(0.0)),
                Err(Error::AlphaTooLarge { max_alpha, .. }) => Ok(max_alpha - alpha0),
                Err(e) => Err(e),
            }
        }
        HVariant::ProofDerived => {
            let shrink = -(-params.tau).exp_m1();
            if shrink == 0.0 {
                return Ok(0.0);
            }
            let anchor = shrink.ln() + log_laplace_f(ds, alpha0 * shrink, basis)?;
            let slack = |a: f64| anchor + a * gap - log_laplace_f(ds, a, basis).unwrap_or(f64::INFINITY);
            if slack(alpha0) < 0.0 {
                return Ok(0.0);
            }
            let hi = max_alpha(ds);
            let steps = 2000;
            let mut prev = alpha0;
            for k in 1..=steps {
                let a = alpha0 + (hi - alpha0) * k as f64 / steps as f64;
                if slack(a) < 0.0 {
                    let root = stats::find_root_bracketed(slack, prev, a, ROOT_TOL * 1e-2)?;
                    return Ok(root - alpha0);
                }
                prev = a;
            }
            Ok(hi - alpha0)
        }
    }
}

/// Per-claim quantities for repeated preference evaluation: the clamped
/// conditional mean of the payout model and a tree partition that supplies
/// the conditional Laplace transform at any `alpha`.
#[derive(Debug, Clone)]
pub struct PreferenceModel<'a> {
    ds: &'a ClaimDataset,
    basis: Basis,
    mean: Vec<f64>,
    partition: LeafPartition,
}

/// `log` of the left side of the preference condition on an aversion grid.
/// Grid points above the overflow limit hold `+inf` and never prefer the index.
#[derive(Debug, Clone, PartialEq)]
pub struct LhsTable {
    pub beta: f64,
    pub alphas: Vec<f64>,
    pub log_lhs: Vec<f64>,
}

/// Expected utilities of both products at one aversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityPair {
    pub alpha: f64,
    pub index: f64,
    pub indemnity: f64,
}

impl<'a> PreferenceModel<'a> {
    pub fn new(ds: &'a ClaimDataset, mean: &PayoutModel, partition: LeafPartition, basis: Basis) -> Self {
        let mean = ds.records().iter().map(|r| mean.predict_mean(&r.into())).collect();
        Self { ds, basis, mean, partition }
    }

    pub fn dataset(&self) -> &ClaimDataset {
        self.ds
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn partition(&self) -> &LeafPartition {
        &self.partition
    }

    /// `E_hat[Y | w_i]` for every claim.
    pub fn mean_predictions(&self) -> &[f64] {
        &self.mean
    }

    /// Per-claim `log psi_hat(alpha | w_i)`.
    pub fn claim_log_psi(&self, alpha: f64) -> Result<Vec<f64>> {
        check_alpha(alpha, self.ds.max_loss())?;
        let by_leaf = self.partition.log_psi_by_leaf(alpha);
        Ok(self.partition.claim_slots().iter().map(|&s| by_leaf[s]).collect())
    }

    /// Per-claim `m_Y(alpha|w_i) - beta E_hat[Y|w_i]`.
    pub fn claim_gaps(&self, alpha: f64, beta: f64) -> Result<Vec<f64>> {
        if !(alpha > 0.0) {
            return Err(Error::domain(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(self.claim_log_psi(alpha)?.iter().zip(&self.mean).map(|(lp, m)| lp / alpha - beta * m).collect())
    }

    pub fn log_lhs(&self, alpha: f64, beta: f64) -> Result<f64> {
        let lp = self.claim_log_psi(alpha)?;
        Ok(log_lhs(self.basis.frequency(self.ds), alpha, beta, lp.into_iter(), &self.mean))
    }

    pub fn lhs_table(&self, alphas: &[f64], beta: f64) -> Result<LhsTable> {
        crate::models::check_beta(beta)?;
        let limit = max_alpha(self.ds);
        let log_lhs = alphas
            .par_iter()
            .map(|&a| if a > limit { Ok(f64::INFINITY) } else { self.log_lhs(a, beta) })
            .collect::<Result<Vec<_>>>()?;
        Ok(LhsTable { beta, alphas: alphas.to_vec(), log_lhs })
    }

    pub fn prefers(&self, alpha: f64, params: &PricingParams) -> Result<bool> {
        let prices = Prices::new(self.ds, params, self.basis)?;
        Ok(self.log_lhs(alpha, params.beta)? < log_rhs(self.ds, alpha, params.tau, &prices, self.basis)?)
    }

    /// Preference indicator at each grid point of `table`.
    pub fn indicators(&self, table: &LhsTable, params: &PricingParams) -> Result<Vec<bool>> {
        if (table.beta - params.beta).abs() > 0.0 {
            return Err(Error::config("LHS table was built for a different beta"));
        }
        let prices = Prices::new(self.ds, params, self.basis)?;
        table
            .alphas
            .par_iter()
            .zip(&table.log_lhs)
            .map(|(&a, &l)| Ok(l.is_finite() && l < log_rhs(self.ds, a, params.tau, &prices, self.basis)?))
            .collect()
    }

    /// Expected number of index buyers among `population` agents.
    pub fn demand(&self, table: &LhsTable, population: u64, mu: &AversionDistribution<f64>, params: &PricingParams) -> Result<f64> {
        integrate_indicator(population, mu, &table.alphas, &self.indicators(table, params)?)
    }

    /// Slack `eta` on the partition estimator.
    pub fn eta(&self, alpha: f64, beta: f64, theta_y: f64) -> Result<f64> {
        let start = if self.basis == Basis::Annual { 0.0 } else { f64::NEG_INFINITY };
        let sup = self.claim_gaps(alpha, beta)?.into_iter().fold(start, f64::max);
        Ok(1.0 - beta + theta_y - sup / expected_loss(self.ds, self.basis))
    }

    /// `E[U(phi - Y - pi_phi)]` and `E[U((e^-tau - 1) Y - pi_Y)]` for
    /// `U(x) = -exp(-alpha x) / alpha`.
    pub fn expected_utilities(&self, alpha: f64, params: &PricingParams) -> Result<UtilityPair> {
        let prices = Prices::new(self.ds, params, self.basis)?;
        let index = self.log_lhs(alpha, params.beta)? + alpha * prices.pi_phi;
        let alpha_prime = -(-params.tau).exp_m1() * alpha;
        let indemnity = log_laplace_psi(self.ds, alpha_prime, self.basis)? + alpha * prices.pi_y;
        Ok(UtilityPair { alpha, index: -index.exp() / alpha, indemnity: -indemnity.exp() / alpha })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{read_claims, ColumnMap};
    use crate::models::{fit_conditional_mean, Hyper, Method, TreeParams};
    use approx::assert_abs_diff_eq;
    use idxcover_testkit as kit;
    use proptest::prelude::*;

    fn fixture(n: usize, seed: u64) -> ClaimDataset {
        read_claims(kit::to_csv(&kit::claims(n, seed)).as_bytes(), b',', &ColumnMap::default(), 0.06).unwrap()
    }

    fn perfect() -> ClaimDataset {
        read_claims(kit::to_csv(&kit::deterministic_claims(400, 1)).as_bytes(), b',', &ColumnMap::default(), 0.06).unwrap()
    }

    fn fine_tree() -> Hyper {
        Hyper { tree: TreeParams { complexity: 0.0, ..TreeParams::default() }, ..Hyper::default() }
    }

    #[test]
    fn psi_and_f_at_zero() {
        let ds = fixture(500, 1);
        assert_eq!(laplace_psi(&ds, 0.0, Basis::Annual).unwrap(), 1.0);
        assert_eq!(laplace_psi(&ds, 0.0, Basis::Claims).unwrap(), 1.0);
        assert_abs_diff_eq!(laplace_f(&ds, 0.0, Basis::Annual).unwrap(), 0.06 * ds.mean_loss(), epsilon = 1e-10);
    }

    #[test]
    fn psi_matches_direct_summation() {
        let ds = fixture(500, 2);
        for alpha in [0.0005, 0.002, 0.01] {
            let direct = ds.annual_expectation(|y| (alpha * y).exp()).unwrap();
            let got = laplace_psi(&ds, alpha, Basis::Annual).unwrap();
            assert!((got - direct).abs() <= 1e-12 * direct, "{alpha}: {got} vs {direct}");
        }
    }

    #[test]
    fn f_round_trip_and_bracketing() {
        let ds = fixture(800, 3);
        for basis in [Basis::Annual, Basis::Claims] {
            for alpha in [0.001, 0.004, 0.01] {
                let back = f_inverse(&ds, laplace_f(&ds, alpha, basis).unwrap(), basis).unwrap();
                assert_abs_diff_eq!(back, alpha, epsilon = 1e-8);
            }
            let f0 = laplace_f(&ds, 0.0, basis).unwrap();
            assert_eq!(f_inverse(&ds, f0, basis).unwrap(), 0.0);
            assert!(matches!(f_inverse(&ds, 0.5 * f0, basis), Err(Error::Domain(_))));
            let (a, b) = (laplace_f(&ds, 0.001, basis).unwrap(), laplace_f(&ds, 0.002, basis).unwrap());
            let mid = f_inverse(&ds, 0.5 * (a + b), basis).unwrap();
            assert!(mid > 0.001 && mid < 0.002);
        }
    }

    #[test]
    fn premium_limits_and_monotonicity() {
        let ds = fixture(800, 4);
        let pure = expected_loss(&ds, Basis::Annual);
        assert_abs_diff_eq!(exponential_premium(&ds, 1e-9, Basis::Annual).unwrap(), pure, epsilon = 1e-6 * pure);
        let mut last = pure;
        for k in 1..=40 {
            let p = exponential_premium(&ds, k as f64 * 1e-3, Basis::Annual).unwrap();
            assert!(p > last);
            last = p;
        }
        assert!(exponential_premium(&ds, 0.0, Basis::Annual).is_err());
    }

    #[test]
    fn alpha_minus_round_trip() {
        let ds = fixture(1000, 5);
        for basis in [Basis::Annual, Basis::Claims] {
            let pi_y = 1.4 * expected_loss(&ds, basis);
            let a = calibrate_alpha_minus(&ds, pi_y, basis).unwrap();
            assert_abs_diff_eq!(exponential_premium(&ds, a, basis).unwrap(), pi_y, epsilon = 1e-8 * pi_y);
            let pure = expected_loss(&ds, basis);
            assert!(calibrate_alpha_minus(&ds, pure * (1.0 + 1e-7), basis).unwrap() < 1e-5);
            assert!(matches!(calibrate_alpha_minus(&ds, pure, basis), Err(Error::NoRoot(_))));
        }
    }

    #[test]
    fn lambda_is_consistent_with_the_law() {
        let ds = fixture(1000, 6);
        let cal = Calibration::run(&ds, 0.4, 1.4, 0.5, Basis::Claims).unwrap();
        let mu = cal.aversion().unwrap();
        assert_abs_diff_eq!(1.0 - mu.cdf(cal.alpha_star), 0.5, epsilon = 1e-9);
        let target = 1.4 * cal.pi_y;
        assert_abs_diff_eq!(exponential_premium(&ds, cal.alpha_star, Basis::Claims).unwrap(), target, epsilon = 1e-8 * target);
        let near_one = calibrate_lambda(&ds, cal.alpha_minus, 1.4, 1.0 - 1e-9, Basis::Claims).unwrap();
        assert!(near_one < 1e-6);
        assert!(calibrate_lambda(&ds, cal.alpha_minus, 1.0, 0.5, Basis::Claims).is_err());
    }

    #[test]
    fn demand_count_cases() {
        let mu = AversionDistribution::new(0.05_f64, 40.0).unwrap();
        assert_eq!(demand_count(500, &mu, 0.05), 0.0);
        assert_abs_diff_eq!(demand_count(500, &mu, 1e6), 500.0);
        assert_abs_diff_eq!(demand_count(500, &mu, 0.05 + 2f64.ln() / 40.0), 250.0, epsilon = 1e-10);
        let mu32 = AversionDistribution::new(0.05_f32, 40.0).unwrap();
        assert!((demand_count(500, &mu32, 0.05 + 2f32.ln() / 40.0) - 250.0).abs() < 1e-3);
    }

    #[test]
    fn integrated_indicator_cases() {
        let mu = AversionDistribution::new(0.02_f64, 50.0).unwrap();
        let grid = mu.support_grid(101);
        assert_eq!(integrate_indicator(500, &mu, &grid, &[true; 101]).unwrap(), 500.0);
        assert_eq!(integrate_indicator(500, &mu, &grid, &[false; 101]).unwrap(), 0.0);
        assert!(integrate_indicator(500, &mu, &grid[1..], &[true; 100]).is_err());
        assert!(integrate_indicator::<f64>(500, &mu, &[], &[]).is_err());
        // Step at the median: half the mass up to one cell of smearing.
        let median = mu.quantile(0.5).unwrap();
        let ind: Vec<bool> = grid.iter().map(|a| *a <= median).collect();
        let n = integrate_indicator(500, &mu, &grid, &ind).unwrap();
        assert!((n - 250.0).abs() < 500.0 * 50.0 * (grid[1] - grid[0]));
    }

    #[test]
    fn mean_shift_modes() {
        let mu = AversionDistribution::new(0.05_f64, 40.0).unwrap();
        let s = mu.with_mean(0.1, MeanShift::Shift).unwrap();
        assert_abs_diff_eq!(s.mean(), 0.1, epsilon = 1e-15);
        assert_eq!(s.lambda(), 40.0);
        let r = mu.with_mean(0.1, MeanShift::Rescale).unwrap();
        assert_abs_diff_eq!(r.mean(), 0.1, epsilon = 1e-15);
        assert_eq!(r.alpha_minus(), 0.05);
    }

    #[test]
    fn perfect_index_at_equal_prices_is_not_strictly_preferred() {
        let ds = perfect();
        let mean = fit_conditional_mean(&ds, Method::Tree, &fine_tree(), 0).unwrap();
        let part = LeafPartition::of_model(&mean, &ds).unwrap();
        let alpha = 0.01;
        let lap = part.at(alpha).unwrap();
        let params = PricingParams { theta_y: 0.4, theta: 0.4, beta: 1.0, tau: 0.0 };
        assert!(!prefers_index(&ds, &mean, &lap, alpha, &params, Basis::Claims).unwrap());
        // Var(Y|W) = 0 and beta = 1: the sup term vanishes.
        assert_abs_diff_eq!(eta(&ds, &mean, &lap, alpha, 1.0, 0.4, Basis::Claims).unwrap(), 0.4, epsilon = 1e-9);
    }

    #[test]
    fn preference_monotone_in_tau_and_theta() {
        let ds = fixture(1500, 7);
        let mean = fit_conditional_mean(&ds, Method::Tree, &Hyper::default(), 0).unwrap();
        let pm = PreferenceModel::new(&ds, &mean, LeafPartition::of_model(&mean, &ds).unwrap(), Basis::Annual);
        let base = PricingParams { theta_y: 0.4, theta: 0.1, beta: 0.9, tau: 0.0 };
        for alpha in [0.002, 0.006, 0.012, 0.02] {
            let mut was = false;
            for k in 0..30 {
                let now = pm.prefers(alpha, &base.with_tau(k as f64 * 0.1)).unwrap();
                assert!(!was || now, "alpha {alpha}, tau step {k}");
                was = now;
            }
            let mut was = true;
            for k in 0..30 {
                let now = pm.prefers(alpha, &base.with_tau(0.5).with_theta(k as f64 * 0.02)).unwrap();
                assert!(was || !now, "alpha {alpha}, theta step {k}");
                was = now;
            }
        }
    }

    #[test]
    fn partition_and_standalone_agree() {
        let ds = fixture(900, 8);
        let mean = fit_conditional_mean(&ds, Method::Tree, &Hyper::default(), 0).unwrap();
        let part = LeafPartition::of_model(&mean, &ds).unwrap();
        let pm = PreferenceModel::new(&ds, &mean, part.clone(), Basis::Annual);
        let params = PricingParams { theta_y: 0.4, theta: 0.15, beta: 0.9, tau: 0.7 };
        for alpha in [0.003, 0.01] {
            let lap = part.at(alpha).unwrap();
            assert_eq!(pm.prefers(alpha, &params).unwrap(), prefers_index(&ds, &mean, &lap, alpha, &params, Basis::Annual).unwrap());
            assert_abs_diff_eq!(
                pm.eta(alpha, 0.9, 0.4).unwrap(),
                eta(&ds, &mean, &lap, alpha, 0.9, 0.4, Basis::Annual).unwrap(),
                epsilon = 1e-9
            );
        }
        assert!(prefers_index(&ds, &mean, &part.at(0.01).unwrap(), 0.02, &params, Basis::Annual).is_err());
    }

    #[test]
    fn eta_implies_preference() {
        let ds = fixture(2000, 9);
        let mean = fit_conditional_mean(&ds, Method::Tree, &Hyper::default(), 0).unwrap();
        let part = LeafPartition::of_model(&mean, &ds).unwrap();
        let mut checked = 0;
        for beta in [0.9, 1.0] {
            for k in 1..=20 {
                let alpha = k as f64 * 2e-4;
                let lap = part.at(alpha).unwrap();
                let e = eta(&ds, &mean, &lap, alpha, beta, 0.4, Basis::Claims).unwrap();
                if e > 0.0 {
                    for frac in [0.0, 0.5, 0.999] {
                        let params = PricingParams { theta_y: 0.4, theta: frac * e / beta, beta, tau: 0.0 };
                        assert!(prefers_index(&ds, &mean, &lap, alpha, &params, Basis::Claims).unwrap(), "alpha {alpha}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn desc_ratio_at_least_one_minus_beta() {
        let ds = fixture(1500, 10);
        let mean = fit_conditional_mean(&ds, Method::Tree, &Hyper::default(), 0).unwrap();
        let part = LeafPartition::of_model(&mean, &ds).unwrap();
        for alpha in [0.001, 0.01] {
            let lap = part.at(alpha).unwrap();
            for beta in [0.8, 0.9, 1.0] {
                for basis in [Basis::Annual, Basis::Claims] {
                    assert!(desc_ratio(&ds, &mean, &lap, beta, basis).unwrap() >= 1.0 - beta - 1e-12);
                }
            }
        }
    }

    #[test]
    fn h_boundary_cases() {
        let ds = fixture(800, 11);
        // beta (1 + theta) = 1 + theta_Y makes the two prices equal.
        let equal = PricingParams { theta_y: 0.4, theta: 0.4, beta: 1.0, tau: 0.0 };
        assert_abs_diff_eq!(h_beta_tau(&ds, 0.005, &equal, Basis::Annual, HVariant::AsStated).unwrap(), 0.0, epsilon = 1e-9);
        let cheaper = PricingParams { theta: 0.1, beta: 0.9, ..equal };
        assert_eq!(h_beta_tau(&ds, 0.005, &cheaper, Basis::Annual, HVariant::AsStated).unwrap(), 0.0);
        assert_eq!(h_beta_tau(&ds, 0.005, &equal, Basis::Annual, HVariant::ProofDerived).unwrap(), 0.0);
        let study = PricingParams { theta_y: 0.4, theta: 0.18, beta: 0.9, tau: 0.5 };
        for v in [HVariant::AsStated, HVariant::ProofDerived] {
            let h = h_beta_tau(&ds, 0.005, &study, Basis::Annual, v).unwrap();
            assert!(h >= 0.0 && h.is_finite());
        }
    }

    #[test]
    fn utilities_match_preference() {
        let ds = fixture(1200, 12);
        let mean = fit_conditional_mean(&ds, Method::Tree, &Hyper::default(), 0).unwrap();
        let pm = PreferenceModel::new(&ds, &mean, LeafPartition::of_model(&mean, &ds).unwrap(), Basis::Annual);
        let params = PricingParams { theta_y: 0.4, theta: 0.1, beta: 0.9, tau: 0.5 };
        for alpha in [0.001, 0.005, 0.02] {
            let u = pm.expected_utilities(alpha, &params).unwrap();
            assert_eq!(u.index > u.indemnity, pm.prefers(alpha, &params).unwrap());
        }
    }

    #[test]
    fn demand_monotone_in_theta_and_tau() {
        let ds = fixture(1500, 13);
        let mean = fit_conditional_mean(&ds, Method::Tree, &Hyper::default(), 0).unwrap();
        let pm = PreferenceModel::new(&ds, &mean, LeafPartition::of_model(&mean, &ds).unwrap(), Basis::Annual);
        let cal = Calibration::run(&ds, 0.4, 1.4, 0.5, Basis::Annual).unwrap();
        let mu = cal.aversion().unwrap();
        let table = pm.lhs_table(&mu.support_grid(81), 0.9).unwrap();
        let base = PricingParams { theta_y: 0.4, theta: 0.1, beta: 0.9, tau: 0.5 };
        let by_theta: Vec<f64> = (0..15).map(|k| pm.demand(&table, 500, &mu, &base.with_theta(k as f64 * 0.03)).unwrap()).collect();
        assert!(by_theta.windows(2).all(|w| w[1] <= w[0]), "{by_theta:?}");
        let by_tau: Vec<f64> = (0..15).map(|k| pm.demand(&table, 500, &mu, &base.with_tau(k as f64 * 0.2)).unwrap()).collect();
        assert!(by_tau.windows(2).all(|w| w[1] >= w[0]), "{by_tau:?}");
    }

    proptest! {
        #[test]
        fn premium_at_least_pure(alpha in 1e-6_f64..0.05) {
            let ds = fixture(300, 14);
            for basis in [Basis::Annual, Basis::Claims] {
                prop_assert!(exponential_premium(&ds, alpha, basis).unwrap() >= expected_loss(&ds, basis) * (1.0 - 1e-12));
            }
        }

        #[test]
        fn f_increasing(a in 0.0_f64..0.1, d in 1e-6_f64..0.01) {
            let ds = fixture(300, 15);
            prop_assert!(laplace_f(&ds, a + d, Basis::Annual).unwrap() > laplace_f(&ds, a, Basis::Annual).unwrap());
        }

        #[test]
        fn cdf_within_unit_interval(am in 0.001_f64..1.0, l in 0.1_f64..100.0, x in 0.0_f64..5.0) {
            let mu = AversionDistribution::new(am, l).unwrap();
            let c = mu.cdf(x);
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
