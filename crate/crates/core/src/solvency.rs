//! Minimum portfolio sizes, loading feasibility and a Monte Carlo ruin check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::ClaimDataset;
use crate::error::{Error, Result};
use crate::models::{check_beta, IndexFeatures, PayoutModel};
use crate::scalar::Scalar;
use crate::stats::{gpd_exceedance, std_normal_survival_inv, GpdTail};
use crate::utility::{demand_count, expected_loss, h_beta_tau, AversionDistribution, Basis, HVariant, PreferenceModel, PricingParams};

/// Mean and standard deviation of the index payout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioMoments<T> {
    pub pi_star: T,
    pub sigma_phi: T,
}

impl<T: Scalar> PortfolioMoments<T> {
    pub fn new(pi_star: T, sigma_phi: T) -> Result<Self> {
        if !(pi_star > T::zero()) || !(sigma_phi >= T::zero()) {
            return Err(Error::domain(format!("moments need pi* > 0 and sigma >= 0, got ({pi_star}, {sigma_phi})")));
        }
        Ok(Self { pi_star, sigma_phi })
    }
}

impl PortfolioMoments<f64> {
    /// `pi* = beta E[Y]` and `sigma_phi = beta sd(E_hat[Y|W])` on the basis.
    pub fn from_model(ds: &ClaimDataset, model: &PayoutModel, beta: f64, basis: Basis) -> Result<Self> {
        check_beta(beta)?;
        let m = model.predict_all(ds);
        Self::new(beta * expected_loss(ds, basis), beta * basis_sd(&m, basis.frequency(ds)))
    }
}

/// Standard deviation of a variable equal to 0 with probability `1 - q` and
/// to a uniform draw from `values` otherwise.
pub fn basis_sd(values: &[f64], q: f64) -> f64 {
    let n = values.len() as f64;
    let m1 = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| v * v).sum::<f64>() / n;
    let var = if q >= 1.0 {
        values.iter().map(|v| (v - m1) * (v - m1)).sum::<f64>() / n
    } else {
        q * m2 - (q * m1) * (q * m1)
    };
    var.max(0.0).sqrt()
}

/// Tolerances and the accumulation tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolvencyParams<T> {
    pub eps: T,
    pub eps_prime: T,
    pub a: T,
    pub tail: GpdTail<T>,
}

impl<T: Scalar> SolvencyParams<T> {
    /// `eps_prime` defaults to `eps / 2`.
    pub fn new(eps: T, eps_prime: Option<T>, a: T, tail: GpdTail<T>) -> Result<Self> {
        let eps_prime = eps_prime.unwrap_or(eps / T::lit(2.0));
        if !(eps > T::zero() && eps < T::one()) {
            return Err(Error::domain(format!("tolerance must lie in (0, 1), got {eps}")));
        }
        if !(eps_prime > T::zero() && eps_prime < eps) {
            return Err(Error::domain(format!("eps' must lie in (0, eps), got {eps_prime}")));
        }
        if !(a > T::one()) {
            return Err(Error::domain(format!("decomposition a must exceed 1, got {a}")));
        }
        Ok(Self { eps, eps_prime, a, tail })
    }
}

fn check_theta<T: Scalar>(theta: T) -> Result<()> {
    if theta > T::zero() && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("loading theta must be > 0, got {theta}")))
    }
}

fn ceil_count<T: Scalar>(x: T) -> u64 {
    x.ceil().to_u64().unwrap_or(u64::MAX).max(1)
}

/// `(sigma_phi S^-1(eps) / (theta pi*))^2` before rounding.
pub fn gaussian_threshold<T: Scalar>(moments: &PortfolioMoments<T>, theta: T, eps: T) -> Result<T> {
    check_theta(theta)?;
    if !(eps > T::zero() && eps < T::lit(0.5)) {
        return Err(Error::domain(format!("tolerance must lie in (0, 0.5), got {eps}")));
    }
    let z = std_normal_survival_inv(eps)?;
    Ok((moments.sigma_phi * z / (theta * moments.pi_star)).powi(2))
}

/// Smallest portfolio meeting the Gaussian solvency condition.
pub fn n_min_gaussian<T: Scalar>(moments: &PortfolioMoments<T>, theta: T, eps: T) -> Result<u64> {
    Ok(ceil_count(gaussian_threshold(moments, theta, eps)?))
}

/// Admissible range `(1, a_max)` for the decomposition parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AWindow<T> {
    pub a_max: T,
}

impl<T: Scalar> AWindow<T> {
    pub fn is_empty(&self) -> bool {
        self.a_max <= T::one()
    }

    pub fn contains(&self, a: T) -> bool {
        a > T::one() && a < self.a_max
    }
}

/// `a_max = gamma theta t^gamma / (s (1 - t^gamma))` for tolerance `t`.
pub fn a_window<T: Scalar>(theta: T, tail: &GpdTail<T>, tolerance: T) -> Result<AWindow<T>> {
    if !(theta >= T::zero()) {
        return Err(Error::domain(format!("loading theta must be >= 0, got {theta}")));
    }
    if !(tolerance > T::zero() && tolerance < T::one()) {
        return Err(Error::domain(format!("tolerance must lie in (0, 1), got {tolerance}")));
    }
    let g = tail.shape();
    let tg = tolerance.powf(g);
    Ok(AWindow { a_max: g * theta * tg / (tail.scale() * (T::one() - tg)) })
}

/// Real-valued accumulation threshold before rounding.
pub fn accumulation_threshold<T: Scalar>(moments: &PortfolioMoments<T>, theta: T, params: &SolvencyParams<T>) -> Result<T> {
    check_theta(theta)?;
    let window = a_window(theta, &params.tail, params.eps)?;
    if !window.contains(params.a) {
        return Err(Error::Infeasible(format!(
            "a = {} is outside the admissible window (1, {}) at theta = {theta}: 1 < a < gamma theta eps^gamma / (s (1 - eps^gamma)) fails",
            params.a, window.a_max
        )));
    }
    let shock = gpd_exceedance(theta / params.a, &params.tail, 1)?;
    let z = std_normal_survival_inv(params.eps - shock)?;
    if z <= T::zero() {
        return Ok(T::one());
    }
    let factor = params.a / (params.a - T::one());
    Ok((factor * moments.sigma_phi * z / (theta * moments.pi_star)).powi(2))
}

/// Smallest portfolio meeting the accumulation-adjusted condition.
pub fn n_min_accumulation<T: Scalar>(moments: &PortfolioMoments<T>, theta: T, params: &SolvencyParams<T>) -> Result<u64> {
    Ok(ceil_count(accumulation_threshold(moments, theta, params)?))
}

/// Inputs shared by the two feasibility checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityInputs {
    pub eta: f64,
    /// `sd(E[Y|W])` on the basis.
    pub sigma: f64,
    pub expected_loss: f64,
    pub beta: f64,
    pub alpha0: f64,
    pub h: f64,
    pub population: u64,
    pub mu_mass: f64,
}

impl FeasibilityInputs {
    /// Evaluates `eta` at `alpha0` and `h_beta(tau)` at `theta = max(eta / beta, 0)`.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        pm: &PreferenceModel<'_>,
        alpha0: f64,
        tau: f64,
        beta: f64,
        theta_y: f64,
        population: u64,
        mu: &AversionDistribution<f64>,
        variant: HVariant,
    ) -> Result<Self> {
        let ds = pm.dataset();
        let eta = pm.eta(alpha0, beta, theta_y)?;
        let params = PricingParams { theta_y, theta: (eta / beta).max(0.0), beta, tau };
        let h = h_beta_tau(ds, alpha0, &params, pm.basis(), variant)?;
        let mu_mass = mu.cdf(alpha0 + h);
        Ok(Self {
            eta,
            sigma: basis_sd(pm.mean_predictions(), pm.basis().frequency(ds)),
            expected_loss: expected_loss(ds, pm.basis()),
            beta,
            alpha0,
            h,
            population,
            mu_mass,
        })
    }

    fn scale(&self) -> Result<f64> {
        if !(self.mu_mass > 0.0) {
            return Err(Error::DegenerateDemand { bound: self.alpha0 + self.h });
        }
        Ok(self.sigma * self.beta / ((self.population as f64).sqrt() * self.expected_loss * self.mu_mass.sqrt()))
    }
}

/// Verdict of a solvency feasibility condition on `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub eta: f64,
    pub h: f64,
    pub mu_mass: f64,
    /// Mutualization term.
    pub demand_term: f64,
    /// Accumulation term; 0 when accumulation is ignored.
    pub accumulation_term: f64,
    pub feasible: bool,
    /// Admissible loadings `[theta_low, theta_high]`.
    pub theta_low: f64,
    pub theta_high: f64,
}

impl FeasibilityReport {
    fn from_terms(inputs: &FeasibilityInputs, demand_term: f64, accumulation_term: f64) -> Self {
        let rhs = demand_term.max(accumulation_term);
        Self {
            eta: inputs.eta,
            h: inputs.h,
            mu_mass: inputs.mu_mass,
            demand_term,
            accumulation_term,
            feasible: inputs.eta >= rhs,
            theta_low: rhs / inputs.beta,
            theta_high: inputs.eta / inputs.beta,
        }
    }

    pub fn rhs(&self) -> f64 {
        self.demand_term.max(self.accumulation_term)
    }
}

/// `eta >= sigma beta S^-1(eps) / (N^1/2 E[Y] mu((0, alpha0 + h])^1/2)`.
pub fn check_prop2(inputs: &FeasibilityInputs, eps: f64) -> Result<FeasibilityReport> {
    let term = inputs.scale()? * std_normal_survival_inv(eps)?;
    Ok(FeasibilityReport::from_terms(inputs, term, 0.0))
}

/// The accumulation version: `eta >= max(a/(a-1) ... S^-1(eps - eps'), a beta s (1 - eps'^g) / (g eps'^g))`.
pub fn check_prop3(inputs: &FeasibilityInputs, params: &SolvencyParams<f64>) -> Result<FeasibilityReport> {
    let a = params.a;
    let demand = a / (a - 1.0) * inputs.scale()? * std_normal_survival_inv(params.eps - params.eps_prime)?;
    let g = params.tail.shape();
    let eg = params.eps_prime.powf(g);
    let accumulation = a * inputs.beta * params.tail.scale() * (1.0 - eg) / (g * eg);
    Ok(FeasibilityReport::from_terms(inputs, demand, accumulation))
}

/// Outcome of the minimum-loading search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ThetaMin {
    Feasible { theta: f64, demand: f64, threshold: f64 },
    /// No grid loading is feasible; reports the grid point with the smallest shortfall.
    Infeasible { closest_theta: f64, gap: f64 },
}

impl ThetaMin {
    pub fn theta(&self) -> Option<f64> {
        match self {
            ThetaMin::Feasible { theta, .. } => Some(*theta),
            ThetaMin::Infeasible { .. } => None,
        }
    }
}

/// Smallest loading with `demand(theta) >= threshold(theta)`: the first
/// feasible grid point, refined by bisection against its predecessor.
/// A threshold of `+inf` marks a loading where no portfolio size suffices.
pub fn theta_min_search(
    demand: impl Fn(f64) -> Result<f64>,
    threshold: impl Fn(f64) -> Result<f64>,
    grid: &[f64],
) -> Result<ThetaMin> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("theta grid must be non-empty and strictly increasing"));
    }
    let eval = |t: f64| -> Result<(f64, f64)> { Ok((demand(t)?, threshold(t)?)) };
    let mut closest = (grid[0], f64::INFINITY);
    for (k, &t) in grid.iter().enumerate() {
        let (d, n) = eval(t)?;
        if d >= n {
            if k == 0 {
                return Ok(ThetaMin::Feasible { theta: t, demand: d, threshold: n });
            }
            let (mut lo, mut hi, mut best) = (grid[k - 1], t, (d, n));
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let (dm, nm) = eval(mid)?;
                if dm >= nm {
                    hi = mid;
                    best = (dm, nm);
                } else {
                    lo = mid;
                }
            }
            return Ok(ThetaMin::Feasible { theta: hi, demand: best.0, threshold: best.1 });
        }
        if n - d < closest.1 {
            closest = (t, n - d);
        }
    }
    Ok(ThetaMin::Infeasible { closest_theta: closest.0, gap: closest.1 })
}

/// Monte Carlo ruin frequency with a 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuinEstimate {
    pub trials: u64,
    pub ruins: u64,
    pub probability: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RuinEstimate {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }
}

const Z95: f64 = 1.959_963_984_540_054;

pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let spread = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - spread).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + spread).min(1.0) };
    (lo, hi)
}

/// Ruin simulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuinSimulation {
    pub n: u64,
    pub theta: f64,
    pub beta: f64,
    pub claim_frequency: f64,
    pub trials: u64,
    pub seed: u64,
    pub accumulation: Option<GpdTail<f64>>,
}

/// Simulates one year of an `n`-policy index portfolio `trials` times.
/// Each policy claims with the given frequency; a claim pays `phi_beta` of a
/// claim drawn uniformly from the dataset. The premium is
/// `(1 + theta) pi*` with `pi*` the expected payout of the model on the annual
/// mixture. The optional shock is drawn from the tail with scale `n s`.
/// Trial `k` uses its own stream of a generator seeded with `seed`, so the
/// result does not depend on scheduling.
pub fn simulate_ruin(ds: &ClaimDataset, model: &PayoutModel, sim: &RuinSimulation) -> Result<RuinEstimate> {
    if sim.n == 0 || sim.trials == 0 {
        return Err(Error::domain("portfolio size and trial count must be >= 1"));
    }
    check_beta(sim.beta)?;
    if !(sim.claim_frequency > 0.0 && sim.claim_frequency < 1.0) {
        return Err(Error::domain(format!("claim frequency must lie in (0, 1), got {}", sim.claim_frequency)));
    }
    if !(sim.theta >= 0.0) {
        return Err(Error::domain(format!("loading must be >= 0, got {}", sim.theta)));
    }
    let phi: Vec<f64> = ds.records().iter().map(|r| sim.beta * model.predict_mean(&IndexFeatures::from(r))).collect();
    let pi_star = sim.claim_frequency * phi.iter().sum::<f64>() / phi.len() as f64;
    let income = sim.n as f64 * (1.0 + sim.theta) * pi_star;
    let counts = Binomial::new(sim.n, sim.claim_frequency).map_err(|e| Error::domain(e.to_string()))?;
    let ruins: u64 = (0..sim.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
            rng.set_stream(trial);
            let k = counts.sample(&mut rng);
            let mut loss = 0.0;
            for _ in 0..k {
                loss += phi[rng.random_range(0..phi.len())];
            }
            if let Some(tail) = &sim.accumulation {
                let u: f64 = 1.0 - rng.random::<f64>();
                loss += tail.upper_quantile(u, sim.n);
            }
            u64::from(loss - income >= 0.0)
        })
        .sum();
    let (ci_low, ci_high) = wilson_interval(ruins, sim.trials);
    Ok(RuinEstimate { trials: sim.trials, ruins, probability: ruins as f64 / sim.trials as f64, ci_low, ci_high })
}

/// `N mu((0, alpha0 + h])`, the demand lower bound of the extension corollary.
pub fn demand_lower_bound(population: u64, mu: &AversionDistribution<f64>, alpha0: f64, h: f64) -> f64 {
    demand_count(population, mu, alpha0 + h)
}
