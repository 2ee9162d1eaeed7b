use std::path::PathBuf;

use idxcover::claims::{correlation, describe, load_claims, Variable};
use idxcover::hybrid::{merge_flags, run_stratum, sweep_e, DeltaMode, EStar, HybridConfig};
use idxcover::models::{evaluate, fit_conditional_mean, LeafPartition, Regressor};
use idxcover::solvency::{
    a_window, check_prop2, check_prop3, n_min_accumulation, n_min_gaussian, simulate_ruin, theta_min_search, FeasibilityInputs,
    FeasibilityReport, RuinSimulation, ThetaMin,
};
use idxcover::stats::GpdTail;
use idxcover::utility::{expected_loss, max_alpha, Calibration, LhsTable, PricingParams};
use idxcover::{Aversion, Basis, ClaimDataset, Error, Method, Moments, PayoutModel, PreferenceModel, Solvency, StratumFilter};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::output::{Cell, DatasetInfo, Run};
use crate::row;

/// Outcome of a command that ran to completion.
pub enum Status {
    Ok,
    /// Outputs were written but the requested target is infeasible.
    Infeasible(String),
}

/// Calibrated scenario shared between commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(flatten)]
    pub calibration: Calibration,
    pub expected_loss_annual: f64,
}

const STRATA: [StratumFilter; 3] = [StratumFilter::All, StratumFilter::BackupActivated, StratumFilter::BackupFailed];

fn load_dataset(run: &mut Run) -> Result<ClaimDataset, CliError> {
    let data = &run.config.data;
    let ds = load_claims(&data.path, data.delimiter_byte()?, &data.column_map(), run.config.scenario.claim_frequency)?;
    run.dataset = Some(DatasetInfo { path: data.path.display().to_string(), rows: ds.len() });
    Ok(ds)
}

fn model_path(run: &Run, method: Method) -> PathBuf {
    run.config.models.dir.clone().unwrap_or_else(|| run.path("models")).join(format!("{}.json", method.name()))
}

/// Loads `<models>/<method>.json` when present, otherwise fits in memory.
fn payout_model(run: &mut Run, ds: &ClaimDataset, method: Method) -> Result<PayoutModel, CliError> {
    let path = model_path(run, method);
    if path.exists() {
        let model = PayoutModel::load(&path)?;
        if model.training_rows != ds.len() || model.method != method {
            return Err(CliError::Config(format!(
                "{} holds a {} model on {} rows; expected {} on {} rows",
                path.display(),
                model.method,
                model.training_rows,
                method,
                ds.len()
            )));
        }
        run.note_input(&path);
        return Ok(model);
    }
    Ok(fit_conditional_mean(ds, method, &run.config.models.hyper, run.seed())?)
}

/// Reuses the scenario file when present, otherwise calibrates in memory.
fn scenario(run: &mut Run, ds: &ClaimDataset) -> Result<Scenario, CliError> {
    let path = run.config.calibration.scenario.clone().unwrap_or_else(|| run.path("scenario.json"));
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
        let s: Scenario = serde_json::from_str(&text).map_err(Error::from)?;
        run.note_input(&path);
        return Ok(s);
    }
    calibrate_scenario(run, ds)
}

fn calibrate_scenario(run: &Run, ds: &ClaimDataset) -> Result<Scenario, CliError> {
    let c = &run.config;
    let calibration = Calibration::run(
        ds,
        c.scenario.theta_y,
        c.calibration.premium_multiplier,
        c.calibration.acceptance_share,
        c.calibration_basis()?,
    )?;
    Ok(Scenario { calibration, expected_loss_annual: expected_loss(ds, Basis::Annual) })
}

fn solvency_params(run: &Run) -> Result<Solvency, CliError> {
    let s = &run.config.solvency;
    Ok(Solvency::new(s.eps, s.eps_prime, s.a, GpdTail::new(s.gamma, s.s)?)?)
}

fn pricing(run: &Run) -> PricingParams {
    let s = &run.config.scenario;
    PricingParams { theta_y: s.theta_y, theta: s.theta, beta: s.beta, tau: s.tau }
}

fn partition(run: &mut Run, ds: &ClaimDataset) -> Result<LeafPartition, CliError> {
    let tree = payout_model(run, ds, Method::Tree)?;
    Ok(LeafPartition::of_model(&tree, ds)?)
}

/// Gaussian and accumulation minimum sizes; empty where undefined.
fn n_min_cells(moments: &Moments, theta: f64, eps: f64, sp: &Solvency) -> (Cell, Cell) {
    let g = n_min_gaussian(moments, theta, eps).ok();
    let a = n_min_accumulation(moments, theta, sp).ok();
    (g.into(), a.into())
}

pub fn describe_cmd(run: &mut Run) -> Result<Status, CliError> {
    let ds = load_dataset(run)?;
    let mut rows = Vec::new();
    let mut corr = Vec::new();
    for filter in STRATA {
        let d = describe(&ds, filter)?;
        for (name, s) in [("Y", d.loss), ("T", d.duration)] {
            rows.push(row![filter.label(), name, s.count, s.mean, s.min, s.max, s.sd]);
            println!("{:<8} {name}: n={} mean={:.4} min={:.4} max={:.4} sd={:.4}", filter.label(), s.count, s.mean, s.min, s.max, s.sd);
        }
        let r = correlation(&ds, Variable::Loss, Variable::Duration, filter)?;
        corr.push(row![filter.label(), "Y", "T", r]);
    }
    run.table("describe.csv", &["stratum", "variable", "count", "mean", "min", "max", "sd"], &rows)?;
    run.table("correlations.csv", &["stratum", "a", "b", "correlation"], &corr)?;
    Ok(Status::Ok)
}

pub fn fit_cmd(run: &mut Run) -> Result<Status, CliError> {
    let ds = load_dataset(run)?;
    let mut metrics = Vec::new();
    for method in Method::ALL {
        let model = fit_conditional_mean(&ds, method, &run.config.models.hyper, run.seed())?;
        let m = evaluate(&model, &ds);
        println!("{:<8} R2={:.4} rmse={:.4} mae={:.4} corr={:.4}", method.name(), m.r_squared, m.rmse, m.mae, m.correlation);
        metrics.push(row![method.name(), m.rmse, m.r_squared, m.mae, m.correlation]);
        if let Regressor::Linear(lm) = &model.regressor {
            let coef: Vec<_> = lm.coefficients.iter().map(|c| row![c.name.as_str(), c.estimate, c.std_error, c.t_value]).collect();
            run.table("linear_coefficients.csv", &["name", "estimate", "std_error", "t_value"], &coef)?;
        }
        let name = format!("models/{}.json", method.name());
        run.text(&name, &(model.to_json()? + "\n"))?;
    }
    run.table("metrics.csv", &["method", "rmse", "r_squared", "mae", "correlation"], &metrics)?;
    Ok(Status::Ok)
}

pub fn calibrate_cmd(run: &mut Run) -> Result<Status, CliError> {
    let ds = load_dataset(run)?;
    let s = calibrate_scenario(run, &ds)?;
    let c = &s.calibration;
    println!("alpha_- = {:.6}, lambda = {:.4}, pi_Y = {:.4} ({} basis)", c.alpha_minus, c.lambda, c.pi_y, c.basis.name());
    run.table(
        "calibration.csv",
        &["basis", "claim_frequency", "theta_y", "expected_loss", "expected_loss_annual", "pi_y", "alpha_minus", "alpha_star", "lambda", "max_alpha"],
        &[row![
            c.basis.name(),
            c.claim_frequency,
            c.theta_y,
            c.expected_loss,
            s.expected_loss_annual,
            c.pi_y,
            c.alpha_minus,
            c.alpha_star,
            c.lambda,
            max_alpha(&ds)
        ]],
    )?;
    run.json("scenario.json", &s)?;
    Ok(Status::Ok)
}

struct DemandSetup<'a> {
    pm: PreferenceModel<'a>,
    moments: Moments,
    table: LhsTable,
}

fn demand_setup<'a>(run: &mut Run, ds: &'a ClaimDataset, part: &LeafPartition, method: Method, mu: &Aversion) -> Result<DemandSetup<'a>, CliError> {
    let model = payout_model(run, ds, method)?;
    let c = &run.config;
    let pm = PreferenceModel::new(ds, &model, part.clone(), c.demand_basis()?);
    let moments = Moments::from_model(ds, &model, c.scenario.beta, c.solvency_basis()?)?;
    let table = pm.lhs_table(&mu.support_grid(c.demand.alpha_points), c.scenario.beta)?;
    Ok(DemandSetup { pm, moments, table })
}

pub fn demand_cmd(run: &mut Run) -> Result<Status, CliError> {
    let ds = load_dataset(run)?;
    let scen = scenario(run, &ds)?;
    let mu = scen.calibration.aversion()?;
    let part = partition(run, &ds)?;
    let cfg = run.config.clone();
    let base = pricing(run);
    let sp = solvency_params(run)?;
    let eps = cfg.solvency.eps;
    let n = cfg.scenario.population;
    let taus = cfg.demand.tau_grid.values("demand.tau_grid")?;
    let thetas = cfg.demand.theta_grid.values("demand.theta_grid")?;
    let scales = cfg.demand.mean_alpha_scale.values("demand.mean_alpha_scale")?;
    let shift = cfg.mean_shift()?;
    let (mut by_tau, mut by_theta, mut by_mean, mut utilities) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for method in cfg.demand_methods()? {
        let s = demand_setup(run, &ds, &part, method, &mu)?;
        for &tau in &taus {
            let p = base.with_tau(tau);
            let d = s.pm.demand(&s.table, n, &mu, &p)?;
            let (g, a) = n_min_cells(&s.moments, p.theta, eps, &sp);
            by_tau.push(vec![method.name().into(), tau.into(), p.theta.into(), d.into(), g, a]);
        }
        for &theta in &thetas {
            let p = base.with_theta(theta);
            let d = s.pm.demand(&s.table, n, &mu, &p)?;
            let (g, a) = n_min_cells(&s.moments, theta, eps, &sp);
            by_theta.push(vec![method.name().into(), theta.into(), p.tau.into(), d.into(), g, a]);
        }
        for &k in &scales {
            let law = mu.with_mean(k * mu.mean(), shift)?;
            let table = s.pm.lhs_table(&law.support_grid(cfg.demand.alpha_points), base.beta)?;
            let d = s.pm.demand(&table, n, &law, &base)?;
            let (g, a) = n_min_cells(&s.moments, base.theta, eps, &sp);
            by_mean.push(vec![method.name().into(), law.mean().into(), k.into(), d.into(), g, a]);
        }
        let limit = max_alpha(&ds);
        for alpha in mu.support_grid(cfg.demand.utility_points).into_iter().filter(|&a| a <= limit) {
            let u = s.pm.expected_utilities(alpha, &base)?;
            utilities.push(row![method.name(), alpha, u.index, u.indemnity]);
        }
        println!("{:<8} demand at theta={} tau={}: {:.2}", method.name(), base.theta, base.tau, s.pm.demand(&s.table, n, &mu, &base)?);
    }
    let tail = ["demand", "n_min_gaussian", "n_min_accumulation"];
    let header = |lead: [&'static str; 3]| lead.iter().chain(tail.iter()).copied().collect::<Vec<_>>();
    run.table("demand_tau.csv", &header(["method", "tau", "theta"]), &by_tau)?;
    run.table("demand_theta.csv", &header(["method", "theta", "tau"]), &by_theta)?;
    run.table("demand_mean_alpha.csv", &header(["method", "mean_alpha", "scale"]), &by_mean)?;
    run.table("expected_utility.csv", &["method", "alpha", "index", "indemnity"], &utilities)?;
    Ok(Status::Ok)
}

fn theta_min_row(variant: &str, r: &ThetaMin) -> Vec<Cell> {
    match *r {
        ThetaMin::Feasible { theta, demand, threshold } => {
            row![variant, "feasible", theta, demand, threshold, Cell::Empty, Cell::Empty]
        }
        ThetaMin::Infeasible { closest_theta, gap } => {
            row![variant, "infeasible", Cell::Empty, Cell::Empty, Cell::Empty, closest_theta, gap]
        }
    }
}

fn feasibility_row(check: &str, r: Result<FeasibilityReport, Error>) -> Result<Vec<Cell>, CliError> {
    Ok(match r {
        Ok(r) => row![check, "ok", r.eta, r.h, r.mu_mass, r.demand_term, r.accumulation_term, r.feasible, r.theta_low, r.theta_high],
        Err(e @ (Error::DegenerateDemand { .. } | Error::Infeasible(_))) => {
            let mut v = row![check, e.to_string()];
            v.extend((0..8).map(|_| Cell::Empty));
            v
        }
        Err(e) => return Err(e.into()),
    })
}

pub fn solvency_cmd(run: &mut Run) -> Result<Status, CliError> {
    let ds = load_dataset(run)?;
    let scen = scenario(run, &ds)?;
    let mu = scen.calibration.aversion()?;
    let part = partition(run, &ds)?;
    let cfg = run.config.clone();
    let method = cfg.method()?;
    let s = demand_setup(run, &ds, &part, method, &mu)?;
    let base = pricing(run);
    let sp = solvency_params(run)?;
    let eps = cfg.solvency.eps;
    let n = cfg.scenario.population;
    let grid = cfg.solvency.theta_grid.values("solvency.theta_grid")?;

    let demand = |t: f64| s.pm.demand(&s.table, n, &mu, &base.with_theta(t));
    let gaussian = |t: f64| n_min_gaussian(&s.moments, t, eps).map(|v| v as f64);
    let accumulation = |t: f64| match n_min_accumulation(&s.moments, t, &sp) {
        Ok(v) => Ok(v as f64),
        Err(Error::Infeasible(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    };
    let mut sweep = Vec::new();
    for &t in &grid {
        let (g, a) = n_min_cells(&s.moments, t, eps, &sp);
        let w = a_window(t, &sp.tail, eps)?;
        sweep.push(vec![t.into(), demand(t)?.into(), g, a, w.a_max.into(), w.contains(sp.a).into()]);
    }
    run.table("solvency_sweep.csv", &["theta", "demand", "n_min_gaussian", "n_min_accumulation", "a_max", "a_admissible"], &sweep)?;

    let g = theta_min_search(demand, gaussian, &grid)?;
    let a = theta_min_search(demand, accumulation, &grid)?;
    run.table(
        "theta_min.csv",
        &["variant", "status", "theta", "demand", "threshold", "closest_theta", "gap"],
        &[theta_min_row("gaussian", &g), theta_min_row("accumulation", &a)],
    )?;

    let alpha0 = scen.calibration.alpha_minus;
    let inputs = FeasibilityInputs::assemble(&s.pm, alpha0, base.tau, base.beta, base.theta_y, n, &mu, cfg.h_variant()?)?;
    let checks = vec![
        feasibility_row("gaussian", check_prop2(&inputs, eps))?,
        feasibility_row("accumulation", check_prop3(&inputs, &sp))?,
    ];
    run.table(
        "feasibility.csv",
        &["check", "status", "eta", "h", "mu_mass", "demand_term", "accumulation_term", "feasible", "theta_low", "theta_high"],
        &checks,
    )?;
    run.table(
        "moments.csv",
        &["method", "basis", "pi_star", "sigma_phi"],
        &[row![method.name(), cfg.solvency.basis.as_str(), s.moments.pi_star, s.moments.sigma_phi]],
    )?;

    for (name, r) in [("gaussian", &g), ("accumulation", &a)] {
        match r {
            ThetaMin::Feasible { theta, demand, threshold } => {
                println!("theta_min ({name}) = {theta:.4}: demand {demand:.1} >= n_min {threshold}")
            }
            ThetaMin::Infeasible { closest_theta, gap } => println!("theta_min ({name}): none on grid (closest {closest_theta}, gap {gap:.1})"),
        }
    }
    Ok(match g {
        ThetaMin::Feasible { .. } => Status::Ok,
        ThetaMin::Infeasible { closest_theta, gap } => {
            Status::Infeasible(format!("no loading on the grid reaches the Gaussian minimum (closest {closest_theta}, gap {gap})"))
        }
    })
}

fn stratum_file(s: StratumFilter) -> String {
    s.label().replace('=', "")
}

pub fn hybrid_cmd(run: &mut Run) -> Result<Status, CliError> {
    let ds = load_dataset(run)?;
    let scen = scenario(run, &ds)?;
    let part = partition(run, &ds)?;
    let cfg = run.config.clone();
    let h = &cfg.hybrid;
    let mode = cfg.hybrid_mode()?;
    let mean_method = match mode {
        DeltaMode::Tree => Method::Tree,
        DeltaMode::Boosted => Method::Boosted,
    };
    let model = payout_model(run, &ds, mean_method)?;
    let pm = PreferenceModel::new(&ds, &model, part, Basis::Claims);
    let hc = HybridConfig {
        alpha: h.alpha.unwrap_or(scen.calibration.alpha_minus),
        beta: h.beta.unwrap_or(cfg.scenario.beta),
        e: h.e.unwrap_or(0.0),
        mode,
        stratification: cfg.stratification()?,
    };
    hc.validate()?;
    let theta_y = cfg.scenario.theta_y;
    let hyper = &cfg.models.hyper;
    let seed = run.seed();
    let strata = hc.stratification.strata();
    let betas = h.betas.clone().unwrap_or_else(|| vec![0.8, 0.9, 1.0]);
    let e_grid = match &h.e_grid {
        Some(g) => g.values("hybrid.e_grid")?,
        None => {
            let lowest = betas.iter().copied().fold(hc.beta, f64::min);
            let top = pm.claim_gaps(hc.alpha, lowest)?.into_iter().fold(0.0, f64::max);
            (0..=40).map(|k| top * k as f64 / 40.0).collect()
        }
    };

    let mut sweep = Vec::new();
    for &stratum in strata {
        for r in sweep_e(&pm, hc.alpha, &betas, &e_grid, mode, stratum, theta_y, hyper, seed)? {
            sweep.push(row![stratum.label(), r.beta, r.e, r.p_e, r.theta_max]);
        }
    }
    run.table("hybrid_sweep.csv", &["stratum", "beta", "e", "p_e", "theta_max"], &sweep)?;

    if !h.target_shares.is_empty() && h.target_shares.len() != strata.len() {
        return Err(CliError::Config(format!("hybrid.target_shares needs {} values, one per stratum", strata.len())));
    }
    let mut runs = Vec::new();
    for (k, &stratum) in strata.iter().enumerate() {
        let rule = if let Some(&p_e) = h.target_shares.get(k) {
            EStar::MatchShare { p_e }
        } else if let Some(e) = h.e {
            EStar::Fixed { e }
        } else {
            EStar::MaxShare { theta_floor: h.theta_floor.unwrap_or(0.0) }
        };
        runs.push(run_stratum(&pm, &hc, stratum, rule, theta_y, hyper, seed)?);
    }

    let mut summary = Vec::new();
    let mut decisions = Vec::new();
    for r in &runs {
        let s = &r.summary;
        println!(
            "{:<8} {}: e*={:.4} p_e={:.4} theta_max={} pi_h={:.4} pi_Y={:.4}",
            s.stratum.label(),
            s.mode,
            s.e,
            s.p_e,
            s.theta_max.map_or("n/a".to_string(), |t| format!("{t:.4}")),
            s.pi_h,
            s.pi_y
        );
        summary.push(row![
            s.stratum.label(),
            s.mode.to_string(),
            s.alpha,
            s.beta,
            s.e,
            s.claims,
            s.p_e,
            s.eta_e,
            s.theta_max,
            s.theta,
            s.pi_h,
            s.pi_y
        ]);
        for d in &r.decisions {
            decisions.push(row![d.claim, d.delta, if d.index { "index" } else { "indemnity" }, d.stratum.label()]);
        }
        if mode == DeltaMode::Tree {
            run.text(&format!("tree_{}.txt", stratum_file(s.stratum)), &r.model.render_tree(s.e)?)?;
        }
    }
    decisions.sort_by_key(|r| match r[0] {
        Cell::Int(i) => i,
        _ => u64::MAX,
    });
    run.table(
        "hybrid_summary.csv",
        &["stratum", "mode", "alpha", "beta", "e", "claims", "p_e", "eta_e", "theta_max", "theta", "pi_h", "pi_y"],
        &summary,
    )?;
    run.table("decisions.csv", &["row", "delta", "label", "stratum"], &decisions)?;
    let flags = merge_flags(ds.len(), &runs);
    let share = flags.iter().filter(|&&f| f).count() as f64 / ds.len() as f64;
    println!("index share over all claims: {share:.4}");
    Ok(Status::Ok)
}

pub fn simulate_cmd(run: &mut Run) -> Result<Status, CliError> {
    let ds = load_dataset(run)?;
    let cfg = run.config.clone();
    let method = cfg.method()?;
    let model = payout_model(run, &ds, method)?;
    let sp = solvency_params(run)?;
    let eps = cfg.solvency.eps;
    let beta = cfg.scenario.beta;
    let theta = cfg.simulate.theta.unwrap_or(cfg.scenario.theta);
    let moments = Moments::from_model(&ds, &model, beta, Basis::Annual)?;
    let g = n_min_gaussian(&moments, theta, eps).ok();
    let a = n_min_accumulation(&moments, theta, &sp).ok();
    let n = match (cfg.simulate.n, cfg.simulate.accumulation) {
        (Some(n), _) => n,
        (None, false) => g.ok_or_else(|| CliError::Config(format!("no Gaussian minimum at theta = {theta}")))?,
        (None, true) => n_min_accumulation(&moments, theta, &sp)?,
    };
    let sim = RuinSimulation {
        n,
        theta,
        beta,
        claim_frequency: ds.claim_frequency(),
        trials: cfg.simulate.trials,
        seed: run.seed(),
        accumulation: cfg.simulate.accumulation.then_some(sp.tail),
    };
    let r = simulate_ruin(&ds, &model, &sim)?;
    let within = r.probability <= eps + 3.0 * r.half_width();
    println!(
        "n={n} theta={theta}: ruin {:.5} [{:.5}, {:.5}] over {} trials (eps {eps})",
        r.probability, r.ci_low, r.ci_high, r.trials
    );
    run.table(
        "simulate.csv",
        &[
            "method",
            "n",
            "theta",
            "accumulation",
            "trials",
            "ruins",
            "probability",
            "ci_low",
            "ci_high",
            "half_width",
            "eps",
            "n_min_gaussian",
            "n_min_accumulation",
            "within_bound",
        ],
        &[row![
            method.name(),
            n,
            theta,
            cfg.simulate.accumulation,
            r.trials,
            r.ruins,
            r.probability,
            r.ci_low,
            r.ci_high,
            r.half_width(),
            eps,
            g,
            a,
            within
        ]],
    )?;
    Ok(Status::Ok)
}
