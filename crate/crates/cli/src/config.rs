//! Scenario configuration.
//!
//! Values are layered: built-in defaults, then the TOML file, then
//! environment variables `IDXCOVER_<SECTION>__<KEY>`, then `--set
//! section.key=value` flags. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use idxcover::claims::ColumnMap;
use idxcover::hybrid::{DeltaMode, Stratification};
use idxcover::models::Hyper;
use idxcover::utility::{HVariant, MeanShift};
use idxcover::{Basis, Method};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "IDXCOVER_";

/// Either an explicit list or an inclusive arithmetic range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl Grid {
    pub fn range(start: f64, stop: f64, step: f64) -> Self {
        Grid::Range { start, stop, step }
    }

    pub fn values(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let v = match self {
            Grid::List(v) => v.clone(),
            Grid::Range { start, stop, step } => {
                if !(*step > 0.0) || !(stop >= start) {
                    return Err(CliError::Config(format!("{key}: range needs step > 0 and stop >= start")));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                (0..=n).map(|k| start + k as f64 * step).collect()
            }
        };
        if v.is_empty() || v.windows(2).any(|w| w[1] <= w[0]) || v.iter().any(|x| !x.is_finite()) {
            return Err(CliError::Config(format!("{key}: grid must be non-empty, finite and strictly increasing")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Columns {
    pub loss: String,
    pub duration: String,
    pub service_type: String,
    pub backup_activated: String,
    pub backup_quality: String,
    pub backup_excess: String,
}

impl Default for Columns {
    fn default() -> Self {
        Self {
            loss: "Y".into(),
            duration: "T".into(),
            service_type: "X".into(),
            backup_activated: "delta".into(),
            backup_quality: "B".into(),
            backup_excess: "Lambda".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub delimiter: String,
    /// Exact header names; when absent, common spellings are recognised.
    pub columns: Option<Columns>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: PathBuf::from("data/loss_data.csv"), delimiter: ",".into(), columns: None }
    }
}

impl DataSection {
    pub fn delimiter_byte(&self) -> Result<u8, CliError> {
        match self.delimiter.as_bytes() {
            [b] => Ok(*b),
            _ if self.delimiter == "\\t" || self.delimiter == "tab" => Ok(b'\t'),
            _ => Err(CliError::Config(format!("data.delimiter must be one byte, got {:?}", self.delimiter))),
        }
    }

    pub fn column_map(&self) -> ColumnMap {
        match &self.columns {
            None => ColumnMap::default(),
            Some(c) => ColumnMap::explicit(&c.loss, &c.duration, &c.service_type, &c.backup_activated, &c.backup_quality, &c.backup_excess),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Annual claim frequency `p`.
    pub claim_frequency: f64,
    pub theta_y: f64,
    pub beta: f64,
    /// Indemnity payment delay discount.
    pub tau: f64,
    /// Index loading used where a sweep does not vary it.
    pub theta: f64,
    /// Target population `N`.
    pub population: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self { claim_frequency: 0.06, theta_y: 0.4, beta: 0.9, tau: 0.5, theta: 0.2, population: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub basis: String,
    pub premium_multiplier: f64,
    pub acceptance_share: f64,
    /// Scenario file to reuse; defaults to `<out>/scenario.json` when present.
    pub scenario: Option<PathBuf>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { basis: "claims".into(), premium_multiplier: 1.4, acceptance_share: 0.5, scenario: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    /// Payout model used by `solvency` and `simulate`.
    pub method: String,
    /// Directory of fitted models; defaults to `<out>/models` when present.
    pub dir: Option<PathBuf>,
    pub hyper: Hyper,
}

impl Default for ModelsSection {
    fn default() -> Self {
        Self { method: "boosted".into(), dir: None, hyper: Hyper::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandSection {
    /// Basis of the preference comparison.
    pub basis: String,
    pub h_variant: String,
    pub methods: Vec<String>,
    /// Aversion grid size per law.
    pub alpha_points: usize,
    pub tau_grid: Grid,
    pub theta_grid: Grid,
    /// Multiples of the calibrated mean aversion.
    pub mean_alpha_scale: Grid,
    pub mean_shift: String,
    pub utility_points: usize,
}

impl Default for DemandSection {
    fn default() -> Self {
        Self {
            basis: "annual".into(),
            h_variant: "as_stated".into(),
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            alpha_points: 400,
            tau_grid: Grid::range(0.0, 3.0, 0.1),
            theta_grid: Grid::range(0.0, 0.4, 0.01),
            mean_alpha_scale: Grid::range(0.5, 2.0, 0.05),
            mean_shift: "shift".into(),
            utility_points: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolvencySection {
    pub eps: f64,
    /// Defaults to `eps / 2`.
    pub eps_prime: Option<f64>,
    pub a: f64,
    pub gamma: f64,
    pub s: f64,
    /// Basis of the payout moments.
    pub basis: String,
    pub theta_grid: Grid,
}

impl Default for SolvencySection {
    fn default() -> Self {
        Self {
            eps: 0.005,
            eps_prime: None,
            a: 2.4,
            gamma: 0.5,
            s: 0.003,
            basis: "annual".into(),
            theta_grid: Grid::range(0.01, 1.0, 0.01),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridSection {
    /// Target aversion; defaults to the calibrated `alpha_-`.
    pub alpha: Option<f64>,
    /// Defaults to `scenario.beta`.
    pub beta: Option<f64>,
    pub mode: Option<String>,
    pub stratification: Option<String>,
    pub betas: Option<Vec<f64>>,
    /// Defaults to 41 points from 0 to the largest gap.
    pub e_grid: Option<Grid>,
    /// Fixed threshold for every stratum.
    pub e: Option<f64>,
    /// Per-stratum shares to match, in stratum order.
    pub target_shares: Vec<f64>,
    /// Maximise the share subject to `theta_max >= theta_floor` (default rule, floor 0).
    pub theta_floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub trials: u64,
    /// Defaults to the analytic minimum at `theta`.
    pub n: Option<u64>,
    /// Defaults to `scenario.theta`.
    pub theta: Option<f64>,
    pub accumulation: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { trials: 100_000, n: None, theta: None, accumulation: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 42, out: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub scenario: ScenarioSection,
    pub calibration: CalibrationSection,
    pub models: ModelsSection,
    pub demand: DemandSection,
    pub solvency: SolvencySection,
    pub hybrid: HybridSection,
    pub simulate: SimulateSection,
}

fn parse<T: FromStr<Err = idxcover::Error>>(key: &str, raw: &str) -> Result<T, CliError> {
    raw.parse().map_err(|e: idxcover::Error| CliError::Config(format!("{key}: {e}")))
}

impl Config {
    pub fn calibration_basis(&self) -> Result<Basis, CliError> {
        parse("calibration.basis", &self.calibration.basis)
    }

    pub fn demand_basis(&self) -> Result<Basis, CliError> {
        parse("demand.basis", &self.demand.basis)
    }

    pub fn solvency_basis(&self) -> Result<Basis, CliError> {
        parse("solvency.basis", &self.solvency.basis)
    }

    pub fn h_variant(&self) -> Result<HVariant, CliError> {
        parse("demand.h_variant", &self.demand.h_variant)
    }

    pub fn method(&self) -> Result<Method, CliError> {
        parse("models.method", &self.models.method)
    }

    pub fn demand_methods(&self) -> Result<Vec<Method>, CliError> {
        self.demand.methods.iter().map(|m| parse("demand.methods", m)).collect()
    }

    pub fn mean_shift(&self) -> Result<MeanShift, CliError> {
        match self.demand.mean_shift.as_str() {
            "shift" => Ok(MeanShift::Shift),
            "rescale" => Ok(MeanShift::Rescale),
            other => Err(CliError::Config(format!("demand.mean_shift: unknown `{other}` (shift | rescale)"))),
        }
    }

    pub fn hybrid_mode(&self) -> Result<DeltaMode, CliError> {
        parse("hybrid.mode", self.hybrid.mode.as_deref().unwrap_or("tree"))
    }

    pub fn stratification(&self) -> Result<Stratification, CliError> {
        parse("hybrid.stratification", self.hybrid.stratification.as_deref().unwrap_or("by_backup"))
    }
}

/// Sources layered on top of the defaults, lowest precedence first.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    pub file: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Resolved configuration and the override keys that were applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: Config,
    pub overrides: Vec<String>,
}

fn scalar_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Table, path: &[String], value: Value, origin: &str) -> Result<(), CliError> {
    let (last, parents) = path.split_last().ok_or_else(|| CliError::Config(format!("{origin}: empty key")))?;
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{origin}: `{p}` is not a section")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn read_file(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl Layers {
    /// Environment variables carrying the configuration prefix.
    pub fn from_process_env() -> Vec<(String, String)> {
        std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let mut table = match &self.file {
            Some(p) => read_file(p)?,
            None => Table::new(),
        };
        let mut overrides = Vec::new();
        let mut env = self.env.clone();
        env.sort();
        for (key, raw) in &env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            set_path(&mut table, &path, scalar_value(raw), key)?;
            overrides.push(format!("env:{}", path.join(".")));
        }
        for set in &self.sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects section.key=value, got `{set}`")))?;
            let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
            set_path(&mut table, &path, scalar_value(raw.trim()), set)?;
            overrides.push(format!("flag:{}", key.trim()));
        }
        let mut config: Config = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        if let Some(seed) = self.seed {
            config.run.seed = seed;
            overrides.push("flag:run.seed".into());
        }
        if let Some(out) = &self.out {
            config.run.out = out.clone();
            overrides.push("flag:run.out".into());
        }
        Ok(Resolved { config, overrides })
    }
}
