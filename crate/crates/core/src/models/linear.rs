//! Ordinary least squares on the index covariates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::IndexFeatures;
use crate::claims::SERVICE_LEVELS;
use crate::error::{Error, Result};

/// Covariates of the linear payout. The default regresses on duration, the
/// backup indicator, backup excess and backup quality with an intercept;
/// service-type dummies (reference level `t1`) are optional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSpec {
    pub include_service_type: bool,
}

impl LinearSpec {
    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["(Intercept)", "T", "delta", "Lambda", "B"].iter().map(|s| s.to_string()).collect();
        if self.include_service_type {
            names.extend((2..=SERVICE_LEVELS).map(|k| format!("X=t{k}")));
        }
        names
    }

    pub fn design_row(&self, w: &IndexFeatures) -> Vec<f64> {
        let mut row = vec![1.0, w.duration, f64::from(u8::from(w.backup_activated)), w.backup_excess, w.backup_quality];
        if self.include_service_type {
            row.extend((1..SERVICE_LEVELS).map(|k| if w.service_type.level() == k { 1.0 } else { 0.0 }));
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub spec: LinearSpec,
    pub coefficients: Vec<Coefficient>,
    pub r_squared: f64,
}

impl LinearModel {
    pub fn fit(features: &[IndexFeatures], y: &[f64], spec: LinearSpec) -> Result<Self> {
        let names = spec.column_names();
        let p = names.len();
        let n = features.len();
        if n <= p {
            return Err(Error::DegenerateFit(format!("{n} rows for {p} coefficients")));
        }
        let rows: Vec<Vec<f64>> = features.iter().map(|w| spec.design_row(w)).collect();
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        let yv = DVector::from_column_slice(y);
        let svd = x.clone().svd(true, true);
        let beta = svd
            .solve(&yv, 1e-10)
            .map_err(|e| Error::DegenerateFit(format!("least squares failed: {e}")))?;
        let fitted = &x * &beta;
        let resid = &yv - &fitted;
        let sse = resid.dot(&resid);
        let mean = y.iter().sum::<f64>() / n as f64;
        let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        let r_squared = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
        let sigma2 = sse / (n - p) as f64;
        let xtx_inv = (x.transpose() * &x).try_inverse();
        let coefficients = names
            .into_iter()
            .enumerate()
            .map(|(j, name)| {
                let std_error = xtx_inv.as_ref().map_or(f64::NAN, |m| (sigma2 * m[(j, j)]).max(0.0).sqrt());
                let t_value = if std_error > 0.0 { beta[j] / std_error } else { f64::NAN };
                Coefficient { name, estimate: beta[j], std_error, t_value }
            })
            .collect();
        Ok(Self { spec, coefficients, r_squared })
    }

    pub fn predict(&self, w: &IndexFeatures) -> f64 {
        self.spec
            .design_row(w)
            .iter()
            .zip(&self.coefficients)
            .map(|(x, c)| x * c.estimate)
            .sum()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.iter().find(|c| c.name == name).map(|c| c.estimate)
    }
}
