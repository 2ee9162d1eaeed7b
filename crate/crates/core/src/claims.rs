//! Claim records, loading from delimited text, descriptive statistics and the
//! annual-loss mixture (no claim with probability `1 - p`).

use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Annual claim probability used when none is configured.
pub const DEFAULT_CLAIM_FREQUENCY: f64 = 0.06;

/// Number of service-type levels (`t1` .. `t5`).
pub const SERVICE_LEVELS: usize = 5;

/// Impacted service type, stored as a zero-based level index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServiceType(u8);

impl ServiceType {
    pub fn new(level: usize) -> Result<Self> {
        if level < SERVICE_LEVELS {
            Ok(Self(level as u8))
        } else {
            Err(Error::domain(format!("service level {level} out of range 0..{SERVICE_LEVELS}")))
        }
    }

    pub fn level(self) -> usize {
        usize::from(self.0)
    }

    /// Accepts `t1`..`t5` (any case) or a bare `1`..`5`.
    pub fn parse(raw: &str) -> Option<Self> {
        let s = raw.trim();
        let digits = s.strip_prefix(['t', 'T']).unwrap_or(s);
        let k: usize = digits.parse().ok()?;
        (1..=SERVICE_LEVELS).contains(&k).then(|| Self((k - 1) as u8))
    }
}

impl fmt::Display for ServiceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0 + 1)
    }
}

/// One claim: the loss and the index information observed right after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    /// Loss, 10³ EUR.
    pub loss: f64,
    /// Interruption duration, days.
    pub duration: f64,
    pub service_type: ServiceType,
    pub backup_activated: bool,
    /// Expected share of activity preserved by the backup plan.
    pub backup_quality: f64,
    /// Time spent on backup, `(duration - trigger delay)_+`, days.
    pub backup_excess: f64,
}

impl ClaimRecord {
    /// Range checks. `backup_excess` is validated for range only; it is not
    /// forced to zero when the backup was not activated.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite = [self.loss, self.duration, self.backup_quality, self.backup_excess]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite value".into());
        }
        if self.loss < 0.0 {
            return Err(format!("loss must be >= 0, got {}", self.loss));
        }
        if self.duration <= 0.0 {
            return Err(format!("duration must be > 0, got {}", self.duration));
        }
        if !(self.backup_quality > 0.0 && self.backup_quality < 1.0) {
            return Err(format!("backup quality must lie in (0, 1), got {}", self.backup_quality));
        }
        if self.backup_excess < 0.0 {
            return Err(format!("backup excess must be >= 0, got {}", self.backup_excess));
        }
        if self.backup_excess > self.duration + 1e-9 {
            return Err(format!(
                "backup excess {} exceeds duration {}",
                self.backup_excess, self.duration
            ));
        }
        Ok(())
    }
}

/// Validated, immutable claim collection with its annual claim probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimDataset {
    records: Vec<ClaimRecord>,
    claim_frequency: f64,
}

impl ClaimDataset {
    pub fn new(records: Vec<ClaimRecord>, claim_frequency: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(claim_frequency > 0.0 && claim_frequency < 1.0) {
            return Err(Error::domain(format!("claim frequency must lie in (0, 1), got {claim_frequency}")));
        }
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|message| Error::Row { row: i + 1, message })?;
        }
        Ok(Self { records, claim_frequency })
    }

    pub fn records(&self) -> &[ClaimRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn claim_frequency(&self) -> f64 {
        self.claim_frequency
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn max_loss(&self) -> f64 {
        self.records.iter().map(|r| r.loss).fold(0.0, f64::max)
    }

    pub fn mean_loss(&self) -> f64 {
        self.records.iter().map(|r| r.loss).sum::<f64>() / self.len() as f64
    }

    /// Records kept by `filter`, with the same claim frequency.
    pub fn filtered(&self, filter: StratumFilter) -> Result<Self> {
        let records: Vec<_> = self.records.iter().copied().filter(|r| filter.keeps(r)).collect();
        if records.is_empty() {
            return Err(Error::EmptySelection(format!("no claims with {filter}")));
        }
        Ok(Self { records, claim_frequency: self.claim_frequency })
    }

    /// Same claims with a different frequency.
    pub fn with_frequency(&self, claim_frequency: f64) -> Result<Self> {
        Self::new(self.records.clone(), claim_frequency)
    }

    /// Annual-mixture expectation `(1 - p) g(0) + p * mean(g(Y))`.
    pub fn annual_expectation(&self, g: impl Fn(f64) -> f64) -> Result<f64> {
        self.mixture_expectation(self.claim_frequency, g)
    }

    /// Mixture expectation at an explicit frequency; `frequency = 1` gives the
    /// plain average over claims.
    pub fn mixture_expectation(&self, frequency: f64, g: impl Fn(f64) -> f64) -> Result<f64> {
        let mut sum = 0.0;
        for (i, r) in self.records.iter().enumerate() {
            let v = g(r.loss);
            if !v.is_finite() {
                return Err(Error::Overflow { record: i + 1, value: v });
            }
            sum += v;
        }
        let g0 = g(0.0);
        if !g0.is_finite() {
            return Err(Error::Overflow { record: 0, value: g0 });
        }
        Ok((1.0 - frequency) * g0 + frequency * sum / self.len() as f64)
    }
}

/// Selection on the backup-activation indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratumFilter {
    #[default]
    All,
    BackupActivated,
    BackupFailed,
}

impl StratumFilter {
    pub fn keeps(self, r: &ClaimRecord) -> bool {
        match self {
            StratumFilter::All => true,
            StratumFilter::BackupActivated => r.backup_activated,
            StratumFilter::BackupFailed => !r.backup_activated,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StratumFilter::All => "all",
            StratumFilter::BackupActivated => "delta=1",
            StratumFilter::BackupFailed => "delta=0",
        }
    }
}

impl fmt::Display for StratumFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Numeric claim variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Loss,
    Duration,
    BackupActivated,
    BackupQuality,
    BackupExcess,
}

impl Variable {
    pub fn value(self, r: &ClaimRecord) -> f64 {
        match self {
            Variable::Loss => r.loss,
            Variable::Duration => r.duration,
            Variable::BackupActivated => f64::from(u8::from(r.backup_activated)),
            Variable::BackupQuality => r.backup_quality,
            Variable::BackupExcess => r.backup_excess,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variable::Loss => "Y",
            Variable::Duration => "T",
            Variable::BackupActivated => "delta",
            Variable::BackupQuality => "B",
            Variable::BackupExcess => "Lambda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub sd: f64,
}

/// Loss and duration summaries of one selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub filter: StratumFilter,
    pub loss: Summary,
    pub duration: Summary,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let mean = stats::mean(values)?;
    let sd = stats::sample_sd(values)?;
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Some(Summary { count: values.len(), mean, min, max, sd })
}

/// Exact sample statistics (sd with the `n - 1` divisor) of the retained rows.
pub fn describe(ds: &ClaimDataset, filter: StratumFilter) -> Result<DescriptiveStats> {
    let rows: Vec<&ClaimRecord> = ds.records.iter().filter(|r| filter.keeps(r)).collect();
    if rows.is_empty() {
        return Err(Error::EmptySelection(format!("no claims with {filter}")));
    }
    let loss: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let duration: Vec<f64> = rows.iter().map(|r| r.duration).collect();
    Ok(DescriptiveStats {
        filter,
        loss: summarize(&loss).expect("non-empty"),
        duration: summarize(&duration).expect("non-empty"),
    })
}

/// Pearson correlation of two variables over the retained rows.
pub fn correlation(ds: &ClaimDataset, a: Variable, b: Variable, filter: StratumFilter) -> Result<f64> {
    let rows: Vec<&ClaimRecord> = ds.records.iter().filter(|r| filter.keeps(r)).collect();
    if rows.len() < 2 {
        return Err(Error::EmptySelection(format!(
            "correlation needs at least 2 rows with {filter}, got {}",
            rows.len()
        )));
    }
    let xs: Vec<f64> = rows.iter().map(|r| a.value(r)).collect();
    let ys: Vec<f64> = rows.iter().map(|r| b.value(r)).collect();
    stats::pearson(&xs, &ys).ok_or_else(|| {
        let constant = if stats::sample_sd(&xs).unwrap_or(0.0) == 0.0 { a } else { b };
        Error::UndefinedCorrelation(constant.name().into())
    })
}

/// Header names for the six claim fields. Each field lists candidates tried in
/// order, compared case-insensitively after trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub loss: Vec<String>,
    pub duration: Vec<String>,
    pub service_type: Vec<String>,
    pub backup_activated: Vec<String>,
    pub backup_quality: Vec<String>,
    pub backup_excess: Vec<String>,
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            loss: names(&["loss", "y", "amount", "loss_amount"]),
            duration: names(&["duration", "t", "interruption_duration"]),
            service_type: names(&["service_type", "x", "service", "type"]),
            backup_activated: names(&["backup_activated", "delta", "backup", "d"]),
            backup_quality: names(&["backup_quality", "b", "quality"]),
            backup_excess: names(&["backup_excess", "lambda", "l", "excess"]),
        }
    }
}

impl ColumnMap {
    /// A map with one explicit name per field.
    pub fn explicit(loss: &str, duration: &str, service: &str, activated: &str, quality: &str, excess: &str) -> Self {
        Self {
            loss: names(&[loss]),
            duration: names(&[duration]),
            service_type: names(&[service]),
            backup_activated: names(&[activated]),
            backup_quality: names(&[quality]),
            backup_excess: names(&[excess]),
        }
    }

    fn resolve(&self, header: &csv::StringRecord) -> Result<[usize; 6]> {
        let fields: [(&str, &Vec<String>); 6] = [
            ("loss", &self.loss),
            ("duration", &self.duration),
            ("service_type", &self.service_type),
            ("backup_activated", &self.backup_activated),
            ("backup_quality", &self.backup_quality),
            ("backup_excess", &self.backup_excess),
        ];
        let cols: Vec<String> = header.iter().map(|h| h.trim().trim_start_matches('\u{feff}').to_lowercase()).collect();
        let mut out = [0usize; 6];
        for (slot, (field, candidates)) in out.iter_mut().zip(fields) {
            *slot = candidates
                .iter()
                .find_map(|c| cols.iter().position(|h| *h == c.trim().to_lowercase()))
                .ok_or_else(|| Error::Schema { column: field.into(), candidates: candidates.join(", ") })?;
        }
        Ok(out)
    }
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" | "yes" | "y" => Some(true),
        "0" | "0.0" | "false" | "no" | "n" => Some(false),
        _ => None,
    }
}

/// Reads claims from delimited text with a header row. Fails on the first
/// unparsable or out-of-range row, reporting its 1-based data-row index.
pub fn read_claims<R: Read>(reader: R, delimiter: u8, columns: &ColumnMap, claim_frequency: f64) -> Result<ClaimDataset> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let idx = columns.resolve(&header)?;
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let cell = |k: usize| row.get(idx[k]).unwrap_or("").trim();
        let num = |k: usize, name: &str| -> Result<f64> {
            cell(k).parse::<f64>().map_err(|_| Error::Row {
                row: row_no,
                message: format!("cannot parse {name} from `{}`", cell(k)),
            })
        };
        let record = ClaimRecord {
            loss: num(0, "loss")?,
            duration: num(1, "duration")?,
            service_type: ServiceType::parse(cell(2)).ok_or_else(|| Error::Row {
                row: row_no,
                message: format!("unknown service type `{}`", cell(2)),
            })?,
            backup_activated: parse_bool(cell(3)).ok_or_else(|| Error::Row {
                row: row_no,
                message: format!("cannot parse backup indicator from `{}`", cell(3)),
            })?,
            backup_quality: num(4, "backup quality")?,
            backup_excess: num(5, "backup excess")?,
        };
        record.validate().map_err(|message| Error::Row { row: row_no, message })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ClaimDataset::new(records, claim_frequency)
}

/// Loads a claim file from disk.
pub fn load_claims(path: &Path, delimiter: u8, columns: &ColumnMap, claim_frequency: f64) -> Result<ClaimDataset> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    read_claims(std::io::BufReader::new(file), delimiter, columns, claim_frequency)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use idxcover_testkit as kit;

    fn fixture(n: usize) -> ClaimDataset {
        let csv = kit::to_csv(&kit::claims(n, 11));
        read_claims(csv.as_bytes(), b',', &ColumnMap::default(), DEFAULT_CLAIM_FREQUENCY).unwrap()
    }

    #[test]
    fn loads_all_rows() {
        assert_eq!(fixture(10_000).len(), 10_000);
    }

    #[test]
    fn singleton_dataset() {
        let text = "loss,duration,service_type,backup_activated,backup_quality,backup_excess\n12.5,2,t3,1,0.4,1\n";
        let ds = read_claims(text.as_bytes(), b',', &ColumnMap::default(), 0.06).unwrap();
        assert_eq!(ds.len(), 1);
        let d = describe(&ds, StratumFilter::All).unwrap();
        assert_eq!((d.loss.mean, d.loss.min, d.loss.max, d.loss.sd), (12.5, 12.5, 12.5, 0.0));
    }

    #[test]
    fn range_violation_reports_row() {
        let text = "loss,duration,service_type,backup_activated,backup_quality,backup_excess\n\
                    12.5,2,t3,1,0.4,1\n10,1,t1,0,1.5,0\n";
        match read_claims(text.as_bytes(), b',', &ColumnMap::default(), 0.06) {
            Err(Error::Row { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("backup quality"));
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = "loss,duration,service_type,backup_activated,backup_quality\n1,1,t1,1,0.5\n";
        match read_claims(text.as_bytes(), b',', &ColumnMap::default(), 0.06) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "backup_excess"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn unparsable_and_empty() {
        let text = "loss,duration,service_type,backup_activated,backup_quality,backup_excess\n1,abc,t1,1,0.5,0\n";
        assert!(matches!(
            read_claims(text.as_bytes(), b',', &ColumnMap::default(), 0.06),
            Err(Error::Row { row: 1, .. })
        ));
        let empty = "loss,duration,service_type,backup_activated,backup_quality,backup_excess\n";
        assert!(matches!(
            read_claims(empty.as_bytes(), b',', &ColumnMap::default(), 0.06),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn explicit_column_map_and_semicolons() {
        let text = "Y;T;X;delta;B;Lambda\n3;1.5;2;0;0.3;0\n";
        let map = ColumnMap::explicit("Y", "T", "X", "delta", "B", "Lambda");
        let ds = read_claims(text.as_bytes(), b';', &map, 0.1).unwrap();
        assert_eq!(ds.records()[0].service_type.to_string(), "t2");
        assert_eq!(ds.claim_frequency(), 0.1);
    }

    #[test]
    fn empty_filter_is_error() {
        let text = "loss,duration,service_type,backup_activated,backup_quality,backup_excess\n12.5,2,t3,1,0.4,1\n";
        let ds = read_claims(text.as_bytes(), b',', &ColumnMap::default(), 0.06).unwrap();
        assert!(matches!(describe(&ds, StratumFilter::BackupFailed), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn strata_recombine_to_full_mean() {
        let ds = fixture(3000);
        let all = describe(&ds, StratumFilter::All).unwrap();
        let on = describe(&ds, StratumFilter::BackupActivated).unwrap();
        let off = describe(&ds, StratumFilter::BackupFailed).unwrap();
        let n = all.loss.count as f64;
        let pooled = (on.loss.mean * on.loss.count as f64 + off.loss.mean * off.loss.count as f64) / n;
        assert_abs_diff_eq!(pooled, all.loss.mean, epsilon = 1e-9);
        assert!(all.loss.min <= all.loss.mean && all.loss.mean <= all.loss.max);
    }

    #[test]
    fn self_correlation_and_constant() {
        let ds = fixture(500);
        assert_abs_diff_eq!(
            correlation(&ds, Variable::Loss, Variable::Loss, StratumFilter::All).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let off = ds.filtered(StratumFilter::BackupFailed).unwrap();
        assert!(matches!(
            correlation(&off, Variable::BackupActivated, Variable::Loss, StratumFilter::All),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn annual_expectation_examples() {
        let ds = fixture(2000);
        let direct = 0.06 * ds.mean_loss();
        assert_abs_diff_eq!(ds.annual_expectation(|y| y).unwrap(), direct, epsilon = 1e-12);
        assert_abs_diff_eq!(ds.annual_expectation(|_| 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ds.annual_expectation(|y| (0.0 * y).exp()).unwrap(), 1.0, epsilon = 1e-15);
        // Linearity in g.
        let lhs = ds.annual_expectation(|y| 2.0 * y + y.sqrt()).unwrap();
        let rhs = 2.0 * ds.annual_expectation(|y| y).unwrap() + ds.annual_expectation(f64::sqrt).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        assert!(matches!(ds.annual_expectation(|y| (y * 1e6).exp()), Err(Error::Overflow { .. })));
    }

    #[test]
    fn describe_is_deterministic() {
        let a = describe(&fixture(1000), StratumFilter::All).unwrap();
        let b = describe(&fixture(1000), StratumFilter::All).unwrap();
        assert_eq!(a, b);
    }
}
