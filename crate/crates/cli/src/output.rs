//! Output directory handling: CSV tables, JSON documents and the run manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Config;
use crate::error::CliError;

/// One CSV cell.
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) => format!("{x}"),
            Cell::Int(n) => n.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<u64> for Cell {
    fn from(n: u64) -> Self {
        Cell::Int(n)
    }
}

impl From<usize> for Cell {
    fn from(n: usize) -> Self {
        Cell::Int(n as u64)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Text(b.to_string())
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(o: Option<T>) -> Self {
        o.map_or(Cell::Empty, Into::into)
    }
}

#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($crate::output::Cell::from($x)),*] };
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    status: &'a str,
    seed: u64,
    overrides: &'a [String],
    dataset: Option<DatasetInfo>,
    inputs: &'a [String],
    outputs: &'a [String],
    config: &'a Config,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetInfo {
    pub path: String,
    pub rows: usize,
}

/// Collects the files written by one command.
pub struct Run {
    pub command: String,
    pub config: Config,
    pub overrides: Vec<String>,
    pub dataset: Option<DatasetInfo>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output { path: path.to_path_buf(), source }
}

impl Run {
    pub fn new(command: &str, config: Config, overrides: Vec<String>) -> Result<Self, CliError> {
        let out = config.run.out.clone();
        std::fs::create_dir_all(&out).map_err(io_err(&out))?;
        Ok(Self { command: command.into(), config, overrides, dataset: None, inputs: Vec::new(), outputs: Vec::new() })
    }

    pub fn out(&self) -> &Path {
        &self.config.run.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }

    pub fn seed(&self) -> u64 {
        self.config.run.seed
    }

    pub fn note_input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let to_err = |e: csv::Error| CliError::Output { path: path.clone(), source: std::io::Error::other(e) };
        let mut w = csv::Writer::from_path(&path).map_err(to_err)?;
        w.write_record(header).map_err(to_err)?;
        for r in rows {
            debug_assert_eq!(r.len(), header.len());
            w.write_record(r.iter().map(Cell::render)).map_err(to_err)?;
        }
        w.flush().map_err(io_err(&path))?;
        self.record(name);
        Ok(())
    }

    pub fn text(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(&path, content).map_err(io_err(&path))?;
        self.record(name);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(idxcover::Error::from)?;
        self.text(name, &(text + "\n"))
    }

    /// Writes `manifest-<command>.json`.
    pub fn finish(mut self, status: &str) -> Result<(), CliError> {
        let name = format!("manifest-{}.json", self.command);
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            status,
            seed: self.config.run.seed,
            overrides: &self.overrides,
            dataset: self.dataset.clone(),
            inputs: &self.inputs,
            outputs: &self.outputs,
            config: &self.config,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(idxcover::Error::from)? + "\n";
        let path = self.path(&name);
        std::fs::write(&path, text).map_err(io_err(&path))?;
        self.outputs.push(name);
        Ok(())
    }
}
