use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use scoreblend::metrics::write_curve_csv;
use scoreblend::CurvePoint;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::HarnessResult;

/// Bumped whenever a CSV or manifest column changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_HEADER: &str = "method,metric,seed,n_ref,dim,sigma_rel,value,status";
pub const CURVE_HEADER: &str = "t,value,ess_mean,kept";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// Every time point fell below the ESS floor.
    DroppedByEss,
    /// The cell could not be evaluated; see the note.
    Invalid,
}

/// One (method, metric) value for one configuration point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub metric: String,
    pub seed: u64,
    pub n_ref: Option<usize>,
    pub dim: Option<usize>,
    pub sigma_rel: Option<f64>,
    pub value: Option<f64>,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Where a cell sits in the experiment grid.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellKey {
    pub seed: u64,
    pub n_ref: Option<usize>,
    pub dim: Option<usize>,
    pub sigma_rel: Option<f64>,
}

impl CellKey {
    pub fn cell(&self, method: &str, metric: &str, value: f64) -> Cell {
        Cell {
            method: method.into(),
            metric: metric.into(),
            seed: self.seed,
            n_ref: self.n_ref,
            dim: self.dim,
            sigma_rel: self.sigma_rel,
            value: Some(value),
            status: CellStatus::Ok,
            note: None,
        }
    }

    pub fn failed(&self, method: &str, metric: &str, status: CellStatus, note: impl Into<String>) -> Cell {
        Cell {
            value: None,
            status,
            note: Some(note.into()),
            ..self.cell(method, metric, 0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCurve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub cells: Vec<Cell>,
    pub curves: Vec<NamedCurve>,
    pub wall_clock_seconds: f64,
    /// Score evaluations spent inside reverse samplers.
    pub nfe: u64,
    /// Target-gradient evaluations spent inside MALA.
    pub mala_gradient_evals: u64,
}

impl RunResult {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment: config.experiment.name().into(),
            config_hash: config.hash(),
            config: config.clone(),
            cells: Vec::new(),
            curves: Vec::new(),
            wall_clock_seconds: 0.0,
            nfe: 0,
            mala_gradient_evals: 0,
        }
    }

    /// True when no cell is marked invalid.
    pub fn all_complete(&self) -> bool {
        self.cells.iter().all(|c| c.status != CellStatus::Invalid)
    }

    /// Value of the unique matching cell, if any.
    pub fn value(&self, method: &str, metric: &str, key: &CellKey) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| {
                c.method == method
                    && c.metric == metric
                    && c.seed == key.seed
                    && c.n_ref == key.n_ref
                    && c.dim == key.dim
                    && c.sigma_rel == key.sigma_rel
            })
            .and_then(|c| c.value)
    }

    pub fn curve(&self, name: &str) -> Option<&NamedCurve> {
        self.curves.iter().find(|c| c.name == name)
    }

    /// Sort cells and curves so the output does not depend on the order in
    /// which parallel cells finished.
    pub fn canonicalise(&mut self) {
        let key = |c: &Cell| {
            (
                c.dim.unwrap_or(0),
                c.sigma_rel.map(f64::to_bits).unwrap_or(0),
                c.n_ref.unwrap_or(0),
                c.seed,
                c.method.clone(),
                c.metric.clone(),
            )
        };
        self.cells.sort_by_key(key);
        self.curves.sort_by(|a, b| a.name.cmp(&b.name));
    }

    pub fn write_metrics_csv<W: Write>(&self, writer: W) -> HarnessResult<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(METRICS_HEADER.split(','))?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for c in &self.cells {
            let status = serde_json::to_value(c.status)?.as_str().unwrap_or_default().to_owned();
            w.write_record([
                c.method.clone(),
                c.metric.clone(),
                c.seed.to_string(),
                opt(c.n_ref.map(|v| v.to_string())),
                opt(c.dim.map(|v| v.to_string())),
                opt(c.sigma_rel.map(|v| v.to_string())),
                opt(c.value.map(|v| v.to_string())),
                status,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `result.json`, `metrics.csv` and `curves/<name>.csv` under
    /// `dir`, creating it if needed. Curve names may contain `/`, which is
    /// mapped to `__` in file names.
    pub fn write_to(&self, dir: &Path) -> HarnessResult<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let manifest = dir.join("result.json");
        fs::write(&manifest, serde_json::to_string_pretty(self)?)?;
        written.push(manifest);
        let metrics = dir.join("metrics.csv");
        self.write_metrics_csv(fs::File::create(&metrics)?)?;
        written.push(metrics);
        if !self.curves.is_empty() {
            let cdir = dir.join("curves");
            fs::create_dir_all(&cdir)?;
            for c in &self.curves {
                let path = cdir.join(format!("{}.csv", c.name.replace('/', "__")));
                let file = fs::File::create(&path)?;
                if c.points.is_empty() {
                    writeln!(&file, "{CURVE_HEADER}")?;
                } else {
                    write_curve_csv(&c.points, file)?;
                }
                written.push(path);
            }
        }
        Ok(written)
    }
}
