//! CSV and manifest emission.
//!
//! Integers are written as integers, reals with 17 significant digits
//! (`{:.16e}`, round-trippable), undefined values as empty fields.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::accounting::Category;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{IntervalPoint, PlaneGrid, SimilarityMatrix, SweepRow};
use crate::fastforward::{StageRecord, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub file: &'static str,
    pub columns: &'static [&'static str],
}

pub const TRAINLOG: Schema = Schema {
    file: "trainlog.csv",
    columns: &[
        "step",
        "kind",
        "train_loss",
        "val_loss",
        "test_loss",
        "flops_total",
        "flops_forward",
        "flops_backward",
        "flops_opt",
        "flops_ff_val",
        "flops_ff_set",
        "flops_eval",
        "wall_ms",
    ],
};
pub const STAGES: Schema = Schema {
    file: "stages.csv",
    columns: &["stage", "entry_step", "tau_star", "evals", "grad_norm", "cond_mean", "batch_consistency"],
};
pub const PLANE: Schema = Schema {
    file: "plane.csv",
    columns: &["a", "b", "loss"],
};
pub const GRADSIM: Schema = Schema {
    file: "gradsim.csv",
    columns: &["t", "s", "cosine"],
};
pub const SWEEP: Schema = Schema {
    file: "sweep.csv",
    columns: &["key", "baseline_flops", "ff_flops", "savings"],
};
/// Full line-search curves from `ff-probe`.
pub const FFPROBE: Schema = Schema {
    file: "ffprobe.csv",
    columns: &["stage", "tau", "val_loss"],
};
pub const INTERVALS: Schema = Schema {
    file: "intervals.csv",
    columns: &["interval", "tau_star"],
};
/// Per-matrix gradient condition numbers at each stage entry.
pub const CONDITION: Schema = Schema {
    file: "condition.csv",
    columns: &["stage", "param", "cond"],
};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Real(f64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format!("{v:.16e}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Real)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

/// CSV bytes for `rows` under `schema`; any row of the wrong width is a
/// contract error.
pub fn render_csv(schema: &Schema, rows: &[Vec<Cell>]) -> Result<Vec<u8>> {
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != schema.columns.len()) {
        return Err(Error::contract(format!(
            "{}: row {i} has {} fields, schema has {}",
            schema.file,
            r.len(),
            schema.columns.len()
        )));
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(schema.columns).map_err(ser)?;
    for r in rows {
        w.write_record(r.iter().map(Cell::render)).map_err(ser)?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

pub fn write_csv(path: impl AsRef<Path>, schema: &Schema, rows: &[Vec<Cell>]) -> Result<()> {
    let bytes = render_csv(schema, rows)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn trainlog_rows(log: &TrainLog) -> Vec<Vec<Cell>> {
    log.rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.step.into(),
                Cell::Text(r.kind.as_str().into()),
                r.train_loss.into(),
                r.val_loss.into(),
                r.test_loss.into(),
                r.flops.total().into(),
            ];
            row.extend(Category::ALL.iter().map(|&c| Cell::Int(r.flops.get(c))));
            row.push(Cell::Real(r.wall_ms));
            row
        })
        .collect()
}

pub fn stage_rows(stages: &[StageRecord]) -> Vec<Vec<Cell>> {
    stages
        .iter()
        .map(|s| {
            vec![
                s.index.into(),
                s.entry_step.into(),
                s.tau_star.into(),
                s.forward_passes.into(),
                s.grad_norm.into(),
                s.cond_mean.into(),
                s.batch_consistency.into(),
            ]
        })
        .collect()
}

pub fn condition_rows(stages: &[StageRecord]) -> Vec<Vec<Cell>> {
    stages
        .iter()
        .flat_map(|s| {
            s.cond_per_matrix
                .iter()
                .map(move |(name, c)| vec![s.index.into(), Cell::Text(name.clone()), (*c).into()])
        })
        .collect()
}

pub fn plane_rows(grid: &PlaneGrid) -> Vec<Vec<Cell>> {
    grid.cells()
        .map(|(a, b, l)| vec![Cell::Real(a), Cell::Real(b), Cell::Real(l)])
        .collect()
}

pub fn gradsim_rows(m: &SimilarityMatrix) -> Vec<Vec<Cell>> {
    m.entries
        .iter()
        .map(|e| vec![e.t.into(), e.s.into(), e.cosine.into()])
        .collect()
}

pub fn sweep_rows(rows: &[SweepRow]) -> Vec<Vec<Cell>> {
    rows.iter()
        .map(|r| {
            vec![
                Cell::Text(r.key.clone()),
                r.baseline_flops.into(),
                r.ff_flops.into(),
                r.savings.into(),
            ]
        })
        .collect()
}

pub fn ffprobe_rows(stages: &[StageRecord]) -> Vec<Vec<Cell>> {
    stages
        .iter()
        .flat_map(|s| {
            s.val_losses
                .iter()
                .enumerate()
                .map(move |(tau, &l)| vec![s.index.into(), tau.into(), Cell::Real(l)])
        })
        .collect()
}

pub fn interval_rows(points: &[IntervalPoint]) -> Vec<Vec<Cell>> {
    points
        .iter()
        .map(|p| vec![p.interval.into(), p.tau_star.map_or(Cell::Empty, Cell::from)])
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
    /// File name → SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

/// An output directory that remembers the hash of every file written to it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(OutputDir {
            root,
            hashes: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.hashes.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Writes `rows` to `<prefix><schema file>`, e.g. `ff/trainlog.csv`.
    pub fn csv(&mut self, prefix: &str, schema: &Schema, rows: &[Vec<Cell>]) -> Result<PathBuf> {
        let bytes = render_csv(schema, rows)?;
        self.put(&format!("{prefix}{}", schema.file), &bytes)
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
        bytes.push(b'\n');
        self.put(name, &bytes)
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(self, command: &str, cfg: &RunConfig) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            seed: cfg.seed,
            config_sha256: sha256_hex(cfg.to_toml()?.as_bytes()),
            config: cfg.clone(),
            outputs: self.hashes.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
        bytes.push(b'\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}
