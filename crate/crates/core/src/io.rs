//! Text and JSON file formats.
//!
//! Counts files hold one entry per line: `N` whitespace-separated 1-based
//! indices followed by a nonnegative integer count. Observation-set files are
//! the same without the count column. Lines starting with `#` are comments,
//! except that a `# shape: I1 I2 ...` line fixes the tensor shape; without
//! one the shape is taken from the largest index seen in each mode.
//!
//! Models are JSON documents with `shape`, `rank`, `lambda` and `factors`,
//! where each factor is a list of rows. Floats are written in shortest
//! round-trip form, so a model read back is bit-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{EstimatorKind, FitResult};
use crate::optim::Status;
use crate::tensor::{KruskalModel, ObservationSet, Shape, SparseCountTensor};

struct RawEntries {
    shape: Option<Vec<usize>>,
    /// 0-based indices and the value column, when present.
    rows: Vec<(Vec<usize>, Option<u64>)>,
    order: usize,
}

fn parse_entries(path: &Path, text: &str, with_value: bool) -> Result<RawEntries> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut shape: Option<Vec<usize>> = None;
    let mut rows = Vec::new();
    let mut order: Option<usize> = None;
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(dims) = comment.trim().strip_prefix("shape:") {
                let dims = dims
                    .split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|e| err(lineno, format!("bad shape '{s}': {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let n_idx = if with_value { fields.len().saturating_sub(1) } else { fields.len() };
        if n_idx == 0 {
            return Err(err(lineno, "expected at least one index".into()));
        }
        match order {
            None => order = Some(n_idx),
            Some(o) if o != n_idx => {
                return Err(err(lineno, format!("expected {o} indices, found {n_idx}")));
            }
            _ => {}
        }
        let idx = fields[..n_idx]
            .iter()
            .map(|s| match s.parse::<usize>() {
                Ok(0) => Err(err(lineno, "indices are 1-based; found 0".into())),
                Ok(v) => Ok(v - 1),
                Err(e) => Err(err(lineno, format!("bad index '{s}': {e}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let value = if with_value {
            let s = fields[n_idx];
            Some(
                s.parse::<u64>()
                    .map_err(|e| err(lineno, format!("bad count '{s}': {e}")))?,
            )
        } else {
            None
        };
        rows.push((idx, value));
    }
    let order = match (order, &shape) {
        (Some(o), _) => o,
        (None, Some(s)) => s.len(),
        (None, None) => {
            return Err(err(0, "no entries and no shape header".into()));
        }
    };
    Ok(RawEntries { shape, rows, order })
}

fn resolve_shape(path: &Path, raw: &RawEntries) -> Result<Shape> {
    let dims = match &raw.shape {
        Some(d) => {
            if d.len() != raw.order {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("shape header has {} modes, entries have {}", d.len(), raw.order),
                });
            }
            d.clone()
        }
        None => {
            let mut d = vec![0usize; raw.order];
            for (idx, _) in &raw.rows {
                for (m, &i) in d.iter_mut().zip(idx) {
                    *m = (*m).max(i + 1);
                }
            }
            d
        }
    };
    Shape::new(dims)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn linearize_rows(path: &Path, shape: &Shape, rows: &[(Vec<usize>, Option<u64>)]) -> Result<Vec<usize>> {
    rows.iter()
        .map(|(idx, _)| shape.linearize(idx))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
}

/// Parses a counts file. Explicit zero counts are accepted and dropped.
/// `shape` overrides any header or inferred shape.
pub fn read_counts(path: impl AsRef<Path>, shape: Option<&Shape>) -> Result<SparseCountTensor> {
    let path = path.as_ref();
    let raw = parse_entries(path, &read_text(path)?, true)?;
    let shape = match shape {
        Some(s) => s.clone(),
        None => resolve_shape(path, &raw)?,
    };
    let lin = linearize_rows(path, &shape, &raw.rows)?;
    let entries = lin
        .into_iter()
        .zip(&raw.rows)
        .map(|(l, (_, v))| (l, v.expect("value column parsed")))
        .collect();
    SparseCountTensor::from_linear(shape, entries)
}

/// Parses an observation-set file.
pub fn read_observation_set(path: impl AsRef<Path>, shape: Option<&Shape>) -> Result<ObservationSet> {
    let path = path.as_ref();
    let raw = parse_entries(path, &read_text(path)?, false)?;
    let shape = match shape {
        Some(s) => s.clone(),
        None => resolve_shape(path, &raw)?,
    };
    let lin = linearize_rows(path, &shape, &raw.rows)?;
    ObservationSet::new(shape, lin)
}

fn write_lines(path: &Path, shape: &Shape, rows: impl Iterator<Item = (usize, Option<u64>)>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let dims: Vec<String> = shape.dims().iter().map(|d| d.to_string()).collect();
    let mut body = format!("# shape: {}\n", dims.join(" "));
    let mut idx = vec![0usize; shape.order()];
    for (lin, value) in rows {
        shape.delinearize_into(lin, &mut idx);
        let cols: Vec<String> = idx.iter().map(|i| (i + 1).to_string()).collect();
        body.push_str(&cols.join(" "));
        if let Some(v) = value {
            body.push(' ');
            body.push_str(&v.to_string());
        }
        body.push('\n');
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_counts(path: impl AsRef<Path>, x: &SparseCountTensor) -> Result<()> {
    write_lines(path.as_ref(), x.shape(), x.iter().map(|(l, v)| (l, Some(v))))
}

pub fn write_observation_set(path: impl AsRef<Path>, set: &ObservationSet) -> Result<()> {
    write_lines(path.as_ref(), set.shape(), set.indices().iter().map(|&l| (l, None)))
}

/// JSON form of a [`KruskalModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub shape: Vec<usize>,
    pub rank: usize,
    pub lambda: Vec<f64>,
    /// One `I_n × R` matrix per mode, as a list of rows.
    pub factors: Vec<Vec<Vec<f64>>>,
}

impl From<&KruskalModel> for ModelDoc {
    fn from(m: &KruskalModel) -> Self {
        ModelDoc {
            shape: m.shape().dims().to_vec(),
            rank: m.rank(),
            lambda: m.weights().to_vec(),
            factors: (0..m.shape().order())
                .map(|n| m.factor_rows(n).map(|r| r.to_vec()).collect())
                .collect(),
        }
    }
}

impl ModelDoc {
    pub fn into_model(self) -> Result<KruskalModel> {
        let shape = Shape::new(self.shape)?;
        if self.factors.len() != shape.order() {
            return Err(Error::contract(format!(
                "{} factor matrices for an order-{} shape",
                self.factors.len(),
                shape.order()
            )));
        }
        let mut mats = Vec::with_capacity(shape.order());
        for (n, rows) in self.factors.into_iter().enumerate() {
            if rows.len() != shape.dims()[n] || rows.iter().any(|r| r.len() != self.rank) {
                return Err(Error::contract(format!(
                    "factor {n} is not {} x {}",
                    shape.dims()[n],
                    self.rank
                )));
            }
            mats.push(rows.into_iter().flatten().collect());
        }
        if self.lambda.len() != self.rank {
            return Err(Error::contract("lambda length differs from rank"));
        }
        KruskalModel::new(shape, self.lambda, mats)
    }
}

pub fn model_to_json(model: &KruskalModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelDoc::from(model))?)
}

pub fn model_from_json(text: &str) -> Result<KruskalModel> {
    serde_json::from_str::<ModelDoc>(text)?.into_model()
}

pub fn write_model(path: impl AsRef<Path>, model: &KruskalModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<KruskalModel> {
    let path = path.as_ref();
    model_from_json(&read_text(path)?)
}

/// JSON form of a [`FitResult`], with the model inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDoc {
    pub method: EstimatorKind,
    pub final_nll: f64,
    pub iterations: usize,
    pub status: Status,
    pub rel_error: Option<f64>,
    pub truth_nll: Option<f64>,
    pub objective_trace: Vec<f64>,
    pub model: ModelDoc,
}

impl From<&FitResult> for FitDoc {
    fn from(r: &FitResult) -> Self {
        FitDoc {
            method: r.kind,
            final_nll: r.final_nll,
            iterations: r.iterations,
            status: r.status,
            rel_error: r.rel_error,
            truth_nll: r.truth_nll,
            objective_trace: r.objective_trace.clone(),
            model: ModelDoc::from(&r.model),
        }
    }
}

pub fn write_fit_result(path: impl AsRef<Path>, result: &FitResult) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&FitDoc::from(result))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
