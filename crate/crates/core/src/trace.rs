//! Activation traces: per-layer sample x neuron matrices plus the response
//! logit and sample labels.
//!
//! On disk a trace is a directory holding `manifest.json`, one raw
//! little-endian `f32` file per layer (row-major), a raw `f32` response file,
//! and one-integer-per-line label files. Activations are held in memory as
//! `f64` but every stored value is exactly representable in `f32`, so a
//! save/load round trip is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const MANIFEST_FILE: &str = "manifest.json";

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// One layer's activations, rows are samples and columns are neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatrix {
    layer_id: String,
    data: DMatrix<f64>,
}

impl LayerMatrix {
    /// Values are rounded to `f32` precision on construction.
    pub fn new(layer_id: impl Into<String>, mut data: DMatrix<f64>) -> Result<Self> {
        let layer_id = layer_id.into();
        if data.ncols() == 0 {
            return Err(Error::Data(format!("empty layer '{layer_id}'")));
        }
        for v in data.iter_mut() {
            *v = quantize(*v);
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite activation in layer '{layer_id}'"
                )));
            }
        }
        Ok(Self { layer_id, data })
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn sample_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn neuron_count(&self) -> usize {
        self.data.ncols()
    }

    /// Sub-matrix of the given rows and columns, in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.data[(rows[i], cols[j])])
    }

    pub fn rows(&self, rows: &[usize]) -> DMatrix<f64> {
        self.data.select_rows(rows)
    }
}

/// A recorded forward pass over a batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    layers: Vec<LayerMatrix>,
    response: Vec<f64>,
    prior_labels: Option<Vec<i64>>,
    posterior_labels: Option<Vec<i64>>,
    class_mask: Vec<bool>,
}

impl ActivationTrace {
    pub fn new(
        layers: Vec<LayerMatrix>,
        response: Vec<f64>,
        prior_labels: Option<Vec<i64>>,
        posterior_labels: Option<Vec<i64>>,
        class_mask: Vec<bool>,
    ) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Data("trace has no layers".into()));
        };
        let n = first.sample_count();
        for layer in &layers {
            if layer.sample_count() != n {
                return Err(Error::DimensionMismatch(format!(
                    "layer '{}' has {} rows, expected {n}",
                    layer.layer_id,
                    layer.sample_count()
                )));
            }
        }
        for (i, a) in layers.iter().enumerate() {
            if layers[..i].iter().any(|b| b.layer_id == a.layer_id) {
                return Err(Error::Data(format!("duplicate layer id '{}'", a.layer_id)));
            }
        }
        let check_len = |what: &str, len: usize| {
            if len != n {
                Err(Error::DimensionMismatch(format!(
                    "{what} has length {len}, expected {n}"
                )))
            } else {
                Ok(())
            }
        };
        check_len("response", response.len())?;
        check_len("class mask", class_mask.len())?;
        if let Some(p) = &prior_labels {
            check_len("prior labels", p.len())?;
        }
        if let Some(p) = &posterior_labels {
            check_len("posterior labels", p.len())?;
        }
        let response: Vec<f64> = response.into_iter().map(quantize).collect();
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite response".into()));
        }
        Ok(Self {
            layers,
            response,
            prior_labels,
            posterior_labels,
            class_mask,
        })
    }

    pub fn layers(&self) -> &[LayerMatrix] {
        &self.layers
    }

    pub fn sample_count(&self) -> usize {
        self.response.len()
    }

    pub fn layer_index(&self, layer_id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.layer_id == layer_id)
    }

    pub fn layer(&self, layer_id: &str) -> Result<&LayerMatrix> {
        self.layer_index(layer_id)
            .map(|i| &self.layers[i])
            .ok_or_else(|| Error::Config(format!("unknown layer id '{layer_id}'")))
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn prior_labels(&self) -> Option<&[i64]> {
        self.prior_labels.as_deref()
    }

    pub fn posterior_labels(&self) -> Option<&[i64]> {
        self.posterior_labels.as_deref()
    }

    pub fn class_mask(&self) -> &[bool] {
        &self.class_mask
    }

    /// Row indices in scope: class-masked rows, or every row in all-sample mode.
    pub fn scope_rows(&self, all_samples: bool) -> Vec<usize> {
        (0..self.sample_count())
            .filter(|&i| all_samples || self.class_mask[i])
            .collect()
    }

    /// Same trace with the prior labels replaced.
    pub fn with_prior_labels(&self, labels: Vec<i64>) -> Result<Self> {
        Self::new(
            self.layers.clone(),
            self.response.clone(),
            Some(labels),
            self.posterior_labels.clone(),
            self.class_mask.clone(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerEntry {
    pub layer_id: String,
    pub neuron_count: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub sample_count: usize,
    pub layers: Vec<LayerEntry>,
    pub response_file: String,
    pub class_mask_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_labels_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior_labels_file: Option<String>,
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn labels_text(values: impl Iterator<Item = i64>) -> Vec<u8> {
    let mut s = String::new();
    for v in values {
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s.into_bytes()
}

pub fn save_trace(trace: &ActivationTrace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = trace.sample_count();
    let mut entries = Vec::with_capacity(trace.layers.len());
    for (i, layer) in trace.layers.iter().enumerate() {
        let file = format!("layer_{i:03}.bin");
        let data = &layer.data;
        let bytes = f32_bytes((0..n).flat_map(|r| (0..data.ncols()).map(move |c| data[(r, c)])));
        atomic_write(&dir.join(&file), &bytes)?;
        entries.push(LayerEntry {
            layer_id: layer.layer_id.clone(),
            neuron_count: layer.neuron_count(),
            file,
        });
    }
    atomic_write(
        &dir.join("response.bin"),
        &f32_bytes(trace.response.iter().copied()),
    )?;
    atomic_write(
        &dir.join("class_mask.txt"),
        &labels_text(trace.class_mask.iter().map(|&b| b as i64)),
    )?;
    let mut manifest = Manifest {
        sample_count: n,
        layers: entries,
        response_file: "response.bin".into(),
        class_mask_file: "class_mask.txt".into(),
        prior_labels_file: None,
        posterior_labels_file: None,
    };
    if let Some(p) = &trace.prior_labels {
        atomic_write(&dir.join("prior_labels.txt"), &labels_text(p.iter().copied()))?;
        manifest.prior_labels_file = Some("prior_labels.txt".into());
    }
    if let Some(p) = &trace.posterior_labels {
        atomic_write(&dir.join("posterior_labels.txt"), &labels_text(p.iter().copied()))?;
        manifest.posterior_labels_file = Some("posterior_labels.txt".into());
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    atomic_write(&dir.join(MANIFEST_FILE), &json)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_f32s(path: &Path, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Data(format!(
            "size disagreement: {what} holds {} bytes, manifest implies {}",
            bytes.len(),
            expected * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite activation in {what}")));
    }
    Ok(values)
}

fn read_labels(path: &Path, expected: usize) -> Result<Vec<i64>> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))?;
    let labels = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<i64>()
                .map_err(|_| Error::Data(format!("bad label '{l}' in {}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != expected {
        return Err(Error::Data(format!(
            "size disagreement: {} holds {} labels, expected {expected}",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

pub fn load_trace(dir: &Path) -> Result<ActivationTrace> {
    let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)?;
    let n = manifest.sample_count;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let k = entry.neuron_count;
        if k == 0 {
            return Err(Error::Data(format!("empty layer '{}'", entry.layer_id)));
        }
        let values = read_f32s(&dir.join(&entry.file), n * k, &entry.layer_id)?;
        layers.push(LayerMatrix::new(
            entry.layer_id.clone(),
            DMatrix::from_row_slice(n, k, &values),
        )?);
    }
    let response = read_f32s(&dir.join(&manifest.response_file), n, "response")?;
    let class_mask = read_labels(&dir.join(&manifest.class_mask_file), n)?
        .into_iter()
        .map(|v| v != 0)
        .collect();
    let opt_labels = |file: &Option<String>| -> Result<Option<Vec<i64>>> {
        file.as_ref()
            .map(|f| read_labels(&dir.join(f), n))
            .transpose()
    };
    let prior = opt_labels(&manifest.prior_labels_file)?;
    let posterior = opt_labels(&manifest.posterior_labels_file)?;
    ActivationTrace::new(layers, response, prior, posterior, class_mask)
}

/// Import per-layer CSV files (header row, one row per sample) and an
/// optional label CSV whose header names any of `response`, `prior`,
/// `posterior`, `class_mask`. Layer ids are the file stems. Without a
/// `response` column the response is all zeros, and without `class_mask`
/// every sample is in class.
pub fn import_csv(layer_files: &[PathBuf], label_file: Option<&Path>) -> Result<ActivationTrace> {
    let mut layers = Vec::with_capacity(layer_files.len());
    for path in layer_files {
        let (_, rows) = read_numeric_csv(path)?;
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("layer{}", layers.len()));
        layers.push(LayerMatrix::new(id, DMatrix::from_row_slice(n, k, &flat))?);
    }
    let n = layers.first().map_or(0, LayerMatrix::sample_count);
    let mut response = vec![0.0; n];
    let mut prior = None;
    let mut posterior = None;
    let mut class_mask = vec![true; n];
    if let Some(path) = label_file {
        let (header, rows) = read_numeric_csv(path)?;
        if rows.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "label file has {} rows, layers have {n}",
                rows.len()
            )));
        }
        for (j, name) in header.iter().enumerate() {
            let col = rows.iter().map(|r| r[j]);
            match name.trim() {
                "response" => response = col.collect(),
                "prior" => prior = Some(col.map(|v| v as i64).collect()),
                "posterior" => posterior = Some(col.map(|v| v as i64).collect()),
                "class_mask" => class_mask = col.map(|v| v != 0.0).collect(),
                other => {
                    return Err(Error::Data(format!(
                        "unknown label column '{other}' in {}",
                        path.display()
                    )))
                }
            }
        }
    }
    ActivationTrace::new(layers, response, prior, posterior, class_mask)
}

fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Data(format!("cannot open {}: {e}", path.display())),
            _ => Error::Csv(e),
        })?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            Error::Data(format!("ragged or unreadable row in {}: {e}", path.display()))
        })?;
        let row = record
            .iter()
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "non-numeric cell '{cell}' at data row {} of {}",
                        line + 1,
                        path.display()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// A layer restricted to in-scope rows with retained columns centered and
/// scaled to unit (n-1) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedView {
    pub data: DMatrix<f64>,
    /// Per original column.
    pub means: Vec<f64>,
    /// Per original column; 0 for dropped columns.
    pub stds: Vec<f64>,
    /// Original indices of the columns in `data`, ascending.
    pub retained: Vec<usize>,
    /// Zero-variance columns.
    pub dropped: Vec<usize>,
}

pub fn standardize(m: &LayerMatrix, class_mask: &[bool]) -> Result<StandardizedView> {
    if class_mask.len() != m.sample_count() {
        return Err(Error::DimensionMismatch(format!(
            "mask length {} vs {} samples",
            class_mask.len(),
            m.sample_count()
        )));
    }
    let rows: Vec<usize> = (0..class_mask.len()).filter(|&i| class_mask[i]).collect();
    standardize_matrix(&m.rows(&rows))
}

/// Column standardization of a plain matrix (n-1 denominator).
pub fn standardize_matrix(x: &DMatrix<f64>) -> Result<StandardizedView> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "standardization needs at least 2 samples, got {n}"
        )));
    }
    let mut means = Vec::with_capacity(x.ncols());
    let mut stds = Vec::with_capacity(x.ncols());
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    for (j, col) in x.column_iter().enumerate() {
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        means.push(mean);
        if sd <= 1e-10 * mean.abs().max(1.0) {
            stds.push(0.0);
            dropped.push(j);
        } else {
            stds.push(sd);
            retained.push(j);
        }
    }
    let data = DMatrix::from_fn(n, retained.len(), |i, c| {
        let j = retained[c];
        (x[(i, j)] - means[j]) / stds[j]
    });
    Ok(StandardizedView {
        data,
        means,
        stds,
        retained,
        dropped,
    })
}
