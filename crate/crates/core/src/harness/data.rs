//! Dataset ingestion: IDX image files, CSV tables and seeded synthetic
//! generators, all landing in one in-memory [`Dataset`] layout.

use crate::error::{LpssError, Result};
use crate::nn::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Labeled samples stored contiguously, one `(c, h, w)` block per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    data: Vec<f64>,
    shape: (usize, usize, usize),
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        data: Vec<f64>,
        shape: (usize, usize, usize),
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let sample_len = shape.0 * shape.1 * shape.2;
        if sample_len == 0 {
            return Err(LpssError::Data("sample shape has a zero dimension".into()));
        }
        if data.len() != labels.len() * sample_len {
            return Err(LpssError::Data(format!(
                "{} values do not fill {} samples of {} features",
                data.len(),
                labels.len(),
                sample_len
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(LpssError::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            data,
            shape,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn sample_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    /// Assembles the indexed samples into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sl);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * sl..(i + 1) * sl]);
            labels.push(self.labels[i]);
        }
        let (c, h, w) = self.shape;
        (Tensor::from_vec(data, indices.len(), c, h, w), labels)
    }

    /// First `n` samples (or all of them when fewer exist).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let sl = self.sample_len();
        Dataset {
            data: self.data[..n * sl].to_vec(),
            shape: self.shape,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Seeded shuffle-split into (train, test); the test side receives
    /// `round(n * fraction)` samples.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(LpssError::Config(format!(
                "test fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let n = self.len();
        let n_test = (n as f64 * test_fraction).round() as usize;
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |idx: &[usize]| {
            let sl = self.sample_len();
            let mut data = Vec::with_capacity(idx.len() * sl);
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                data.extend_from_slice(&self.data[i * sl..(i + 1) * sl]);
                labels.push(self.labels[i]);
            }
            Dataset {
                data,
                shape: self.shape,
                labels,
                classes: self.classes,
            }
        };
        Ok((pick(&indices[n_test..]), pick(&indices[..n_test])))
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(LpssError::Data(format!(
            "truncated at byte {}: need bytes {offset}..{end} for {what}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses a big-endian IDX image file into pixels scaled to `[0, 1]`.
/// Returns the raw values and the `(count, rows, cols)` dimensions.
pub fn load_idx_images(path: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, "the magic number")?;
    if magic != IMAGE_MAGIC {
        return Err(LpssError::Data(format!(
            "{}: expected image magic 0x{IMAGE_MAGIC:08x} at byte 0, found 0x{magic:08x}",
            path.display()
        )));
    }
    let n = read_u32_be(&bytes, 4, "the image count")? as usize;
    let rows = read_u32_be(&bytes, 8, "the row count")? as usize;
    let cols = read_u32_be(&bytes, 12, "the column count")? as usize;
    let offset = 16;
    let need = n * rows * cols;
    if bytes.len() < offset + need {
        return Err(LpssError::Data(format!(
            "truncated at byte {}: expected {need} pixel bytes from byte {offset}",
            bytes.len()
        )));
    }
    let data = bytes[offset..offset + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok((data, n, rows, cols))
}

/// Parses a big-endian IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, "the magic number")?;
    if magic != LABEL_MAGIC {
        return Err(LpssError::Data(format!(
            "{}: expected label magic 0x{LABEL_MAGIC:08x} at byte 0, found 0x{magic:08x}",
            path.display()
        )));
    }
    let n = read_u32_be(&bytes, 4, "the label count")? as usize;
    let offset = 8;
    if bytes.len() < offset + n {
        return Err(LpssError::Data(format!(
            "truncated at byte {}: expected {n} label bytes from byte {offset}",
            bytes.len()
        )));
    }
    Ok(bytes[offset..offset + n].iter().map(|&b| b as usize).collect())
}

/// Loads an images/labels IDX pair as a single-channel image dataset.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (data, n, rows, cols) = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != n {
        return Err(LpssError::Data(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(data, (1, rows, cols), labels, classes)
}

/// Which CSV column holds the class label.
#[derive(Debug, Clone)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

impl LabelColumn {
    /// A numeric string selects by position, anything else by header name.
    pub fn parse(s: &str) -> LabelColumn {
        match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        }
    }
}

/// Loads a headered CSV of numeric features plus one label column. Labels
/// that all parse as non-negative integers are used directly; otherwise
/// distinct values are numbered by first appearance. With `scale`, each
/// feature is min-max scaled to `[0, 1]` (constant columns collapse to 0).
pub fn load_csv(path: &Path, label: &LabelColumn, scale: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| LpssError::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| LpssError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let label_idx = match label {
        LabelColumn::Index(i) => {
            if *i >= headers.len() {
                return Err(LpssError::Config(format!(
                    "label column index {i} out of range for {} columns",
                    headers.len()
                )));
            }
            *i
        }
        LabelColumn::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LpssError::Config(format!("label column '{name}' not found")))?,
    };
    let feature_count = headers.len() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header occupies line 1
        let record = record.map_err(|e| LpssError::Data(format!("line {line}: {e}")))?;
        if record.len() != headers.len() {
            return Err(LpssError::Data(format!(
                "line {line}: {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(feature_count);
        for (k, cell) in record.iter().enumerate() {
            if k == label_idx {
                raw_labels.push(cell.to_string());
            } else {
                row.push(cell.trim().parse::<f64>().map_err(|_| {
                    LpssError::Data(format!(
                        "line {line}: column '{}' value '{cell}' is not numeric",
                        &headers[k]
                    ))
                })?);
            }
        }
        rows.push(row);
    }
    let (labels, classes) = encode_labels(&raw_labels);
    if scale && !rows.is_empty() {
        for k in 0..feature_count {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for row in &rows {
                lo = lo.min(row[k]);
                hi = hi.max(row[k]);
            }
            let span = hi - lo;
            for row in &mut rows {
                row[k] = if span > 0.0 { (row[k] - lo) / span } else { 0.0 };
            }
        }
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Dataset::new(data, (1, 1, feature_count), labels, classes.max(1))
}

fn encode_labels(raw: &[String]) -> (Vec<usize>, usize) {
    if let Some(direct) = raw
        .iter()
        .map(|s| s.trim().parse::<usize>().ok())
        .collect::<Option<Vec<usize>>>()
    {
        let classes = direct.iter().max().map_or(0, |&m| m + 1);
        return (direct, classes);
    }
    let mut seen: Vec<&str> = Vec::new();
    let labels = raw
        .iter()
        .map(|s| {
            if let Some(pos) = seen.iter().position(|&t| t == s.as_str()) {
                pos
            } else {
                seen.push(s);
                seen.len() - 1
            }
        })
        .collect();
    (labels, seen.len())
}

/// Two well-separated Gaussian blobs in the plane; linearly separable
/// with margin several sigma wide.
pub fn two_gaussians(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit sigma");
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_bool(0.5) as usize;
        let center = if class == 0 { -2.0 } else { 2.0 };
        data.push(center + normal.sample(&mut rng));
        data.push(center + normal.sample(&mut rng));
        labels.push(class);
    }
    Dataset::new(data, (1, 1, 2), labels, 2).expect("consistent by construction")
}

/// Feature count of the synthetic XOR dataset: two signal coordinates
/// followed by `XOR_FEATURES - 2` distractors.
pub const XOR_FEATURES: usize = 8;

/// Uniform points in [-1, 1]^8 labeled by the quadrant parity of the
/// first two coordinates: an XOR pattern that is not linearly separable,
/// padded with six irrelevant coordinates so that input selection is
/// part of the task.
pub fn xor_grid(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * XOR_FEATURES);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen::<f64>() * 2.0 - 1.0;
        let y: f64 = rng.gen::<f64>() * 2.0 - 1.0;
        data.push(x);
        data.push(y);
        for _ in 2..XOR_FEATURES {
            data.push(rng.gen::<f64>() * 2.0 - 1.0);
        }
        labels.push(((x > 0.0) ^ (y > 0.0)) as usize);
    }
    Dataset::new(data, (1, 1, XOR_FEATURES), labels, 2).expect("consistent by construction")
}
