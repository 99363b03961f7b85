//! Sparsity measures and layer-level summaries.

use crate::error::{LpssError, Result};

/// Hoyer sparsity: `(sqrt(d) - ||v||_1 / ||v||_2) / (sqrt(d) - 1)`.
///
/// 0 for a flat vector (all components equal in magnitude), 1 in the limit
/// of a single nonzero component. Invariant to scaling, sign flips, and
/// permutation. Undefined for `d < 2` (the denominator vanishes) and for
/// the all-zero vector.
pub fn hoyer_sparsity(v: &[f64]) -> Result<f64> {
    let d = v.len();
    if d < 2 {
        return Err(LpssError::Domain(format!(
            "hoyer sparsity needs at least 2 components, got {d}"
        )));
    }
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    let l2: f64 = crate::geometry::lp_norm(v, 2.0);
    if l2 == 0.0 {
        return Err(LpssError::Degenerate(
            "hoyer sparsity of the zero vector is undefined".into(),
        ));
    }
    let sqrt_d = (d as f64).sqrt();
    Ok((sqrt_d - l1 / l2) / (sqrt_d - 1.0))
}

/// Fraction of exactly-zero entries.
pub fn standard_sparsity(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().filter(|&&x| x == 0.0).count() as f64 / v.len() as f64
}

/// Mean Hoyer sparsity across a layer's neurons, one weight vector per row.
///
/// Each row spans the full slot set; masked slots appear as exact zeros and
/// push the measure toward 1. Rows that are entirely zero are skipped.
/// Returns the mean and the number of rows it averaged.
pub fn layer_mean_hoyer(rows: &[Vec<f64>]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for row in rows {
        match hoyer_sparsity(row) {
            Ok(h) => {
                total += h;
                counted += 1;
            }
            Err(LpssError::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(LpssError::Degenerate(
            "no nonzero rows to average hoyer sparsity over".into(),
        ));
    }
    Ok((total / counted as f64, counted))
}

/// Pearson correlation between two equally long slot vectors.
///
/// `None` when either side has zero variance: the coefficient is 0/0 there,
/// and reporting it as any number would be an invention.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Pairwise neuron-to-neuron weight correlations within a layer.
///
/// Entry `(i, j)` for `i < j` is the Pearson correlation of the two
/// neurons' full slot vectors; `None` marks degenerate pairs.
pub fn neuron_cross_correlation(rows: &[Vec<f64>]) -> Vec<(usize, usize, Option<f64>)> {
    let mut out = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            out.push((i, j, pearson_correlation(&rows[i], &rows[j])));
        }
    }
    out
}

/// Per-layer sparsity summary used by reports and training logs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerSparsityReport {
    pub layer: String,
    pub neurons: usize,
    pub slots_per_neuron: usize,
    pub active_fraction: f64,
    pub standard_sparsity: f64,
    pub mean_hoyer: Option<f64>,
}

impl LayerSparsityReport {
    pub fn from_rows(layer: impl Into<String>, rows: &[Vec<f64>]) -> Self {
        let neurons = rows.len();
        let slots = rows.first().map_or(0, |r| r.len());
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let std_sp = standard_sparsity(&flat);
        let mean_hoyer = layer_mean_hoyer(rows).ok().map(|(m, _)| m);
        LayerSparsityReport {
            layer: layer.into(),
            neurons,
            slots_per_neuron: slots,
            active_fraction: 1.0 - std_sp,
            standard_sparsity: std_sp,
            mean_hoyer,
        }
    }
}
