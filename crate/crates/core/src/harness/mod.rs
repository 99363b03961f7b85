//! Experiment harness: run configuration, deterministic seed derivation,
//! dataset wiring, checkpoints, and the training loop itself.
//!
//! Every random decision in a run is drawn from a stream derived from the
//! single master seed, a purpose tag, and a counter, so resuming from a
//! checkpoint never needs to persist generator internals: the stream for
//! epoch 7's shuffle is recomputable from `(seed, "shuffle", 7)` alone.

pub mod checkpoint;
pub mod data;
pub mod train;

use crate::error::{LpssError, Result};
use crate::geometry::LpConstraint;
use crate::nn::{LayerSpec, NetworkSpec};
use crate::optim::LrSchedule;
use data::{Dataset, LabelColumn};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for one named random stream. FNV-1a folds the tag into the
/// master seed, then two splitmix64 rounds separate the counter values,
/// so `("shuffle", 3)` and `("tick", 3)` never share a stream.
pub fn derive_seed(master: u64, tag: &str, counter: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(master ^ h) ^ counter)
}

/// Where the samples come from. Paths are checked up front so a typo
/// fails before any compute happens.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Big-endian IDX image/label pairs. `limit`, when set, keeps only
    /// the first `limit` samples of each side for desk-scale runs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// Headered CSV with one sample per row; `label` selects the target
    /// column by name or zero-based index.
    Csv {
        path: PathBuf,
        label: String,
        #[serde(default)]
        scale: bool,
        test_fraction: f64,
    },
    /// Two seeded unit Gaussians centered at (+2,+2) and (-2,-2).
    TwoGaussians { n: usize, test_fraction: f64 },
    /// Uniform points in the unit square labeled by XOR of the halves.
    XorGrid { n: usize, test_fraction: f64 },
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let need = |path: &Path, field: &str| {
            if path.as_os_str().is_empty() || !path.is_file() {
                return Err(LpssError::Config(format!(
                    "dataset.{field}: no such file: {}",
                    path.display()
                )));
            }
            Ok(())
        };
        let fraction = |f: f64| {
            if !(0.0 < f && f < 1.0) {
                return Err(LpssError::Config(format!(
                    "dataset.test_fraction must lie in (0, 1), got {f}"
                )));
            }
            Ok(())
        };
        match self {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => {
                need(train_images, "train_images")?;
                need(train_labels, "train_labels")?;
                need(test_images, "test_images")?;
                need(test_labels, "test_labels")?;
                if *limit == Some(0) {
                    return Err(LpssError::Config("dataset.limit must be >= 1".into()));
                }
                Ok(())
            }
            DatasetConfig::Csv {
                path,
                test_fraction,
                ..
            } => {
                need(path, "path")?;
                fraction(*test_fraction)
            }
            DatasetConfig::TwoGaussians { n, test_fraction }
            | DatasetConfig::XorGrid { n, test_fraction } => {
                if *n < 10 {
                    return Err(LpssError::Config(format!(
                        "dataset.n must be >= 10 to split, got {n}"
                    )));
                }
                fraction(*test_fraction)
            }
        }
    }

    /// Materializes the `(train, test)` pair. Synthetic draws and the CSV
    /// split take their seeds from dedicated streams off the master seed.
    pub fn load(&self, master_seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => {
                let mut train = data::load_idx_pair(train_images, train_labels)?;
                let mut test = data::load_idx_pair(test_images, test_labels)?;
                if let Some(n) = limit {
                    train = train.take(*n);
                    test = test.take(*n);
                }
                Ok((train, test))
            }
            DatasetConfig::Csv {
                path,
                label,
                scale,
                test_fraction,
            } => {
                let full = data::load_csv(path, &LabelColumn::parse(label), *scale)?;
                full.split(*test_fraction, derive_seed(master_seed, "split", 0))
            }
            DatasetConfig::TwoGaussians { n, test_fraction } => {
                data::two_gaussians(*n, derive_seed(master_seed, "data", 0))
                    .split(*test_fraction, derive_seed(master_seed, "split", 0))
            }
            DatasetConfig::XorGrid { n, test_fraction } => {
                data::xor_grid(*n, derive_seed(master_seed, "data", 0))
                    .split(*test_fraction, derive_seed(master_seed, "split", 0))
            }
        }
    }
}

/// Either a named preset architecture or an explicit layer stack.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Preset {
        name: String,
    },
    Custom {
        input: [usize; 3],
        layers: Vec<LayerSpec>,
    },
}

impl ModelConfig {
    pub fn resolve(&self) -> Result<NetworkSpec> {
        let spec = match self {
            ModelConfig::Preset { name } => preset_spec(name)?,
            ModelConfig::Custom { input, layers } => NetworkSpec {
                input: *input,
                layers: layers.clone(),
            },
        };
        spec.output_shapes()?;
        Ok(spec)
    }
}

/// Built-in architectures. `toy-mlp` takes the 8 features of the
/// synthetic sets; the others take 28x28 grayscale images.
pub fn preset_spec(name: &str) -> Result<NetworkSpec> {
    let dense = |neurons, p| LayerSpec::Dense {
        neurons,
        bias: true,
        p,
    };
    let conv = |filters, kernel, stride, padding, bias, p| LayerSpec::Conv2d {
        filters,
        kernel,
        stride,
        padding,
        bias,
        p,
    };
    let pool = |kernel| LayerSpec::MaxPool {
        kernel,
        stride: None,
    };
    let spec = match name {
        // Three dense banks at a mildly sparsifying exponent; the first
        // layer benefits most since only two of its eight inputs carry
        // signal on the synthetic sets.
        "toy-mlp" => NetworkSpec {
            input: [1, 1, 8],
            layers: vec![
                dense(64, 1.5),
                LayerSpec::Relu,
                dense(64, 1.5),
                LayerSpec::Relu,
                dense(2, 1.5),
            ],
        },
        // Two conv stages then a classifier; 28 -> 26 -> 13 -> 11 -> 5,
        // so the flattened features number 16 * 5 * 5 = 400.
        "mnist-small" => NetworkSpec {
            input: [1, 28, 28],
            layers: vec![
                conv(8, 3, 1, 0, true, 2.0),
                LayerSpec::Relu,
                pool(2),
                conv(16, 3, 1, 0, true, 1.7),
                LayerSpec::Relu,
                pool(2),
                dense(10, 1.5),
            ],
        },
        // Full-size stack for 28x28 digits: three 3x3 conv banks with two
        // pooling stages (28 -> 26 -> 24 -> 12 -> 10 -> 5), then dense
        // 400 -> 256 -> 64 -> 10.
        "mnist-table" => NetworkSpec {
            input: [1, 28, 28],
            layers: vec![
                conv(8, 3, 1, 0, true, 2.0),
                LayerSpec::Relu,
                conv(12, 3, 1, 0, true, 2.0),
                LayerSpec::Relu,
                pool(2),
                conv(16, 3, 1, 0, true, 2.0),
                LayerSpec::Relu,
                pool(2),
                dense(256, 2.0),
                LayerSpec::Relu,
                dense(64, 2.0),
                LayerSpec::Relu,
                dense(10, 2.0),
            ],
        },
        // Batch-normalized stack: 28 -> 14 -> 14 -> 7 -> 7 across the conv
        // stages, then dense 3136 -> 512 -> 64 -> 10. Conv biases stay off
        // because the following normalization would cancel them.
        "fashion-table" => NetworkSpec {
            input: [1, 28, 28],
            layers: vec![
                conv(16, 5, 2, 2, false, 2.0),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                conv(32, 3, 1, 1, false, 2.0),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                pool(2),
                conv(64, 3, 1, 1, false, 2.0),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                dense(512, 2.0),
                LayerSpec::Relu,
                dense(64, 2.0),
                LayerSpec::Relu,
                dense(10, 2.0),
            ],
        },
        other => {
            return Err(LpssError::Config(format!(
                "unknown preset {other:?}; available: toy-mlp, mnist-small, mnist-table, fashion-table"
            )))
        }
    };
    Ok(spec)
}

/// Replaces the sphere exponent of each trainable layer, in stack order.
/// The override list must name exactly one exponent per trainable layer.
pub fn apply_p_overrides(spec: &mut NetworkSpec, p_per_layer: &[f64]) -> Result<()> {
    let slots: Vec<&mut f64> = spec
        .layers
        .iter_mut()
        .filter_map(|layer| match layer {
            LayerSpec::Dense { p, .. } | LayerSpec::Conv2d { p, .. } => Some(p),
            _ => None,
        })
        .collect();
    if slots.len() != p_per_layer.len() {
        return Err(LpssError::Config(format!(
            "p_per_layer has {} entries but the model has {} trainable layers",
            p_per_layer.len(),
            slots.len()
        )));
    }
    for (slot, &p) in slots.into_iter().zip(p_per_layer) {
        LpConstraint::new(p)?;
        *slot = p;
    }
    Ok(())
}

/// Optimizer family and its hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Lpsgd,
    LpsgdM {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

fn default_gamma() -> f64 {
    0.9
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerConfig::LpsgdM { gamma } = self {
            if !(0.0..1.0).contains(gamma) {
                return Err(LpssError::Config(format!(
                    "optimizer.gamma must lie in [0, 1), got {gamma}"
                )));
            }
        }
        Ok(())
    }
}

/// Mask-evolution knobs as configured. `interval: null` means one tick
/// per epoch (the batch count is only known once the data is loaded).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    #[serde(default)]
    pub interval: Option<u64>,
    pub alpha_drop: f64,
    pub t_end: u64,
    #[serde(default = "default_tau_gap")]
    pub tau_gap: f64,
    pub s_expect: f64,
    pub s_init: f64,
}

fn default_tau_gap() -> f64 {
    crate::evolution::DEFAULT_TAU_GAP
}

impl EvolutionConfig {
    pub fn to_schedule(&self, batches_per_epoch: u64) -> Result<crate::evolution::EvolutionSchedule> {
        let mut schedule = crate::evolution::EvolutionSchedule::new(
            self.interval.unwrap_or(batches_per_epoch.max(1)),
            self.alpha_drop,
            self.t_end,
            self.s_expect,
            self.s_init,
        )?;
        schedule.tau_gap = self.tau_gap;
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == Some(0) {
            return Err(LpssError::Config("evolution.interval must be >= 1".into()));
        }
        self.to_schedule(1).map(|_| ())
    }
}

/// Complete description of one training run. Deserialized strictly: an
/// unknown key anywhere is a config error, not a silent default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Per-trainable-layer sphere exponents overriding the model's own.
    #[serde(default)]
    pub p_per_layer: Option<Vec<f64>>,
    pub optimizer: OptimizerConfig,
    pub lr: LrSchedule,
    #[serde(default)]
    pub evolution: Option<EvolutionConfig>,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Checkpoint to continue from; the stored seed and structure must
    /// match this config.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text)
            .map_err(|e| LpssError::Config(format!("bad run config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            LpssError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    /// Resolved model with any `p_per_layer` override applied.
    pub fn model_spec(&self) -> Result<NetworkSpec> {
        let mut spec = self.model.resolve()?;
        if let Some(ps) = &self.p_per_layer {
            apply_p_overrides(&mut spec, ps)?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model_spec()?;
        self.optimizer.validate()?;
        self.lr.validate()?;
        if let Some(evo) = &self.evolution {
            evo.validate()?;
        }
        if self.batch_size == 0 {
            return Err(LpssError::Config("batch_size must be >= 1".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(LpssError::Config("output_dir must not be empty".into()));
        }
        if let Some(resume) = &self.resume {
            if !resume.is_file() {
                return Err(LpssError::Config(format!(
                    "resume: no such checkpoint: {}",
                    resume.display()
                )));
            }
        }
        Ok(())
    }
}
