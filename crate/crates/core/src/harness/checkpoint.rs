//! Binary checkpoints: a versioned little-endian snapshot of every
//! parameter, mask, running statistic, and optimizer buffer, plus the
//! counters that pin down the derived random streams. Saving, loading,
//! and saving again yields byte-identical files.
//!
//! Generator internals are never stored: with every stream derived from
//! `(seed, tag, counter)`, the seed and the epoch/iteration counters are
//! the complete random state.

use crate::error::{LpssError, Result};
use crate::evolution::MomentumBuffers;
use crate::harness::train::{BnMomentum, OptState};
use crate::nn::{Layer, Network};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LPSS";
const VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_MAXPOOL: u8 = 3;
const TAG_GAP: u8 = 4;
const TAG_BATCHNORM: u8 = 5;

/// Run counters and controller state stored alongside the parameters.
/// `epoch` counts completed epochs (the next one to run) and `iteration`
/// is the global batch counter feeding the evolution schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u32,
    pub iteration: u64,
    /// `(zeta_w, zeta_g)` when the run evolves its masks.
    pub zeta: Option<(f64, f64)>,
}

/// One trainable layer's stored parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSnapshot {
    pub neurons: usize,
    pub inputs: usize,
    pub p: f64,
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
    pub bias: Option<Vec<f64>>,
}

impl BankSnapshot {
    /// Full weight rows, one per neuron (masked slots are zero).
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.neurons)
            .map(|j| self.weights[j * self.inputs..(j + 1) * self.inputs].to_vec())
            .collect()
    }
}

/// Stored form of one layer, mirroring the runtime stack.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSnapshot {
    Dense(BankSnapshot),
    Conv {
        bank: BankSnapshot,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Gap,
    BatchNorm {
        scale: Vec<f64>,
        shift: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
}

impl LayerSnapshot {
    pub fn bank(&self) -> Option<&BankSnapshot> {
        match self {
            LayerSnapshot::Dense(bank) | LayerSnapshot::Conv { bank, .. } => Some(bank),
            _ => None,
        }
    }

    fn describe(&self) -> String {
        match self {
            LayerSnapshot::Dense(b) => format!("dense {}x{} (p = {})", b.neurons, b.inputs, b.p),
            LayerSnapshot::Conv { bank, kernel, .. } => format!(
                "conv {}x{} kernel {kernel} (p = {})",
                bank.neurons, bank.inputs, bank.p
            ),
            LayerSnapshot::Relu => "relu".into(),
            LayerSnapshot::MaxPool { kernel, stride } => {
                format!("maxpool {kernel} stride {stride}")
            }
            LayerSnapshot::Gap => "gap".into(),
            LayerSnapshot::BatchNorm { scale, .. } => format!("batchnorm {}", scale.len()),
        }
    }
}

/// Momentum buffers in stack order: one entry per trainable layer, then
/// one per batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSnapshot {
    pub gamma: f64,
    pub banks: Vec<MomentumBuffers>,
    pub bn: Vec<BnMomentum>,
}

/// A parsed checkpoint, ready to restore or inspect.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub layers: Vec<LayerSnapshot>,
    pub momentum: Option<MomentumSnapshot>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| LpssError::Data(format!("{what} = {v} does not fit a checkpoint field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn bank_snapshot(bank: &crate::nn::layers::NeuronBank) -> BankSnapshot {
    BankSnapshot {
        neurons: bank.neurons(),
        inputs: bank.inputs(),
        p: bank.constraint().p(),
        weights: bank.weights.clone(),
        mask: bank.mask.clone(),
        bias: bank.bias.clone(),
    }
}

fn write_bank(buf: &mut Vec<u8>, bank: &BankSnapshot) -> Result<()> {
    put_u32(buf, bank.neurons, "neurons")?;
    put_u32(buf, bank.inputs, "inputs")?;
    buf.extend_from_slice(&bank.p.to_le_bytes());
    buf.push(u8::from(bank.bias.is_some()));
    put_f64s(buf, &bank.weights);
    buf.extend(bank.mask.iter().map(|&m| u8::from(m)));
    if let Some(bias) = &bank.bias {
        put_f64s(buf, bias);
    }
    Ok(())
}

/// Serializes the network and optimizer state to `path`.
pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    opt: &OptState,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    buf.extend_from_slice(&meta.epoch.to_le_bytes());
    buf.extend_from_slice(&meta.iteration.to_le_bytes());
    match meta.zeta {
        Some((zw, zg)) => {
            buf.push(1);
            buf.extend_from_slice(&zw.to_le_bytes());
            buf.extend_from_slice(&zg.to_le_bytes());
        }
        None => buf.push(0),
    }
    put_u32(&mut buf, net.layers.len(), "layer count")?;
    for layer in &net.layers {
        match layer {
            Layer::Dense(l) => {
                buf.push(TAG_DENSE);
                write_bank(&mut buf, &bank_snapshot(&l.bank))?;
            }
            Layer::Conv(l) => {
                buf.push(TAG_CONV);
                put_u32(&mut buf, l.in_channels, "in_channels")?;
                put_u32(&mut buf, l.kernel, "kernel")?;
                put_u32(&mut buf, l.stride, "stride")?;
                put_u32(&mut buf, l.padding, "padding")?;
                write_bank(&mut buf, &bank_snapshot(&l.bank))?;
            }
            Layer::Relu(_) => buf.push(TAG_RELU),
            Layer::MaxPool(l) => {
                buf.push(TAG_MAXPOOL);
                put_u32(&mut buf, l.kernel, "kernel")?;
                put_u32(&mut buf, l.stride, "stride")?;
            }
            Layer::Gap(_) => buf.push(TAG_GAP),
            Layer::BatchNorm(l) => {
                buf.push(TAG_BATCHNORM);
                put_u32(&mut buf, l.channels(), "channels")?;
                put_f64s(&mut buf, &l.scale);
                put_f64s(&mut buf, &l.shift);
                put_f64s(&mut buf, &l.running_mean);
                put_f64s(&mut buf, &l.running_var);
            }
        }
    }
    match opt.gamma {
        None => buf.push(0),
        Some(gamma) => {
            buf.push(1);
            buf.extend_from_slice(&gamma.to_le_bytes());
            for buffers in opt.banks.iter().flatten() {
                put_f64s(&mut buf, &buffers.v);
                put_f64s(&mut buf, &buffers.mu);
                put_f64s(&mut buf, &buffers.bias_mu);
            }
            for buffers in opt.bn.iter().flatten() {
                put_f64s(&mut buf, &buffers.scale_mu);
                put_f64s(&mut buf, &buffers.shift_mu);
            }
        }
    }
    std::fs::write(path, &buf).map_err(|e| {
        LpssError::Io(std::io::Error::new(
            e.kind(),
            format!("cannot write {}: {e}", path.display()),
        ))
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(LpssError::Data(format!(
                "checkpoint truncated at byte {}: need {n} bytes for {what}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(8 * n, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn mask(&mut self, n: usize, what: &str) -> Result<Vec<bool>> {
        let start = self.pos;
        let b = self.take(n, what)?;
        b.iter()
            .enumerate()
            .map(|(i, &byte)| match byte {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(LpssError::Data(format!(
                    "invalid mask byte {other} at byte {} in {what}",
                    start + i
                ))),
            })
            .collect()
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(LpssError::Data(format!(
                "checkpoint has {} trailing bytes after byte {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn read_bank(r: &mut Reader<'_>, li: usize) -> Result<BankSnapshot> {
    let neurons = r.u32(&format!("layer {li} neurons"))?;
    let inputs = r.u32(&format!("layer {li} inputs"))?;
    let p = r.f64(&format!("layer {li} p"))?;
    let has_bias = r.u8(&format!("layer {li} bias flag"))? != 0;
    let slots = neurons
        .checked_mul(inputs)
        .ok_or_else(|| LpssError::Data(format!("layer {li} dimensions overflow")))?;
    let weights = r.f64s(slots, &format!("layer {li} weights"))?;
    let mask = r.mask(slots, &format!("layer {li} mask"))?;
    let bias = if has_bias {
        Some(r.f64s(neurons, &format!("layer {li} bias"))?)
    } else {
        None
    };
    Ok(BankSnapshot {
        neurons,
        inputs,
        p,
        weights,
        mask,
        bias,
    })
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| {
            LpssError::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read {}: {e}", path.display()),
            ))
        })?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(4, "magic")? != MAGIC {
            return Err(LpssError::Data(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(LpssError::Data(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let seed = r.u64("seed")?;
        let epoch = r.u32("epoch")? as u32;
        let iteration = r.u64("iteration")?;
        let zeta = match r.u8("evolution flag")? {
            0 => None,
            1 => Some((r.f64("zeta_w")?, r.f64("zeta_g")?)),
            other => {
                return Err(LpssError::Data(format!(
                    "invalid evolution flag {other} at byte {}",
                    r.pos - 1
                )))
            }
        };
        let n_layers = r.u32("layer count")?;
        let mut layers = Vec::with_capacity(n_layers);
        for li in 0..n_layers {
            let tag = r.u8(&format!("layer {li} tag"))?;
            layers.push(match tag {
                TAG_DENSE => LayerSnapshot::Dense(read_bank(&mut r, li)?),
                TAG_CONV => {
                    let in_channels = r.u32(&format!("layer {li} in_channels"))?;
                    let kernel = r.u32(&format!("layer {li} kernel"))?;
                    let stride = r.u32(&format!("layer {li} stride"))?;
                    let padding = r.u32(&format!("layer {li} padding"))?;
                    LayerSnapshot::Conv {
                        bank: read_bank(&mut r, li)?,
                        in_channels,
                        kernel,
                        stride,
                        padding,
                    }
                }
                TAG_RELU => LayerSnapshot::Relu,
                TAG_MAXPOOL => LayerSnapshot::MaxPool {
                    kernel: r.u32(&format!("layer {li} kernel"))?,
                    stride: r.u32(&format!("layer {li} stride"))?,
                },
                TAG_GAP => LayerSnapshot::Gap,
                TAG_BATCHNORM => {
                    let channels = r.u32(&format!("layer {li} channels"))?;
                    LayerSnapshot::BatchNorm {
                        scale: r.f64s(channels, &format!("layer {li} scale"))?,
                        shift: r.f64s(channels, &format!("layer {li} shift"))?,
                        running_mean: r.f64s(channels, &format!("layer {li} running mean"))?,
                        running_var: r.f64s(channels, &format!("layer {li} running var"))?,
                    }
                }
                other => {
                    return Err(LpssError::Data(format!(
                        "unknown layer tag {other} for layer {li}"
                    )))
                }
            });
        }
        let momentum = match r.u8("optimizer tag")? {
            0 => None,
            1 => {
                let gamma = r.f64("gamma")?;
                let mut banks = Vec::new();
                let mut bn = Vec::new();
                for (li, layer) in layers.iter().enumerate() {
                    match layer {
                        LayerSnapshot::Dense(b) | LayerSnapshot::Conv { bank: b, .. } => {
                            let slots = b.neurons * b.inputs;
                            banks.push(MomentumBuffers {
                                v: r.f64s(slots, &format!("layer {li} dual"))?,
                                mu: r.f64s(slots, &format!("layer {li} momentum"))?,
                                bias_mu: r.f64s(
                                    if b.bias.is_some() { b.neurons } else { 0 },
                                    &format!("layer {li} bias momentum"),
                                )?,
                            });
                        }
                        _ => {}
                    }
                }
                for (li, layer) in layers.iter().enumerate() {
                    if let LayerSnapshot::BatchNorm { scale, .. } = layer {
                        bn.push(BnMomentum {
                            scale_mu: r
                                .f64s(scale.len(), &format!("layer {li} scale momentum"))?,
                            shift_mu: r
                                .f64s(scale.len(), &format!("layer {li} shift momentum"))?,
                        });
                    }
                }
                Some(MomentumSnapshot { gamma, banks, bn })
            }
            other => {
                return Err(LpssError::Data(format!(
                    "unknown optimizer tag {other} at byte {}",
                    r.pos - 1
                )))
            }
        };
        r.done()?;
        Ok(Checkpoint {
            meta: CheckpointMeta {
                seed,
                epoch,
                iteration,
                zeta,
            },
            layers,
            momentum,
        })
    }

    /// Copies the stored parameters and optimizer buffers into a network
    /// and optimizer state of the exact same structure; any difference in
    /// layer kinds, dimensions, sphere exponents, or optimizer family is
    /// a config error naming the first offending layer.
    pub fn restore(&self, net: &mut Network, opt: &mut OptState) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(LpssError::Config(format!(
                "checkpoint has {} layers but the model has {}",
                self.layers.len(),
                net.layers.len()
            )));
        }
        let mismatch = |li: usize, stored: &LayerSnapshot| {
            LpssError::Config(format!(
                "checkpoint layer {li} is {} but the model disagrees",
                stored.describe()
            ))
        };
        for (li, (stored, live)) in self.layers.iter().zip(net.layers.iter_mut()).enumerate() {
            match (stored, live) {
                (LayerSnapshot::Dense(b), Layer::Dense(l)) => {
                    restore_bank(b, &mut l.bank).map_err(|_| mismatch(li, stored))?;
                }
                (
                    LayerSnapshot::Conv {
                        bank,
                        in_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Layer::Conv(l),
                ) => {
                    if (*in_channels, *kernel, *stride, *padding)
                        != (l.in_channels, l.kernel, l.stride, l.padding)
                    {
                        return Err(mismatch(li, stored));
                    }
                    restore_bank(bank, &mut l.bank).map_err(|_| mismatch(li, stored))?;
                }
                (LayerSnapshot::Relu, Layer::Relu(_)) => {}
                (LayerSnapshot::MaxPool { kernel, stride }, Layer::MaxPool(l)) => {
                    if (*kernel, *stride) != (l.kernel, l.stride) {
                        return Err(mismatch(li, stored));
                    }
                }
                (LayerSnapshot::Gap, Layer::Gap(_)) => {}
                (
                    LayerSnapshot::BatchNorm {
                        scale,
                        shift,
                        running_mean,
                        running_var,
                    },
                    Layer::BatchNorm(l),
                ) => {
                    if scale.len() != l.channels() {
                        return Err(mismatch(li, stored));
                    }
                    l.scale.copy_from_slice(scale);
                    l.shift.copy_from_slice(shift);
                    l.running_mean.copy_from_slice(running_mean);
                    l.running_var.copy_from_slice(running_var);
                }
                _ => return Err(mismatch(li, stored)),
            }
        }
        match (&self.momentum, opt.gamma) {
            (None, None) => {}
            (Some(snapshot), Some(_)) => {
                let mut banks = snapshot.banks.iter();
                let mut bn = snapshot.bn.iter();
                for (li, slot) in opt.banks.iter_mut().enumerate() {
                    if let Some(buffers) = slot {
                        let stored = banks.next().ok_or_else(|| {
                            LpssError::Config(format!("checkpoint missing momentum for layer {li}"))
                        })?;
                        if stored.v.len() != buffers.v.len()
                            || stored.bias_mu.len() != buffers.bias_mu.len()
                        {
                            return Err(LpssError::Config(format!(
                                "checkpoint momentum for layer {li} has the wrong shape"
                            )));
                        }
                        buffers.clone_from(stored);
                    }
                }
                for (li, slot) in opt.bn.iter_mut().enumerate() {
                    if let Some(buffers) = slot {
                        let stored = bn.next().ok_or_else(|| {
                            LpssError::Config(format!("checkpoint missing momentum for layer {li}"))
                        })?;
                        if stored.scale_mu.len() != buffers.scale_mu.len() {
                            return Err(LpssError::Config(format!(
                                "checkpoint momentum for layer {li} has the wrong shape"
                            )));
                        }
                        buffers.clone_from(stored);
                    }
                }
            }
            (Some(_), None) => {
                return Err(LpssError::Config(
                    "checkpoint carries momentum state but the config selects the plain optimizer"
                        .into(),
                ))
            }
            (None, Some(_)) => {
                return Err(LpssError::Config(
                    "config selects the momentum optimizer but the checkpoint has no momentum state"
                        .into(),
                ))
            }
        }
        debug_assert!(net.masked_slots_are_zero());
        Ok(())
    }
}

fn restore_bank(
    stored: &BankSnapshot,
    bank: &mut crate::nn::layers::NeuronBank,
) -> std::result::Result<(), ()> {
    if stored.neurons != bank.neurons()
        || stored.inputs != bank.inputs()
        || stored.p != bank.constraint().p()
        || stored.bias.is_some() != bank.bias.is_some()
    {
        return Err(());
    }
    bank.weights.copy_from_slice(&stored.weights);
    bank.mask.copy_from_slice(&stored.mask);
    if let (Some(stored_bias), Some(bias)) = (&stored.bias, bank.bias.as_mut()) {
        bias.copy_from_slice(stored_bias);
    }
    Ok(())
}
