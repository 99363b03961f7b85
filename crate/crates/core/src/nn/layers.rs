//! Layer implementations with cached activations for exact backprop.
//!
//! Trainable layers expose their weights through [`NeuronBank`]: one row
//! per neuron (a conv filter flattened to `c_in * k * k`), plus a mask of
//! the same shape. Forward passes read the raw weight array; masked slots
//! are kept at exactly 0 by the optimizer and evolution code, so backward
//! still produces true loss derivatives at masked positions, which is what
//! the grow step ranks.

use crate::error::{LpssError, Result};
use crate::geometry::{lp_norm, LpConstraint};
use crate::nn::tensor::Tensor;
use rand::Rng;

/// Per-neuron weight rows with a sparsity mask and the sphere constraint.
#[derive(Debug, Clone)]
pub struct NeuronBank {
    neurons: usize,
    inputs: usize,
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
    pub bias: Option<Vec<f64>>,
    constraint: LpConstraint,
}

impl NeuronBank {
    pub fn new(neurons: usize, inputs: usize, bias: bool, constraint: LpConstraint) -> Self {
        NeuronBank {
            neurons,
            inputs,
            weights: vec![0.0; neurons * inputs],
            mask: vec![true; neurons * inputs],
            bias: if bias { Some(vec![0.0; neurons]) } else { None },
            constraint,
        }
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn constraint(&self) -> LpConstraint {
        self.constraint
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.inputs..(j + 1) * self.inputs]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.weights[j * self.inputs..(j + 1) * self.inputs]
    }

    pub fn mask_row(&self, j: usize) -> &[bool] {
        &self.mask[j * self.inputs..(j + 1) * self.inputs]
    }

    /// Indices of active slots in neuron `j`'s row.
    pub fn active_indices(&self, j: usize) -> Vec<usize> {
        self.mask_row(j)
            .iter()
            .enumerate()
            .filter_map(|(k, &m)| m.then_some(k))
            .collect()
    }

    /// Active sub-vector of neuron `j`.
    pub fn active_weights(&self, j: usize) -> Vec<f64> {
        let row = self.row(j);
        self.mask_row(j)
            .iter()
            .zip(row)
            .filter_map(|(&m, &w)| m.then_some(w))
            .collect()
    }

    /// Writes values back into neuron `j`'s active slots, in mask order.
    pub fn set_active_weights(&mut self, j: usize, values: &[f64]) {
        let inputs = self.inputs;
        let (mask, weights) = (&self.mask, &mut self.weights);
        let mut it = values.iter();
        for k in 0..inputs {
            if mask[j * inputs + k] {
                weights[j * inputs + k] = *it.next().expect("active count mismatch");
            }
        }
        debug_assert!(it.next().is_none(), "active count mismatch");
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Restores unit p-norm on every neuron's active sub-vector. Neurons
    /// whose active weights are all zero are re-seeded from
    /// uniform(-0.1, 0.1) before normalizing; the count of such dead
    /// neurons is returned. A neuron with no active slots at all cannot be
    /// repaired here and is an invariant breach upstream.
    pub fn renormalize(&mut self, rng: &mut impl Rng) -> Result<usize> {
        let mut dead = 0;
        for j in 0..self.neurons {
            let idx = self.active_indices(j);
            if idx.is_empty() {
                return Err(LpssError::Degenerate(format!(
                    "neuron {j} has no active slots to normalize"
                )));
            }
            let mut sub: Vec<f64> = idx.iter().map(|&k| self.row(j)[k]).collect();
            if sub.iter().all(|&w| w == 0.0) {
                dead += 1;
                for w in &mut sub {
                    *w = rng.gen_range(-0.1..0.1);
                }
                // A zero redraw is astronomically unlikely but cheap to
                // make impossible.
                if sub.iter().all(|&w| w == 0.0) {
                    sub[0] = 0.1;
                }
            }
            let norm = lp_norm(&sub, self.constraint.p());
            let row = self.row_mut(j);
            for (&k, &w) in idx.iter().zip(&sub) {
                row[k] = w / norm;
            }
        }
        Ok(dead)
    }

    /// Maximum deviation of any neuron's active p-norm from 1.
    pub fn constraint_error(&self) -> f64 {
        (0..self.neurons)
            .map(|j| (lp_norm(&self.active_weights(j), self.constraint.p()) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Checks that every masked-out slot holds exactly 0.
    pub fn masked_slots_are_zero(&self) -> bool {
        self.mask
            .iter()
            .zip(&self.weights)
            .all(|(&m, &w)| m || w == 0.0)
    }
}

/// Gradients mirroring one layer's parameters. The batch mean is already
/// folded into the incoming loss gradient, so these are true derivatives
/// of the mean loss. Weight gradients cover every slot, masked ones
/// included.
#[derive(Debug, Clone, Default)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Batchnorm scale (gamma).
    pub scale: Vec<f64>,
    /// Batchnorm shift (beta).
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub bank: NeuronBank,
    cache_input: Option<Tensor>,
    pub grads: Option<LayerGrads>,
}

impl DenseLayer {
    pub fn new(bank: NeuronBank) -> Self {
        DenseLayer {
            bank,
            cache_input: None,
            grads: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let n = x.batch();
        let d = x.features();
        debug_assert_eq!(d, self.bank.inputs());
        let m = self.bank.neurons();
        let mut out = Tensor::zeros(n, m, 1, 1);
        for i in 0..n {
            let xi = x.sample(i);
            let oi = out.sample_mut(i);
            for j in 0..m {
                let row = self.bank.row(j);
                let mut acc = 0.0;
                for (wk, xk) in row.iter().zip(xi) {
                    acc += wk * xk;
                }
                if let Some(b) = &self.bank.bias {
                    acc += b[j];
                }
                oi[j] = acc;
            }
        }
        if train {
            self.cache_input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let x = self.cache_input.as_ref().expect("backward before forward");
        let n = x.batch();
        let d = self.bank.inputs();
        let m = self.bank.neurons();
        let mut gw = vec![0.0; m * d];
        let mut gb = vec![0.0; m];
        let mut gx = Tensor::zeros(n, d, 1, 1);
        for i in 0..n {
            let xi = x.sample(i);
            let gi = gout.sample(i);
            let gxi = gx.sample_mut(i);
            for j in 0..m {
                let go = gi[j];
                if go == 0.0 {
                    continue;
                }
                let row = self.bank.row(j);
                gb[j] += go;
                for k in 0..d {
                    gw[j * d + k] += go * xi[k];
                    gxi[k] += go * row[k];
                }
            }
        }
        self.grads = Some(LayerGrads {
            weights: gw,
            bias: if self.bank.bias.is_some() { gb } else { Vec::new() },
            ..Default::default()
        });
        let (_, c, h, w) = x.shape();
        // The incoming sample might have been a conv feature map that the
        // dense layer flattened; hand the gradient back in that shape.
        gx.reshaped(n, c, h, w)
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub bank: NeuronBank,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache_input: Option<Tensor>,
    pub grads: Option<LayerGrads>,
}

impl ConvLayer {
    pub fn new(
        bank: NeuronBank,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        debug_assert_eq!(bank.inputs(), in_channels * kernel * kernel);
        ConvLayer {
            bank,
            in_channels,
            kernel,
            stride,
            padding,
            cache_input: None,
            grads: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.shape();
        debug_assert_eq!(c, self.in_channels);
        let m = self.bank.neurons();
        let k = self.kernel;
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Tensor::zeros(n, m, oh, ow);
        for i in 0..n {
            for j in 0..m {
                let row = self.bank.row(j);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize
                                    - self.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize
                                        - self.padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += row[(ci * k + ky) * k + kx]
                                        * x.at(i, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        if let Some(b) = &self.bank.bias {
                            acc += b[j];
                        }
                        *out.at_mut(i, j, oy, ox) = acc;
                    }
                }
            }
        }
        if train {
            self.cache_input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let x = self.cache_input.as_ref().expect("backward before forward");
        let (n, c, h, w) = x.shape();
        let m = self.bank.neurons();
        let k = self.kernel;
        let (_, _, oh, ow) = gout.shape();
        let d = self.bank.inputs();
        let mut gw = vec![0.0; m * d];
        let mut gb = vec![0.0; m];
        let mut gx = Tensor::zeros(n, c, h, w);
        for i in 0..n {
            for j in 0..m {
                let row = self.bank.row(j);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = gout.at(i, j, oy, ox);
                        if go == 0.0 {
                            continue;
                        }
                        gb[j] += go;
                        for ci in 0..c {
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize
                                    - self.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize
                                        - self.padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let slot = (ci * k + ky) * k + kx;
                                    gw[j * d + slot] +=
                                        go * x.at(i, ci, iy as usize, ix as usize);
                                    *gx.at_mut(i, ci, iy as usize, ix as usize) +=
                                        go * row[slot];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.grads = Some(LayerGrads {
            weights: gw,
            bias: if self.bank.bias.is_some() { gb } else { Vec::new() },
            ..Default::default()
        });
        gx
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReluLayer {
    cache_positive: Option<Vec<bool>>,
}

impl ReluLayer {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut out = x.clone();
        if train {
            self.cache_positive = Some(x.as_slice().iter().map(|&v| v > 0.0).collect());
        }
        for v in out.as_mut_slice() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let mask = self.cache_positive.as_ref().expect("backward before forward");
        let mut gx = gout.clone();
        for (g, &pos) in gx.as_mut_slice().iter_mut().zip(mask) {
            if !pos {
                *g = 0.0;
            }
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub struct MaxPoolLayer {
    pub kernel: usize,
    pub stride: usize,
    cache_argmax: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPoolLayer {
    pub fn new(kernel: usize, stride: usize) -> Self {
        MaxPoolLayer {
            kernel,
            stride,
            cache_argmax: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.shape();
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Tensor::zeros(n, c, oh, ow);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let mut slot = 0usize;
        for i in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                let iy = oy * self.stride + ky;
                                let ix = ox * self.stride + kx;
                                let v = x.at(i, ci, iy, ix);
                                // Strict > keeps the first (row-major)
                                // maximum on ties, deterministically.
                                if v > best {
                                    best = v;
                                    best_idx = iy * w + ix;
                                }
                            }
                        }
                        *out.at_mut(i, ci, oy, ox) = best;
                        argmax[slot] = best_idx;
                        slot += 1;
                    }
                }
            }
        }
        if train {
            self.cache_argmax = Some((argmax, (n, c, h, w)));
        }
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let (argmax, (n, c, h, w)) =
            self.cache_argmax.as_ref().expect("backward before forward");
        let (_, _, oh, ow) = gout.shape();
        let mut gx = Tensor::zeros(*n, *c, *h, *w);
        let mut slot = 0usize;
        for i in 0..*n {
            for ci in 0..*c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = argmax[slot];
                        slot += 1;
                        let (iy, ix) = (flat / w, flat % w);
                        *gx.at_mut(i, ci, iy, ix) += gout.at(i, ci, oy, ox);
                    }
                }
            }
        }
        gx
    }
}

#[derive(Debug, Clone, Default)]
pub struct GapLayer {
    cache_shape: Option<(usize, usize, usize, usize)>,
}

impl GapLayer {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.shape();
        let mut out = Tensor::zeros(n, c, 1, 1);
        let inv = 1.0 / (h * w) as f64;
        for i in 0..n {
            for ci in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for xw in 0..w {
                        acc += x.at(i, ci, y, xw);
                    }
                }
                *out.at_mut(i, ci, 0, 0) = acc * inv;
            }
        }
        if train {
            self.cache_shape = Some((n, c, h, w));
        }
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let (n, c, h, w) = self.cache_shape.expect("backward before forward");
        let inv = 1.0 / (h * w) as f64;
        let mut gx = Tensor::zeros(n, c, h, w);
        for i in 0..n {
            for ci in 0..c {
                let g = gout.at(i, ci, 0, 0) * inv;
                for y in 0..h {
                    for xw in 0..w {
                        *gx.at_mut(i, ci, y, xw) = g;
                    }
                }
            }
        }
        gx
    }
}

/// Per-channel batch normalization with biased variance, eps 1e-5 and
/// running-average momentum 0.1 (the weight of the newest batch). The
/// scale and shift are ordinary unconstrained parameters trained with the
/// bias rule.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
    pub grads: Option<LayerGrads>,
}

#[derive(Debug, Clone)]
struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
            grads: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.shape();
        debug_assert_eq!(c, self.channels());
        let count = (n * h * w) as f64;
        let mut out = Tensor::zeros(n, c, h, w);
        if train {
            let mut normalized = Tensor::zeros(n, c, h, w);
            let mut inv_stds = vec![0.0; c];
            for ci in 0..c {
                let mut mean = 0.0;
                for i in 0..n {
                    for y in 0..h {
                        for xw in 0..w {
                            mean += x.at(i, ci, y, xw);
                        }
                    }
                }
                mean /= count;
                let mut var = 0.0;
                for i in 0..n {
                    for y in 0..h {
                        for xw in 0..w {
                            let d = x.at(i, ci, y, xw) - mean;
                            var += d * d;
                        }
                    }
                }
                var /= count;
                let inv_std = 1.0 / (var + self.eps).sqrt();
                inv_stds[ci] = inv_std;
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
                for i in 0..n {
                    for y in 0..h {
                        for xw in 0..w {
                            let z = (x.at(i, ci, y, xw) - mean) * inv_std;
                            *normalized.at_mut(i, ci, y, xw) = z;
                            *out.at_mut(i, ci, y, xw) = self.scale[ci] * z + self.shift[ci];
                        }
                    }
                }
            }
            self.cache = Some(BnCache {
                normalized,
                inv_std: inv_stds,
            });
        } else {
            for ci in 0..c {
                let inv_std = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                for i in 0..n {
                    for y in 0..h {
                        for xw in 0..w {
                            let z = (x.at(i, ci, y, xw) - self.running_mean[ci]) * inv_std;
                            *out.at_mut(i, ci, y, xw) = self.scale[ci] * z + self.shift[ci];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("backward before forward");
        let (n, c, h, w) = gout.shape();
        let count = (n * h * w) as f64;
        let mut gscale = vec![0.0; c];
        let mut gshift = vec![0.0; c];
        let mut gx = Tensor::zeros(n, c, h, w);
        for ci in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gz = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for xw in 0..w {
                        let g = gout.at(i, ci, y, xw);
                        sum_g += g;
                        sum_gz += g * cache.normalized.at(i, ci, y, xw);
                    }
                }
            }
            gshift[ci] = sum_g;
            gscale[ci] = sum_gz;
            let coef = self.scale[ci] * cache.inv_std[ci] / count;
            for i in 0..n {
                for y in 0..h {
                    for xw in 0..w {
                        let g = gout.at(i, ci, y, xw);
                        let z = cache.normalized.at(i, ci, y, xw);
                        *gx.at_mut(i, ci, y, xw) = coef * (count * g - sum_g - z * sum_gz);
                    }
                }
            }
        }
        self.grads = Some(LayerGrads {
            scale: gscale,
            shift: gshift,
            ..Default::default()
        });
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn constraint() -> LpConstraint {
        LpConstraint::new(2.0).unwrap()
    }

    #[test]
    fn dense_one_hot_rows_select_inputs() {
        let mut bank = NeuronBank::new(2, 3, true, constraint());
        bank.weights[0 * 3 + 1] = 1.0; // neuron 0 reads input 1
        bank.weights[1 * 3 + 2] = 1.0; // neuron 1 reads input 2
        let mut layer = DenseLayer::new(bank);
        let x = Tensor::from_vec(vec![10.0, 20.0, 30.0], 1, 3, 1, 1);
        let y = layer.forward(&x, false);
        assert_eq!(y.as_slice(), &[20.0, 30.0]);
    }

    #[test]
    fn dense_zero_weights_broadcast_bias() {
        let mut bank = NeuronBank::new(2, 3, true, constraint());
        bank.mask.fill(false);
        bank.bias.as_mut().unwrap().copy_from_slice(&[0.5, -1.5]);
        let mut layer = DenseLayer::new(bank);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3, 1, 1);
        let y = layer.forward(&x, false);
        assert_eq!(y.as_slice(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn dense_backward_shapes_and_values() {
        let mut bank = NeuronBank::new(1, 2, true, constraint());
        bank.weights.copy_from_slice(&[0.6, 0.8]);
        let mut layer = DenseLayer::new(bank);
        let x = Tensor::from_vec(vec![2.0, -1.0], 1, 2, 1, 1);
        layer.forward(&x, true);
        let gout = Tensor::from_vec(vec![1.0], 1, 1, 1, 1);
        let gx = layer.backward(&gout);
        assert_eq!(gx.as_slice(), &[0.6, 0.8]);
        let grads = layer.grads.as_ref().unwrap();
        assert_eq!(grads.weights, vec![2.0, -1.0]);
        assert_eq!(grads.bias, vec![1.0]);
    }

    #[test]
    fn conv_identity_kernel_passes_center() {
        let c = LpConstraint::new(2.0).unwrap();
        let mut bank = NeuronBank::new(1, 9, false, c);
        bank.weights[4] = 1.0; // 3x3 kernel selecting the center pixel
        let mut layer = ConvLayer::new(bank, 1, 3, 1, 1);
        let x = Tensor::from_vec((0..9).map(|i| i as f64).collect(), 1, 1, 3, 3);
        let y = layer.forward(&x, false);
        assert_eq!(y.shape(), (1, 1, 3, 3));
        // Padding 1, center tap: output equals input.
        assert_eq!(y.as_slice(), x.as_slice());
    }

    #[test]
    fn conv_output_shape_follows_stride_padding() {
        let c = LpConstraint::new(2.0).unwrap();
        let bank = NeuronBank::new(4, 2 * 5 * 5, false, c);
        let layer = ConvLayer::new(bank, 2, 5, 2, 2);
        assert_eq!(layer.output_hw(28, 28), (14, 14));
    }

    #[test]
    fn relu_forward_backward() {
        let mut layer = ReluLayer::default();
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0], 1, 3, 1, 1);
        let y = layer.forward(&x, true);
        assert_eq!(y.as_slice(), &[0.0, 0.0, 2.0]);
        let gout = Tensor::from_vec(vec![5.0, 5.0, 5.0], 1, 3, 1, 1);
        let gx = layer.backward(&gout);
        // Exactly-zero inputs get zero gradient (subgradient choice).
        assert_eq!(gx.as_slice(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let mut layer = MaxPoolLayer::new(2, 2);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        let y = layer.forward(&x, true);
        assert_eq!(y.as_slice(), &[4.0]);
        let gx = layer.backward(&Tensor::from_vec(vec![7.0], 1, 1, 1, 1));
        assert_eq!(gx.as_slice(), &[0.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn maxpool_tie_breaks_to_first() {
        let mut layer = MaxPoolLayer::new(2, 2);
        let x = Tensor::from_vec(vec![3.0, 3.0, 3.0, 3.0], 1, 1, 2, 2);
        layer.forward(&x, true);
        let gx = layer.backward(&Tensor::from_vec(vec![1.0], 1, 1, 1, 1));
        assert_eq!(gx.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_averages_and_spreads() {
        let mut layer = GapLayer::default();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        let y = layer.forward(&x, true);
        assert_eq!(y.as_slice(), &[2.5]);
        let gx = layer.backward(&Tensor::from_vec(vec![4.0], 1, 1, 1, 1));
        assert_eq!(gx.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn batchnorm_identical_samples_normalize_to_zero() {
        let mut layer = BatchNormLayer::new(1);
        let x = Tensor::from_vec(vec![3.0, 3.0, 3.0, 3.0], 4, 1, 1, 1);
        let y = layer.forward(&x, true);
        // Zero variance is guarded by eps; outputs are the shift (0).
        for &v in y.as_slice() {
            assert_close(v, 0.0, 1e-12);
        }
    }

    #[test]
    fn batchnorm_standardizes_batch() {
        let mut layer = BatchNormLayer::new(1);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], 4, 1, 1, 1);
        let y = layer.forward(&x, true);
        let mean: f64 = y.as_slice().iter().sum::<f64>() / 4.0;
        let var: f64 = y.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert_close(mean, 0.0, 1e-12);
        assert_close(var, 1.0, 1e-4); // eps shifts it slightly below 1
        // Running stats moved toward the batch stats.
        assert_close(layer.running_mean[0], 0.25, 1e-12);
        assert_close(layer.running_var[0], 0.9 + 0.1 * 1.25, 1e-12);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut layer = BatchNormLayer::new(1);
        layer.running_mean[0] = 2.0;
        layer.running_var[0] = 4.0;
        let x = Tensor::from_vec(vec![4.0], 1, 1, 1, 1);
        let y = layer.forward(&x, false);
        assert_close(y.as_slice()[0], (4.0 - 2.0) / (4.0f64 + 1e-5).sqrt(), 1e-12);
    }

    #[test]
    fn renormalize_restores_unit_norm_and_reseeds_dead() {
        let c = LpConstraint::new(2.0).unwrap();
        let mut bank = NeuronBank::new(2, 2, false, c);
        bank.weights.copy_from_slice(&[3.0, 4.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dead = bank.renormalize(&mut rng).unwrap();
        assert_eq!(dead, 1);
        assert_close(bank.row(0)[0], 0.6, 1e-15);
        assert_close(bank.row(0)[1], 0.8, 1e-15);
        assert_close(lp_norm(bank.row(1), 2.0), 1.0, 1e-12);
    }

    #[test]
    fn renormalize_respects_mask() {
        let c = LpConstraint::new(2.0).unwrap();
        let mut bank = NeuronBank::new(1, 3, false, c);
        bank.weights.copy_from_slice(&[3.0, 0.0, 4.0]);
        bank.mask[1] = false;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        bank.renormalize(&mut rng).unwrap();
        assert_eq!(bank.row(0)[1], 0.0);
        assert_close(lp_norm(&bank.active_weights(0), 2.0), 1.0, 1e-12);
        assert!(bank.masked_slots_are_zero());
    }

    #[test]
    fn renormalize_fails_on_fully_masked_neuron() {
        let c = LpConstraint::new(2.0).unwrap();
        let mut bank = NeuronBank::new(1, 2, false, c);
        bank.mask.fill(false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(bank.renormalize(&mut rng).is_err());
    }
}
