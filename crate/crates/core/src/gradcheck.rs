//! Central finite-difference verification of backpropagation.
//!
//! Every parameter of every layer is perturbed by `h = 1e-5 * max(1, |w|)`
//! and the loss re-evaluated on both sides; the symmetric difference
//! quotient must match the backward pass. Gradients whose magnitude is
//! below 1e-4 are compared absolutely (the relative quotient is
//! meaningless near zero), everything else relatively.
//!
//! ReLU kinks and max-pool ties break differentiability, so generated
//! check cases are screened: any pre-activation within 1e-3 of a kink or
//! any pooling window whose top two entries are closer than 1e-3 causes
//! the input batch to be redrawn.

use crate::error::{LpssError, Result};
use crate::nn::layers::MaxPoolLayer;
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::tensor::Tensor;
use crate::nn::{Layer, LayerSpec, Network, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Magnitude below which analytic/numeric gradients are compared
/// absolutely instead of relatively.
pub const COMPARABLE_FLOOR: f64 = 1e-4;

/// Absolute agreement required in the sub-floor regime.
pub const ABSOLUTE_TOL: f64 = 1e-9;

/// Minimum distance from a ReLU kink or max-pool tie for a case to be
/// accepted; keeps central differences on one smooth branch.
const KINK_MARGIN: f64 = 1e-3;

/// One parameter whose analytic and numeric gradients disagree.
#[derive(Debug, Clone)]
pub struct ParamMismatch {
    pub layer: usize,
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Result of checking every parameter of one network on one batch.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub params: usize,
    /// Worst relative error among gradients above the comparability floor.
    pub worst_rel: f64,
    /// Worst absolute error among gradients below the floor.
    pub worst_abs: f64,
    pub mismatches: Vec<ParamMismatch>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// A reproducible gradient-check scenario: network description, the seed
/// that rebuilds its parameters, and a screened input batch.
#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: String,
    pub spec: NetworkSpec,
    pub build_seed: u64,
    pub input: Tensor,
    pub labels: Vec<usize>,
}

/// Loss under the same forward pass the backward pass differentiates
/// (training mode, so batchnorm uses batch statistics).
fn training_loss(net: &mut Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = net.forward(x, true);
    Ok(softmax_cross_entropy(&logits, labels)?.0)
}

/// Runs every-parameter central finite differences against backprop.
pub fn check_network(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    rel_tol: f64,
) -> Result<CheckOutcome> {
    let logits = net.forward(x, true);
    let (_, loss_grad) = softmax_cross_entropy(&logits, labels)?;
    net.backward(&loss_grad);
    let analytic: Vec<Vec<f64>> = net
        .layers
        .iter()
        .map(|l| (0..l.param_count()).map(|k| l.get_grad(k)).collect())
        .collect();

    let mut outcome = CheckOutcome {
        params: 0,
        worst_rel: 0.0,
        worst_abs: 0.0,
        mismatches: Vec::new(),
    };
    for li in 0..net.layers.len() {
        for k in 0..net.layers[li].param_count() {
            let theta = net.layers[li].get_param(k);
            let h = 1e-5 * theta.abs().max(1.0);
            net.layers[li].set_param(k, theta + h);
            let plus = training_loss(net, x, labels)?;
            net.layers[li].set_param(k, theta - h);
            let minus = training_loss(net, x, labels)?;
            net.layers[li].set_param(k, theta);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[li][k];
            outcome.params += 1;
            let scale = a.abs().max(numeric.abs());
            let ok = if scale >= COMPARABLE_FLOOR {
                let rel = (a - numeric).abs() / scale;
                outcome.worst_rel = outcome.worst_rel.max(rel);
                rel < rel_tol
            } else {
                let abs = (a - numeric).abs();
                outcome.worst_abs = outcome.worst_abs.max(abs);
                abs < ABSOLUTE_TOL
            };
            if !ok {
                outcome.mismatches.push(ParamMismatch {
                    layer: li,
                    param: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(outcome)
}

/// Smallest distance from a non-smooth point anywhere in the forward
/// pass: |pre-activation| at ReLU inputs, top-two gap inside each pooling
/// window. Infinite when the network has neither.
pub fn min_kink_margin(net: &mut Network, x: &Tensor) -> f64 {
    let mut margin = f64::INFINITY;
    let mut cur = x.clone();
    for layer in &mut net.layers {
        match layer {
            Layer::Relu(_) => {
                for &v in cur.as_slice() {
                    margin = margin.min(v.abs());
                }
            }
            Layer::MaxPool(mp) => {
                margin = margin.min(pool_tie_margin(mp, &cur));
            }
            _ => {}
        }
        cur = layer.forward(&cur, true);
    }
    margin
}

fn pool_tie_margin(mp: &MaxPoolLayer, x: &Tensor) -> f64 {
    let (n, c, h, w) = x.shape();
    let (oh, ow) = mp.output_hw(h, w);
    let mut margin = f64::INFINITY;
    for i in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    for ky in 0..mp.kernel {
                        for kx in 0..mp.kernel {
                            let v = x.at(i, ci, oy * mp.stride + ky, ox * mp.stride + kx);
                            if v > best {
                                second = best;
                                best = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    // A window whose top two entries are both exactly zero
                    // is a tie between ReLU-clamped constants; the argmax
                    // cannot flip under a small perturbation, so it poses
                    // no differentiability hazard.
                    if second.is_finite() && !(best == 0.0 && second == 0.0) {
                        margin = margin.min(best - second);
                    }
                }
            }
        }
    }
    margin
}

/// Generates `count` screened check cases cycling through templates that
/// collectively cover dense, conv2d (with and without bias, stride,
/// padding), relu, max-pool, global average pooling and batchnorm.
pub fn random_cases(seed: u64, count: usize) -> Result<Vec<CheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(count);
    for idx in 0..count {
        let template = idx % 6;
        let p_choices = [1.1, 1.3, 1.7, 2.0, 2.6, 3.0];
        let pick_p = |rng: &mut ChaCha8Rng| p_choices[rng.gen_range(0..p_choices.len())];
        let classes = rng.gen_range(2..=3usize);
        let (name, spec) = match template {
            0 => {
                let hidden = rng.gen_range(3..=6);
                (
                    "dense-relu-dense",
                    NetworkSpec {
                        input: [1, 1, rng.gen_range(3..=6)],
                        layers: vec![
                            LayerSpec::Dense {
                                neurons: hidden,
                                bias: true,
                                p: pick_p(&mut rng),
                            },
                            LayerSpec::Relu,
                            LayerSpec::Dense {
                                neurons: classes,
                                bias: true,
                                p: pick_p(&mut rng),
                            },
                        ],
                    },
                )
            }
            1 => (
                "conv-bn-relu-pool-dense",
                NetworkSpec {
                    input: [1, 5, 5],
                    layers: vec![
                        LayerSpec::Conv2d {
                            filters: rng.gen_range(2..=3),
                            kernel: 3,
                            stride: 1,
                            padding: 1,
                            bias: false,
                            p: pick_p(&mut rng),
                        },
                        LayerSpec::BatchNorm,
                        LayerSpec::Relu,
                        LayerSpec::MaxPool {
                            kernel: 2,
                            stride: None,
                        },
                        LayerSpec::Dense {
                            neurons: classes,
                            bias: true,
                            p: pick_p(&mut rng),
                        },
                    ],
                },
            ),
            2 => (
                "strided-conv-relu-dense",
                NetworkSpec {
                    input: [2, 6, 6],
                    layers: vec![
                        LayerSpec::Conv2d {
                            filters: rng.gen_range(2..=4),
                            kernel: 3,
                            stride: 2,
                            padding: 0,
                            bias: true,
                            p: pick_p(&mut rng),
                        },
                        LayerSpec::Relu,
                        LayerSpec::Dense {
                            neurons: classes,
                            bias: false,
                            p: pick_p(&mut rng),
                        },
                    ],
                },
            ),
            3 => (
                "conv-relu-gap-dense",
                NetworkSpec {
                    input: [1, 5, 5],
                    layers: vec![
                        LayerSpec::Conv2d {
                            filters: rng.gen_range(3..=4),
                            kernel: 3,
                            stride: 1,
                            padding: 0,
                            bias: true,
                            p: pick_p(&mut rng),
                        },
                        LayerSpec::Relu,
                        LayerSpec::Gap,
                        LayerSpec::Dense {
                            neurons: classes,
                            bias: true,
                            p: pick_p(&mut rng),
                        },
                    ],
                },
            ),
            4 => (
                "dense-bn-relu-dense",
                NetworkSpec {
                    input: [1, 1, rng.gen_range(4..=6)],
                    layers: vec![
                        LayerSpec::Dense {
                            neurons: rng.gen_range(3..=5),
                            bias: false,
                            p: pick_p(&mut rng),
                        },
                        LayerSpec::BatchNorm,
                        LayerSpec::Relu,
                        LayerSpec::Dense {
                            neurons: classes,
                            bias: true,
                            p: pick_p(&mut rng),
                        },
                    ],
                },
            ),
            _ => (
                "two-conv-pool-dense",
                NetworkSpec {
                    input: [1, 6, 6],
                    layers: vec![
                        LayerSpec::Conv2d {
                            filters: 2,
                            kernel: 3,
                            stride: 1,
                            padding: 1,
                            bias: false,
                            p: pick_p(&mut rng),
                        },
                        LayerSpec::BatchNorm,
                        LayerSpec::Relu,
                        LayerSpec::Conv2d {
                            filters: rng.gen_range(2..=3),
                            kernel: 3,
                            stride: 1,
                            padding: 0,
                            bias: true,
                            p: pick_p(&mut rng),
                        },
                        LayerSpec::Relu,
                        LayerSpec::MaxPool {
                            kernel: 2,
                            stride: Some(2),
                        },
                        LayerSpec::Dense {
                            neurons: classes,
                            bias: true,
                            p: pick_p(&mut rng),
                        },
                    ],
                },
            ),
        };
        let build_seed = rng.gen::<u64>();
        let case = screen_case(name, spec, build_seed, classes, &mut rng)?;
        cases.push(case);
    }
    Ok(cases)
}

/// Draws input batches until the forward pass stays clear of every kink.
pub fn screen_case(
    name: &str,
    spec: NetworkSpec,
    build_seed: u64,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CheckCase> {
    let mut net = Network::build(&spec, &mut ChaCha8Rng::seed_from_u64(build_seed))?;
    let (c, h, w) = net.input_shape();
    let normal = Normal::new(0.0, 1.0).expect("unit sigma");
    for _ in 0..64 {
        let n = rng.gen_range(2..=3usize);
        let data: Vec<f64> = (0..n * c * h * w).map(|_| normal.sample(rng)).collect();
        let input = Tensor::from_vec(data, n, c, h, w);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        if min_kink_margin(&mut net, &input) > KINK_MARGIN {
            return Ok(CheckCase {
                name: name.to_string(),
                spec,
                build_seed,
                input,
                labels,
            });
        }
    }
    Err(LpssError::Numerics(format!(
        "could not draw a kink-free batch for case {name}"
    )))
}

/// Rebuilds the case's network and checks it.
pub fn run_case(case: &CheckCase, rel_tol: f64) -> Result<CheckOutcome> {
    let mut net = Network::build(&case.spec, &mut ChaCha8Rng::seed_from_u64(case.build_seed))?;
    check_network(&mut net, &case.input, &case.labels, rel_tol)
}
