//! LpSS topology evolution: adaptive-threshold drop, gradient-ranked
//! grow, cosine-annealed drop aggressiveness and sparsity-feedback grow
//! ratio, with renormalization and momentum hygiene after every edit.
//!
//! Sparsity here always means the inactive fraction of weight slots
//! across the network's trainable banks.

use crate::error::{LpssError, Result};
use crate::nn::layers::NeuronBank;
use crate::nn::{Layer, Network};
use crate::optim::dual_from_weights;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Mask-evolution schedule and its live controller state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSchedule {
    /// Iterations between mask edits.
    pub interval: u64,
    /// Initial relative drop threshold; the cosine anneal starts here.
    pub alpha_drop: f64,
    /// Iteration after which masks freeze.
    pub t_end: u64,
    /// Drop/grow gap in the grow-ratio feedback.
    pub tau_gap: f64,
    /// Target overall sparsity.
    pub s_expect: f64,
    /// Initial sparsity used by `init_topology`.
    pub s_init: f64,
    /// Current drop threshold coefficient.
    pub zeta_w: f64,
    /// Current grow ratio.
    pub zeta_g: f64,
}

pub const DEFAULT_TAU_GAP: f64 = 0.05;

impl EvolutionSchedule {
    /// Builds a schedule with the default drop/grow gap; the controller
    /// state starts at `zeta_w = alpha_drop` (the cosine anneal at t = 0)
    /// and `zeta_g` at the feedback value for the initial sparsity.
    pub fn new(
        interval: u64,
        alpha_drop: f64,
        t_end: u64,
        s_expect: f64,
        s_init: f64,
    ) -> Result<Self> {
        let schedule = EvolutionSchedule {
            interval,
            alpha_drop,
            t_end,
            tau_gap: DEFAULT_TAU_GAP,
            s_expect,
            s_init,
            zeta_w: alpha_drop,
            zeta_g: update_zeta_g(s_init, s_expect, DEFAULT_TAU_GAP),
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(LpssError::Config("evolution interval must be positive".into()));
        }
        if self.t_end == 0 {
            return Err(LpssError::Config("evolution t_end must be positive".into()));
        }
        if !(self.alpha_drop.is_finite() && self.alpha_drop >= 0.0) {
            return Err(LpssError::Config(format!(
                "alpha_drop must be finite and non-negative, got {}",
                self.alpha_drop
            )));
        }
        if !(self.s_expect > 0.0 && self.s_expect < 1.0) {
            return Err(LpssError::Config(format!(
                "s_expect must lie in (0, 1), got {}",
                self.s_expect
            )));
        }
        if !(0.0..1.0).contains(&self.s_init) {
            return Err(LpssError::Config(format!(
                "initial sparsity must lie in [0, 1), got {}",
                self.s_init
            )));
        }
        if !(0.0..1.0).contains(&self.tau_gap) {
            return Err(LpssError::Config(format!(
                "tau_gap must lie in [0, 1), got {}",
                self.tau_gap
            )));
        }
        if !(self.zeta_w >= 0.0 && self.zeta_w <= self.alpha_drop) {
            return Err(LpssError::Config(format!(
                "zeta_w {} outside [0, alpha_drop = {}]",
                self.zeta_w, self.alpha_drop
            )));
        }
        if !(self.zeta_g.is_finite() && self.zeta_g >= 0.0) {
            return Err(LpssError::Config(format!(
                "zeta_g must be finite and non-negative, got {}",
                self.zeta_g
            )));
        }
        Ok(())
    }

    /// Whether iteration `t` (counting completed optimizer steps) is a
    /// mask-edit tick: a positive multiple of the interval before the
    /// freeze point.
    pub fn is_tick(&self, t: u64) -> bool {
        t > 0 && t < self.t_end && t % self.interval == 0
    }
}

/// One neuron's mask edits during a tick, for the audit log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskEdit {
    pub iteration: u64,
    pub layer: usize,
    pub neuron: usize,
    /// Slot indices deactivated this tick (they were active before).
    pub dropped: Vec<usize>,
    /// Slot indices activated this tick (they were inactive before).
    pub grown: Vec<usize>,
    pub zeta_w: f64,
    pub zeta_g: f64,
    /// Overall network sparsity once the whole tick finished.
    pub sparsity_after: f64,
}

/// Cosine-annealed drop coefficient: starts at `alpha_drop`, reaches 0 at
/// `t_end` and stays there.
pub fn update_zeta_w(t: u64, t_end: u64, alpha_drop: f64) -> f64 {
    if t >= t_end {
        return 0.0;
    }
    alpha_drop / 2.0 * (1.0 + (t as f64 * std::f64::consts::PI / t_end as f64).cos())
}

/// Sparsity-feedback grow ratio: shy of one drop worth of growth below
/// the target, above one past it, so the controller hunts `s_expect`.
pub fn update_zeta_g(s: f64, s_expect: f64, tau_gap: f64) -> f64 {
    if s < s_expect {
        (1.0 - tau_gap) * s / s_expect
    } else {
        (1.0 + tau_gap) * s / s_expect
    }
}

/// Inactive fraction of weight slots across all trainable banks.
pub fn network_sparsity(net: &Network) -> f64 {
    let mut total = 0usize;
    let mut inactive = 0usize;
    for layer in &net.layers {
        if let Some(bank) = layer.bank() {
            total += bank.mask.len();
            inactive += bank.mask.iter().filter(|&&m| !m).count();
        }
    }
    if total == 0 {
        0.0
    } else {
        inactive as f64 / total as f64
    }
}

/// Deactivates a Bernoulli(s0) fraction of each bank's slots, re-drawing
/// any neuron that would lose all of its slots, zeroes the masked weights
/// and renormalizes. Deterministic for a fixed `rng` state.
pub fn init_topology(net: &mut Network, s0: f64, rng: &mut impl Rng) -> Result<()> {
    if !(0.0..1.0).contains(&s0) {
        return Err(LpssError::Config(format!(
            "initial sparsity must lie in [0, 1), got {s0}"
        )));
    }
    for layer in &mut net.layers {
        let Some(bank) = layer.bank_mut() else { continue };
        let inputs = bank.inputs();
        for j in 0..bank.neurons() {
            loop {
                let mut any_active = false;
                for k in 0..inputs {
                    let active = rng.gen::<f64>() >= s0;
                    bank.mask[j * inputs + k] = active;
                    any_active |= active;
                }
                if any_active {
                    break;
                }
            }
            for k in 0..inputs {
                if !bank.mask[j * inputs + k] {
                    bank.row_mut(j)[k] = 0.0;
                }
            }
        }
        bank.renormalize(rng)?;
    }
    Ok(())
}

/// Drops every active slot whose magnitude falls below `zeta_w` times the
/// neuron's mean active magnitude, then renormalizes. A neuron that would
/// lose everything keeps its single largest-magnitude slot. Returns the
/// dropped slot indices per neuron.
pub fn drop_step(
    bank: &mut NeuronBank,
    zeta_w: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let inputs = bank.inputs();
    let mut dropped = Vec::with_capacity(bank.neurons());
    for j in 0..bank.neurons() {
        let active = bank.active_indices(j);
        debug_assert!(!active.is_empty(), "neuron {j} entered drop with no active slots");
        let mean: f64 =
            active.iter().map(|&k| bank.row(j)[k].abs()).sum::<f64>() / active.len() as f64;
        let threshold = zeta_w * mean;
        let mut doomed: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&k| bank.row(j)[k].abs() < threshold)
            .collect();
        if doomed.len() == active.len() {
            // Never empty a neuron: spare the largest-magnitude slot
            // (lowest index on ties).
            let keep = active
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    bank.row(j)[a]
                        .abs()
                        .partial_cmp(&bank.row(j)[b].abs())
                        .expect("weights are finite")
                        .then(b.cmp(&a))
                })
                .expect("active is non-empty");
            doomed.retain(|&k| k != keep);
        }
        for &k in &doomed {
            bank.mask[j * inputs + k] = false;
            bank.row_mut(j)[k] = 0.0;
        }
        dropped.push(doomed);
    }
    bank.renormalize(rng)?;
    Ok(dropped)
}

/// Activates, per neuron, the `floor(zeta_g * dropped)` inactive slots
/// with the largest gradient magnitude (ties to the lowest index), at
/// weight exactly zero. Returns the grown slot indices per neuron.
pub fn grow_step(
    bank: &mut NeuronBank,
    grads: &[f64],
    zeta_g: f64,
    dropped_per_neuron: &[usize],
) -> Vec<Vec<usize>> {
    let inputs = bank.inputs();
    debug_assert_eq!(grads.len(), bank.neurons() * inputs);
    debug_assert_eq!(dropped_per_neuron.len(), bank.neurons());
    let mut grown = Vec::with_capacity(bank.neurons());
    for j in 0..bank.neurons() {
        let k_target = (zeta_g * dropped_per_neuron[j] as f64).floor() as usize;
        let mut inactive: Vec<usize> = (0..inputs)
            .filter(|&k| !bank.mask[j * inputs + k])
            .collect();
        let k_grow = k_target.min(inactive.len());
        if k_grow == 0 {
            grown.push(Vec::new());
            continue;
        }
        inactive.sort_by(|&a, &b| {
            grads[j * inputs + b]
                .abs()
                .partial_cmp(&grads[j * inputs + a].abs())
                .expect("gradients are finite")
                .then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = inactive[..k_grow].to_vec();
        chosen.sort_unstable();
        for &k in &chosen {
            bank.mask[j * inputs + k] = true;
            bank.row_mut(j)[k] = 0.0;
        }
        grown.push(chosen);
    }
    grown
}

/// Full-size momentum-optimizer buffers for one bank, aligned with its
/// weight slots; inactive slots hold zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentumBuffers {
    /// Dual variables, `v = w^[p-1]` over active slots.
    pub v: Vec<f64>,
    /// Momentum accumulator.
    pub mu: Vec<f64>,
    /// Per-neuron bias momentum (empty when the layer has no bias).
    pub bias_mu: Vec<f64>,
}

/// One mask-evolution tick: drop, grow, renormalize, momentum hygiene,
/// controller update. No-op unless `t` is a tick per the schedule. The
/// `momentum` slice, when present, is indexed by layer and is rebuilt so
/// every dual stays consistent with its renormalized weights and dropped
/// slots carry no stale momentum.
pub fn evolution_tick(
    net: &mut Network,
    mut momentum: Option<&mut [Option<MomentumBuffers>]>,
    schedule: &mut EvolutionSchedule,
    t: u64,
    rng: &mut impl Rng,
) -> Result<Vec<MaskEdit>> {
    if !schedule.is_tick(t) {
        return Ok(Vec::new());
    }
    let s_before = network_sparsity(net);
    let mut edits = Vec::new();
    let mut total_dropped = 0usize;
    let mut total_grown = 0usize;
    for li in 0..net.layers.len() {
        let grads = match (&net.layers[li], net.layers[li].grads()) {
            (Layer::Dense(_) | Layer::Conv(_), Some(g)) => g.weights.clone(),
            (Layer::Dense(_) | Layer::Conv(_), None) => {
                return Err(LpssError::Degenerate(format!(
                    "layer {li} has no gradients; run backward before an evolution tick"
                )));
            }
            _ => continue,
        };
        let bank = net.layers[li].bank_mut().expect("trainable layer");
        let dropped = drop_step(bank, schedule.zeta_w, rng)?;
        let counts: Vec<usize> = dropped.iter().map(Vec::len).collect();
        let grown = grow_step(bank, &grads, schedule.zeta_g, &counts);
        if let Some(buffers) = momentum.as_deref_mut() {
            if let Some(mb) = buffers.get_mut(li).and_then(Option::as_mut) {
                let inputs = bank.inputs();
                for (j, doomed) in dropped.iter().enumerate() {
                    for &k in doomed {
                        mb.mu[j * inputs + k] = 0.0;
                    }
                }
                let constraint = bank.constraint();
                mb.v = dual_from_weights(&bank.weights, &constraint)?;
            }
        }
        for (j, (d, g)) in dropped.into_iter().zip(grown).enumerate() {
            total_dropped += d.len();
            total_grown += g.len();
            if d.is_empty() && g.is_empty() {
                continue;
            }
            edits.push(MaskEdit {
                iteration: t,
                layer: li,
                neuron: j,
                dropped: d,
                grown: g,
                zeta_w: schedule.zeta_w,
                zeta_g: schedule.zeta_g,
                sparsity_after: f64::NAN,
            });
        }
    }
    let s_after = network_sparsity(net);
    for edit in &mut edits {
        edit.sparsity_after = s_after;
    }
    // Semi-pruning: below target the controller grows strictly less than
    // it drops, so sparsity ratchets upward.
    debug_assert!(
        !(s_before < schedule.s_expect && total_dropped > 0) || total_grown < total_dropped,
        "grew {total_grown} >= dropped {total_dropped} while below target"
    );
    schedule.zeta_w = update_zeta_w(t, schedule.t_end, schedule.alpha_drop);
    schedule.zeta_g = update_zeta_g(s_after, schedule.s_expect, schedule.tau_gap);
    Ok(edits)
}
