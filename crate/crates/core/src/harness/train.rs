//! The training loop: batched spherical updates, optional mask evolution,
//! per-epoch metrics, and deterministic artifacts in the run directory.
//!
//! A run writes `config.json`, `metrics.jsonl` (one record per epoch),
//! `mask_edits.jsonl` (when evolution is on), `timings.csv`, and a final
//! `checkpoint.bin`. Everything except `timings.csv` is byte-reproducible
//! for a fixed config and seed; wall-clock numbers live in the sidecar so
//! they never perturb the comparable artifacts.

use crate::error::{LpssError, Result};
use crate::evolution::{evolution_tick, EvolutionSchedule, MomentumBuffers};
use crate::harness::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::harness::data::Dataset;
use crate::harness::{derive_seed, RunConfig};
use crate::metrics::{layer_mean_hoyer, standard_sparsity};
use crate::nn::layers::LayerGrads;
use crate::nn::loss::{predictions, softmax_cross_entropy};
use crate::nn::{Layer, Network};
use crate::optim::{
    bias_step, lpsgd_step, lpsgdm_step, stationarity_residual, BracketNorm,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

/// Momentum buffers for one batchnorm layer's scale and shift vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BnMomentum {
    pub scale_mu: Vec<f64>,
    pub shift_mu: Vec<f64>,
}

/// Optimizer state for a whole network. `gamma: None` selects the plain
/// spherical step, which keeps no state at all; with momentum, `banks`
/// and `bn` are aligned with the layer stack and hold `Some` exactly at
/// trainable and batchnorm layers respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub gamma: Option<f64>,
    pub banks: Vec<Option<MomentumBuffers>>,
    pub bn: Vec<Option<BnMomentum>>,
}

impl OptState {
    pub fn new(net: &Network, gamma: Option<f64>) -> Result<OptState> {
        let mut banks = vec![None; net.layers.len()];
        let mut bn = vec![None; net.layers.len()];
        if gamma.is_some() {
            for (li, layer) in net.layers.iter().enumerate() {
                match layer {
                    Layer::Dense(_) | Layer::Conv(_) => {
                        let bank = layer.bank().expect("trainable layer");
                        let v =
                            crate::optim::dual_from_weights(&bank.weights, &bank.constraint())?;
                        banks[li] = Some(MomentumBuffers {
                            v,
                            mu: vec![0.0; bank.weights.len()],
                            bias_mu: vec![0.0; bank.bias.as_ref().map_or(0, Vec::len)],
                        });
                    }
                    Layer::BatchNorm(b) => {
                        bn[li] = Some(BnMomentum {
                            scale_mu: vec![0.0; b.channels()],
                            shift_mu: vec![0.0; b.channels()],
                        });
                    }
                    _ => {}
                }
            }
        }
        Ok(OptState { gamma, banks, bn })
    }

    /// View for the evolution tick's momentum hygiene; `None` when the
    /// plain optimizer is active.
    pub fn momentum_slice(&mut self) -> Option<&mut [Option<MomentumBuffers>]> {
        if self.gamma.is_some() {
            Some(self.banks.as_mut_slice())
        } else {
            None
        }
    }
}

/// One epoch's worth of measurements; serialized as a single JSON line.
/// The per-layer vectors follow the trainable layers in stack order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u32,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub mean_loss: f64,
    pub layer_mean_hoyer: Vec<f64>,
    pub standard_sparsity: f64,
    pub zeta_w: Option<f64>,
    pub zeta_g: Option<f64>,
    pub layer_residual: Vec<f64>,
    pub max_constraint_error: f64,
}

/// What a finished run hands back to callers beyond the files on disk.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub net: Network,
    pub opt: OptState,
    pub checkpoint: PathBuf,
}

/// Accuracy and mean cross-entropy of the network over a dataset, in
/// evaluation mode (batchnorm uses running statistics; nothing mutates).
pub fn evaluate(net: &mut Network, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk);
        let logits = net.forward(&x, false);
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        correct += predictions(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    let n = ds.len().max(1) as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

/// One optimizer step over every parameter, from the gradients left by the
/// last backward pass. Weight updates run per neuron on the active slots;
/// a neuron whose update degenerates (zero gradient, or zero decayed
/// momentum) is skipped for this batch, though its momentum decay still
/// commits. Biases and batchnorm parameters take classical steps.
pub fn step_network(net: &mut Network, opt: &mut OptState, rate: f64) -> Result<()> {
    let gamma = opt.gamma;
    for (li, layer) in net.layers.iter_mut().enumerate() {
        match layer {
            Layer::Dense(_) | Layer::Conv(_) => {
                let grads: LayerGrads = layer
                    .grads()
                    .ok_or_else(|| {
                        LpssError::Degenerate(format!(
                            "layer {li} has no gradients; run backward before stepping"
                        ))
                    })?
                    .clone();
                let bank = layer.bank_mut().expect("trainable layer");
                let constraint = bank.constraint();
                let inputs = bank.inputs();
                for j in 0..bank.neurons() {
                    let active = bank.active_indices(j);
                    let g_row = &grads.weights[j * inputs..(j + 1) * inputs];
                    let g_active: Vec<f64> = active.iter().map(|&k| g_row[k]).collect();
                    let mut w_active = bank.active_weights(j);
                    match (gamma, opt.banks[li].as_mut()) {
                        (Some(gm), Some(mb)) => {
                            let gather = |buf: &[f64]| -> Vec<f64> {
                                active.iter().map(|&k| buf[j * inputs + k]).collect()
                            };
                            let mut v_active = gather(&mb.v);
                            let mut mu_active = gather(&mb.mu);
                            match lpsgdm_step(
                                &mut v_active,
                                &mut w_active,
                                &mut mu_active,
                                &g_active,
                                rate,
                                gm,
                                &constraint,
                            ) {
                                Ok(()) => {
                                    bank.set_active_weights(j, &w_active);
                                    for (i, &k) in active.iter().enumerate() {
                                        mb.v[j * inputs + k] = v_active[i];
                                        mb.mu[j * inputs + k] = mu_active[i];
                                    }
                                }
                                // The accumulator update committed before
                                // the skip, so write it back regardless.
                                Err(LpssError::Degenerate(_)) => {
                                    for (i, &k) in active.iter().enumerate() {
                                        mb.mu[j * inputs + k] = mu_active[i];
                                    }
                                }
                                Err(e) => return Err(e),
                            }
                        }
                        (None, _) => {
                            match lpsgd_step(
                                &mut w_active,
                                &g_active,
                                rate,
                                &constraint,
                                BracketNorm::P,
                            ) {
                                Ok(()) => bank.set_active_weights(j, &w_active),
                                Err(LpssError::Degenerate(_)) => {}
                                Err(e) => return Err(e),
                            }
                        }
                        (Some(_), None) => unreachable!("momentum state missing for layer {li}"),
                    }
                    if let Some(bias) = bank.bias.as_mut() {
                        match (gamma, opt.banks[li].as_mut()) {
                            (Some(gm), Some(mb)) => {
                                bias_step(&mut bias[j], &mut mb.bias_mu[j], grads.bias[j], rate, gm)
                            }
                            _ => {
                                let mut dead = 0.0;
                                bias_step(&mut bias[j], &mut dead, grads.bias[j], rate, 0.0)
                            }
                        }
                    }
                }
            }
            Layer::BatchNorm(bn) => {
                let grads = bn.grads.clone().ok_or_else(|| {
                    LpssError::Degenerate(format!(
                        "layer {li} has no gradients; run backward before stepping"
                    ))
                })?;
                for c in 0..bn.channels() {
                    match (gamma, opt.bn[li].as_mut()) {
                        (Some(gm), Some(m)) => {
                            bias_step(&mut bn.scale[c], &mut m.scale_mu[c], grads.scale[c], rate, gm);
                            bias_step(&mut bn.shift[c], &mut m.shift_mu[c], grads.shift[c], rate, gm);
                        }
                        _ => {
                            let mut dead = 0.0;
                            bias_step(&mut bn.scale[c], &mut dead, grads.scale[c], rate, 0.0);
                            let mut dead = 0.0;
                            bias_step(&mut bn.shift[c], &mut dead, grads.shift[c], rate, 0.0);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mean Hoyer sparsity of each trainable layer, in stack order.
pub fn per_layer_hoyer(net: &Network) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for layer in &net.layers {
        if let Some(bank) = layer.bank() {
            let rows: Vec<Vec<f64>> = (0..bank.neurons()).map(|j| bank.row(j).to_vec()).collect();
            out.push(layer_mean_hoyer(&rows)?.0);
        }
    }
    Ok(out)
}

/// Mean per-neuron stationarity residual of each trainable layer, from
/// the gradients currently cached in the layers (the last batch's).
pub fn per_layer_residual(net: &Network) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for layer in &net.layers {
        let (bank, grads) = match (layer.bank(), layer.grads()) {
            (Some(b), Some(g)) => (b, g),
            (Some(_), None) => {
                return Err(LpssError::Degenerate(
                    "no gradients cached; run backward before the residual".into(),
                ))
            }
            _ => continue,
        };
        let inputs = bank.inputs();
        let constraint = bank.constraint();
        let mut sum = 0.0;
        for j in 0..bank.neurons() {
            let active = bank.active_indices(j);
            let w: Vec<f64> = bank.active_weights(j);
            let g: Vec<f64> = active
                .iter()
                .map(|&k| grads.weights[j * inputs + k])
                .collect();
            sum += stationarity_residual(&w, &g, &constraint)?;
        }
        out.push(sum / bank.neurons() as f64);
    }
    Ok(out)
}

fn all_bank_weights(net: &Network) -> Vec<f64> {
    net.layers
        .iter()
        .filter_map(Layer::bank)
        .flat_map(|b| b.weights.iter().copied())
        .collect()
}

fn io_err(msg: String) -> LpssError {
    LpssError::Io(std::io::Error::new(std::io::ErrorKind::Other, msg))
}

fn append_json_line<T: Serialize>(file: &mut std::fs::File, value: &T) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| io_err(format!("cannot serialize record: {e}")))?;
    writeln!(file, "{line}").map_err(|e| io_err(format!("cannot append record: {e}")))
}

fn create_file(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::create(path)
        .map_err(|e| io_err(format!("cannot create {}: {e}", path.display())))
}

/// Dump of the network's scale diagnostics for the non-finite-loss abort:
/// per-layer weight and bias norms plus the last step size and thresholds.
fn write_diagnostic(
    path: &std::path::Path,
    net: &Network,
    epoch: u32,
    t: u64,
    rate: f64,
    schedule: Option<&EvolutionSchedule>,
) {
    let mut text = format!("non-finite loss at epoch {epoch}, iteration {t}\nlast rate: {rate}\n");
    if let Some(s) = schedule {
        text.push_str(&format!("zeta_w: {}, zeta_g: {}\n", s.zeta_w, s.zeta_g));
    }
    for (li, layer) in net.layers.iter().enumerate() {
        if let Some(bank) = layer.bank() {
            let w2 = crate::geometry::lp_norm(&bank.weights, 2.0);
            let b2 = bank
                .bias
                .as_ref()
                .map_or(0.0, |b| crate::geometry::lp_norm(b, 2.0));
            text.push_str(&format!(
                "layer {li}: |W|_2 = {w2:.6e}, |b|_2 = {b2:.6e}, active = {}\n",
                bank.active_count()
            ));
        }
        if let Layer::BatchNorm(bn) = layer {
            let s2 = crate::geometry::lp_norm(&bn.scale, 2.0);
            text.push_str(&format!("layer {li}: batchnorm |scale|_2 = {s2:.6e}\n"));
        }
    }
    let _ = std::fs::write(path, text);
}

/// Runs a full training job described by `config` and writes its
/// artifacts into `config.output_dir` (created if needed, files
/// truncated). With `epochs: 0` no parameter changes: the run emits a
/// single evaluation-only record and a checkpoint of the initial state.
pub fn run_training(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.model_spec()?;
    let (train, test) = config.dataset.load(config.seed)?;

    let (c, h, w) = train.shape();
    if [c, h, w] != spec.input {
        return Err(LpssError::Config(format!(
            "model expects input {:?} but the dataset provides ({c}, {h}, {w})",
            spec.input
        )));
    }
    let out_features = spec.output_features()?;
    if train.classes() > out_features {
        return Err(LpssError::Config(format!(
            "dataset has {} classes but the model emits {out_features} logits",
            train.classes()
        )));
    }

    let seed = config.seed;
    let mut net = Network::build(
        &spec,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0)),
    )?;

    let batches_per_epoch = train.len().div_ceil(config.batch_size) as u64;
    let mut schedule = match &config.evolution {
        Some(evo) => {
            crate::evolution::init_topology(
                &mut net,
                evo.s_init,
                &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "topology", 0)),
            )?;
            Some(evo.to_schedule(batches_per_epoch)?)
        }
        None => None,
    };

    let gamma = match &config.optimizer {
        crate::harness::OptimizerConfig::Lpsgd => None,
        crate::harness::OptimizerConfig::LpsgdM { gamma } => Some(*gamma),
    };
    let mut opt = OptState::new(&net, gamma)?;

    let mut start_epoch: u32 = 0;
    let mut t: u64 = 0;
    if let Some(resume) = &config.resume {
        let ck = Checkpoint::read(resume)?;
        if ck.meta.seed != seed {
            return Err(LpssError::Config(format!(
                "checkpoint was produced under seed {} but the config says {seed}",
                ck.meta.seed
            )));
        }
        ck.restore(&mut net, &mut opt)?;
        match (&mut schedule, ck.meta.zeta) {
            (Some(s), Some((zw, zg))) => {
                s.zeta_w = zw;
                s.zeta_g = zg;
            }
            (Some(_), None) => {
                return Err(LpssError::Config(
                    "config enables evolution but the checkpoint has no controller state".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(LpssError::Config(
                    "checkpoint carries evolution state but the config disables it".into(),
                ))
            }
            (None, None) => {}
        }
        start_epoch = ck.meta.epoch;
        t = ck.meta.iteration;
    }

    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| io_err(format!("cannot create {}: {e}", config.output_dir.display())))?;
    let run_dir = config.output_dir.clone();
    let config_json = serde_json::to_string_pretty(config)
        .map_err(|e| io_err(format!("cannot serialize config: {e}")))?;
    std::fs::write(run_dir.join("config.json"), config_json + "\n")
        .map_err(|e| io_err(format!("cannot write config.json: {e}")))?;
    let mut metrics_file = create_file(&run_dir.join("metrics.jsonl"))?;
    let mut edits_file = match schedule {
        Some(_) => Some(create_file(&run_dir.join("mask_edits.jsonl"))?),
        None => None,
    };
    let mut timings_file = create_file(&run_dir.join("timings.csv"))?;
    writeln!(timings_file, "epoch,seconds")
        .map_err(|e| io_err(format!("cannot write timings: {e}")))?;

    let mut records = Vec::new();

    if config.epochs == 0 {
        // Evaluation-only: measure without touching parameters. The
        // residual probe runs one train-mode pass for gradients, with
        // batchnorm running statistics saved and restored around it.
        let saved: Vec<(usize, Vec<f64>, Vec<f64>)> = net
            .layers
            .iter()
            .enumerate()
            .filter_map(|(li, l)| match l {
                Layer::BatchNorm(b) => {
                    Some((li, b.running_mean.clone(), b.running_var.clone()))
                }
                _ => None,
            })
            .collect();
        let probe: Vec<usize> = (0..train.len().min(config.batch_size)).collect();
        let (x, labels) = train.batch(&probe);
        let logits = net.forward(&x, true);
        let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
        net.backward(&grad);
        for (li, mean, var) in saved {
            if let Layer::BatchNorm(b) = &mut net.layers[li] {
                b.running_mean = mean;
                b.running_var = var;
            }
        }
        let record = build_record(&mut net, &train, &test, config, start_epoch, f64::NAN, &schedule)?;
        append_json_line(&mut metrics_file, &record)?;
        records.push(record);
    }

    for epoch in start_epoch..start_epoch.saturating_add(config.epochs) {
        let epoch_start = Instant::now();
        let rate = config.lr.rate(epoch, config.batch_size);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            "shuffle",
            u64::from(epoch),
        )));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = train.batch(chunk);
            let logits = net.forward(&x, true);
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                let path = run_dir.join("diagnostic.txt");
                write_diagnostic(&path, &net, epoch, t, rate, schedule.as_ref());
                return Err(LpssError::Numerics(format!(
                    "loss became non-finite at epoch {epoch}, iteration {t}; diagnostics in {}",
                    path.display()
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            net.backward(&grad);
            step_network(&mut net, &mut opt, rate)?;
            t += 1;
            if let Some(s) = &mut schedule {
                if s.is_tick(t) {
                    let edits = evolution_tick(
                        &mut net,
                        opt.momentum_slice(),
                        s,
                        t,
                        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "tick", t)),
                    )?;
                    if let Some(f) = &mut edits_file {
                        for edit in &edits {
                            append_json_line(f, edit)?;
                        }
                    }
                }
            }
        }
        let mean_loss = loss_sum / train.len() as f64;
        let record = build_record(&mut net, &train, &test, config, epoch, mean_loss, &schedule)?;
        append_json_line(&mut metrics_file, &record)?;
        records.push(record);
        writeln!(
            timings_file,
            "{epoch},{:.3}",
            epoch_start.elapsed().as_secs_f64()
        )
        .map_err(|e| io_err(format!("cannot write timings: {e}")))?;
    }

    let checkpoint_path = run_dir.join("checkpoint.bin");
    let meta = CheckpointMeta {
        seed,
        epoch: start_epoch.saturating_add(config.epochs),
        iteration: t,
        zeta: schedule.as_ref().map(|s| (s.zeta_w, s.zeta_g)),
    };
    save_checkpoint(&checkpoint_path, &net, &opt, &meta)?;

    Ok(TrainOutcome {
        run_dir,
        records,
        net,
        opt,
        checkpoint: checkpoint_path,
    })
}

fn build_record(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    config: &RunConfig,
    epoch: u32,
    mean_loss: f64,
    schedule: &Option<EvolutionSchedule>,
) -> Result<MetricsRecord> {
    let layer_residual = per_layer_residual(net)?;
    let (train_accuracy, train_eval_loss) = evaluate(net, train, config.batch_size)?;
    let (test_accuracy, _) = evaluate(net, test, config.batch_size)?;
    let mean_loss = if mean_loss.is_nan() {
        // Evaluation-only runs have no training batches to average.
        train_eval_loss
    } else {
        mean_loss
    };
    Ok(MetricsRecord {
        epoch,
        train_accuracy,
        test_accuracy,
        mean_loss,
        layer_mean_hoyer: per_layer_hoyer(net)?,
        standard_sparsity: standard_sparsity(&all_bank_weights(net)),
        zeta_w: schedule.as_ref().map(|s| s.zeta_w),
        zeta_g: schedule.as_ref().map(|s| s.zeta_g),
        layer_residual,
        max_constraint_error: net.max_constraint_error(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{
        DatasetConfig, EvolutionConfig, ModelConfig, OptimizerConfig,
    };
    use crate::optim::{LrKind, LrSchedule};

    fn base_config(dir: &std::path::Path) -> RunConfig {
        RunConfig {
            dataset: DatasetConfig::TwoGaussians {
                n: 120,
                test_fraction: 0.25,
            },
            model: ModelConfig::Custom {
                input: [1, 1, 2],
                layers: vec![
                    crate::nn::LayerSpec::Dense {
                        neurons: 8,
                        bias: true,
                        p: 2.0,
                    },
                    crate::nn::LayerSpec::Relu,
                    crate::nn::LayerSpec::Dense {
                        neurons: 2,
                        bias: true,
                        p: 1.5,
                    },
                ],
            },
            p_per_layer: None,
            optimizer: OptimizerConfig::LpsgdM { gamma: 0.9 },
            lr: LrSchedule {
                kind: LrKind::StepDecay {
                    initial: 0.05,
                    factor: 1.0,
                    every_n_epochs: 1,
                },
                divide_by_batch_size: false,
            },
            evolution: None,
            epochs: 3,
            batch_size: 16,
            seed: 42,
            output_dir: dir.to_path_buf(),
            resume: None,
        }
    }

    #[test]
    fn two_gaussians_run_learns_and_stays_on_sphere() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_training(&base_config(dir.path())).unwrap();
        assert_eq!(outcome.records.len(), 3);
        let last = outcome.records.last().unwrap();
        // Linearly separable blobs: near-perfect in a few epochs.
        assert!(last.test_accuracy > 0.9, "accuracy {}", last.test_accuracy);
        for record in &outcome.records {
            assert!(record.max_constraint_error < 1e-9);
            assert_eq!(record.layer_mean_hoyer.len(), 2);
            assert_eq!(record.layer_residual.len(), 2);
            assert!(record.zeta_w.is_none());
        }
        assert!(outcome.checkpoint.is_file());
        assert!(dir.path().join("metrics.jsonl").is_file());
        assert!(dir.path().join("config.json").is_file());
        assert!(!dir.path().join("mask_edits.jsonl").exists());
    }

    #[test]
    fn metrics_are_byte_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config_a = base_config(dir_a.path());
        config_a.epochs = 2;
        let mut config_b = base_config(dir_b.path());
        config_b.epochs = 2;
        run_training(&config_a).unwrap();
        run_training(&config_b).unwrap();
        let a = std::fs::read(dir_a.path().join("metrics.jsonl")).unwrap();
        let b = std::fs::read(dir_b.path().join("metrics.jsonl")).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn seed_changes_the_trajectory() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config_a = base_config(dir_a.path());
        let mut config_b = base_config(dir_b.path());
        config_b.seed = 43;
        let a = run_training(&config_a).unwrap();
        let b = run_training(&config_b).unwrap();
        assert_ne!(
            a.records.last().unwrap().mean_loss,
            b.records.last().unwrap().mean_loss
        );
    }

    #[test]
    fn evolution_run_writes_edits_and_keeps_masks_clean() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(dir.path());
        config.evolution = Some(EvolutionConfig {
            interval: Some(2),
            alpha_drop: 0.3,
            t_end: 100,
            tau_gap: 0.05,
            s_expect: 0.5,
            s_init: 0.1,
        });
        let outcome = run_training(&config).unwrap();
        assert!(outcome.net.masked_slots_are_zero());
        assert!(outcome.net.max_constraint_error() < 1e-9);
        let last = outcome.records.last().unwrap();
        assert!(last.zeta_w.is_some() && last.zeta_g.is_some());
        let edits = std::fs::read_to_string(dir.path().join("mask_edits.jsonl")).unwrap();
        assert!(!edits.is_empty());
        let first: crate::evolution::MaskEdit =
            serde_json::from_str(edits.lines().next().unwrap()).unwrap();
        assert!(first.iteration > 0);
        // Momentum duals must match the renormalized weights after ticks.
        for (li, buffers) in outcome.opt.banks.iter().enumerate() {
            if let (Some(mb), Some(bank)) = (buffers, outcome.net.layers[li].bank()) {
                let v = crate::optim::dual_from_weights(&bank.weights, &bank.constraint())
                    .unwrap();
                for (a, b) in mb.v.iter().zip(&v) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn eval_only_run_emits_one_record_without_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(dir.path());
        config.epochs = 0;
        let outcome = run_training(&config).unwrap();
        assert_eq!(outcome.records.len(), 1);
        let record = &outcome.records[0];
        assert_eq!(record.epoch, 0);
        assert!(record.mean_loss.is_finite());
        assert!(record.max_constraint_error < 1e-9);
        // Fresh init: nowhere near trained accuracy on the blobs is fine,
        // but the record must still carry every field.
        assert_eq!(record.layer_residual.len(), 2);
    }

    #[test]
    fn plain_optimizer_keeps_no_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(dir.path());
        config.optimizer = OptimizerConfig::Lpsgd;
        config.epochs = 1;
        let outcome = run_training(&config).unwrap();
        assert!(outcome.opt.gamma.is_none());
        assert!(outcome.opt.banks.iter().all(Option::is_none));
        assert!(outcome.records[0].max_constraint_error < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(dir.path());
        config.model = ModelConfig::Preset {
            name: "mnist-small".into(),
        };
        let err = run_training(&config).unwrap_err();
        assert!(err.to_string().contains("input"), "got: {err}");
    }
}
