//! Command-line entry points. Every subcommand is a thin shell over the
//! library: parse and validate, delegate, print. Exit codes are 0 on
//! success, 1 for anything rejected before compute (bad flags, bad
//! config, bad data), and 2 for runtime failures (numerics, io).

use crate::error::{LpssError, Result};
use crate::geometry::{normalize_lp, LpConstraint};
use crate::gradcheck;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::train::run_training;
use crate::harness::{preset_spec, RunConfig};
use crate::hoyer::GammaHoyerModel;
use crate::metrics::{neuron_cross_correlation, LayerSparsityReport};
use crate::optim::{quadratic_trace, QuadraticSphereProblem};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "lpss",
    version,
    about = "Sparse neural-network training with per-neuron weights on the unit Lp-sphere"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job described by a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a checkpoint: per-layer sparsity and neuron correlations.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the CSV reports (default: next to the checkpoint).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Closed-form expected Hoyer sparsity for each exponent, as CSV.
    HoyerTheory {
        #[arg(long)]
        d: usize,
        /// Comma-separated sphere exponents, e.g. `--p 1.2,2,3`.
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Monte Carlo estimate of the expected Hoyer sparsity, as CSV.
    HoyerMc {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every gradient in a preset network.
    Gradcheck {
        #[arg(long)]
        preset: String,
    },
    /// Step-size-bound trace on the quadratic sphere problem, as CSV.
    LrBound {
        /// `quadratic` steps at half the safe bound; `quadratic-overdriven`
        /// at ten times it.
        #[arg(long)]
        preset: String,
    },
}

/// Parses `argv` and runs the selected subcommand, returning the process
/// exit code instead of exiting so tests can drive it in-process.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and are not errors.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => train(&config),
        Command::Analyze {
            checkpoint,
            out_dir,
        } => analyze(&checkpoint, out_dir.as_deref()),
        Command::HoyerTheory { d, p, alpha } => hoyer_theory(d, &p, alpha),
        Command::HoyerMc {
            d,
            p,
            alpha,
            samples,
            seed,
        } => hoyer_mc(d, p, alpha, samples, seed),
        Command::Gradcheck { preset } => gradcheck_preset(&preset),
        Command::LrBound { preset } => lr_bound_preset(&preset),
    }
}

fn train(config_path: &Path) -> Result<()> {
    let config = RunConfig::from_path(config_path)?;
    let outcome = run_training(&config)?;
    for r in &outcome.records {
        println!(
            "epoch {}: loss {:.4}, train acc {:.4}, test acc {:.4}, sparsity {:.4}, max sphere err {:.2e}",
            r.epoch,
            r.mean_loss,
            r.train_accuracy,
            r.test_accuracy,
            r.standard_sparsity,
            r.max_constraint_error
        );
    }
    println!("artifacts in {}", outcome.run_dir.display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| {
        LpssError::Io(std::io::Error::new(
            std::io::ErrorKind::Other,
            format!("cannot write {}: {e}", path.display()),
        ))
    })
}

fn analyze(checkpoint: &Path, out_dir: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let out = match out_dir {
        Some(dir) => dir.to_path_buf(),
        None => checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf(),
    };
    std::fs::create_dir_all(&out).map_err(|e| {
        LpssError::Io(std::io::Error::new(
            e.kind(),
            format!("cannot create {}: {e}", out.display()),
        ))
    })?;
    println!(
        "checkpoint: seed {}, {} completed epochs, {} iterations",
        ck.meta.seed, ck.meta.epoch, ck.meta.iteration
    );
    if let Some((zw, zg)) = ck.meta.zeta {
        println!("evolution controllers: zeta_w {zw:.6}, zeta_g {zg:.6}");
    }

    let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut report = csv_writer(&out.join("sparsity_report.csv"))?;
    let as_io = |e: csv::Error| {
        LpssError::Io(std::io::Error::new(
            std::io::ErrorKind::Other,
            format!("cannot write report: {e}"),
        ))
    };
    report
        .write_record([
            "layer",
            "neurons",
            "slots_per_neuron",
            "active_fraction",
            "standard_sparsity",
            "mean_hoyer",
        ])
        .map_err(as_io)?;
    for (li, layer) in ck.layers.iter().enumerate() {
        let Some(bank) = layer.bank() else { continue };
        let rows = bank.rows();
        let summary = LayerSparsityReport::from_rows(format!("layer {li}"), &rows);
        report
            .write_record([
                summary.layer.clone(),
                summary.neurons.to_string(),
                summary.slots_per_neuron.to_string(),
                summary.active_fraction.to_string(),
                summary.standard_sparsity.to_string(),
                fmt_opt(summary.mean_hoyer),
            ])
            .map_err(as_io)?;
        println!(
            "layer {li}: {} neurons x {} slots, active {:.4}, sparsity {:.4}, mean hoyer {}",
            summary.neurons,
            summary.slots_per_neuron,
            summary.active_fraction,
            summary.standard_sparsity,
            fmt_opt(summary.mean_hoyer)
        );

        // Full symmetric correlation matrix; blank cells mark degenerate
        // pairs (a constant row has no correlation).
        let pairs = neuron_cross_correlation(&rows);
        let m = rows.len();
        let mut matrix = vec![vec![None::<f64>; m]; m];
        for i in 0..m {
            matrix[i][i] = crate::metrics::pearson_correlation(&rows[i], &rows[i]);
        }
        for (i, j, r) in pairs {
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
        let mut corr = csv_writer(&out.join(format!("correlation_layer{li}.csv")))?;
        let mut header = vec!["neuron".to_string()];
        header.extend((0..m).map(|j| format!("n{j}")));
        corr.write_record(&header).map_err(as_io)?;
        for (i, row) in matrix.iter().enumerate() {
            let mut record = vec![format!("n{i}")];
            record.extend(row.iter().map(|&v| fmt_opt(v)));
            corr.write_record(&record).map_err(as_io)?;
        }
        corr.flush()
            .map_err(|e| LpssError::Io(std::io::Error::new(e.kind(), e.to_string())))?;
    }
    report
        .flush()
        .map_err(|e| LpssError::Io(std::io::Error::new(e.kind(), e.to_string())))?;
    println!("reports in {}", out.display());
    Ok(())
}

fn hoyer_theory(d: usize, ps: &[f64], alpha: f64) -> Result<()> {
    println!("d,p,alpha,tau,expected_hoyer");
    for &p in ps {
        let model = GammaHoyerModel::new(d, p, alpha)?;
        println!("{d},{p},{alpha},{},{}", model.tau(), model.expected_hoyer()?);
    }
    Ok(())
}

fn hoyer_mc(d: usize, p: f64, alpha: f64, samples: usize, seed: u64) -> Result<()> {
    let model = GammaHoyerModel::new(d, p, alpha)?;
    let estimate = model.mc_expected_hoyer(samples, seed)?;
    println!("d,p,alpha,tau,samples,seed,mean,stderr");
    println!(
        "{d},{p},{alpha},{},{},{seed},{},{}",
        model.tau(),
        estimate.samples,
        estimate.mean,
        estimate.stderr
    );
    Ok(())
}

fn gradcheck_preset(preset: &str) -> Result<()> {
    let spec = preset_spec(preset)?;
    let classes = spec.output_features()?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let case = gradcheck::screen_case(preset, spec, 0xC0FFEE, classes, &mut rng)?;
    let outcome = gradcheck::run_case(&case, 1e-5)?;
    println!(
        "checked {} parameters: worst relative error {:.3e}, worst absolute error {:.3e}",
        outcome.params, outcome.worst_rel, outcome.worst_abs
    );
    if !outcome.passed() {
        for m in &outcome.mismatches {
            eprintln!(
                "layer {} param {}: analytic {:.10e} vs numeric {:.10e}",
                m.layer, m.param, m.analytic, m.numeric
            );
        }
        return Err(LpssError::Numerics(format!(
            "{} of {} gradients disagree with finite differences",
            outcome.mismatches.len(),
            outcome.params
        )));
    }
    println!("gradient check passed");
    Ok(())
}

fn lr_bound_preset(preset: &str) -> Result<()> {
    let multiple = match preset {
        "quadratic" => 0.5,
        "quadratic-overdriven" => 10.0,
        other => {
            return Err(LpssError::Config(format!(
                "unknown preset {other:?}; available: quadratic, quadratic-overdriven"
            )))
        }
    };
    let dim = 10;
    let spectrum: Vec<f64> = (0..dim)
        .map(|i| 1.0 + 2.0 * i as f64 / (dim - 1) as f64)
        .collect();
    let problem = QuadraticSphereProblem::with_spectrum(7, &spectrum)?;
    let constraint = LpConstraint::new(2.0)?;
    let w0 = normalize_lp(&vec![1.0; dim], 2.0)?.into_vec();
    let rows = quadratic_trace(&problem, &constraint, &w0, 100, multiple)?;
    println!("iter,risk,residual,bound");
    for row in rows {
        println!(
            "{},{},{},{}",
            row.iter,
            row.risk,
            row.residual,
            row.bound.map_or(String::new(), |b| b.to_string())
        );
    }
    Ok(())
}
