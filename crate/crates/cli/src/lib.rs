//! `rotunet` command-line front end.

pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use rotunet::checkpoint::load_checkpoint;
use rotunet::equivariance::{certify, default_tolerance, EquivarianceReport, Verdict};
use rotunet::experiment::Experiment;
use rotunet::groups::GroupKind;
use rotunet::report::{curve_csv, load_run_dir, table_csv};
use rotunet::tensor::Scalar;
use rotunet::train::{evaluate, EpochRecord, ExperimentConfig, Normalization, Precision, N_FOLDS};
use rotunet::unet::{ArchConfig, ModelDescriptor, ModelSize, UNet};
use rotunet::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_CERTIFICATE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "rotunet", version, about = "Rotation-equivariant U-Nets: training, evaluation and certificates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ExperimentArgs {
    /// Experiment config (TOML with [model], [train], [data] sections).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.n_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.precision`.
    #[arg(long)]
    pub precision: Option<Precision>,
}

impl ExperimentArgs {
    fn load(&self) -> rotunet::Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        if let Some(p) = self.precision {
            let p = match p {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            };
            overrides.push(format!("train.precision=\"{p}\""));
        }
        ExperimentConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Five-fold cross-validation of one (family, size, data setting) cell.
    Crossval {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Subset of folds to run (default: all five).
        #[arg(long, value_delimiter = ',')]
        folds: Vec<usize>,
    },
    /// Train a single fold.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Evaluate a checkpoint on the test split of a fold.
    Evaluate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Measure end-to-end equivariance of a checkpoint or a fresh preset.
    Equicheck {
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        /// Fresh model, e.g. `c4-small`.
        #[arg(long)]
        preset: Option<String>,
        /// Input size for `--preset`.
        #[arg(long, default_value_t = 64)]
        input_hw: usize,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        #[arg(long, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative defect bound (default 1e-10 at f64, 1e-4 at f32).
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Trainable parameter counts of the presets.
    Params {
        /// Presets such as `vanilla-small`; all eight when omitted.
        presets: Vec<String>,
    },
    /// Tables and IoU-vs-time curves from a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Where to write outputs (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse `family-size`.
pub fn parse_preset(s: &str) -> rotunet::Result<(GroupKind, ModelSize)> {
    let (f, z) = s
        .split_once('-')
        .ok_or_else(|| Error::InvalidArgument(format!("preset '{s}' is not FAMILY-SIZE")))?;
    Ok((f.parse()?, z.parse()?))
}

pub fn all_presets() -> Vec<(GroupKind, ModelSize)> {
    let mut out = Vec::new();
    for size in [ModelSize::Small, ModelSize::Large] {
        for fam in [GroupKind::Trivial, GroupKind::C4, GroupKind::C8, GroupKind::D4] {
            out.push((fam, size));
        }
    }
    out
}

/// Rows `(preset, params, ratio to vanilla of the same size)`.
pub fn params_table(presets: &[(GroupKind, ModelSize)]) -> rotunet::Result<Vec<(String, usize, f64)>> {
    presets
        .iter()
        .map(|&(fam, size)| {
            let count = |f| ModelDescriptor::from_config(&ArchConfig::preset(f, size)).map(|d| d.param_count());
            let n = count(fam)?;
            let base = count(GroupKind::Trivial)?;
            Ok((format!("{fam}-{size}"), n, n as f64 / base as f64))
        })
        .collect()
}

fn progress(fold: usize, r: &EpochRecord) {
    let metrics: Vec<String> = r.metrics.entries.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
    eprintln!(
        "fold {fold} epoch {:>3}  {:>9.1}s  loss {:.4}  {}",
        r.epoch,
        r.cumulative_seconds,
        r.loss,
        metrics.join("  ")
    );
}

fn crossval<T: Scalar>(exp: &Experiment, folds: &[usize], out: &Path) -> rotunet::Result<()> {
    let result = exp.cross_validate::<T>(folds, Some(out), &mut progress)?;
    let header: Vec<&str> = result.aggregate.iter().map(|(n, _)| n.as_str()).collect();
    let table = format!("cell | {}\n{}\n", header.join(" | "), result.table_row());
    fs::write(exp.cell_dir(out).join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn train<T: Scalar>(exp: &Experiment, fold: usize, out: &Path) -> rotunet::Result<()> {
    let (_, outcome) = exp.run_fold::<T>(fold, Some(out), &mut |r| progress(fold, r))?;
    for (n, v) in &outcome.final_eval.summary.entries {
        println!("{n} {v:.6}");
    }
    Ok(())
}

fn evaluate_checkpoint<T: Scalar>(exp: &Experiment, ckpt: &Path, fold: usize) -> rotunet::Result<()> {
    let model: UNet<T> = load_checkpoint(ckpt)?.cast();
    let cfg = &exp.config.train;
    let norm = match &cfg.normalization {
        Some(n) => n.clone(),
        None => {
            let train = exp.plan.train(fold, cfg.data_setting)?;
            Normalization::fit(train.iter().map(|&i| &exp.data[i]))?
        }
    };
    let test: Vec<_> = exp.plan.test(fold).iter().map(|&i| &exp.data[i]).collect();
    let eval = evaluate(&model, &test, &norm, cfg.averaging, cfg.batch_size)?;
    for (n, v) in &eval.summary.entries {
        println!("{n} {v:.6}");
    }
    Ok(())
}

fn equicheck_model<T: Scalar>(model: &UNet<T>, probes: usize, seed: u64, tol: Option<f64>) -> rotunet::Result<EquivarianceReport> {
    certify(model, probes, seed, tol.unwrap_or_else(default_tolerance::<T>))
}

/// Exit code of an equivariance report: vanilla models never pass.
pub fn certificate_exit(report: &EquivarianceReport) -> i32 {
    match report.verdict() {
        Verdict::Certified => EXIT_OK,
        Verdict::Failed | Verdict::NoGuarantee => EXIT_CERTIFICATE,
    }
}

fn report(run_dir: &Path, out: &Path) -> rotunet::Result<()> {
    let cells = load_run_dir(run_dir)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), table_csv(&cells)?)?;
    let mut table = String::new();
    for c in &cells {
        let agg = c.aggregate()?;
        if table.is_empty() {
            let names: Vec<&str> = agg.iter().map(|(n, _)| n.as_str()).collect();
            table.push_str(&format!("cell | folds | {}\n", names.join(" | ")));
        }
        let vals: Vec<String> = agg.iter().map(|(_, m)| m.to_string()).collect();
        table.push_str(&format!("{} | {} | {}\n", c.cell.name(), c.folds.len(), vals.join(" | ")));
        let curve = c.curve();
        fs::write(out.join(format!("curve_{}.csv", c.cell.name())), curve_csv(&curve))?;
        if let Some(e) = curve.truncated_at {
            eprintln!("{}: folds logged different epoch counts; curve truncated at epoch {e}", c.cell.name());
        }
    }
    fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    for path in plot::plot_curves(&cells, out)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn dispatch(cli: Cli) -> rotunet::Result<i32> {
    match cli.command {
        Command::Crossval { exp, folds } => {
            let cfg = exp.load()?;
            let precision = cfg.train.precision;
            let e = Experiment::prepare(cfg)?;
            let folds = if folds.is_empty() { (0..N_FOLDS).collect() } else { folds };
            match precision {
                Precision::F32 => crossval::<f32>(&e, &folds, &exp.out)?,
                Precision::F64 => crossval::<f64>(&e, &folds, &exp.out)?,
            }
        }
        Command::Train { exp, fold } => {
            let cfg = exp.load()?;
            let precision = cfg.train.precision;
            let e = Experiment::prepare(cfg)?;
            match precision {
                Precision::F32 => train::<f32>(&e, fold, &exp.out)?,
                Precision::F64 => train::<f64>(&e, fold, &exp.out)?,
            }
        }
        Command::Evaluate { exp, checkpoint, fold } => {
            let cfg = exp.load()?;
            let precision = cfg.train.precision;
            let e = Experiment::prepare(cfg)?;
            match precision {
                Precision::F32 => evaluate_checkpoint::<f32>(&e, &checkpoint, fold)?,
                Precision::F64 => evaluate_checkpoint::<f64>(&e, &checkpoint, fold)?,
            }
        }
        Command::Equicheck {
            checkpoint,
            preset,
            input_hw,
            probes,
            precision,
            seed,
            tolerance,
        } => {
            let model = match (checkpoint, preset) {
                (Some(path), _) => load_checkpoint(&path)?,
                (None, Some(p)) => {
                    let (fam, size) = parse_preset(&p)?;
                    UNet::<f32>::new(ArchConfig::preset(fam, size).input_hw(input_hw), seed)?
                }
                (None, None) => return Err(Error::InvalidArgument("equicheck needs --checkpoint or --preset".into())),
            };
            let start = Instant::now();
            let report = match precision {
                Precision::F32 => equicheck_model(&model, probes, seed, tolerance)?,
                Precision::F64 => equicheck_model(&model.cast::<f64>(), probes, seed, tolerance)?,
            };
            println!("{report}");
            eprintln!("checked in {:.1}s", start.elapsed().as_secs_f64());
            return Ok(certificate_exit(&report));
        }
        Command::Params { presets } => {
            let presets = if presets.is_empty() {
                all_presets()
            } else {
                presets.iter().map(|p| parse_preset(p)).collect::<rotunet::Result<_>>()?
            };
            let mut out = std::io::stdout().lock();
            writeln!(out, "{:<14} {:>12} {:>10}", "preset", "params", "vs vanilla")?;
            for (name, n, ratio) in params_table(&presets)? {
                writeln!(out, "{name:<14} {n:>12} {ratio:>10.3}")?;
            }
        }
        Command::Report { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.clone());
            report(&run_dir, &out)?;
        }
    }
    Ok(EXIT_OK)
}

/// Run the CLI on `args` (including the program name) and return the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
