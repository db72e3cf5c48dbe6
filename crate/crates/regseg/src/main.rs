//! Command-line entry point: corpus generation, training, evaluation, the
//! ablation and label-sweep harnesses, gradient checking, and checkpoint
//! inspection. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use regseg::checksuite::loss_suite;
use regseg::error::{Error, Result};
use regseg::evalkit::{
    ablate, default_threads, emit_report, evaluate_run, label_sweep, write_pgm, write_pgm_minmax,
    Arm, MetricsRecord,
};
use regseg::grid::Grid;
use regseg::synthdata::{load_corpus, make_dataset, DatasetConfig};
use regseg::trainer::{load_checkpoint, run_training, TrainConfig, Trainer};
use regseg::warp::{warp_image, DisplacementField};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "regseg", version, about = "Joint registration / segmentation workbench on synthetic 2-D scenes", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Training config JSON (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --set weights.lambda_drc=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct DataConfigArgs {
    /// Corpus config JSON (defaults apply when omitted).
    #[arg(long = "data-config")]
    data_config: Option<PathBuf>,
    /// Dotted-path overrides for the corpus config.
    #[arg(long = "data-set", value_name = "KEY=VALUE")]
    data_sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    GenData {
        /// Corpus config JSON (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path overrides, e.g. --set n_labeled=10.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing manifest.
        #[arg(long)]
        force: bool,
    },
    /// Train on a generated corpus.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Path to the corpus manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even when the config hash differs.
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Evaluate a checkpoint on a corpus test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Train and evaluate ablation arms.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataConfigArgs,
        /// Comma-separated arms: R,S,R+S,R+S+DSS,R+S+ACM,R+S+DRC,full.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        /// Number of seeds per arm.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Parallel runs (default REGSEG_THREADS or machine cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Few-shot label-count sweep: full model vs seg-only baseline.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataConfigArgs,
        /// Comma-separated label counts.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Finite-difference gradient oracle over every loss.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Probed coordinates per parameter tensor.
        #[arg(long, default_value_t = 16)]
        max_coords: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Render warped-image / field / confidence / seg panels for a pair
    /// at perturbation factors 0, 0.25, 0.5, 0.75, 1.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index into the labeled split (the moving image).
        #[arg(long, default_value_t = 0)]
        moving: usize,
        /// Index into the test split (the fixed image).
        #[arg(long, default_value_t = 0)]
        fixed: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_mismatch: bool,
    },
}

fn apply_overrides<T: serde::Serialize + serde::de::DeserializeOwned>(
    base: T,
    sets: &[String],
) -> Result<T> {
    if sets.is_empty() {
        return Ok(base);
    }
    let mut value = serde_json::to_value(&base)?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{set}' is not KEY=VALUE")))?;
        let parsed: serde_json::Value = match raw.parse::<serde_json::Value>() {
            Ok(v) => v,
            Err(_) => serde_json::Value::String(raw.to_string()),
        };
        let pointer = format!("/{}", key.replace('.', "/"));
        match value.pointer_mut(&pointer) {
            Some(slot) => *slot = parsed,
            None => {
                return Err(Error::Config(format!(
                    "override '{key}': no such config field"
                )))
            }
        }
    }
    Ok(serde_json::from_value(value)?)
}

fn load_train_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let base = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&text)?
        }
        None => TrainConfig::default(),
    };
    let mut cfg: TrainConfig = apply_overrides(base, &args.sets)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data_config(args: &DataConfigArgs, seed: Option<u64>) -> Result<DatasetConfig> {
    let base = match &args.data_config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&text)?
        }
        None => DatasetConfig::default(),
    };
    let mut cfg: DatasetConfig = apply_overrides(base, &args.data_sets)?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

/// Full provenance: the resolved config and the tool version land in the
/// output directory before any work starts.
fn write_provenance<T: serde::Serialize>(out: &Path, name: &str, cfg: &T) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let path = out.join(name);
    let json = serde_json::to_string_pretty(cfg)?;
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    let vpath = out.join("version.txt");
    fs::write(
        &vpath,
        format!("{} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
    )
    .map_err(|e| Error::io(vpath.display().to_string(), e))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            sets,
            out,
            seed,
            force,
        } => {
            let data_cfg = load_data_config(
                &DataConfigArgs {
                    data_config: config,
                    data_sets: sets,
                },
                seed,
            )?;
            write_provenance(&out, "config.resolved.json", &data_cfg)?;
            let manifest = make_dataset(&data_cfg, &out, force)?;
            println!(
                "corpus {} written: {} labeled, {} unlabeled, {} test, {} train pairs",
                manifest.corpus_id,
                manifest.n_labeled,
                manifest.n_unlabeled,
                manifest.n_test,
                manifest.train_pairs.len()
            );
            Ok(())
        }
        Command::Train {
            cfg,
            data,
            out,
            resume,
            allow_mismatch,
        } => {
            let cfg = load_train_config(&cfg)?;
            write_provenance(&out, "config.resolved.json", &cfg)?;
            let corpus = load_corpus(&data)?;
            let resume_trainer = match resume {
                Some(path) => {
                    let data = load_checkpoint(&path)?;
                    Some(Trainer::from_checkpoint(cfg.clone(), data, allow_mismatch)?)
                }
                None => None,
            };
            let t0 = std::time::Instant::now();
            let run = run_training(&cfg, &corpus, Some(&out), resume_trainer)?;
            println!(
                "trained {} steps in {:.1}s; final checkpoint at {}",
                run.trainer.step,
                t0.elapsed().as_secs_f64(),
                out.join("final.ckpt").display()
            );
            Ok(())
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
            allow_mismatch,
        } => {
            let cfg = load_train_config(&cfg)?;
            write_provenance(&out, "config.resolved.json", &cfg)?;
            let corpus = load_corpus(&data)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let step = ckpt.step;
            let trainer = Trainer::from_checkpoint(cfg.clone(), ckpt, allow_mismatch)?;
            let (r, s) = evaluate_run(&trainer, &corpus, true, true)?;
            let mut records = Vec::new();
            if let Some(r) = r {
                records.push(MetricsRecord {
                    arm: "registration".to_string(),
                    seed: cfg.seed,
                    step,
                    stats: r,
                });
            }
            if let Some(s) = s {
                records.push(MetricsRecord {
                    arm: "segmentation".to_string(),
                    seed: cfg.seed,
                    step,
                    stats: s,
                });
            }
            for r in &records {
                println!(
                    "{}: mean {:.2} +- {:.2} (per structure: {:?})",
                    r.arm, r.stats.mean, r.stats.std, r.stats.per_structure
                );
            }
            emit_report(&records, &out)
        }
        Command::Ablate {
            cfg,
            data,
            arms,
            seeds,
            out,
            threads,
        } => {
            let base = load_train_config(&cfg)?;
            let data_cfg = load_data_config(&data, None)?;
            write_provenance(&out, "config.resolved.json", &base)?;
            write_provenance(&out, "data_config.resolved.json", &data_cfg)?;
            let arms: Vec<Arm> = if arms.is_empty() {
                Arm::ALL.to_vec()
            } else {
                arms.iter().map(|s| Arm::parse(s)).collect::<Result<_>>()?
            };
            let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
            let threads = threads.unwrap_or_else(default_threads);
            let records = ablate(&base, &data_cfg, &arms, &seed_list, &out, threads)?;
            println!("{}", regseg::evalkit::AblationRecord::CSV_HEADER);
            for r in &records {
                println!("{}", r.to_csv_row());
            }
            Ok(())
        }
        Command::Sweep {
            cfg,
            data,
            counts,
            seeds,
            out,
            threads,
        } => {
            let base = load_train_config(&cfg)?;
            let data_cfg = load_data_config(&data, None)?;
            write_provenance(&out, "config.resolved.json", &base)?;
            write_provenance(&out, "data_config.resolved.json", &data_cfg)?;
            if counts.is_empty() {
                return Err(Error::Config("sweep needs at least one label count".into()));
            }
            let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
            let threads = threads.unwrap_or_else(default_threads);
            let records = label_sweep(&base, &data_cfg, &counts, &seed_list, &out, threads)?;
            println!("{}", regseg::evalkit::SweepRecord::CSV_HEADER);
            for r in &records {
                println!("{}", r.to_csv_row());
            }
            Ok(())
        }
        Command::Gradcheck {
            size,
            eps,
            tolerance,
            max_coords,
            seed,
        } => {
            let items = loss_suite(size, eps, max_coords, seed)?;
            let mut all_pass = true;
            for item in &items {
                let pass = item.report.passes(tolerance);
                all_pass &= pass;
                println!(
                    "{:26} max_rel_err {:.3e}  {}",
                    item.name,
                    item.report.max_rel_err,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if all_pass {
                Ok(())
            } else {
                Err(Error::Train(format!(
                    "gradient check exceeded tolerance {tolerance}"
                )))
            }
        }
        Command::Inspect {
            cfg,
            checkpoint,
            data,
            moving,
            fixed,
            out,
            allow_mismatch,
        } => {
            let cfg = load_train_config(&cfg)?;
            write_provenance(&out, "config.resolved.json", &cfg)?;
            let corpus = load_corpus(&data)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let trainer = Trainer::from_checkpoint(cfg, ckpt, allow_mismatch)?;
            let m = corpus.labeled.get(moving).ok_or_else(|| {
                Error::Config(format!("moving index {moving} outside labeled split"))
            })?;
            let f = corpus
                .test
                .get(fixed)
                .ok_or_else(|| Error::Config(format!("fixed index {fixed} outside test split")))?;
            inspect_pair(&trainer, &m.image, &f.image, &out)
        }
    }
}

/// Emits PGM panels for perturbation factors {0, 0.25, 0.5, 0.75, 1}:
/// the warped image, the field magnitude (min-max normalized), the
/// discriminator confidence map, and the seg-mask overlay.
fn inspect_pair(
    trainer: &Trainer<f32>,
    x_m: &Grid<f32>,
    x_f: &Grid<f32>,
    out: &Path,
) -> Result<()> {
    let (h, w) = (x_m.shape()[1], x_m.shape()[2]);
    let mut pair_data = Vec::with_capacity(2 * h * w);
    pair_data.extend_from_slice(x_m.data());
    pair_data.extend_from_slice(x_f.data());
    let pair = Grid::new(vec![2, h, w], pair_data)?;
    let field = DisplacementField::new(trainer.reg.forward_plain(&pair)?)?;
    let classes = trainer.cfg.arch.num_classes;

    for (tag, alpha) in [
        ("000", 0.0),
        ("025", 0.25),
        ("050", 0.5),
        ("075", 0.75),
        ("100", 1.0),
    ] {
        let scaled = field.scaled(alpha);
        let warped = warp_image(x_m, &scaled)?;
        write_pgm(&warped, 0.0, 1.0, &out.join(format!("alpha_{tag}_warped.pgm")))?;

        let hw = h * w;
        let mag = Grid::from_fn(&[1, h, w], |p| {
            let dy = scaled.grid().data()[p];
            let dx = scaled.grid().data()[hw + p];
            (dy * dy + dx * dx).sqrt()
        });
        write_pgm_minmax(&mag, &out.join(format!("alpha_{tag}_fieldmag.pgm")))?;

        let mut wp_data = Vec::with_capacity(2 * hw);
        wp_data.extend_from_slice(warped.data());
        wp_data.extend_from_slice(x_f.data());
        let warp_pair = Grid::new(vec![2, h, w], wp_data)?;
        let conf = trainer.disc.forward_plain(&warp_pair)?;
        write_pgm(&conf, 0.0, 1.0, &out.join(format!("alpha_{tag}_confidence.pgm")))?;

        let seg = trainer.seg.forward_plain(&warped)?;
        let hard = regseg::evalkit::hard_argmax(&seg);
        let overlay = Grid::from_fn(&[1, h, w], |p| {
            let mut id = 0usize;
            for c in 1..classes {
                if hard.data()[c * hw + p] == 1.0 {
                    id = c;
                }
            }
            id as f32 / (classes - 1) as f32
        });
        write_pgm(&overlay, 0.0, 1.0, &out.join(format!("alpha_{tag}_segoverlay.pgm")))?;
    }
    println!("wrote 20 panels (5 factors x 4 views) to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success; anything else is a
            // usage error on stderr with exit code 1.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
