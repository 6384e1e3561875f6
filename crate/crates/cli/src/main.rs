//! Batch entry points: dataset generation, training, evaluation, prediction,
//! gradient self-verification, and the architecture ablation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (NaN abort or a failed gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advseg::config;
use advseg::dataset::{DatasetHandle, Split};
use advseg::error::Error;
use advseg::graph::BnMode;
use advseg::metrics::aggregate_reports;
use advseg::train::{
    evaluate_sample, load_variant_checkpoint, prepare_split, run_ablation, train, PreparedSample,
    TrainConfig, DEFAULT_THRESHOLD,
};
use advseg::volume::{load_volume, normalize_intensity, save_volume};

#[derive(Parser)]
#[command(
    name = "advseg",
    about = "Adversarial image-segmentation training kit",
    disable_help_subcommand = true
)]
struct Cli {
    /// Print every config key with paper-scale and desk-scale defaults.
    #[arg(long, global = false)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a synthetic nested-region dataset and its manifest.
    GenSynth {
        /// Key=value spec file; missing keys take defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run training and write the history CSV plus checkpoints.
    Train {
        /// Key=value config file; missing keys take desk-scale defaults.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory containing manifest.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset split and emit the metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// val or test
        #[arg(long)]
        split: String,
        /// Binarization threshold.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
    },
    /// Slice a volume, infer per-class maps, restack, and save the label
    /// volume. Output dims equal input dims with class channels.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck,
    /// Train every architecture variant over shared seeds and emit the
    /// comparison table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Key=value base config; missing keys take desk-scale defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of seeds per variant, starting at the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Training iterations per run (overrides the config).
        #[arg(long)]
        iters: Option<usize>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Shape(_) | Error::Data(_) | Error::Io(_) | Error::Format { .. } => 2,
        Error::Numeric { .. } => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.print_defaults {
        print!("{}", config::print_defaults());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::config(
            "no subcommand given; see --help or --print-defaults".to_string(),
        ));
    };
    match command {
        Command::GenSynth { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| Error::data(format!("cannot read {}: {e}", spec.display())))?;
            let spec = config::parse_synth_spec(&text)?;
            let handle = advseg::synth::gen_synthetic(&spec, &out)?;
            println!(
                "wrote {} samples to {} (train {}, val {}, test {})",
                handle.entries.len(),
                out.display(),
                spec.train,
                spec.val,
                spec.test
            );
            Ok(())
        }
        Command::Train {
            config: config_path,
            data,
            out,
            seed,
        } => {
            let text = std::fs::read_to_string(&config_path).map_err(|e| {
                Error::data(format!("cannot read {}: {e}", config_path.display()))
            })?;
            let mut cfg = config::parse_train_config(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let handle = DatasetHandle::load(&data)?;
            let outcome = train(&cfg, &handle, &out)?;
            println!(
                "trained {} iterations; best mean dice {:.4} at iteration {}; history: {}",
                cfg.max_iters,
                outcome.best_mean_dice,
                outcome.best_iter,
                out.join("history.csv").display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            threshold,
        } => {
            let split = Split::parse(&split)?;
            let (cfg, nets) = load_variant_checkpoint(&checkpoint)?;
            let handle = DatasetHandle::load(&data)?;
            let samples = prepare_split(&handle, split)?;
            if samples.is_empty() {
                return Err(Error::data(format!(
                    "split '{}' has no samples",
                    split.as_str()
                )));
            }
            nets.set_mode(BnMode::Eval);
            let reports = samples
                .iter()
                .map(|s: &PreparedSample| {
                    evaluate_sample(&nets, s, cfg.crop, cfg.batch_size, threshold)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let pooled = aggregate_reports(&reports)?;
            print!("{}", pooled.to_csv());
            println!("{pooled}");
            Ok(())
        }
        Command::Predict {
            checkpoint,
            volume,
            out,
            threshold,
        } => {
            let (_cfg, nets) = load_variant_checkpoint(&checkpoint)?;
            let vol = load_volume(&volume)?;
            let normalized = normalize_intensity(&vol)?;
            nets.set_mode(BnMode::Eval);
            let labeled = advseg::train::predict_volume(&nets, &normalized, threshold)?;
            let labeled = labeled.with_meta("source", &volume.display().to_string());
            save_volume(&labeled, &out)?;
            println!(
                "wrote label volume {:?} to {}",
                labeled.dims,
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck => {
            let results = advseg::gradcheck::run_suite();
            let mut failed = 0;
            for r in &results {
                println!(
                    "{} {:<34} max_rel_err {:.3e} (tolerance {:.0e})",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.tolerance
                );
                if !r.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::Numeric {
                    iter: 0,
                    term: format!("{failed} gradient checks failed"),
                });
            }
            println!("all {} gradient checks passed", results.len());
            Ok(())
        }
        Command::Ablate {
            data,
            out,
            config: config_path,
            seeds,
            iters,
        } => {
            let mut cfg = match config_path {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Error::data(format!("cannot read {}: {e}", p.display())))?;
                    config::parse_train_config(&text)?
                }
                None => TrainConfig::desk_defaults(),
            };
            if let Some(n) = iters {
                cfg.max_iters = n;
            }
            if seeds == 0 {
                return Err(Error::config("--seeds must be at least 1".to_string()));
            }
            let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.seed + i).collect();
            let handle = DatasetHandle::load(&data)?;
            let rows = run_ablation(&handle, &cfg, &seed_list, &out)?;
            println!("variant        dice_c0  dice_c1  dice_c2  mean_dice");
            for r in &rows {
                println!(
                    "{:<13} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
                    r.variant.name(),
                    r.dice.first().copied().unwrap_or(f64::NAN),
                    r.dice.get(1).copied().unwrap_or(f64::NAN),
                    r.dice.get(2).copied().unwrap_or(f64::NAN),
                    r.mean_dice
                );
            }
            println!("report: {}", out.join("ablation.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
