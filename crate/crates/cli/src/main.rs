use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use eex::data::SyntheticSpec;
use eex_cli::commands::{self, Outputs};
use eex_cli::config::RunConfig;

const AFTER_HELP: &str = "\
Configuration: a JSON document with sections seed, output_dir, model, train
(fine_tune, self_distill, joint), data and eval. Unknown keys are rejected and
omitted keys take their defaults; `eex init-config` prints every key with its
default value. Relative paths in the file resolve against its directory.

Seed precedence: --seed, then the EEX_SEED environment variable, then the
config file.

Exit status: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 contract violation.";

#[derive(Parser)]
#[command(name = "eex", version, about = "Early-exit transformer classifier", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides EEX_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply_seed(self.seed)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration, or write it to --out.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic task as train/dev/test TSV files.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4000)]
        size: usize,
        /// Fraction of easy samples, in [0, 1].
        #[arg(long, default_value_t = 0.7, value_parser = unit_interval)]
        easy_frac: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone and teacher; writes finetune.ckpt and its log.
    Finetune(ConfigArgs),
    /// Distill the teacher into the student heads of a fine-tuned checkpoint.
    Distill {
        #[command(flatten)]
        run: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Adaptive inference on a labeled TSV at one or more speeds.
    #[command(group = clap::ArgGroup::new("speeds").required(true))]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, group = "speeds", value_parser = unit_interval)]
        speed: Option<f64>,
        /// Comma-separated speeds.
        #[arg(long, group = "speeds", value_delimiter = ',', value_parser = unit_interval)]
        sweep: Option<Vec<f64>>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[arg(long, default_value_t = eex::training::EVAL_BATCH)]
        batch_size: usize,
    },
    /// Uncertainty calibration, exit distributions and histograms.
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated speeds for exit statistics.
        #[arg(long, value_delimiter = ',', value_parser = unit_interval, default_value = "0.1,0.5,0.8")]
        speeds: Vec<f64>,
        #[arg(long, default_value_t = eex::metrics::DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value = "stats")]
        out: PathBuf,
        #[arg(long, default_value_t = eex::training::EVAL_BATCH)]
        batch_size: usize,
    },
    /// Full pipeline against the joint-training and fixed-depth variants.
    Ablate(ConfigArgs),
    /// Per-operation cost table for the configured model.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn commit(outputs: Outputs) -> Result<()> {
    let paths: Vec<PathBuf> = outputs.paths().map(Path::to_path_buf).collect();
    outputs.commit()?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::InitConfig { out } => match out {
            Some(path) => {
                std::fs::write(&path, RunConfig::template()).with_context(|| format!("writing {}", path.display()))?;
                println!("wrote {}", path.display());
            }
            None => print!("{}", RunConfig::template()),
        },
        Command::GenData {
            seed,
            size,
            easy_frac,
            out,
        } => commit(commands::gen_data(&SyntheticSpec { seed, size, easy_frac }, &out)?)?,
        Command::Finetune(args) => {
            let (outputs, s) = commands::finetune(&args.load()?)?;
            commit(outputs)?;
            println!(
                "fine-tuned on {} examples: teacher dev accuracy {:.4} (epoch {})",
                s.train_size, s.teacher_dev_acc, s.kept_epoch
            );
        }
        Command::Distill { run, checkpoint } => {
            let (outputs, s) = commands::distill(&run.load()?, &checkpoint).context("distillation failed")?;
            commit(outputs)?;
            println!(
                "teacher dev accuracy {:.4} before, {:.4} after; at speed {} adaptive accuracy {:.4}, {:.0} FLOPs per sample",
                s.teacher_dev_acc_before, s.teacher_dev_acc_after, s.reference_speed, s.adaptive_dev_acc, s.avg_flops
            );
        }
        Command::Eval {
            checkpoint,
            data,
            speed,
            sweep,
            out,
            batch_size,
        } => {
            let speeds = sweep.unwrap_or_default().into_iter().chain(speed).collect::<Vec<_>>();
            let (outputs, report) = commands::eval(&checkpoint, &data, &speeds, batch_size, &out)?;
            commit(outputs)?;
            for r in &report.sweep.rows {
                println!("speed {:.3}: accuracy {:.4}, speedup {:.2}x", r.speed, r.accuracy, r.speedup);
            }
        }
        Command::Stats {
            checkpoint,
            data,
            speeds,
            bins,
            out,
            batch_size,
        } => commit(commands::stats(&checkpoint, &data, &speeds, bins, batch_size, &out)?)?,
        Command::Ablate(args) => {
            let (outputs, grid) = commands::ablate(&args.load()?)?;
            commit(outputs)?;
            for r in &grid.rows {
                for c in &r.cells {
                    println!(
                        "{} {} @ {}: accuracy {:.4}, speedup {:.2}x",
                        r.variant, r.setting, c.speed, c.accuracy, c.speedup
                    );
                }
            }
        }
        Command::Flops { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let (outputs, table) = commands::flops(&cfg, out.as_deref())?;
            if out.is_some() {
                commit(outputs)?;
            } else {
                println!("{}", serde_json::to_string_pretty(&table)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(eex_cli::EXIT_USAGE as u8),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(eex_cli::exit_code(&e) as u8)
        }
    }
}
