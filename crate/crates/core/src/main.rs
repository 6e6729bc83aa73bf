use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use geoxplain::config::DEFAULT_CONFIG_TOML;
use geoxplain::pipeline::{self, Overrides, PipelineError, Run, SweepGrid};
use geoxplain::report;
use geoxplain::synthetic::{self, SyntheticConfig};

#[derive(Parser)]
#[command(
    name = "geoxplain",
    version,
    about = "Attribution-guided crop extraction and faithfulness tests"
)]
struct Cli {
    /// Override `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Process only the first N eval images.
    #[arg(long, global = true)]
    limit: Option<usize>,
    /// Root for run directories, replacing `run.output_dir`.
    #[arg(long, global = true, env = "GEOXPLAIN_CACHE", hide_env_values = true)]
    cache_root: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    log_format: LogFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Compute maps, segments and ranked crops for every eval image.
    Extract {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run deletion and insertion tests on extracted crops.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write plots and a crop gallery for a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Extract and evaluate over a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Train the toy classifier on the train split.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate the planted-cue synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 48)]
        side: u32,
        #[arg(long, default_value_t = 60)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        eval_per_class: usize,
        #[arg(long = "data-seed", default_value_t = 0)]
        data_seed: u64,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn init_logging(format: LogFormat) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn,geoxplain=info"));
    let builder = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr);
    match format {
        LogFormat::Text => builder.init(),
        LogFormat::Json => builder.json().init(),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        limit: cli.limit,
        workers: cli.workers,
        cache_root: cli.cache_root,
    };
    match cli.command {
        Command::Extract { config } => {
            let run = Run::open(&config, &overrides)?;
            let manifest = pipeline::cmd_extract(&run)?;
            println!("{}", run.dir.display());
            if let Some(stage) = manifest.stages.get("extract") {
                for (k, v) in &stage.counts {
                    println!("  {k}: {v}");
                }
            }
        }
        Command::Evaluate { config } => {
            let run = Run::open(&config, &overrides)?;
            let summary = pipeline::cmd_evaluate(&run)?;
            println!("{}", run.dir.display());
            for e in &summary.entries {
                println!("{} / {}", e.method, e.backend);
                for (name, c) in [("guided", &e.report.guided), ("random", &e.report.random)] {
                    if let Some(c) = c {
                        println!(
                            "  {name:<6} original {:.3}  deletion {:.3} (drop {:.3})  insertion {:.3}  coverage {:.3}  images {}",
                            c.accuracy_original,
                            c.accuracy_deletion,
                            c.deletion_drop,
                            c.accuracy_insertion,
                            c.mean_coverage,
                            c.n_images
                        );
                    }
                }
                for (reason, n) in &e.report.excluded {
                    println!("  excluded ({reason}): {n}");
                }
            }
        }
        Command::Report { run_dir } => {
            let out = report::cmd_report(&run_dir)?;
            println!("{}", out.plot.display());
            println!("{}", out.gallery_markdown.display());
            println!("{}", out.gallery_html.display());
        }
        Command::Sweep { config, grid } => {
            let run = Run::open(&config, &overrides)?;
            let grid = SweepGrid::load(&grid)?;
            let (table, dir) = pipeline::cmd_sweep(&run, &grid)?;
            print!("{}", table.to_markdown());
            println!("{}", dir.display());
        }
        Command::Train { config } => {
            let run = Run::open(&config, &overrides)?;
            let report = pipeline::cmd_train(&run)?;
            println!(
                "epochs {}  best {}  train acc {:.3}  val acc {}",
                report.epochs.len(),
                report.best_epoch,
                report.final_train_accuracy,
                report
                    .final_val_accuracy
                    .map(|a| format!("{a:.3}"))
                    .unwrap_or_else(|| "-".into())
            );
        }
        Command::Synth {
            out,
            side,
            train_per_class,
            eval_per_class,
            data_seed,
        } => {
            let cfg = SyntheticConfig {
                side,
                train_per_class,
                eval_per_class,
                seed: data_seed,
                ..Default::default()
            };
            let path = synthetic::write_dataset(&out, &cfg).context("writing synthetic dataset")?;
            println!("{}", path.display());
        }
        Command::DefaultConfig => print!("{DEFAULT_CONFIG_TOML}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.log_format);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            let code = e.downcast_ref::<PipelineError>().map(|p| p.exit_code()).unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
