use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltfl_core::datagen::{export_csv, gen_synthetic};
use ltfl_core::orchestrator::{run_matrix, run_matrix_cells, Cell, MatrixOutcome};
use ltfl_core::trace::{
    cdf, cdf_at, eligible_ratio_at, ingest, write_cdf_csv, ColumnMap, IngestOptions, LossAggregation,
};
use ltfl_core::{presets, Error, ExperimentConfig, MatrixConfig};

/// Loss-tolerant federated learning simulator.
#[derive(Parser, Debug)]
#[command(name = "ltfl", version, about)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write its per-round CSV and a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutDir,
        /// Replace the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Run every cell of a scenario matrix.
    Matrix {
        #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Use a shipped preset instead of a file (see `ltfl presets`).
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        out: OutDir,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Loss and upload-speed CDFs of a per-user network trace.
    Trace {
        #[arg(long)]
        input: PathBuf,
        /// Users strictly faster than this count as eligible.
        #[arg(long, default_value_t = 2.0)]
        speed_threshold: f64,
        #[command(flatten)]
        out: OutDir,
        #[arg(long, default_value = "user_id")]
        user_col: String,
        #[arg(long, default_value = "received")]
        received_col: String,
        #[arg(long, default_value = "lost")]
        lost_col: String,
        #[arg(long, default_value = "throughput_mbps")]
        throughput_col: String,
        /// Pool packet counts per user instead of averaging per-row loss ratios.
        #[arg(long)]
        pooled: bool,
    },
    /// List the shipped presets, or print one.
    Presets {
        /// Print this preset's TOML instead of the list.
        #[arg(long)]
        show: Option<String>,
    },
    /// Write the synthetic dataset of an experiment config as CSV.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
}

#[derive(Args, Debug)]
struct OutDir {
    /// Output directory (created if missing).
    #[arg(long = "out", env = "LTFL_OUT")]
    dir: PathBuf,
}

#[derive(Args, Debug)]
struct Jobs {
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "LTFL_JOBS")]
    jobs: Option<usize>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            out,
            seed,
            jobs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let cell = Cell {
                index: 0,
                name: cfg.file_stem(),
                replicate: 0,
                config: cfg,
            };
            let outcome = with_jobs(&jobs, || run_matrix_cells(std::slice::from_ref(&cell), &out.dir))??;
            report(&outcome, &out.dir)
        }
        Command::Matrix {
            config,
            preset,
            out,
            jobs,
        } => {
            let cfg = match (config, preset) {
                (Some(path), _) => MatrixConfig::load(&path)?,
                (None, Some(name)) => find_preset(&name)?.config()?,
                (None, None) => unreachable!("clap requires one of --config/--preset"),
            };
            log::info!("{} cells", cfg.cells().len());
            let outcome = with_jobs(&jobs, || run_matrix(&cfg, &out.dir))??;
            report(&outcome, &out.dir)
        }
        Command::Trace {
            input,
            speed_threshold,
            out,
            user_col,
            received_col,
            lost_col,
            throughput_col,
            pooled,
        } => {
            if !(speed_threshold >= 0.0 && speed_threshold.is_finite()) {
                return Err(Failure::Config(format!(
                    "--speed-threshold {speed_threshold} must be >= 0"
                )));
            }
            let opts = IngestOptions {
                columns: ColumnMap {
                    user_id: user_col,
                    received: received_col,
                    lost: lost_col,
                    throughput: throughput_col,
                },
                aggregation: if pooled {
                    LossAggregation::PooledCounts
                } else {
                    LossAggregation::MeanOfRatios
                },
            };
            trace(&input, speed_threshold, &out.dir, &opts)
        }
        Command::Presets { show: Some(name) } => {
            print!("{}", find_preset(&name)?.source);
            Ok(())
        }
        Command::Presets { show: None } => {
            for p in presets::PRESETS {
                let about = p.config().map(|c| c.description).unwrap_or_default();
                println!("{:<8} {:<22} {about}", p.name, p.path);
            }
            Ok(())
        }
        Command::Export { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let clients = gen_synthetic(&cfg.synthetic())?;
            create_dir(&out.dir)?;
            let (fx, fy) = (out.dir.join("features.csv"), out.dir.join("labels.csv"));
            export_csv(&clients, &fx, &fy)?;
            println!("{}\n{}", fx.display(), fy.display());
            Ok(())
        }
    }
}

fn find_preset(name: &str) -> Result<&'static presets::Preset, Failure> {
    presets::find(name).ok_or_else(|| {
        let known: Vec<&str> = presets::PRESETS.iter().map(|p| p.name).collect();
        Failure::Config(format!("unknown preset {name:?} (known: {})", known.join(", ")))
    })
}

fn with_jobs<T: Send>(jobs: &Jobs, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    match jobs.jobs {
        None => Ok(f()),
        Some(0) => Err(Failure::Config("--jobs must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Runtime(format!("cannot start {n} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn report(outcome: &MatrixOutcome, dir: &Path) -> Result<(), Failure> {
    println!("{}", dir.join("summary.csv").display());
    match outcome.failures() {
        0 => Ok(()),
        n => Err(Failure::Runtime(format!(
            "{n} of {} runs failed; see {}",
            outcome.rows.len(),
            dir.join("summary.csv").display()
        ))),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn trace(input: &Path, threshold: f64, out: &Path, opts: &IngestOptions) -> Result<(), Failure> {
    if !input.exists() {
        return Err(Failure::Config(format!("{}: no such file", input.display())));
    }
    let data = ingest(input, opts)?;
    let losses: Vec<f64> = data.records.iter().map(|r| r.loss_ratio).collect();
    let speeds: Vec<f64> = data.records.iter().map(|r| r.throughput_mbps).collect();
    let loss_cdf = cdf(&losses);
    create_dir(out)?;
    write_cdf_csv(&loss_cdf, "loss_ratio", &out.join("loss_cdf.csv"))?;
    write_cdf_csv(&cdf(&speeds), "upload_mbps", &out.join("speed_cdf.csv"))?;
    println!("users: {}", data.records.len());
    println!("skipped rows: {}", data.skipped_rows);
    println!("share with loss ratio <= 0.1: {:.4}", cdf_at(&loss_cdf, 0.1));
    println!(
        "eligible ratio at {threshold} Mbps: {:.4}",
        eligible_ratio_at(&data.records, threshold)?
    );
    Ok(())
}
