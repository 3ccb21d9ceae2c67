//! `nattn`: benchmark, tune and check neighborhood attention strategies.
//!
//! Exit codes: 0 success, 1 correctness gate failed, 2 invalid configuration
//! (also used for I/O errors).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use nattn_bench::grid::Strategy;
use nattn_bench::{
    emit, render_markdown, run_grid, summarize, BenchError, CoreRunner, Dump, Environment, Format,
    GridSpec, RunOptions,
};
use nattn_core::autotune::{tune, Benchmarker, ProblemKey, StrategyKind, TuneCache, WallClock};
use nattn_core::DType;

#[derive(Parser)]
#[command(name = "nattn", version, about = "Neighborhood attention benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run or summarize a benchmark grid.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Tune tile shapes for every problem of a grid and persist the winners.
    Tune {
        #[arg(long)]
        grid: PathBuf,
        /// Also try base tiles of 32 and 128 queries.
        #[arg(long)]
        thorough: bool,
    },
    /// Check every problem of a grid against the reference, without timing.
    Check {
        #[arg(long)]
        grid: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    Run(RunArgs),
    /// Re-summarize a `records.json` dump and print the markdown tables.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        /// Print the tables as JSON instead of markdown.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "csv,markdown,json")]
    format: Vec<Format>,
    /// Gate the subsample chosen by the grid seed instead of a fresh one.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Gate(String),
    Config(String),
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::CorrectnessGate { .. } => Failure::Gate(e.to_string()),
            BenchError::Grid(_) => Failure::Config(e.to_string()),
        }
    }
}

fn config<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn load_grid(path: &Path) -> Result<GridSpec, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let grid: GridSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    grid.check().map_err(config)?;
    Ok(grid)
}

/// The persisted tuning cache, if readable.
fn tune_cache() -> Option<TuneCache> {
    let path = TuneCache::default_path();
    match TuneCache::load(&path) {
        Ok(c) => Some(c),
        Err(e) => {
            eprintln!("warning: ignoring tuning cache: {e}");
            None
        }
    }
}

fn bench_run(args: RunArgs) -> Result<(), Failure> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(config)?;
    }
    let grid = load_grid(&args.grid)?;
    let cache = tune_cache();
    let gate_seed = if args.deterministic {
        None
    } else {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .ok()
            .map(|d| d.as_nanos() as u64)
    };
    let opts = RunOptions {
        cache: cache.as_ref(),
        gate_seed,
        check_only: false,
    };
    let report = run_grid(&grid, &CoreRunner, &opts)?;
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.problem, s.reason);
    }
    for f in &report.failures {
        eprintln!("failed {} {}: {}", f.strategy, f.problem, f.reason);
    }
    let summary = summarize(&report.records).ok();
    let dump = Dump {
        environment: Environment::detect(args.deterministic),
        grid,
        report,
        summary,
    };
    let written = emit(&dump, &args.format, &args.out).map_err(config)?;
    eprintln!(
        "{} records, {} gated problems, {} skipped, {} failed",
        dump.report.records.len(),
        dump.report.gated.len(),
        dump.report.skipped.len(),
        dump.report.failures.len()
    );
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn bench_summarize(input: &Path, json: bool) -> Result<(), Failure> {
    let dump = Dump::load(input).map_err(config)?;
    let tables = summarize(&dump.report.records).map_err(config)?;
    if dump.summary.as_ref().is_some_and(|s| *s != tables) {
        eprintln!("warning: stored summary differs from the re-summarized records");
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&tables).map_err(config)?);
    } else {
        print!("{}", render_markdown(&tables));
    }
    Ok(())
}

fn measure_with(key: &ProblemKey, seed: u64) -> Box<dyn Benchmarker> {
    match key.dtype {
        DType::Fp32 => Box::new(WallClock::<f32>::for_key(key, seed)),
        DType::Fp64 => Box::new(WallClock::<f64>::for_key(key, seed)),
    }
}

fn tune_grid(path: &Path, thorough: bool) -> Result<(), Failure> {
    let grid = load_grid(path)?;
    let (problems, skipped) = grid.expand();
    for s in &skipped {
        eprintln!("skipped {}: {}", s.problem, s.reason);
    }
    let cache_path = TuneCache::default_path();
    let cache = TuneCache::load(&cache_path).map_err(config)?;
    for id in &problems {
        for &strategy in &grid.strategies {
            let kind = match strategy {
                Strategy::Naive => continue,
                Strategy::Tiled => StrategyKind::TiledPn,
                Strategy::Fused => StrategyKind::Fused,
            };
            let key = ProblemKey::new(kind, &id.problem(), &id.params(), id.dtype);
            let mut bench = measure_with(&key, grid.seed);
            let tile = tune(&key, &cache, bench.as_mut(), thorough).map_err(config)?;
            println!(
                "{strategy} {id}: q_tile {:?} kv_tile {:?}",
                tile.q_tile, tile.kv_tile
            );
        }
    }
    cache.save(&cache_path).map_err(config)?;
    eprintln!("{} entries in {}", cache.len(), cache_path.display());
    Ok(())
}

fn check_grid(path: &Path) -> Result<(), Failure> {
    let grid = load_grid(path)?;
    let cache = tune_cache();
    let opts = RunOptions {
        cache: cache.as_ref(),
        gate_seed: None,
        check_only: true,
    };
    let report = run_grid(&grid, &CoreRunner, &opts)?;
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.problem, s.reason);
    }
    println!(
        "{} problems x {} strategies match the reference",
        report.gated.len(),
        grid.strategies.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(BenchCommand::Run(args)) => bench_run(args),
        Command::Bench(BenchCommand::Summarize { input, json }) => bench_summarize(&input, json),
        Command::Tune { grid, thorough } => tune_grid(&grid, thorough),
        Command::Check { grid } => check_grid(&grid),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Gate(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
