//! Command-line front end: `run`, `compare`, `diversity`, `gradcheck`, `gen`.
//!
//! Config precedence for `run`: file < `--override` (in order) < `--seed`.
//! `MMOEEX_THREADS` caps the worker pool used for parallel single-task runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use mmoeex::autodiff::suite::check_primitives;
use mmoeex::data::write_delimited;
use mmoeex::diversity::{diversity_report, export_heatmap, read_activation_dump, render_heatmap};
use mmoeex::harness::{
    compare_runs, load_summary, model_grad_check, run_experiment, write_outputs, ExperimentConfig,
};
use mmoeex::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mmoeex", version, about = "Multi-task mixture-of-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration, writing artifacts to the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Dotted `key=value`, value parsed as JSON when possible.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; takes precedence over `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a comparison table of multi-task runs against a single-task run.
    Compare {
        #[arg(long)]
        stl: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        mtl: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the diversity matrix from an activation dump (.csv or .jsonl).
    Diversity {
        #[arg(long)]
        dump: PathBuf,
        /// Matrix CSV; the heatmap is written next to it as .txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every primitive and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Write a synthetic suite as a delimited file plus schema sidecar.
    Gen {
        #[arg(value_enum)]
        generator: Generator,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Generator parameter as `key=value`, e.g. `n=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        params: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Tabular,
    Temporal,
    Manytask,
}

impl Generator {
    fn name(self) -> &'static str {
        match self {
            Generator::Tabular => "tabular",
            Generator::Temporal => "temporal",
            Generator::Manytask => "manytask",
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_config() => EXIT_CONFIG,
        Error::NumericalAbort { .. } | Error::NonFiniteLoss { .. } => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("MMOEEX_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .map_err(|_| Error::Config(format!("MMOEEX_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn cmd_run(config: &Path, seed: Option<u64>, overrides: &[String], out: Option<PathBuf>) -> Result<(), Error> {
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("training.seed={s}"));
    }
    let cfg = ExperimentConfig::load(config)
        .map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", config.display())),
            other => other,
        })?
        .with_overrides(&all)?;
    cfg.validate()?;
    let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        PathBuf::from(format!("runs/{}-seed{}", cfg.model.kind.name(), cfg.training.seed))
    });
    let record = run_experiment(&cfg)?;
    write_outputs(&record, &dir)?;
    eprintln!("wall-clock: {:.2}s", record.wall_clock_secs);
    println!("task,metric,value");
    for r in &record.test {
        println!("{},{:?},{}", r.task, r.metric, r.value);
    }
    log::info!("artifacts in {}", dir.display());
    match record.abort_error() {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

fn cmd_compare(stl: &Path, mtl: &[PathBuf], out: Option<PathBuf>) -> Result<(), Error> {
    let base = load_summary(stl)?;
    let others = mtl.iter().map(|d| load_summary(d)).collect::<Result<Vec<_>, _>>()?;
    let csv = compare_runs(&base, &others)?.to_csv();
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_diversity(dump: &Path, out: &Path) -> Result<(), Error> {
    let report = diversity_report(&read_activation_dump(dump)?)?;
    let txt = export_heatmap(&report, out)?;
    print!("{}", render_heatmap(&report));
    log::info!("matrix in {}, heatmap in {}", out.display(), txt.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize, eps: f64) -> Result<bool, Error> {
    let mut ok = true;
    println!("check,max_rel_error");
    for c in check_primitives(seed, instances, eps)? {
        ok &= c.max_rel_error < GRADCHECK_TOLERANCE;
        println!("{},{:e}", c.name, c.max_rel_error);
    }
    for (label, recurrent) in [("model.dense", false), ("model.gru", true)] {
        let c = model_grad_check(seed, recurrent, eps)?;
        ok &= c.max_rel_error < GRADCHECK_TOLERANCE;
        println!("{label},{:e}", c.max_rel_error);
    }
    Ok(ok)
}

fn cmd_gen(generator: Generator, out: &Path, seed: Option<u64>, params: &[String]) -> Result<(), Error> {
    let base = ExperimentConfig::from_json(&format!(r#"{{"dataset": {{"generator": "{}"}}}}"#, generator.name()))?;
    let mut overrides: Vec<String> = params.iter().map(|p| format!("dataset.{p}")).collect();
    if let Some(s) = seed {
        overrides.push(format!("dataset.seed={s}"));
    }
    let cfg = base.with_overrides(&overrides)?;
    let bundle = cfg.dataset.build()?;
    write_delimited(&bundle, out)?;
    println!("{} samples, {} tasks -> {}", bundle.features.samples(), bundle.tasks.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let started = Instant::now();
    let mut failed = false;
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Run {
            config,
            seed,
            overrides,
            out,
        } => cmd_run(&config, seed, &overrides, out),
        Command::Compare { stl, mtl, out } => cmd_compare(&stl, &mtl, out),
        Command::Diversity { dump, out } => cmd_diversity(&dump, &out),
        Command::Gradcheck { seed, instances, eps } => cmd_gradcheck(seed, instances, eps).map(|ok| {
            if !ok {
                eprintln!("gradient check failed: error at or above {GRADCHECK_TOLERANCE}");
                failed = true;
            }
        }),
        Command::Gen {
            generator,
            out,
            seed,
            params,
        } => cmd_gen(generator, &out, seed, &params),
    });
    log::debug!("finished in {:.2}s", started.elapsed().as_secs_f64());
    match result {
        Ok(()) if failed => ExitCode::from(EXIT_FAILURE),
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
