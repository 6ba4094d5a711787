//! `omni`: deterministic runs, property verification and speedup tables.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use omni_core::costs::{account_run, theoretical_speedup_attention, theoretical_speedup_gemm_o};
use omni_core::gemm::Phase;
use omni_core::pipeline::{run_dense, synthetic_workload, trajectory_errors, Engine, EngineConfig};
use omni_core::verify::{run_suite, VerifyOptions};
use omni_core::OmniError;

use report::RunManifest;

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "omni",
    version,
    about = "Block-sparse attention engine with cache/skip symbols"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Update/Dispatch pipeline on the synthetic workload and report costs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Write every Update step's symbol buffers here, one file per layer and head.
        #[arg(long)]
        dump_symbols: Option<PathBuf>,
    },
    /// Run the property suite at the configured shape.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Random trials per property.
        #[arg(long, default_value_t = 8)]
        trials: u64,
        #[arg(long, hide = true)]
        inject_symbol_fault: bool,
    },
    /// Print theoretical output-projection and attention speedups.
    Speedup {
        #[arg(long)]
        interval: usize,
        /// Comma-separated sparsity values in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        sparsity: Vec<f64>,
    },
}

/// A diagnostic plus the process exit code.
struct Failure(u8, String);

impl From<OmniError> for Failure {
    fn from(e: OmniError) -> Self {
        let code = match e {
            OmniError::Parameter(_) | OmniError::Shape(_) => EXIT_USAGE,
            _ => EXIT_INTERNAL,
        };
        Failure(code, e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(EXIT_USAGE, msg.into())
}

fn load_config(path: &Path) -> Result<EngineConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(EngineConfig::from_json(&text)?)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("OMNI_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| usage(format!("OMNI_THREADS={value:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure(EXIT_INTERNAL, format!("thread pool: {e}")))
}

fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    report: Option<&Path>,
    format: Format,
    dump: Option<&Path>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let start = Instant::now();
    let workload = synthetic_workload(cfg.seed, &cfg, cfg.smoothness);
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    let mut engine = Engine::new(&cfg, &workload)?;
    let mut outputs = Vec::with_capacity(cfg.steps);
    let mut counters = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let (o, c) = engine.step(t)?;
        if let (Some(dir), Some(Phase::Update)) = (dump, c.phase) {
            dump_symbols(&engine, cfg.layers, t, dir)?;
        }
        outputs.push(o);
        counters.push(c);
    }
    let dense = run_dense(&cfg, &workload)?;
    let errors = trajectory_errors(&outputs, &dense);
    let (rows, aggregate) = account_run(&counters, &errors, cfg.interval_n)?;
    let manifest = RunManifest {
        seed: cfg.seed,
        max_rel_err: aggregate.max_rel_err,
        config: cfg,
        steps: rows,
        aggregate,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let text = match format {
        Format::Json => manifest.to_json(),
        Format::Csv => manifest.to_csv(),
    }
    .map_err(|e| Failure(EXIT_INTERNAL, e))?;
    match report {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            eprintln!(
                "{} steps, sparsity {:.4}, max relative error {:.3e} -> {}",
                manifest.config.steps,
                manifest.aggregate.sparsity,
                manifest.max_rel_err,
                path.display()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// `step{t}_layer{l}_head{h}.sym`: a 16-byte header followed by the cache and skip symbols.
fn dump_symbols(engine: &Engine, layers: usize, step: usize, dir: &Path) -> Result<(), Failure> {
    for l in 0..layers {
        for (h, s) in engine.layer(l).symbols.iter().enumerate() {
            let path = dir.join(format!("step{step:04}_layer{l}_head{h}.sym"));
            std::fs::write(&path, s.to_bytes()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

fn cmd_verify(config: &Path, trials: u64, inject_symbol_fault: bool) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let opts = VerifyOptions {
        seeds: trials,
        corrupt_symbols: inject_symbol_fault,
    };
    let results = run_suite(&cfg, &opts)?;
    let mut failed = Vec::new();
    for r in &results {
        if r.passed {
            println!("PASS  {} ({} trials)", r.name, r.trials);
        } else {
            let seed = r.failing_seed.map_or("-".into(), |s| s.to_string());
            println!("FAIL  {}: {} (seed {seed})", r.name, r.detail);
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure(
            EXIT_VERIFY,
            format!("failed properties: {}", failed.join(", ")),
        ))
    }
}

fn cmd_speedup(interval: usize, sparsity: &[f64]) -> Result<(), Failure> {
    println!("{:>8}  {:>10}  {:>10}", "sparsity", "gemm_o", "attention");
    for &s in sparsity {
        let gemm_o = theoretical_speedup_gemm_o(interval, s)?;
        let attention = match theoretical_speedup_attention(s) {
            Ok(v) => format!("{v:>10.4}"),
            Err(_) if s == 1.0 => format!("{:>10}", "inf"),
            Err(e) => return Err(e.into()),
        };
        println!("{s:>8.3}  {gemm_o:>10.4}  {attention}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Run {
            config,
            seed,
            report,
            format,
            dump_symbols,
        } => cmd_run(config, *seed, report.as_deref(), *format, dump_symbols.as_deref()),
        Command::Verify {
            config,
            trials,
            inject_symbol_fault,
        } => cmd_verify(config, *trials, *inject_symbol_fault),
        Command::Speedup { interval, sparsity } => cmd_speedup(*interval, sparsity),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("omni: {msg}");
            ExitCode::from(code)
        }
    }
}
