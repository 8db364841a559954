use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hjreach::config::{Datapath, RunConfig};
use hjreach::dataflow::{estimate_cycles, first_divergence, LineBufferModel};
use hjreach::dynamics::DubinsCar;
use hjreach::fixedpoint::{max_abs_error, quantize, solve_fixed, FixedKernel};
use hjreach::grid::ValueField;
use hjreach::safety::build_initial_values;
use hjreach::solver::{resolve_timestep, solve, sweep_with, FloatKernel, PointKernel, SolveMode};
use hjreach::valuefile::{self, StoredField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "hjreach", version, about = "4D Hamilton-Jacobi reachability solver and safety-filter service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured datapath.
    #[arg(long, value_parser = parse_datapath)]
    datapath: Option<Datapath>,
    /// Worker threads for the sweep.
    #[arg(long, env = "HJREACH_THREADS")]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_path(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(d) = self.datapath {
            cfg.datapath = d;
        }
        if let Some(t) = self.threads {
            if t == 0 {
                bail!("--threads must be at least 1");
            }
            cfg.solver.threads = Some(t);
        }
        Ok(cfg)
    }
}

fn parse_datapath(s: &str) -> Result<Datapath, String> {
    s.parse().map_err(|e: hjreach::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the value function and write it to a value file.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the maximum absolute difference between two value files.
    Compare { a: PathBuf, b: PathBuf },
    /// Estimate accelerator cycles, latency and re-solve rate.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Iteration count; defaults to the horizon divided by the time step.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Check the streaming model against the batch sweep on a random field.
    StreamVerify {
        #[command(flatten)]
        common: Common,
        /// Remove one slot from the last segment of line 0.
        #[arg(long)]
        undersized: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the live simulation service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Solve { common, out } => cmd_solve(&common, &out),
        Command::Compare { a, b } => cmd_compare(&a, &b),
        Command::Estimate { common, iterations } => cmd_estimate(&common, iterations),
        Command::StreamVerify {
            common,
            undersized,
            seed,
        } => cmd_stream_verify(&common, undersized, seed),
        Command::Serve { common, port, bind } => cmd_serve(&common, &bind, port),
    }
}

fn cmd_solve(common: &Common, out: &PathBuf) -> Result<ExitCode> {
    let cfg = common.load()?;
    let car = DubinsCar::new(cfg.dynamics)?;
    let v0 = build_initial_values(&cfg.environment, &cfg.grid)?;
    let (stored, report): (StoredField, _) = match cfg.datapath {
        Datapath::Float => {
            let (v, r) = solve(&v0, &car, &cfg.solver)?;
            (v.into(), r)
        }
        Datapath::Fixed => {
            let (v, r) = solve_fixed(&v0, &car, &cfg.solver)?;
            (v.into(), r)
        }
    };
    valuefile::save(out, &stored).with_context(|| format!("writing {}", out.display()))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut value = serde_json::to_value(&report)?;
    value["datapath"] = json!(cfg.datapath.to_string());
    value["output"] = json!(out.display().to_string());
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(a: &PathBuf, b: &PathBuf) -> Result<ExitCode> {
    let fa = valuefile::load(a).with_context(|| format!("reading {}", a.display()))?;
    let fb = valuefile::load(b).with_context(|| format!("reading {}", b.display()))?;
    let err = max_abs_error(&fa.to_f64(), &fb.to_f64())?;
    println!("{err:.6e}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_estimate(common: &Common, iterations: Option<u64>) -> Result<ExitCode> {
    let cfg = common.load()?;
    let iterations = match iterations {
        Some(n) => n,
        None if cfg.solver.mode == SolveMode::Converge => {
            bail!("converge mode has no fixed iteration count; pass --iterations")
        }
        None => {
            let car = DubinsCar::new(cfg.dynamics)?;
            let dt = resolve_timestep(&cfg.solver, &cfg.grid, &car)?;
            cfg.solver.horizon_iterations(dt) as u64
        }
    };
    let est = estimate_cycles(&cfg.grid, iterations, &cfg.stream)?;
    let out = json!({
        "iterations": iterations,
        "n_pe": cfg.stream.n_pe,
        "cycles_per_iteration": est.cycles_per_iteration,
        "cycles": est.cycles,
        "latency_s": est.latency,
        "rate_hz": est.rate_hz,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn verify<K: PointKernel>(
    label: &str,
    model: &LineBufferModel,
    kernel: &K,
    vt: &ValueField<K::Elem>,
    v0: &ValueField<K::Elem>,
) -> Result<bool> {
    let streamed = model.run(kernel, vt, v0)?;
    let (batch, _) = sweep_with(kernel, vt, v0)?;
    if streamed.reads != vt.grid().len() {
        println!("{label}: FAIL read {} grid values, expected {}", streamed.reads, vt.grid().len());
        return Ok(false);
    }
    match first_divergence(&streamed.field, &batch) {
        None => {
            println!("{label}: PASS bit-exact over {} points", vt.grid().len());
            Ok(true)
        }
        Some((offset, idx)) => {
            println!("{label}: FAIL first divergence at offset {offset} index {idx:?}");
            Ok(false)
        }
    }
}

fn cmd_stream_verify(common: &Common, undersized: bool, seed: u64) -> Result<ExitCode> {
    let cfg = common.load()?;
    let grid = cfg.grid;
    let car = DubinsCar::new(cfg.dynamics)?;
    let dt = resolve_timestep(&cfg.solver, &grid, &car)?;
    let mut model = LineBufferModel::new(&grid, &cfg.stream)?;
    if undersized {
        let last = model.plan().lines[0].len() - 1;
        model.shrink_segment(0, last)?;
        println!("line 0 shortened to {} slots", model.plan().line_capacity(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vt = ValueField::from_fn(grid, |_| rng.gen_range(-1.0..1.0));
    // A high target keeps the clamp from hiding wrong taps.
    let v0 = ValueField::constant(grid, 8.0);

    let mut ok = verify("float", &model, &FloatKernel::new(grid, &car, dt), &vt, &v0)?;
    let (qt, _) = quantize(&vt)?;
    let (q0, _) = quantize(&v0)?;
    ok &= verify("fixed", &model, &FixedKernel::new(grid, &car, dt)?, &qt, &q0)?;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_serve(common: &Common, bind: &str, port: u16) -> Result<ExitCode> {
    let cfg = common.load()?;
    let listener = TcpListener::bind((bind, port)).with_context(|| format!("binding {bind}:{port}"))?;
    println!("serving on {}", listener.local_addr()?);
    hjreach::service::serve(listener, &cfg, Arc::new(AtomicBool::new(false)))?;
    Ok(ExitCode::SUCCESS)
}
