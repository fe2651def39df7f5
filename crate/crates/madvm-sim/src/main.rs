use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use madvm_core::analysis;
use madvm_core::demand::DemandLevelSet;

use madvm_sim::config::SimConfig;
use madvm_sim::{engine, trace, Result, SimError};

#[derive(Parser)]
#[command(name = "madvm", about = "Energy-aware dynamic VM placement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and emit per-slot CSV + aggregate JSON.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Synthesize a demand trace to CSV.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Windowed transition-matrix estimates over a trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        vm: usize,
        /// Sample stride in slots; defaults to the window length.
        #[arg(long)]
        stride: Option<usize>,
        /// Comma-separated level values.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.6, 0.8, 1.0])]
        levels: Vec<f64>,
        #[arg(long, default_value_t = analysis::DEFAULT_QUASI_STATIC_EPS)]
        epsilon: f64,
    },
    /// Solve the exact joint MDP for the configured instance.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Approximation-error sandwich for the configured instance.
    BoundCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-run the simulation once per λ over the identical trace.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
}

fn write_file(path: &str, contents: &str) -> Result<()> {
    let mut f = File::create(path)
        .map_err(|e| SimError::Input(format!("cannot create {path}: {e}")))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| SimError::Input(format!("cannot write {path}: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config } => {
            let cfg = SimConfig::from_path(&config)?;
            let report = engine::run_simulation(&cfg)?;
            if let Some(path) = &cfg.output.per_slot_csv {
                write_file(path, &report.csv_string()?)?;
            }
            let summary = report.summary_json()?;
            if let Some(path) = &cfg.output.aggregate_json {
                write_file(path, &summary)?;
            }
            println!("{summary}");
        }
        Command::GenTrace { config, out } => {
            let cfg = SimConfig::from_path(&config)?;
            let built = engine::build_trace(&cfg)?;
            let file = File::create(&out)
                .map_err(|e| SimError::Input(format!("cannot create {}: {e}", out.display())))?;
            trace::write_trace(&built.trace, file)?;
        }
        Command::Analyze { trace: trace_path, window, vm, stride, levels, epsilon } => {
            let t = trace::load_trace(&trace_path)?;
            let level_set = DemandLevelSet::new(levels)?;
            let hm = analysis::transition_heatmap(
                &t,
                &level_set,
                vm,
                window,
                stride.unwrap_or(window),
                epsilon,
            )?;
            let stdout = io::stdout();
            let mut out = stdout.lock();
            let io_err = |e: io::Error| SimError::Input(e.to_string());
            writeln!(out, "# quasi_static_score,{}", hm.quasi_static_score).map_err(io_err)?;
            writeln!(out, "offset,from,to,prob").map_err(io_err)?;
            for (offset, m) in hm.offsets.iter().zip(&hm.matrices) {
                for from in 0..level_set.count() {
                    for to in 0..level_set.count() {
                        writeln!(out, "{offset},{from},{to},{}", m.prob(from, to))
                            .map_err(io_err)?;
                    }
                }
            }
        }
        Command::Oracle { config } => {
            let cfg = SimConfig::from_path(&config)?;
            let (utility, num_states) = engine::oracle_solution(&cfg)?;
            let summary = serde_json::json!({
                "beta": utility.beta,
                "converged": utility.converged,
                "iterations": utility.iterations,
                "num_states": num_states,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
        }
        Command::BoundCheck { config } => {
            let cfg = SimConfig::from_path(&config)?;
            let report = engine::bound_report(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
        }
        Command::Sweep { config, lambdas } => {
            let cfg = SimConfig::from_path(&config)?;
            let runs = engine::sweep_lambda(&cfg, &lambdas)?;
            let entries: Vec<serde_json::Value> = runs
                .iter()
                .map(|(lambda, report)| {
                    serde_json::json!({
                        "lambda": lambda,
                        "full": report.full,
                        "post_warm_up": report.post_warm_up,
                    })
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&entries).expect("serializable"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ SimError::Input(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e @ SimError::Invariant(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
