use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use revlearn::experiment::{self, verify, Analysis, ExperimentConfig, ExperimentId};
use revlearn::revbuf::Ratio;

#[derive(Parser)]
#[command(name = "revlearn", version, about = "Hypergradients through exactly reversible SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Write artifacts here instead of the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure information-buffer growth for one momentum decay ratio.
    BenchMemory {
        /// Decay as `n/d`, e.g. `9/10`.
        #[arg(long)]
        gamma: Ratio,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 100)]
        elements: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        frac_bits: u32,
    },
    /// Run the oracle-agreement suite.
    Verify,
    /// Print an experiment's default config.
    Preset { experiment: String },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = experiment::run_in(&cfg, &dir)?;
            let r = &report.results;
            println!("experiment {} (config {})", r.experiment, r.config_hash);
            if let Some(d) = &r.dataset {
                let note = if d.fallback { " (MNIST not found, synthetic fallback)" } else { "" };
                println!("data: {} x{} train, {} valid{note}", d.source, d.train, d.valid);
            }
            if let Some(m) = &r.meta {
                println!("meta-loss {:.6} -> {:.6} after {} meta-iterations", m.initial_meta_loss, m.final_meta_loss, m.curve.len());
            }
            print_analysis(&r.analysis);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchMemory { gamma, steps, elements, seed, frac_bits } => {
            let row = experiment::bench_memory(gamma, steps, elements, seed, frac_bits)?;
            println!("gamma {}: {:.5} bits/step/element (log2(d/n) = {:.5})", row.gamma, row.measured_bits, row.theoretical_bits);
            match row.ratio_vs_32bit {
                Some(x) => println!("memory vs 32-bit trajectory cache: {x:.1}x smaller"),
                None => println!("memory vs 32-bit trajectory cache: nothing stored"),
            }
            println!("reversed exactly: {}", row.reversed_exactly);
            Ok(if row.reversed_exactly { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Verify => {
            let results = verify::run_all();
            for r in &results {
                println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} of {} checks passed", results.len() - failed, results.len());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Preset { experiment } => {
            let id: ExperimentId = experiment.parse()?;
            print!("{}", ExperimentConfig::preset(id).canonical());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_analysis(a: &Analysis) {
    match a {
        Analysis::LrSchedule { mean_alpha_last_10pct, mean_alpha_middle_50pct } => {
            println!("mean alpha: last 10% {mean_alpha_last_10pct:.5}, middle 50% {mean_alpha_middle_50pct:.5}");
        }
        Analysis::InitScales { scales } => {
            for s in scales {
                println!("{}: learned scale {:.5}, heuristic {:.5}", s.group, s.learned, s.heuristic);
            }
        }
        Analysis::PerParamReg { initial_valid_error, final_valid_error } => {
            println!("validation error {initial_valid_error:.4} -> {final_valid_error:.4}");
        }
        Analysis::LearnData { blank_valid_loss, learned_valid_loss } => {
            println!("validation loss: blank images {blank_valid_loss:.5}, learned {learned_valid_loss:.5}");
        }
        Analysis::TiedReg { final_tying, .. } => {
            for (l, m) in final_tying.iter().enumerate() {
                println!("layer {l} tying matrix: {m:.4?}");
            }
        }
        Analysis::ChaosSweep { points, sentinel_rows, correlation_bottom_decade, correlation_top_decade, .. } => {
            println!("{points} sweep points, {sentinel_rows} sentinel rows");
            println!("slope correlation: bottom decade {correlation_bottom_decade:?}, top decade {correlation_top_decade:?}");
        }
        Analysis::MemoryBench { rows } => {
            for r in rows {
                println!(
                    "gamma {:>6}: {:.5} bits/step (log2(d/n) = {:.5}), reversed exactly: {}",
                    r.gamma.to_string(),
                    r.measured_bits,
                    r.theoretical_bits,
                    r.reversed_exactly
                );
            }
        }
    }
}
