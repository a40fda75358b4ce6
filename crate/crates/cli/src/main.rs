use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stackfreight::experiments::{self, RunOutput};
use stackfreight::{CliError, Scale, ScenarioConfig};

/// Truck scheduling against private-vehicle equilibrium on a dynamic network.
#[derive(Parser)]
#[command(version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (TOML); replaces the numbered scenario
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// 75 intervals, demands divided by 10 (default)
    #[arg(long, global = true, conflicts_with = "full")]
    fast: bool,
    /// 300 intervals, demands as in the benchmark
    #[arg(long, global = true)]
    full: bool,
    /// Close these arcs to trucks
    #[arg(long, global = true, value_name = "ARC[,ARC...]", value_delimiter = ',')]
    block: Vec<u32>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Progress on stderr
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise the truck schedule for a scenario and write its series
    Scenario { scenario: Option<u8> },
    /// Frozen-delay schedule (case 1) against the optimised one (case 2)
    Compare { scenario: Option<u8> },
    /// Close each arc to trucks in turn and re-optimise
    Sweep {
        scenario: Option<u8>,
        /// Arcs to sweep (default: all)
        #[arg(long, value_delimiter = ',')]
        arcs: Vec<u32>,
    },
    /// Private equilibrium with trucks at the frozen-delay schedule
    Due { scenario: Option<u8> },
    /// Network loading of evenly spread demand
    Load { scenario: Option<u8> },
}

impl Command {
    fn scenario(&self) -> Option<u8> {
        match self {
            Command::Scenario { scenario }
            | Command::Compare { scenario }
            | Command::Sweep { scenario, .. }
            | Command::Due { scenario }
            | Command::Load { scenario } => *scenario,
        }
    }
}

fn build_config(cli: &Cli) -> Result<ScenarioConfig, CliError> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::scenario(cli.command.scenario().unwrap_or(2), Scale::Fast)?,
    };
    if c.full {
        cfg.scale = Scale::Full;
    } else if c.fast {
        cfg.scale = Scale::Fast;
    }
    for &arc in &c.block {
        if !cfg.blocked_arcs.contains(&arc) {
            cfg.blocked_arcs.push(arc);
        }
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.config.is_none() || cfg.output_dir.is_none() {
        cfg.output_dir = Some(c.out.clone());
    }
    Ok(cfg)
}

fn finish_run(mut out: RunOutput, cfg: &ScenarioConfig, dir: &PathBuf) -> Result<bool, CliError> {
    let files = experiments::emit_outputs(&mut out, cfg, dir)?;
    let r = &out.report;
    println!(
        "{}: total {:.6} private {:.6} truck {:.6} gap {:.4e} (tol {:.4e}){}",
        r.scenario,
        r.total_social_cost,
        r.private_cost,
        r.truck_cost,
        r.due_gap,
        r.due_gap_tol,
        r.comp_residual.map(|c| format!(" residual {c:.4e}")).unwrap_or_default()
    );
    for f in files {
        println!("  {}", dir.join(f).display());
    }
    Ok(r.converged)
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let cfg = build_config(cli)?;
    let dir = cfg.output_dir.clone().expect("set by build_config");
    let verbose = cli.common.verbose;
    match &cli.command {
        Command::Scenario { .. } => finish_run(experiments::run_scenario(&cfg, verbose)?, &cfg, &dir),
        Command::Due { .. } => finish_run(experiments::run_due(&cfg, verbose)?, &cfg, &dir),
        Command::Compare { .. } => {
            let c = experiments::compare_cases(&cfg, verbose)?;
            let files = experiments::write_comparison(&c, &cfg, &dir)?;
            println!(
                "{}: z0 {:.6} z1 {:.6} reduction {:.4}%{}",
                c.scenario,
                c.z0,
                c.z1,
                100.0 * c.reduction,
                if c.case2_kept_case1 { " (case-1 schedule kept)" } else { "" }
            );
            for f in files {
                println!("  {}", dir.join(f).display());
            }
            Ok(c.case1_due_converged && c.case2_due_converged && c.mpcc.as_ref().is_none_or(|m| m.converged))
        }
        Command::Sweep { arcs, .. } => {
            let s = experiments::braess_sweep(&cfg, (!arcs.is_empty()).then_some(arcs.as_slice()), verbose)?;
            let files = experiments::write_sweep(&s, &cfg, &dir)?;
            println!(
                "{}: baseline total {:.6} truck {:.6}",
                s.scenario, s.baseline_total_cost, s.baseline_truck_cost
            );
            println!("{:>5} {:>16} {:>16} {:>14} {:>14}  note", "arc", "total", "truck", "d_total", "d_truck");
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            for r in &s.rows {
                println!(
                    "{:>5} {:>16} {:>16} {:>14} {:>14}  {}{}",
                    r.arc,
                    opt(r.total_social_cost),
                    opt(r.truck_cost),
                    opt(r.delta_total),
                    opt(r.delta_truck),
                    if r.paradox { "paradox " } else { "" },
                    r.note.as_deref().unwrap_or("")
                );
            }
            if s.paradoxical_arcs.is_empty() {
                println!("no closure lowers total social cost");
            } else {
                println!("closures lowering total social cost: {:?}", s.paradoxical_arcs);
            }
            for f in files {
                println!("  {}", dir.join(f).display());
            }
            Ok(s.rows.iter().all(|r| r.note.is_some() || r.converged))
        }
        Command::Load { .. } => {
            let r = experiments::run_load(&cfg, &dir, verbose)?;
            println!(
                "{}: total {:.6} private {:.6} truck {:.6} fifo {}",
                r.scenario,
                r.total_social_cost,
                r.private_cost,
                r.truck_cost,
                if r.fifo_passed { "ok" } else { "violated" }
            );
            for f in &r.files {
                println!("  {}", dir.join(f).display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: solver did not converge; outputs were written");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
