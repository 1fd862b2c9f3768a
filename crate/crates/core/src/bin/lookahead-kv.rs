use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lookahead_kv::cli::{mean_std, run_scenario, CliError, OUT_DIR_ENV};
use lookahead_kv::theory::{run_theory_suite, write_theory_csv, Fault, TheoryConfig};

/// Runs cache-policy scenarios and the score bound checks.
#[derive(Parser, Debug)]
#[command(version, about)]
#[command(group(clap::ArgGroup::new("task").required(true).multiple(true).args(["scenario", "theory"])))]
struct Args {
    /// Scenario file to run.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = std::thread::available_parallelism().map_or(1, |n| n.get()))]
    workers: usize,
    /// Added to every scenario seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// Run the bound checks and write theory-report.csv.
    #[arg(long)]
    theory: bool,
    #[arg(long, default_value_t = TheoryConfig::default().emc_instances)]
    emc_instances: usize,
    #[arg(long, default_value_t = TheoryConfig::default().emc_trajectories)]
    emc_trajectories: usize,
    #[arg(long, default_value_t = TheoryConfig::default().lipschitz_instances)]
    lipschitz_instances: usize,
    #[arg(long, default_value_t = TheoryConfig::default().ranking_pairs)]
    ranking_pairs: usize,
    #[arg(long, default_value_t = TheoryConfig::default().regret_instances)]
    regret_instances: usize,
    /// Break the checker on purpose; the run should then fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn theory(args: &Args) -> Result<bool, CliError> {
    let cfg = TheoryConfig {
        seed: args.seed_offset,
        emc_instances: args.emc_instances,
        emc_trajectories: args.emc_trajectories,
        lipschitz_instances: args.lipschitz_instances,
        ranking_pairs: args.ranking_pairs,
        regret_instances: args.regret_instances,
        fault: if args.inject_fault { Fault::HalvedDeviation } else { Fault::None },
        ..TheoryConfig::default()
    };
    let summary = run_theory_suite(&cfg).map_err(|e| CliError::Validation(e.to_string()))?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io { path: dir.display().to_string(), source: e })?;
    let path = dir.join("theory-report.csv");
    let file = std::fs::File::create(&path).map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
    write_theory_csv(&summary.rows, std::io::BufWriter::new(file))
        .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
    println!("max |EMC - score| / stderr: {:.3} ({} outside 3 sigma)", summary.max_emc_z, summary.emc_outside_3_sigma);
    println!(
        "max delta / bound: {:.6} ({} violations)",
        summary.max_lipschitz_ratio, summary.lipschitz_violations
    );
    println!(
        "ranking: {} pairs met the premise, {} flipped",
        summary.ranking_premise_met, summary.ranking_violations
    );
    println!(
        "regret: {} violations, {} enumeration mismatches",
        summary.regret_violations, summary.regret_enumeration_mismatches
    );
    println!("report: {}", path.display());
    Ok(summary.violations() == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let mut ok = true;
    if let Some(path) = &args.scenario {
        match run_scenario(path, args.out.as_deref(), args.workers, args.seed_offset) {
            Ok(grid) => {
                for (i, cell) in grid.cells.iter().enumerate() {
                    let rates: Vec<f64> = grid.runs_of(i).map(|r| r.metrics.token_hit_rate).collect();
                    let (m, s) = mean_std(&rates);
                    println!("{:<48} hit rate {m:.4} ± {s:.4}", cell.name);
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
        }
    }
    if args.theory {
        match theory(&args) {
            Ok(passed) => ok &= passed,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        eprintln!("bound violations found");
        ExitCode::from(1)
    }
}
