use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prefix_sampling::harness::verify::{run_checks, VerifyOptions};
use prefix_sampling::harness::{emit_traces, run_comparison, run_experiment, Arm, ExperimentConfig};
use prefix_sampling::signal::{expected_pair_count, group_survival_probability, reward_entropy, signal_report};
use prefix_sampling::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "prefix-sampling", version, about = "Rollout pass-rate control and prefix sampling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print signal quantities for every pass count of an N-rollout group.
    Signal {
        #[arg(long, default_value_t = 8)]
        n: u32,
    },
    /// Run one arm and write its traces.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle checks.
    Verify {
        /// Smaller sample sizes, for a fast smoke check.
        #[arg(long)]
        quick: bool,
    },
    /// Run several arms on matched seeds and write summary tables.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// `all` or a comma-separated list of arm names.
        #[arg(long, default_value = "all")]
        arms: String,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        Error::Config { .. } => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_FAILURE),
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::from_file(path).map_err(|e| match e {
        Error::Io { .. } => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        other => fail(other),
    })
}

fn parse_arms(spec: &str) -> Result<Vec<Arm>, Error> {
    if spec == "all" {
        return Ok(Arm::ALL.to_vec());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<Arm>().map_err(|m| Error::Config { key: "--arms".into(), message: m }))
        .collect()
}

fn signal(n: u32) -> Result<(), Error> {
    println!(
        "{:>3} {:>6} {:>12} {:>12} {:>12} {:>6} {:>9}",
        "k", "p_hat", "entropy_bits", "survival", "rloo_energy", "pairs", "relative"
    );
    for k in 0..=n {
        let r = signal_report(k, n)?;
        println!(
            "{:>3} {:>6.3} {:>12.4} {:>12.4} {:>12.4} {:>6} {:>9.2}",
            k,
            f64::from(k) / f64::from(n),
            r.entropy_bits,
            r.survival_prob,
            r.rloo_energy,
            r.pair_count,
            r.pair_count_relative
        );
    }
    println!();
    for p in [0.5, 0.25, 0.125] {
        println!(
            "p = {p:<5}  H = {:.4} bits  survival(N={n}) = {:.4}  E[K(N-K)] = {:.4}",
            reward_entropy(p)?,
            group_survival_probability(p, n)?,
            expected_pair_count(p, n)?
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Signal { n } => match signal(n) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::Simulate { config, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let result = run_experiment(&cfg).and_then(|run| {
                emit_traces(&run, &out)?;
                Ok(run)
            });
            match result {
                Ok(run) => {
                    eprintln!(
                        "{}: {} steps, mean valid groups {:.3}, traces in {}",
                        cfg.arm,
                        run.metrics.len(),
                        run.mean_valid_groups().unwrap_or(0.0),
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Verify { quick } => {
            let opts = if quick {
                VerifyOptions {
                    monte_carlo_groups: 100_000,
                    gradient_instances: 10,
                    controller_sequences: 500,
                    ..VerifyOptions::default()
                }
            } else {
                VerifyOptions::default()
            };
            match run_checks(&opts) {
                Ok(checks) => {
                    let mut ok = true;
                    for c in &checks {
                        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                        ok &= c.passed;
                    }
                    if ok {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_FAILURE)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Compare {
            config,
            arms,
            out,
            seeds,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let arms = match parse_arms(&arms) {
                Ok(a) => a,
                Err(e) => return fail(e),
            };
            match run_comparison(&cfg, &arms, &seeds, Some(&out)) {
                Ok(summaries) => {
                    for s in summaries {
                        eprintln!(
                            "{} seed {}: mean valid groups {:.3}",
                            s.arm,
                            s.seed,
                            s.mean_valid_groups.unwrap_or(0.0)
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
