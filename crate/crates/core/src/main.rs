use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use polex::config::{parse_config, ExperimentConfig};
use polex::experiment::{self, Comparison};
use polex::extract::Method;
use polex::student::StudentKind;

#[derive(Parser)]
#[command(name = "polex", version, about = "Interpretable policy extraction lab")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the tabular teacher and check it against value iteration.
    TrainTeacher(Common),
    /// Run extraction sessions and write a run directory.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        student: Option<StudentKind>,
    },
    /// Re-evaluate the teacher and student saved in a run directory.
    Evaluate(Common),
    /// Aggregate finished run directories into a comparison table.
    Compare {
        /// Run directories to aggregate.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every combination of the config's sweep axes, then compare them.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = parse_config(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let user_error = e
                .downcast_ref::<polex::Error>()
                .is_some_and(|e| matches!(e, polex::Error::Config(_) | polex::Error::Usage(_)));
            ExitCode::from(if user_error { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::TrainTeacher(common) => {
            let cfg = common.load()?;
            let report = experiment::run_teacher(&cfg)?;
            if !quiet {
                let agreement = report
                    .oracle_agreement
                    .map_or("n/a".to_string(), |a| format!("{a:.4}"));
                println!(
                    "teacher: win rate {:.3} over {} episodes, optimal-action agreement {agreement}",
                    report.win_rate, report.episodes
                );
                println!("wrote {}", cfg.output_dir.display());
            }
        }
        Command::Extract {
            common,
            method,
            student,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = method {
                cfg.extract.method = m;
            }
            if let Some(k) = student {
                cfg.student.kind = k;
            }
            let report = experiment::run_experiment(&cfg)?;
            if !quiet {
                println!("{:>6} {:>10} {:>8} {:>11} {:>6}", "seed", "win_rate", "return", "consistency", "phi");
                for s in &report.sessions {
                    let t = &s.test;
                    println!(
                        "{:>6} {:>10.3} {:>8.3} {:>11.3} {:>6.3}",
                        s.seed, t.win_rate, t.mean_return, t.consistency, t.phi
                    );
                }
                println!("wrote {} (config_hash {})", cfg.output_dir.display(), report.config_hash);
            }
        }
        Command::Evaluate(common) => {
            let cfg = common.load()?;
            let record = experiment::evaluate_run(&cfg, &cfg.output_dir)
                .with_context(|| format!("evaluating {}", cfg.output_dir.display()))?;
            if !quiet {
                println!("{}", serde_json::to_string_pretty(&record)?);
            }
        }
        Command::Compare { runs, out } => {
            let cmp = experiment::compare(&runs, &out)?;
            if !quiet {
                print_summary(&cmp);
                println!("wrote {}", out.display());
            }
        }
        Command::Sweep(common) => {
            let cfg = common.load()?;
            let (_, cmp) = experiment::sweep(&cfg)?;
            if !quiet {
                print_summary(&cmp);
                println!("wrote {}", cfg.output_dir.display());
            }
        }
    }
    Ok(())
}

fn print_summary(cmp: &Comparison) {
    println!("{:>4}  {:<28} {:>10} {:>8} {:>11} {:>6}", "rank", "policy", "win_rate", "return", "consistency", "phi");
    for r in &cmp.summary {
        println!(
            "{:>4}  {:<28} {:>10.3} {:>8.3} {:>11.3} {:>6.3}",
            r.phi_rank.unwrap_or(0),
            r.label,
            r.win_rate,
            r.mean_return,
            r.consistency,
            r.phi
        );
    }
}
