use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pis_cli::{cmd_nominal, cmd_tune, cmd_verify, load_config, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "pis", version, about = "Performance index shaping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the nominal optimal control problem.
    Nominal(Common),
    /// Solve nominal and shaping problems, then tune theta.
    Tune(Common),
    /// Run the stability checks on a persisted theta.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Theta file; defaults to <out>/tuning/theta.csv.
        #[arg(long)]
        theta: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to the config's `output` field.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, PathBuf), CliError> {
        let cfg = load_config(&self.config, self.seed)?;
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output));
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Nominal(c) => {
            let (cfg, out) = c.load()?;
            let n = cmd_nominal(&cfg, &out)?;
            println!(
                "nominal: validation residual max {:.3e}, rms {:.3e}; wrote {}",
                n.validation_max,
                n.validation_rms,
                out.join("nominal").display()
            );
        }
        Command::Tune(c) => {
            let (cfg, out) = c.load()?;
            let t = cmd_tune(&cfg, &out)?;
            let comp = cfg.objective.component - 1;
            let shaped = match &t.shaped.trajectory {
                Some(traj) => format!("{:.4}", traj.peak_abs(comp)),
                None => "diverged".into(),
            };
            println!(
                "tune: L {:.6} -> {:.6} in {} iterations ({:?}); peak |x{}| nominal {:.4}, shaped {shaped}; wrote {}",
                t.result.initial_objective(),
                t.result.final_objective(),
                t.result.history.len().saturating_sub(1),
                t.result.stop,
                cfg.objective.component,
                t.nominal.trajectory.peak_abs(comp),
                out.display()
            );
        }
        Command::Verify { common, theta } => {
            let (cfg, out) = common.load()?;
            let outcomes = cmd_verify(&cfg, &out, theta.as_deref().map(Path::new))?;
            for o in &outcomes {
                println!(
                    "verify {}: {} (terminal {:.3e}, sup {:.3e})",
                    o.report.check.label(),
                    if o.report.passed() { "pass" } else { "FAIL" },
                    o.report.terminal_norm,
                    o.report.sup_state_norm
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
