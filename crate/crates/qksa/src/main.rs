use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qksa::hypervisor::{
    self, experiment_s5, load_config, report, run, s5_seed_list, S5Options,
};

#[derive(Parser)]
#[command(name = "qksa", version, about = "Evolving agents that learn a hidden quantum process")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured experiment.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learning curves averaged over random 1-qubit channels.
    ExperimentS5 {
        /// Number of random channels to average over.
        #[arg(long, default_value_t = 20)]
        seeds: u32,
        /// Interaction steps per channel.
        #[arg(long, default_value_t = 8192)]
        steps: u64,
        /// Base seed the channel seeds fan out from.
        #[arg(long, default_value_t = 1)]
        base_seed: u64,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run directory.
    Report { run_dir: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

/// Relative output paths land under `QKSA_RUN_DIR` when it is set.
fn resolve_out(path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os("QKSA_RUN_DIR") {
        Some(root) => PathBuf::from(root).join(path),
        None => path,
    }
}

fn execute(command: Command) -> Result<(), hypervisor::HypervisorError> {
    match command {
        Command::Run { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out = out;
            }
            cfg.out = resolve_out(cfg.out);
            let summary = run(&cfg)?;
            println!("run complete: {}", summary.out.display());
            for rep in &summary.reps {
                println!(
                    "  {}: {} agent(s), {} step(s)",
                    rep.dir.display(),
                    rep.agents.len(),
                    rep.steps_used
                );
            }
            Ok(())
        }
        Command::ExperimentS5 { seeds, steps, base_seed, out } => {
            let opts = S5Options {
                seeds: s5_seed_list(base_seed, seeds),
                steps,
                out: resolve_out(out.unwrap_or_else(|| PathBuf::from("qksa-s5"))),
            };
            let csv = experiment_s5(&opts)?;
            println!("wrote {}", csv.display());
            Ok(())
        }
        Command::Report { run_dir } => {
            print!("{}", report(&run_dir)?);
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!(
                "ok: {} repetition(s), {} strategy pool entr{}, seed {}",
                cfg.repeats,
                cfg.genome.pool.len(),
                if cfg.genome.pool.len() == 1 { "y" } else { "ies" },
                cfg.base_seed
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
