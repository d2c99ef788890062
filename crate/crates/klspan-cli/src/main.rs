use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use klspan_cli::config::{build_instance, parse_config, BuiltInstance};
use klspan_cli::runner::{run_command, sweep_command};
use klspan_cli::verify::{print_report, run_suite};

/// Simulation harness for KL-regularized alignment experiments.
#[derive(Parser)]
#[command(name = "klspan", version, about)]
struct Cli {
    /// Worker threads for seeds and grid cells (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (overrides config and $KLSPAN_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment config: one metrics CSV per seed plus a
    /// run manifest.
    Run { config: PathBuf },
    /// Execute a grid sweep config and write the aggregated CSV.
    Sweep { config: PathBuf },
    /// Run the acceptance suite (or one named group) and report
    /// pass/fail per check.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Generate an instance from a config's [instance] table and write
    /// it as versioned JSON.
    GenInstance {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn out_dir(cli_out: &Option<PathBuf>, config_out: Option<&Path>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| config_out.map(Path::to_path_buf))
        .or_else(|| std::env::var_os("KLSPAN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .expect("rayon pool not yet initialized");
    }
    match dispatch(&cli) {
        Ok(all_passed) => {
            if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { config } => {
            let text = std::fs::read_to_string(config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut parsed = parse_config(&text)?;
            if let Some(seed) = cli.seed {
                parsed.seeds = vec![seed];
            }
            let dir = out_dir(&cli.out, parsed.output.as_deref());
            run_command(&text, &parsed, &dir, &stem(config))?;
            println!("wrote per-seed CSVs and manifest to {}", dir.display());
            Ok(true)
        }
        Command::Sweep { config } => {
            let text = std::fs::read_to_string(config)
                .with_context(|| format!("reading {}", config.display()))?;
            let dir = out_dir(&cli.out, None);
            let path = sweep_command(&text, &dir, &stem(config))?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Verify { suite } => {
            let results = run_suite(suite)?;
            Ok(print_report(&results))
        }
        Command::GenInstance { spec, output } => {
            let text = std::fs::read_to_string(spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            #[derive(serde::Deserialize)]
            #[serde(deny_unknown_fields)]
            struct SpecOnly {
                instance: klspan_cli::config::InstanceSpec,
            }
            let spec_only: SpecOnly = toml::from_str(&text).context("instance spec error")?;
            let json = match build_instance(&spec_only.instance)? {
                BuiltInstance::Bandit(inst) => klspan::serialize::bandit_to_json(&inst)?,
                BuiltInstance::Mdp(mdp) => klspan::serialize::mdp_to_json(&mdp)?,
            };
            std::fs::write(output, json)
                .with_context(|| format!("writing {}", output.display()))?;
            println!("wrote {}", output.display());
            Ok(true)
        }
    }
}
