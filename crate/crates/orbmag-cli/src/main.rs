//! `orbmag`: orbital magnetic susceptibility of a Bloch electron gas.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 verification
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use orbmag_cli::commands::{self, CommandOutput, Ctx};
use orbmag_cli::config::{ConfigError, RunConfig};
use orbmag_cli::jsonfmt;
use orbmag_cli::verify;

#[derive(Parser)]
#[command(name = "orbmag", version, about = "Orbital susceptibility of a Bloch electron gas")]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Worker thread cap; results are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the JSON record here (CSV tables go to a sibling .csv file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Eigendata cache directory (overrides the config).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Disable the eigendata cache entirely.
    #[arg(long, global = true)]
    no_cache: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Band energies along Γ→X→M→R→Γ plus per-band extrema over the grid.
    Bands,
    /// Integrated density of states over an energy ladder.
    Ids,
    /// Chemical potential at (β, ρ₀).
    Mu,
    /// Metal / semiconductor classification at fixed density.
    Classify,
    /// Finite-temperature susceptibility χ(β, ρ₀) or χ(β, μ).
    Chi,
    /// Zero-temperature susceptibility (SC or metal, auto-dispatched).
    Chi0,
    /// Landau-Peierls density sweep with slope extrapolation.
    Sweep,
    /// Deterministic invariant suite; exit 2 on any failed check.
    Verify,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::Bands => "bands",
            Cmd::Ids => "ids",
            Cmd::Mu => "mu",
            Cmd::Classify => "classify",
            Cmd::Chi => "chi",
            Cmd::Chi0 => "chi0",
            Cmd::Sweep => "sweep",
            Cmd::Verify => "verify",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; anything else is a usage
            // error and must exit 1 (not clap's default 2, which is reserved
            // for verification failures here)
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Some(n) = cli.threads {
        let n = n.max(1);
        // a second build_global in the same process is harmless: the pool is
        // already running with the first requested size
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }

    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("orbmag: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, ConfigError> {
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| ConfigError::Invalid("--config PATH is required".into()))?;
    let cfg = RunConfig::load(config_path)?;
    let raw_config: Value = serde_json::from_str(
        &std::fs::read_to_string(config_path).map_err(|source| ConfigError::Read {
            path: config_path.to_string(),
            source,
        })?,
    )
    .expect("config already parsed once");

    let cache_dir = if cli.no_cache {
        None
    } else {
        cli.cache.clone().or_else(|| cfg.cache_dir.clone())
    };
    let out_path = cli.out.clone().or_else(|| cfg.output.clone());

    let mut exit = ExitCode::SUCCESS;
    let output = match cli.cmd {
        Cmd::Bands => commands::bands(&Ctx { cfg, cache_dir })?,
        Cmd::Ids => commands::ids(&Ctx { cfg, cache_dir })?,
        Cmd::Mu => commands::mu(&Ctx { cfg, cache_dir })?,
        Cmd::Classify => commands::classify(&Ctx { cfg, cache_dir })?,
        Cmd::Chi => commands::chi(&Ctx { cfg, cache_dir })?,
        Cmd::Chi0 => commands::chi0(&Ctx { cfg, cache_dir })?,
        Cmd::Sweep => commands::sweep(&Ctx { cfg, cache_dir })?,
        Cmd::Verify => {
            let checks = verify::run(&cfg)?;
            let passed = checks.iter().all(|c| c.pass);
            if !passed {
                exit = ExitCode::from(2);
            }
            CommandOutput {
                result: json!({
                    "checks": serde_json::to_value(&checks).expect("checks serialize"),
                    "passed": passed,
                }),
                csv: None,
            }
        }
    };

    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut record = json!({
        "command": cli.cmd.name(),
        "config": raw_config,
        "result": output.result,
        "timestamp": timestamp,
    });
    if let Some(csv) = &output.csv {
        record["csv"] = json!(csv);
    }
    let rendered = jsonfmt::to_pretty_string(&record);
    print!("{rendered}");

    if let Some(path) = &out_path {
        std::fs::write(path, &rendered).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        if let Some(csv) = &output.csv {
            let csv_path = path.with_extension("csv");
            std::fs::write(&csv_path, csv).map_err(|source| ConfigError::Read {
                path: csv_path.display().to_string(),
                source,
            })?;
        }
    }
    Ok(exit)
}
