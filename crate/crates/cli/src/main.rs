use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use sdex_cli::commands::{self, Mode, RunOptions};
use sdex_cli::config::ExperimentConfig;
use sdex_cli::output::{write_json, OutDir, Verdict};

/// Stochastic differential equations on simulated memristor crossbars.
#[derive(Parser, Debug)]
#[command(name = "sdex", version)]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write the reduced nodal system of the experiment tile.
    #[arg(long, global = true)]
    dump_nodal: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate a row of random-source pairs and test its statistics.
    RngCharacterize,
    /// Black-Scholes ensemble compared against the closed form.
    SolveBs {
        #[arg(long, value_enum, default_value_t = Mode::FullCrossbar)]
        mode: Mode,
    },
    /// Energy of the default full-crossbar workload.
    EnergyReport,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::RngCharacterize => "rng-characterize",
            Command::SolveBs { .. } => "solve-bs",
            Command::EnergyReport => "energy-report",
        }
    }
}

fn run(cli: &Cli, cfg: &ExperimentConfig, out: &OutDir) -> Result<Verdict> {
    let opts = RunOptions {
        dump_nodal: cli.dump_nodal,
    };
    match cli.command {
        Command::RngCharacterize => commands::rng_characterize(cfg, out, opts),
        Command::SolveBs { mode } => commands::solve_bs(cfg, mode, out, opts),
        Command::EnergyReport => commands::energy_report(cfg, out),
    }
}

fn setup(cli: &Cli) -> Result<(ExperimentConfig, OutDir)> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker threads")?;
    }
    Ok((cfg, OutDir::new(dir)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let (cfg, out) = match setup(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let verdict = run(&cli, &cfg, &out).unwrap_or_else(|e| Verdict::failed(name, format!("{e:#}")));
    if let Err(e) = write_json(&out.path(&Verdict::file_name(name)), &verdict) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    if let Some(e) = &verdict.error {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    for c in &verdict.checks {
        println!("{} {} = {:.6e}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value);
    }
    if verdict.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
