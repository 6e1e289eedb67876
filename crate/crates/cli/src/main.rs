use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use aschpuf_cli::csvout;
use aschpuf_cli::experiments::{self, AGING_CHECKPOINTS};
use aschpuf_cli::net::{self, ClientMode};
use aschpuf_core::{Environment, ModelConfig};

const EXIT_OK: i32 = 0;
const EXIT_CONFIG: i32 = 2;
const EXIT_VERIFY: i32 = 3;
const EXIT_TARGET_MISS: i32 = 4;

#[derive(Parser)]
#[command(
    name = "aschpuf",
    about = "Inverter-chain PUF simulator with self-checking-and-healing stabilization",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Model configuration file (key = value lines); defaults ship in-binary.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every output is deterministic under it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Report raw stability of the configured model against the reference targets.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 10)]
        chips: usize,
        /// Evaluations per environment point.
        #[arg(long, default_value_t = 2000)]
        evals: u64,
    },
    /// Masking ratio and worst-corner BER versus detection skew, for
    /// self-checking-only and check-and-heal stabilization.
    SweepSkew {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 10)]
        chips: usize,
        /// Skew list in mV.
        #[arg(long, value_delimiter = ',')]
        skews: Option<Vec<f64>>,
        #[arg(long, default_value_t = 2000)]
        evals: u64,
    },
    /// BER versus temperature and versus supply, raw and stabilized.
    SweepEnv {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 10)]
        chips: usize,
        /// Temperature list in degC.
        #[arg(long, value_delimiter = ',')]
        temps: Option<Vec<f64>>,
        /// Supply list in V.
        #[arg(long, value_delimiter = ',')]
        vdds: Option<Vec<f64>>,
        /// Detection skews defining the masking levels, mV.
        #[arg(long, value_delimiter = ',')]
        skews: Option<Vec<f64>>,
        #[arg(long, default_value_t = 2000)]
        evals: u64,
    },
    /// Masking ratio required for zero observed errors versus stress hours.
    Aging {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 2)]
        chips: usize,
        /// Stress checkpoints in hours.
        #[arg(long, value_delimiter = ',')]
        hours: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        skews: Option<Vec<f64>>,
        #[arg(long, default_value_t = 500)]
        evals: u64,
    },
    /// Run the enrollment/verification server on a local address.
    Serve {
        /// Listen address, e.g. 127.0.0.1:7700 (port 0 picks a free port).
        #[arg(long)]
        addr: String,
        /// Enrollment database path; in-memory when omitted.
        #[arg(long)]
        db: Option<PathBuf>,
        /// Exit after serving this many connections.
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Enroll simulated chips and run verification sessions.
    Client {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        chips: usize,
        /// Verification sessions per chip at randomized conditions.
        #[arg(long, default_value_t = 1)]
        sessions: usize,
        /// Stabilization mode.
        #[arg(long, value_parser = ["s-asch", "d-asch"], default_value = "d-asch")]
        mode: String,
        /// Detection skew, mV.
        #[arg(long, default_value_t = aschpuf_core::FULL_RANGE_SKEW_MV)]
        skew: f64,
        /// Flip one key bit before sending the proof (failure-path demo).
        #[arg(long)]
        tamper: bool,
    },
}

fn load_config(path: &Option<PathBuf>, seed: u64) -> Result<ModelConfig> {
    let mut cfg = match path {
        Some(p) => ModelConfig::from_file(p).with_context(|| format!("reading config {p:?}"))?,
        None => ModelConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn emit(common: &CommonArgs, csv: String, summary: &str) -> Result<()> {
    match &common.out {
        Some(path) => {
            std::fs::write(path, csv).with_context(|| format!("writing {path:?}"))?;
            println!("{summary}");
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn check_grid(temps: &[f64], vdds: &[f64]) -> Result<()> {
    for &t in temps {
        let env = Environment { vdd: 1.2, temperature: t };
        anyhow::ensure!(env.is_valid(), "temperature {t} outside the supported range");
    }
    for &v in vdds {
        let env = Environment { vdd: v, temperature: 25.0 };
        anyhow::ensure!(env.is_valid(), "supply {v} outside the supported range");
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("ASCHPUF_THREADS") {
        let n: usize = raw
            .parse()
            .with_context(|| format!("ASCHPUF_THREADS must be a positive integer, got `{raw}`"))?;
        anyhow::ensure!(n >= 1, "ASCHPUF_THREADS must be >= 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Calibrate { common, chips, evals } => {
            let cfg = load_config(&common.config, common.seed)?;
            let cal = experiments::calibrate(&cfg, chips, evals, common.seed);
            let targets = experiments::calibration_targets(&cal);
            let all_pass = targets.iter().all(|t| t.pass);
            let summary = targets
                .iter()
                .map(|t| {
                    format!(
                        "{:<28} {:>12.4e}  target {:>9.2e}  window [{:.2e}, {:.2e}]  {}",
                        t.metric,
                        t.value,
                        t.target,
                        t.lo,
                        t.hi,
                        if t.pass { "pass" } else { "MISS" }
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            emit(&common, csvout::calibrate_csv(&targets), &summary)?;
            Ok(if all_pass { EXIT_OK } else { EXIT_TARGET_MISS })
        }
        Cmd::SweepSkew { common, chips, skews, evals } => {
            let cfg = load_config(&common.config, common.seed)?;
            let skews = skews.unwrap_or_else(experiments::default_skew_list);
            let rows = experiments::sweep_skew(&cfg, chips, &skews, evals, common.seed)?;
            let summary = format!("{} skew points x 2 modes on {chips} chips", skews.len());
            emit(&common, csvout::sweep_skew_csv(&rows), &summary)?;
            Ok(EXIT_OK)
        }
        Cmd::SweepEnv { common, chips, temps, vdds, skews, evals } => {
            let cfg = load_config(&common.config, common.seed)?;
            let temps = temps.unwrap_or_else(|| experiments::SWEEP_TEMPS.to_vec());
            let vdds = vdds.unwrap_or_else(|| experiments::SWEEP_VDDS.to_vec());
            let skews = skews.unwrap_or_else(|| vec![4.0, aschpuf_core::FULL_RANGE_SKEW_MV]);
            check_grid(&temps, &vdds)?;
            let rows =
                experiments::sweep_env(&cfg, chips, &temps, &vdds, &skews, evals, common.seed)?;
            let summary = format!(
                "{} temperature and {} supply points, {} masking levels",
                temps.len(),
                vdds.len(),
                skews.len()
            );
            emit(&common, csvout::sweep_env_csv(&rows), &summary)?;
            Ok(EXIT_OK)
        }
        Cmd::Aging { common, chips, hours, skews, evals } => {
            let cfg = load_config(&common.config, common.seed)?;
            let hours = hours.unwrap_or_else(|| AGING_CHECKPOINTS.to_vec());
            let skews = skews.unwrap_or_else(experiments::default_skew_list);
            let rows =
                experiments::aging_experiment(&cfg, chips, &hours, &skews, evals, common.seed)?;
            let summary = format!("{} checkpoints x 2 modes on {chips} chips", hours.len());
            emit(&common, csvout::aging_csv(&rows), &summary)?;
            Ok(EXIT_OK)
        }
        Cmd::Serve { addr, db, max_connections } => {
            net::serve(&addr, db.as_deref(), max_connections)?;
            Ok(EXIT_OK)
        }
        Cmd::Client { addr, config, seed, chips, sessions, mode, skew, tamper } => {
            let cfg = load_config(&config, seed)?;
            let mode = match mode.as_str() {
                "s-asch" => ClientMode::Static,
                _ => ClientMode::Dynamic,
            };
            let outcome =
                net::run_client(&addr, &cfg, mode, chips, sessions, skew, tamper, seed)?;
            println!(
                "{} chips enrolled, {}/{} sessions accepted",
                outcome.chips, outcome.accepts, outcome.sessions
            );
            Ok(if outcome.accepts == outcome.sessions { EXIT_OK } else { EXIT_VERIFY })
        }
    }
}

fn main() {
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        std::process::exit(EXIT_CONFIG);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            // anything failing before results exist is a configuration problem
            std::process::exit(EXIT_CONFIG);
        }
    }
}
