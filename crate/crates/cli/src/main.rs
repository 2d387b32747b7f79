//! `dhqc-sim`: run, compare, and inspect compressed federated simulations.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dhqc::codec::{self, Reconstruction};
use dhqc::sim::{self, SimConfig};
use dhqc::Error;
use log::error;

#[derive(Parser)]
#[command(
    name = "dhqc-sim",
    version,
    about = "Communication-efficient federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write per-round metrics as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `output` key.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several configs and write an aligned per-round table.
    Compare {
        /// Comma-separated config paths.
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretty-print a packed update frame.
    InspectUpdate {
        binfile: PathBuf,
        /// Number of entries to list.
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config_error() {
        2
    } else if e.is_data_error() {
        3
    } else {
        1
    }
}

fn load_config(path: &Path) -> Result<SimConfig, Error> {
    let mut cfg = SimConfig::load(path)?;
    if cfg.name.is_none() {
        cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    }
    Ok(cfg)
}

fn simulate(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = load_config(config)?;
    if out.is_some() {
        cfg.output = out;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = sim::run_simulation(&cfg)?;
    let s = &outcome.summary;
    println!("run:                {}", outcome.label);
    println!("rounds:             {}", s.rounds);
    println!("final accuracy:     {:.4}", s.final_accuracy);
    println!("final loss:         {:.4}", s.final_loss);
    println!("uploaded bytes:     {}", s.total_bytes);
    println!("downlink bytes:     {}", s.downlink_bytes);
    println!("participant slots:  {}", s.total_participants);
    println!("mean ratio:         {:.2}", s.mean_compression_ratio);
    if let Some(o) = &cfg.output {
        println!("metrics written to  {}", o.display());
    }
    Ok(())
}

fn compare(configs: &[PathBuf], out: &Path) -> Result<(), Error> {
    let cfgs = configs
        .iter()
        .map(|p| load_config(p))
        .collect::<Result<Vec<_>, _>>()?;
    let cmp = sim::compare_runs(&cfgs)?;
    cmp.write_csv(out)?;
    print!("{}", cmp.summary_table());
    println!("table written to {}", out.display());
    Ok(())
}

fn inspect(path: &Path, limit: usize) -> Result<(), Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let enc = codec::unpack(&bytes)?;
    let q = enc.quant_params();
    println!("frame:          {} bytes", bytes.len());
    println!("model_len:      {}", enc.model_len());
    println!("count:          {}", enc.count());
    println!("thr:            {}", enc.thr());
    println!("theta:          {}", enc.theta());
    println!("step:           {}", q.step());
    println!(
        "reconstruction: {}",
        match enc.reconstruction() {
            Reconstruction::LowerEdge => "lower-edge",
            Reconstruction::Midpoint => "midpoint",
        }
    );
    println!("client_weight:  {}", enc.client_weight());
    println!(
        "ratio:          {:.2}",
        codec::compression_ratio(enc.model_len() as usize, bytes.len())?
    );
    let decoded = codec::decode_update(&enc)?;
    println!(
        "{:>10}  {:>4}  {:>3}  {:>14}",
        "index", "sign", "loc", "value"
    );
    for ((code, &idx), value) in enc
        .codes()
        .iter()
        .zip(enc.indices())
        .zip(decoded.values())
        .take(limit)
    {
        println!(
            "{idx:>10}  {:>4}  {:>3}  {value:>14.6e}",
            if code.negative() { "-" } else { "+" },
            code.location()
        );
    }
    if enc.count() > limit {
        println!("... {} more", enc.count() - limit);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIM_LOG_LEVEL", "error"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed } => simulate(&config, out, seed),
        Command::Compare { configs, out } => compare(&configs, &out),
        Command::InspectUpdate { binfile, limit } => inspect(&binfile, limit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
