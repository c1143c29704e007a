use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gaxnet::channel;
use gaxnet::checkpoint::Checkpoint;
use gaxnet::config::Config;
use gaxnet::eval::{self, symmetry_mse};
use gaxnet::policy::{ExchangeMode, PolicyMode};
use gaxnet::trainer::{self, RunOutput};

#[derive(Parser)]
#[command(
    name = "gaxnet",
    version,
    about = "Multi-UAV attention/exchange MARL with URLLC link metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML config; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Train/evaluate the attention-free mixing baseline.
    #[arg(long)]
    baseline: bool,
    /// Disable the message exchange between agents.
    #[arg(long, conflicts_with = "exchange_raw")]
    no_exchange: bool,
    /// Exchange raw attention weights instead of encoded ones.
    #[arg(long)]
    exchange_raw: bool,
}

impl Common {
    fn load(&self) -> gaxnet::Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.baseline {
            cfg.mode = PolicyMode::Baseline;
            cfg.exchange = ExchangeMode::Off;
        }
        if self.no_exchange {
            cfg.exchange = ExchangeMode::Off;
        }
        if self.exchange_raw {
            cfg.exchange = ExchangeMode::Raw;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write train.csv, trajectory.jsonl and checkpoints.
    Train(Common),
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out-dir>/checkpoint_final.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to eval_episodes from the config.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Error-rate surface over distance and transmission time.
    ChannelTable(Common),
    /// Lag-one symmetry statistics of an attention.csv.
    Symmetry {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out-dir>/attention.csv.
        #[arg(long)]
        attention: Option<PathBuf>,
    },
    /// Solve for the altitude whose coverage radius equals urllc_range.
    CalibrateAltitude(Common),
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> gaxnet::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> gaxnet::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = RunOutput {
                dir: c.out_dir.clone(),
            };
            let report = trainer::train(&cfg, Some(&out))?;
            println!(
                "iterations {}  final 100-episode mean reward {:.4}  checkpoint {}",
                report.rows.len(),
                report.final_moving_average(100),
                out.final_checkpoint().display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => {
            let cfg = common.load()?;
            let path = checkpoint.unwrap_or_else(|| common.out_dir.join("checkpoint_final.json"));
            let ck = Checkpoint::load(&path)?;
            let episodes = episodes.unwrap_or(cfg.eval_episodes);
            let outcome = eval::run_eval(&cfg, &ck, episodes, cfg.eval_seed)?;
            std::fs::create_dir_all(&common.out_dir)?;
            eval::write_metrics_csv(&common.out_dir.join("metrics.csv"), &outcome.records)?;
            eval::write_attention_csv(&common.out_dir.join("attention.csv"), &outcome.records)?;
            write_json(&common.out_dir.join("summary.json"), &outcome.summary)?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::ChannelTable(c) => {
            let cfg = c.load()?;
            let (d, t) = eval::default_channel_grid();
            let rows = eval::channel_table(&cfg, &d, &t)?;
            std::fs::create_dir_all(&c.out_dir)?;
            let path = c.out_dir.join("channel_table.csv");
            eval::write_channel_csv(&path, &rows)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Symmetry { common, attention } => {
            let path = attention.unwrap_or_else(|| common.out_dir.join("attention.csv"));
            let stats = symmetry_mse(&eval::read_attention_csv(&path)?);
            if let Some(dir) = path.parent() {
                write_json(&dir.join("symmetry.json"), &stats)?;
            }
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::CalibrateAltitude(c) => {
            let cfg = c.load()?;
            let p = cfg.channel();
            let cal = channel::calibrate_altitude(
                cfg.urllc_range,
                cfg.target_error,
                p.max_transmission_time(),
                &p,
                (10.0, 2000.0),
            )?;
            std::fs::create_dir_all(&c.out_dir)?;
            write_json(&c.out_dir.join("altitude_calibration.json"), &cal)?;
            println!("{}", serde_json::to_string_pretty(&cal)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
