//! `msnn` command-line tool.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error,
//! 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msnn::analysis::HistogramSpec;
use msnn::checkpoint;
use msnn::experiment::{self, DataSource, EvalRequest, ExperimentConfig};
use msnn::noise::{CurrentConfig, NoiseKind};
use msnn::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "msnn", version, about = "Noise-aware training and evaluation of mixed-signal CNNs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Global {
    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit wall-clock fields so repeated runs produce identical files.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Desk-scale profile: narrow layers, small data, few epochs.
    #[arg(long, global = true)]
    quick: bool,
    /// Use the synthetic dataset instead of CIFAR-10.
    #[arg(long, global = true)]
    synthetic: bool,
    /// CIFAR-10 directory (overrides the config and MSNN_DATA_DIR).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network per seed and write checkpoints and CSV reports.
    Train {
        config: PathBuf,
        /// Output directory (defaults to the config's output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint over a grid of maximum currents.
    Eval {
        checkpoint: PathBuf,
        /// Experiment file supplying data and evaluation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated currents in nA.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10,20,50,100")]
        imax: Vec<f64>,
        #[arg(long, default_value = "accurate")]
        noise: NoiseKind,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        programming: Switch,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every value of the config's `[sweep]` section.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer reports on a checkpoint.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        report: Report,
        /// Probe current for the sensitivity report, nA.
        #[arg(long, default_value_t = 10.0)]
        probe_na: f64,
        /// Uniform current for the snr and power reports, nA.
        #[arg(long, default_value_t = 1.0)]
        imax: f64,
        /// Named per-layer current budget for the power report.
        #[arg(long)]
        preset: Option<String>,
        /// Supply voltage to express power in watts.
        #[arg(long)]
        voltage: Option<f64>,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Report {
    Sensitivity,
    Power,
    Snr,
}

fn prepare(mut cfg: ExperimentConfig, g: &Global) -> Result<ExperimentConfig> {
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if g.deterministic {
        cfg.deterministic = true;
    }
    if g.synthetic {
        cfg.data.source = DataSource::Synthetic;
    }
    if let Some(d) = &g.data_dir {
        cfg.data.dir = Some(d.clone());
        cfg.data.source = DataSource::Cifar;
    }
    if g.quick {
        cfg = cfg.quick();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, csv: String) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn config_for_checkpoint(path: Option<&Path>, state: &msnn::model::NetworkState, g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.network = state.config.clone();
    let quick = g.quick;
    let global = Global {
        quick: false,
        ..g.clone()
    };
    let mut cfg = prepare(cfg, &global)?;
    if quick {
        let network = cfg.network.clone();
        cfg = cfg.quick();
        cfg.network = network;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Train { config, out, epochs } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let cfg = prepare(cfg, g)?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let files = experiment::run_train(&cfg, &dir)?;
            let summary = std::fs::read_to_string(&files.summary_csv).map_err(|e| Error::io(&files.summary_csv, e))?;
            print!("{summary}");
            Ok(())
        }
        Command::Eval {
            checkpoint: ckpt,
            config,
            imax,
            noise,
            scale,
            runs,
            programming,
            out,
        } => {
            let state = checkpoint::load(&ckpt)?;
            let cfg = config_for_checkpoint(config.as_deref(), &state, g)?;
            let data = experiment::load_data(&cfg)?;
            let req = EvalRequest {
                grid_na: imax,
                noise,
                scale,
                runs,
                programming: programming == Switch::On,
                seed: g.seed.unwrap_or(cfg.seeds[0]),
            };
            let rows = experiment::eval_checkpoint(&cfg, &state, &data.test, &req)?;
            emit(out.as_deref(), experiment::csv_string(&rows)?)
        }
        Command::Sweep { config, out } => {
            let cfg = prepare(ExperimentConfig::load(&config)?, g)?;
            let out = out.unwrap_or_else(|| cfg.output.dir.join(format!("{}_sweep.csv", cfg.name)));
            experiment::run_sweep(&cfg, &out)?;
            let text = std::fs::read_to_string(&out).map_err(|e| Error::io(&out, e))?;
            print!("{text}");
            Ok(())
        }
        Command::Analyze {
            checkpoint: ckpt,
            config,
            report,
            probe_na,
            imax,
            preset,
            voltage,
            bins,
            out,
        } => {
            let state = checkpoint::load(&ckpt)?;
            let cfg = config_for_checkpoint(config.as_deref(), &state, g)?;
            let data = experiment::load_data(&cfg)?;
            let seed = g.seed.unwrap_or(cfg.seeds[0]);
            match report {
                Report::Sensitivity => {
                    let rows = experiment::sensitivity_rows(&cfg, &state, &data.test, probe_na, seed)?;
                    emit(out.as_deref(), experiment::csv_string(&rows)?)
                }
                Report::Power => {
                    let currents = match preset.as_deref() {
                        Some("sec6") => CurrentConfig::sec6_preset(),
                        Some(other) => return Err(Error::config(format!("unknown preset {other:?}"))),
                        None => cfg.uniform_currents(imax),
                    };
                    let rows = experiment::power_rows(&state, &data.test, &currents, voltage)?;
                    emit(out.as_deref(), experiment::csv_string(&rows)?)
                }
                Report::Snr => {
                    let spec = HistogramSpec {
                        bins,
                        ..HistogramSpec::default()
                    };
                    let rows = experiment::snr_rows(&cfg, &state, &data.test, imax, spec, seed)?;
                    emit(out.as_deref(), experiment::csv_string(&rows)?)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
