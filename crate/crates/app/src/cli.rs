use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use heparin_core::dosing::{LossKind, PolicyKind};
use heparin_core::estimation::{Method, PriorSpec};
use heparin_core::evaluation::{evaluate_cohort, EvaluationConfig};
use heparin_core::io::{parse_chart, parse_cohort, write_cohort, write_report, ChartRecord, ChartRules, IoError, Report, ReportBody};
use heparin_core::simulator::{run_cohort, synth_cohort, PatientTruth};

use crate::config::AppConfig;
use crate::engine;
use crate::error::AppError;
use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "heparin", version, about = "Personalized heparin dosing")]
pub struct Cli {
    /// JSON config file; falls back to $HEPARIN_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Grid,
    Benders,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Indicator,
    Band,
    Median,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Indicator => LossKind::Indicator,
            LossArg::Band => LossKind::BandDeviation,
            LossArg::Median => LossKind::MedianDeviation,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit patient parameters to a chart.
    Estimate {
        chart: PathBuf,
        /// Inner search of the maximum-likelihood fit.
        #[arg(long, value_enum, default_value = "grid")]
        method: MethodArg,
        /// MAP fit instead: `tied`, `flat`, or a JSON prior file.
        #[arg(long)]
        prior: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recommend the next doses for a chart.
    Dose {
        chart: PathBuf,
        #[arg(long, default_value = "ptc-sg10")]
        policy: String,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic cohort file.
    Synth {
        n: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop comparison of policies on a cohort.
    Simulate {
        /// Cohort file; omit with --synthetic.
        cohort: Option<PathBuf>,
        #[arg(long, conflicts_with = "cohort")]
        synthetic: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "ptc-sg10,naive,weight")]
        policies: Vec<String>,
        /// Seeds the synthetic cohort and the simulation noise.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ROC and confusion of the model against the persistence baseline.
    Evaluate {
        cohort: PathBuf,
        #[arg(long, default_value_t = 4)]
        epoch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

fn read(path: &Path) -> Result<String, AppError> {
    std::fs::read_to_string(path).map_err(|e| AppError::Io(IoError::Read(format!("{}: {e}", path.display()))))
}

fn read_chart(path: &Path) -> Result<ChartRecord, AppError> {
    let f = std::fs::File::open(path).map_err(|e| AppError::Io(IoError::Read(format!("{}: {e}", path.display()))))?;
    Ok(parse_chart(f, &ChartRules::default())?)
}

fn read_cohort(path: &Path) -> Result<Vec<PatientTruth>, AppError> {
    Ok(parse_cohort(&read(path)?)?)
}

fn emit(text: String, out: Option<&Path>) -> Result<(), AppError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| AppError::Io(IoError::Read(format!("{}: {e}", p.display())))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn prior(arg: &str) -> Result<PriorSpec<f64>, AppError> {
    match arg {
        "tied" => Ok(PriorSpec::tied()),
        "flat" => Ok(PriorSpec::default()),
        path => serde_json::from_str(&read(Path::new(path))?)
            .map_err(|e| AppError::Usage(format!("prior file {path}: {e}"))),
    }
}

pub fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = AppConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Estimate {
            chart,
            method,
            prior: p,
            out,
        } => {
            let chart = read_chart(&chart)?;
            let method = match method {
                MethodArg::Grid => Method::Grid,
                MethodArg::Benders => Method::Benders,
            };
            let p = p.as_deref().map(prior).transpose()?;
            let r = engine::estimate(&chart, method, p.as_ref(), &cfg)?;
            emit(write_report(&Report::new(ReportBody::Estimate(r)))?, out.as_deref())
        }
        Command::Dose {
            chart,
            policy,
            loss,
            horizon,
            out,
        } => {
            let chart = read_chart(&chart)?;
            let mut spec = cfg.policy(&policy, loss.map(Into::into))?;
            if let Some(h) = horizon {
                spec.planner.horizon = h;
                spec.validate()?;
            }
            if spec.kind != PolicyKind::WeightBased && chart.to_series(None).observations.len() < cfg.min_observations {
                eprintln!("warning: fewer than {} aPTT readings; the plan rests on little data", cfg.min_observations);
            }
            let r = engine::recommend(&chart, &spec, &cfg)?;
            emit(write_report(&Report::new(ReportBody::Plan(r.plan)))?, out.as_deref())
        }
        Command::Synth { n, seed, out } => {
            let est = cfg.estimation();
            let cohort = synth_cohort(n, seed, &cfg.ranges, &est.gammas, &est.domains);
            emit(write_cohort(&cohort)?, out.as_deref())
        }
        Command::Simulate {
            cohort,
            synthetic,
            policies,
            seed,
            replicates,
            out,
        } => {
            let est = cfg.estimation();
            let patients = match (cohort, synthetic) {
                (Some(path), None) => read_cohort(&path)?,
                (None, Some(n)) => synth_cohort(n, seed, &cfg.ranges, &est.gammas, &est.domains),
                _ => return Err(AppError::Usage("give a cohort file or --synthetic N".into())),
            };
            let specs = policies
                .iter()
                .map(|p| cfg.policy(p.trim(), None))
                .collect::<Result<Vec<_>, _>>()?;
            let mut sim = cfg.simulation.clone();
            sim.seed = seed;
            if let Some(r) = replicates {
                sim.replicates = r;
            }
            let report = run_cohort(&patients, &specs, &sim)?;
            emit(write_report(&Report::new(ReportBody::Cohort(report)))?, out.as_deref())
        }
        Command::Evaluate { cohort, epoch, out } => {
            let patients = read_cohort(&cohort)?;
            let mut ecfg = EvaluationConfig::for_ranges(&cfg.ranges);
            ecfg.epoch_hours = epoch;
            ecfg.estimation = cfg.estimation().clone();
            ecfg.prior = cfg.prior;
            let report = evaluate_cohort(&patients, &ecfg)?;
            emit(write_report(&Report::new(ReportBody::Evaluation(report)))?, out.as_deref())
        }
        Command::Serve { port, host } => {
            let state = AppState::new(cfg)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| AppError::Config(e.to_string()))?;
            rt.block_on(service::serve(state, SocketAddr::new(host, port)))
        }
    }
}
