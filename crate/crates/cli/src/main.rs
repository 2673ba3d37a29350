use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use log::info;

use flowcast::config::{FitMode, PipelineConfig};
use flowcast::eval::{summarize, write_report_csv, ReportSummary};
use flowcast::flow::{load_trips, Calendar, FlowTensor};
use flowcast::geo::RegionMap;
use flowcast::pattern::BasisSet;
use flowcast::pipeline::{self, FittedModel};
use flowcast::recon::LossMode;
use flowcast::synth;
use flowcast::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "flowcast", version, about = "Hourly origin-destination flow forecasting for dockless bikes")]
struct Cli {
    /// JSON config file (default: $FLOWCAST_CONFIG, else built-in defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trip set with known ground truth.
    Synth(SynthArgs),
    /// Cluster trip endpoints into regions.
    Partition(PartitionArgs),
    /// Bin trips into hourly flow matrices.
    Build(BuildArgs),
    /// Extract base matrices from the training fragments.
    Patterns(PatternsArgs),
    /// Fit reconstruction coefficients (and bases in rbfp mode).
    Fit(FitArgs),
    /// Forecast flow matrices from a fitted model.
    Predict(PredictArgs),
    /// Score a forecast and the historical average against true flows.
    Eval(EvalArgs),
    /// Print an evaluation summary.
    Report(ReportArgs),
    /// Run partition, build, patterns, fit, predict and eval in one go.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PartitionArgs {
    #[arg(long)]
    trips: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    /// Also store every member point.
    #[arg(long)]
    members: bool,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    trips: Option<PathBuf>,
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    calendar: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PatternsArgs {
    #[arg(long)]
    tensor: Option<PathBuf>,
    /// Region map for distance histograms.
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    c: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    tensor: Option<PathBuf>,
    #[arg(long)]
    bases: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<FitMode>,
    #[arg(long)]
    loss: Option<LossMode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    calendar: Option<PathBuf>,
    /// First forecast fragment (RFC 3339); defaults to the training end.
    #[arg(long)]
    from: Option<DateTime<Utc>>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    forecast: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report CSV; the JSON summary goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    nonzero_only: bool,
    #[arg(long, default_value = "forecast")]
    name: String,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON summary written by `eval`.
    summary: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    trips: Option<PathBuf>,
    #[arg(long)]
    calendar: Option<PathBuf>,
    /// Directory for every artifact.
    #[arg(long)]
    out: PathBuf,
}

fn need(flag: Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.clone())
        .ok_or_else(|| Error::Config(format!("no {name} path given (flag or config paths.{name})")))
}

/// Like [`need`] for inputs, which must exist.
fn input(flag: Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let p = need(flag, cfg, name)?;
    if !p.exists() {
        return Err(Error::Data(format!("{name} file {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_calendar(path: Option<PathBuf>, cfg: &PipelineConfig) -> Result<Calendar> {
    match path.or_else(|| cfg.paths.calendar.clone()) {
        Some(p) => Calendar::load(&p),
        None => Ok(Calendar::new()),
    }
}

fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn write_reports(out: &Path, reports: &[flowcast::eval::MetricReport]) -> Result<ReportSummary> {
    write_report_csv(std::io::BufWriter::new(std::fs::File::create(out)?), reports)?;
    let summary = summarize(reports);
    let f = std::io::BufWriter::new(std::fs::File::create(summary_path(out))?);
    serde_json::to_writer_pretty(f, &summary)?;
    Ok(summary)
}

fn print_summary(s: &ReportSummary) {
    println!("config {}", s.fingerprint);
    println!("{:<12} {:>10} {:>10} {:>10}", "model", "mae", "rmse", "fragments");
    for m in &s.models {
        println!("{:<12} {:>10.4} {:>10.4} {:>10}", m.model, m.mae, m.rmse, m.fragments);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => {
            if let Some(s) = a.seed {
                cfg.synth.seed = s;
            }
            let data = synth::generate(&cfg.synth)?;
            data.write_to(&a.out)?;
            println!("{} trips written to {}", data.trips.len(), a.out.display());
        }
        Command::Partition(a) => {
            if let Some(e) = a.epsilon {
                cfg.partition.epsilon_m = e;
            }
            if let Some(m) = a.min_pts {
                cfg.partition.min_pts = m;
            }
            cfg.validate()?;
            let trips = load_trips(&input(a.trips, &cfg.paths.trips, "trips")?)?;
            let map = pipeline::run_partition(&trips, &cfg)?;
            map.save(&need(a.out, &cfg.paths.regions, "regions")?, a.members)?;
            println!("{} regions", map.len());
        }
        Command::Build(a) => {
            let trips = load_trips(&input(a.trips, &cfg.paths.trips, "trips")?)?;
            let map = RegionMap::load(&input(a.regions, &cfg.paths.regions, "regions")?)?;
            let calendar = load_calendar(a.calendar, &cfg)?;
            let (tensor, rep) = pipeline::run_build(&trips, &map, calendar, &cfg)?;
            tensor.save(&need(a.out, &cfg.paths.tensor, "tensor")?, Some(&rep))?;
            println!("{} fragments, {} trips kept", tensor.len(), rep.kept);
        }
        Command::Patterns(a) => {
            if let Some(c) = a.c {
                cfg.patterns.c = c;
            }
            cfg.validate()?;
            let tensor = FlowTensor::load(&input(a.tensor, &cfg.paths.tensor, "tensor")?)?;
            let map = match a.regions.or_else(|| cfg.paths.regions.clone()) {
                Some(p) => Some(RegionMap::load(&p)?),
                None => None,
            };
            let train = pipeline::training_part(&tensor, &cfg);
            let res = pipeline::run_patterns(&train, &cfg)?;
            pipeline::save_bases(&res.basis, &need(a.out, &cfg.paths.bases, "bases")?, map.as_ref(), &cfg)?;
            println!(
                "{} bases from {} fragments ({} ADMM iterations)",
                res.basis.c(),
                train.len(),
                res.coeffs.iterations
            );
        }
        Command::Fit(a) => {
            if let Some(m) = a.mode {
                cfg.mode = m;
            }
            if let Some(l) = a.loss {
                cfg.objective.loss = l;
            }
            if let Some(l) = a.lambda {
                cfg.objective.lambda = l;
            }
            if let Some(g) = a.gamma {
                cfg.objective.gamma = g;
            }
            cfg.validate()?;
            let tensor = FlowTensor::load(&input(a.tensor, &cfg.paths.tensor, "tensor")?)?;
            let train = pipeline::training_part(&tensor, &cfg);
            let basis = match cfg.mode {
                FitMode::Ibfp => Some(BasisSet::load(&input(a.bases, &cfg.paths.bases, "bases")?)?),
                FitMode::Rbfp => None,
            };
            let model = pipeline::run_fit(&train, basis.as_ref(), &cfg)?;
            model.save(&need(a.out, &cfg.paths.model, "model")?)?;
            println!(
                "{} model: {} sweeps, objective {:.6}, converged {}",
                cfg.mode,
                model.meta.pg.iterations,
                model.meta.pg.final_objective(),
                model.meta.pg.converged
            );
        }
        Command::Predict(a) => {
            let model = FittedModel::load(&input(a.model, &cfg.paths.model, "model")?)?;
            let calendar = load_calendar(a.calendar, &cfg)?;
            let fc = pipeline::run_predict(&model, &cfg, calendar, a.from, a.horizon)?;
            let out = need(a.out, &cfg.paths.forecast, "forecast")?;
            fc.save(&out)?;
            println!("{} fragments forecast into {}", fc.fragments.len(), out.display());
        }
        Command::Eval(a) => {
            if a.nonzero_only {
                cfg.eval.nonzero_only = true;
            }
            let forecast = FlowTensor::load(&input(a.forecast, &cfg.paths.forecast, "forecast")?)?;
            let truth = FlowTensor::load(&input(a.truth, &cfg.paths.tensor, "tensor")?)?;
            let reports = pipeline::run_eval(&forecast, &truth, &cfg, &a.name)?;
            let summary = write_reports(&need(a.out, &cfg.paths.report, "report")?, &reports)?;
            print_summary(&summary);
        }
        Command::Report(a) => {
            let text = std::fs::read_to_string(&a.summary)?;
            let summary: ReportSummary = serde_json::from_str(&text)?;
            print_summary(&summary);
        }
        Command::Run(a) => {
            std::fs::create_dir_all(&a.out)?;
            let trips = load_trips(&input(a.trips, &cfg.paths.trips, "trips")?)?;
            let calendar = load_calendar(a.calendar, &cfg)?;
            let map = pipeline::run_partition(&trips, &cfg)?;
            map.save(&a.out.join("regions.json"), false)?;
            let (tensor, rep) = pipeline::run_build(&trips, &map, calendar.clone(), &cfg)?;
            tensor.save(&a.out.join("tensor.bin"), Some(&rep))?;
            let train = pipeline::training_part(&tensor, &cfg);
            let basis = match cfg.mode {
                FitMode::Ibfp => {
                    let res = pipeline::run_patterns(&train, &cfg)?;
                    pipeline::save_bases(&res.basis, &a.out.join("bases.bin"), Some(&map), &cfg)?;
                    Some(res.basis)
                }
                FitMode::Rbfp => None,
            };
            let model = pipeline::run_fit(&train, basis.as_ref(), &cfg)?;
            model.save(&a.out.join("model.bin"))?;
            let fc = pipeline::run_predict(&model, &cfg, calendar, None, None)?;
            fc.save(&a.out.join("forecast.bin"))?;
            let reports = pipeline::run_eval(&fc.to_tensor()?, &tensor, &cfg, &cfg.mode.to_string())?;
            let summary = write_reports(&a.out.join("report.csv"), &reports)?;
            print_summary(&summary);
        }
    }
    Ok(())
}

fn init_threads(n: Option<usize>) -> Result<()> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    info!("using {n} worker threads");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = init_threads(cli.threads).and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
