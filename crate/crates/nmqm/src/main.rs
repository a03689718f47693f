use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nmqm::commands::{cmd_detector, cmd_ensemble, cmd_evolve, cmd_trajectory};
use nmqm::config::ScheduleKind;
use nmqm::output::RunWriter;
use nmqm::verify::{run_verify, Suite};
use nmqm::{CliError, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "nmqm",
    version,
    about = "Continuous readout of a quantum system through correlated detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// zero-delay | delayed | x-readout | all-in-one
    #[arg(long, global = true)]
    schedule: Option<String>,
    /// Readout delay in time units (with --schedule delayed).
    #[arg(long, global = true)]
    delay: Option<f64>,
    /// Single-column CSV with one readout (or pointer) value per step.
    #[arg(long, global = true)]
    noise: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Reduced state at every grid time.
    Evolve,
    /// One conditional trajectory.
    Trajectory,
    /// Importance-sampled ensemble and the mean-readout comparison.
    Ensemble,
    /// Detector-chain conditional states for one readout record.
    Detector,
    /// Acceptance suite; exit code 1 when any criterion fails.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Evolve => "evolve",
            Command::Trajectory => "trajectory",
            Command::Ensemble => "ensemble",
            Command::Detector => "detector",
            Command::Verify => "verify",
        }
    }
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.sampling.seed = seed;
    }
    if let Some(n) = cli.samples {
        cfg.sampling.n_samples = n;
    }
    if let Some(out) = &cli.out {
        cfg.output.directory = out.clone();
    }
    if let Some(name) = &cli.schedule {
        cfg.schedule.kind = ScheduleKind::parse(name).ok_or_else(|| CliError::Config {
            field: "schedule.kind".into(),
            message: format!("unknown schedule `{name}`"),
        })?;
    }
    if let Some(delay) = cli.delay {
        cfg.schedule.delay = Some(delay);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load(cli)?;
    let noise = cli.noise.as_deref();
    let seed = cfg.sampling.seed;
    let mut writer = RunWriter::new(&cfg.output.directory, cfg.output.format)?;
    let mut pass = true;
    match cli.command {
        Command::Verify => {
            let suite = match &cli.config {
                Some(_) => Suite::from_config(
                    &cfg,
                    seed,
                    cli.samples.unwrap_or(nmqm::verify::UNRAVELING_SAMPLES),
                )?,
                None => {
                    let mut suite = Suite::builtin(seed);
                    suite.samples = cli.samples.unwrap_or(suite.samples);
                    suite
                }
            };
            let report = run_verify(&suite)?;
            for c in &report.criteria {
                println!("{}", c.line());
            }
            writer.report("verify.json", &report)?;
            pass = report.pass;
        }
        command => {
            let r = cfg.resolve()?;
            match command {
                Command::Evolve => {
                    writer.table("evolve", &cmd_evolve(&r)?)?;
                }
                Command::Trajectory => {
                    writer.table("trajectory", &cmd_trajectory(&r, noise, seed)?)?;
                }
                Command::Ensemble => {
                    let report = cmd_ensemble(&r, cfg.sampling.n_samples, seed)?;
                    println!(
                        "ensemble: {} samples, ESS {:.1}, trace distance {:.3e} vs 3 pooled SE {:.3e}; mean readout {:.2} SE",
                        report.samples,
                        report.effective_samples,
                        report.trace_distance_to_reduced_state,
                        3.0 * report.pooled_se,
                        report.mean_readout.discrepancy_in_se
                    );
                    pass = report.pass_3se && report.mean_readout.pass_3se;
                    writer.report("ensemble.json", &report)?;
                }
                Command::Detector => {
                    let (table, report) = cmd_detector(&r, noise, seed)?;
                    writer.table("detector", &table)?;
                    writer.report("detector.json", &report)?;
                }
                Command::Verify => unreachable!(),
            }
        }
    }
    let dir = writer.dir().to_path_buf();
    writer.finish(cli.command.name(), &cfg)?;
    println!("outputs written to {}", dir.display());
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
