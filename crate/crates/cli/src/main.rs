use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;
use trackbench_core::ingest::{self, IngestError};
use trackbench_core::model::TimeAlignment;
use trackbench_core::plugins::{PipelineConfig, PluginError, Registry};
use trackbench_core::replay::{self, ReplayError};
use trackbench_core::rundir::{self, RunDirError};
use trackbench_core::synth::{self, SquareDriftConfig};
use trackbench_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "trackbench", version, about = "Indoor-tracking replay workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Align {
    #[value(alias = "common_start")]
    Common,
    #[value(alias = "as_recorded")]
    Recorded,
}

impl From<Align> for TimeAlignment {
    fn from(a: Align) -> Self {
        match a {
            Align::Common => TimeAlignment::CommonStart,
            Align::Recorded => TimeAlignment::AsRecorded,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario bundle and print a summary.
    Validate { bundle: PathBuf },
    /// Replay a bundle through a pipeline and write a run directory.
    Replay {
        bundle: PathBuf,
        /// `filter,positioning,collab`; empty entries skip a stage.
        #[arg(long, default_value = "lowpass,pdr,drift-correction")]
        pipeline: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the alignment stored in the bundle.
        #[arg(long, value_enum)]
        align: Option<Align>,
        #[arg(long)]
        out: PathBuf,
        /// Plugin parameter as `slug.key=value`; the value is parsed as
        /// JSON when possible. Repeatable.
        #[arg(long = "set", value_name = "SLUG.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print metrics of a run directory; writes metrics.json if absent.
    Score { run_dir: PathBuf },
    /// Start the HTTP service.
    Serve {
        #[arg(long, env = "TRACKBENCH_DATA_DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long, env = "TRACKBENCH_BIND_ADDR")]
        bind: Option<String>,
        #[arg(long, env = "TRACKBENCH_WORKERS")]
        workers: Option<usize>,
    },
    /// Generate a synthetic scenario bundle.
    Synth {
        #[arg(long, default_value = "square-drift")]
        preset: String,
        #[arg(long, default_value_t = 4)]
        devices: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Gyroscope heading bias, radians per step.
        #[arg(long)]
        bias: Option<f64>,
        #[arg(long)]
        acc_noise: Option<f64>,
        #[arg(long)]
        gyro_noise: Option<f64>,
        #[arg(long)]
        laps: Option<usize>,
        /// Side of the first walker's square, in steps.
        #[arg(long)]
        side_steps: Option<usize>,
        #[arg(long)]
        step_length: Option<f64>,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io(e) => Failure::Runtime(e.to_string()),
            IngestError::Validation(v) => {
                let lines: Vec<String> = v.0.iter().map(|e| format!("  {e}")).collect();
                Failure::Validation(format!("validation failed:\n{}", lines.join("\n")))
            }
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<PluginError> for Failure {
    fn from(e: PluginError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<ReplayError> for Failure {
    fn from(e: ReplayError) -> Self {
        match e {
            ReplayError::Validation(_) | ReplayError::Plugin(_) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<RunDirError> for Failure {
    fn from(e: RunDirError) -> Self {
        match e {
            RunDirError::Io(e) => Failure::Runtime(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

fn validate(bundle: &Path) -> Result<(), Failure> {
    let (scenario, report) = ingest::load_scenario_with_report(bundle)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("scenario: {}", scenario.id);
    println!("devices: {}", scenario.hardware_count());
    println!("runs: {}", scenario.device_runs.len());
    println!("beacons: {}", scenario.beacons.len());
    println!("total groundtruth length: {:.1} m", scenario.total_groundtruth_length());
    Ok(())
}

fn apply_overrides(cfg: &mut PipelineConfig, sets: &[String]) -> Result<(), Failure> {
    for s in sets {
        let bad = || Failure::Validation(format!("--set {s:?}: expected slug.key=value"));
        let (lhs, raw) = s.split_once('=').ok_or_else(bad)?;
        let (slug, key) = lhs.split_once('.').ok_or_else(bad)?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let stage = cfg
            .filtering
            .iter_mut()
            .chain(std::iter::once(&mut cfg.positioning))
            .chain(cfg.collaborative.iter_mut())
            .find(|r| r.slug == slug)
            .ok_or_else(|| Failure::Validation(format!("--set {s:?}: {slug:?} is not in the pipeline")))?;
        stage.params.insert(key.to_string(), value);
    }
    Ok(())
}

fn run_replay(
    bundle: &Path,
    pipeline: &str,
    seed: u64,
    align: Option<Align>,
    out: &Path,
    sets: &[String],
) -> Result<(), Failure> {
    let mut scenario = ingest::load_scenario(bundle)?;
    let mut cfg = PipelineConfig::from_slugs(pipeline)?;
    apply_overrides(&mut cfg, sets)?;
    let registry = Registry::with_builtins();
    registry.assemble(&cfg)?;
    if let Some(a) = align {
        scenario.time_alignment = a.into();
    }
    let artifacts = replay::run_replay_with(&registry, &scenario, &cfg, seed)?;
    rundir::write_run_dir(out, &artifacts)?;
    let agg = &artifacts.result.aggregate;
    println!(
        "wrote {} ({} devices, {} encounters, {} ticks)",
        out.display(),
        agg.device_count,
        artifacts.encounters.len(),
        artifacts.ticks.len()
    );
    println!(
        "q3 estimated {:.3} m, corrected {:.3} m, improvement {:.1}%",
        agg.mean_q3_estimated,
        agg.mean_q3_corrected,
        agg.improvement * 100.0
    );
    Ok(())
}

fn score(run_dir: &Path) -> Result<(), Failure> {
    let result = rundir::read_result(run_dir)?;
    if !run_dir.join(rundir::METRICS_FILE).exists() {
        for (name, bytes) in rundir::score_files(&result) {
            fs::write(run_dir.join(name), bytes).map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    println!(
        "{:<20} {:>10} {:>10} {:>10} {:>10} {:>9}",
        "device", "q3_est", "q3_corr", "dfd_est", "dfd_corr", "improve"
    );
    for m in &result.metrics {
        println!(
            "{:<20} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>8.1}%",
            m.device_id,
            m.q3_estimated,
            m.q3_corrected,
            m.dfd_estimated,
            m.dfd_corrected,
            m.improvement * 100.0
        );
    }
    let a = &result.aggregate;
    println!(
        "{:<20} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>8.1}%",
        "mean", a.mean_q3_estimated, a.mean_q3_corrected, a.mean_dfd_estimated, a.mean_dfd_corrected,
        a.improvement * 100.0
    );
    println!("improved devices: {}/{}", a.improved_devices, a.device_count);
    Ok(())
}

fn serve(data_dir: Option<PathBuf>, bind: Option<String>, workers: Option<usize>) -> Result<(), Failure> {
    let mut config = ServiceConfig::from_env();
    if let Some(d) = data_dir {
        config.data_dir = d;
    }
    if let Some(b) = bind {
        config.bind_addr = b;
    }
    if let Some(w) = workers.filter(|&w| w > 0) {
        config.workers = w;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    rt.block_on(trackbench_service::serve(config))
        .map_err(|e| Failure::Runtime(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn synth_cmd(
    preset: &str,
    devices: usize,
    seed: u64,
    out: &Path,
    bias: Option<f64>,
    acc_noise: Option<f64>,
    gyro_noise: Option<f64>,
    laps: Option<usize>,
    side_steps: Option<usize>,
    step_length: Option<f64>,
) -> Result<(), Failure> {
    if !synth::PRESETS.contains(&preset) {
        return Err(Failure::Validation(format!(
            "unknown preset {preset:?} (available: {})",
            synth::PRESETS.join(", ")
        )));
    }
    let d = SquareDriftConfig::default();
    let cfg = SquareDriftConfig {
        devices,
        seed,
        bias_rad_per_step: bias.unwrap_or(d.bias_rad_per_step),
        acc_noise_sigma: acc_noise.unwrap_or(d.acc_noise_sigma),
        gyro_noise_sigma: gyro_noise.unwrap_or(d.gyro_noise_sigma),
        laps: laps.unwrap_or(d.laps),
        base_side_steps: side_steps.unwrap_or(d.base_side_steps),
        step_length_m: step_length.unwrap_or(d.step_length_m),
        ..d
    };
    let scenario = synth::square_drift(&cfg).map_err(|e| Failure::Validation(e.to_string()))?;
    ingest::write_bundle(&scenario, out)?;
    println!(
        "wrote {} ({} walkers, {:.1} m of groundtruth)",
        out.display(),
        scenario.device_runs.len(),
        scenario.total_groundtruth_length()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate { bundle } => validate(&bundle),
        Command::Replay {
            bundle,
            pipeline,
            seed,
            align,
            out,
            set,
        } => run_replay(&bundle, &pipeline, seed, align, &out, &set),
        Command::Score { run_dir } => score(&run_dir),
        Command::Serve { data_dir, bind, workers } => serve(data_dir, bind, workers),
        Command::Synth {
            preset,
            devices,
            seed,
            out,
            bias,
            acc_noise,
            gyro_noise,
            laps,
            side_steps,
            step_length,
        } => synth_cmd(&preset, devices, seed, &out, bias, acc_noise, gyro_noise, laps, side_steps, step_length),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(m) | Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
