//! Command-line front end for the encoding-energy toolkit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use encenergy::attribution::{self, AttributionError};
use encenergy::dataset::{Dataset, DatasetError, Provenance};
use encenergy::eval::{self, Confidence, EvalError};
use encenergy::events::EventId;
use encenergy::model::{self, EnergyModel, ModelError, ModelMode, Preset};
use encenergy::pipeline::{self, CollectTools, PipelineError, RunPlan};
use encenergy::power::{
    self, CommandSpec, EnergyMeter, MeasureConfig, PowerError, PowercapMeter,
};
use encenergy::profile;
use encenergy::synth::{synth_dataset, SynthSpec};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TOOL: u8 = 3;

#[derive(Parser)]
#[command(name = "encenergy", version, about = "Estimate video-encoding energy from processor events")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Dataset CSV path.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Model file path.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// RNG seed for splits and synthesis.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Confidence level in percent (90, 95 or 99).
    #[arg(long, global = true, default_value_t = 95)]
    confidence: u32,
    /// Output format for tables.
    #[arg(long, global = true, value_parser = ["csv", "table"], default_value = "table")]
    output_format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Measure the energy of an external command under the power meter.
    Measure {
        /// Meter domain, e.g. package-0.
        #[arg(long, default_value = "package-0")]
        domain: String,
        /// Calibrated idle power in watts.
        #[arg(long)]
        p_idle: f64,
        #[arg(long, default_value_t = 2)]
        repeats: usize,
        #[arg(long, default_value_t = 20)]
        max_repeats: usize,
        /// Relative CI half-width threshold for significance.
        #[arg(long, default_value_t = 0.02)]
        threshold: f64,
        /// The workload command and its arguments.
        #[arg(required = true, trailing_var_arg = true)]
        command: Vec<String>,
    },
    /// Measure average idle power over a quiesced window.
    CalibrateIdle {
        #[arg(long, default_value = "package-0")]
        domain: String,
        /// Window length in seconds.
        #[arg(long, default_value_t = 60.0)]
        window: f64,
    },
    /// Run the encode/profile/measure plan and store a dataset.
    Collect {
        /// Run plan JSON file.
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
        /// Meter domain; omit for profile-only collection.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        p_idle: f64,
    },
    /// Generate a synthetic dataset with known ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 10)]
        sequences: usize,
        /// Comma-separated presets, or "all".
        #[arg(long, default_value = "all")]
        presets: String,
        /// Comma-separated CRF values.
        #[arg(long, default_value = "18,23,28,33")]
        crfs: String,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Where to write the ground-truth coefficients.
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Fit a per-preset energy model from a dataset.
    Fit {
        #[arg(long)]
        preset: Preset,
        #[arg(long, default_value = "posterior")]
        mode: ModelMode,
        /// Comma-separated event subset, or "all".
        #[arg(long, default_value = "all")]
        features: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate per-preset models and print the MAPE/CI table.
    Evaluate {
        #[arg(long, default_value = "posterior")]
        mode: ModelMode,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "all")]
        features: String,
    },
    /// Estimate energy for a profile file with a fitted model.
    Estimate {
        /// Profile produced by the cache/branch-simulating profiler.
        #[arg(long)]
        profile: PathBuf,
    },
    /// Per-event correlation of counts with measured energy.
    Correlate,
    /// Attribute estimated energy to encoder sub-processes.
    Attribute {
        #[arg(long)]
        profile: PathBuf,
        /// `glob => category` rules file; defaults to the built-in x265 map.
        #[arg(long)]
        category_map: Option<PathBuf>,
    },
    /// Energy per N pixels, measured vs estimated, per preset.
    Report {
        /// Posterior model files (one per preset).
        #[arg(long)]
        posterior_model: Vec<PathBuf>,
        /// Prior model files (one per preset).
        #[arg(long)]
        prior_model: Vec<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        normalizer: u64,
        #[arg(long)]
        crf: Option<i32>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Profile(#[from] profile::ProfileError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Power(PowerError::DomainUnavailable { .. }) => EXIT_TOOL,
            CliError::Pipeline(PipelineError::ToolMissing(_)) => EXIT_TOOL,
            CliError::Pipeline(PipelineError::Power(PowerError::DomainUnavailable {
                ..
            })) => EXIT_TOOL,
            _ => EXIT_DATA,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are success; everything else is a usage error.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn require_dataset(global: &GlobalArgs) -> Result<Dataset, CliError> {
    let path = global
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Usage("--dataset is required for this command".into()))?;
    Ok(Dataset::load(path)?)
}

fn parse_features(spec: &str) -> Result<BTreeSet<EventId>, CliError> {
    if spec == "all" {
        return Ok(EventId::ALL.into_iter().collect());
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<EventId>()
                .map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect()
}

fn parse_presets(spec: &str) -> Result<Vec<Preset>, CliError> {
    if spec == "all" {
        return Ok(Preset::ALL.to_vec());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<Preset>().map_err(CliError::Usage))
        .collect()
}

fn parse_crfs(spec: &str) -> Result<Vec<i32>, CliError> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<i32>()
                .map_err(|e| CliError::Usage(format!("bad crf `{s}`: {e}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let global = cli.global.clone();
    let confidence = Confidence::from_percent(global.confidence)?;
    match cli.command {
        Command::Measure {
            domain,
            p_idle,
            repeats,
            max_repeats,
            threshold,
            command,
        } => {
            let mut meter = PowercapMeter::open(&domain)?;
            let config = MeasureConfig {
                repeats,
                max_repeats,
                confidence,
                threshold,
                ..MeasureConfig::default()
            };
            let spec = CommandSpec {
                program: command[0].clone(),
                args: command[1..].to_vec(),
            };
            let measurement = power::measure_workload(&mut meter, &spec, p_idle, &config)?;
            println!("{}", serde_json::to_string_pretty(&measurement)?);
            Ok(())
        }
        Command::CalibrateIdle { domain, window } => {
            let mut meter = PowercapMeter::open(&domain)?;
            let config = MeasureConfig::default();
            let watts = power::calibrate_idle(
                &mut meter,
                Duration::from_secs_f64(window),
                &config,
            )?;
            println!("{watts}");
            Ok(())
        }
        Command::Collect {
            plan,
            out,
            force,
            domain,
            p_idle,
        } => {
            let plan: RunPlan = serde_json::from_str(&std::fs::read_to_string(&plan)?)?;
            let mut meter = domain.as_deref().map(PowercapMeter::open).transpose()?;
            let mut tools = CollectTools {
                meter: meter
                    .as_mut()
                    .map(|m| m as &mut dyn EnergyMeter),
                p_idle_w: p_idle,
                measure: MeasureConfig::default(),
                work_dir: std::env::temp_dir().join("encenergy-collect"),
                provenance: host_provenance(),
            };
            let dataset = pipeline::run_collect(&plan, &mut tools)?;
            dataset.save(&out, force)?;
            println!("wrote {} records to {}", dataset.records.len(), out.display());
            Ok(())
        }
        Command::Synth {
            out,
            force,
            sequences,
            presets,
            crfs,
            noise,
            truth_out,
        } => {
            let spec = SynthSpec {
                presets: parse_presets(&presets)?,
                n_sequences: sequences,
                crfs: parse_crfs(&crfs)?,
                true_coefficients: None,
                noise_rel: noise,
                seed: global.seed,
            };
            let (dataset, truth) = synth_dataset(&spec);
            dataset.save(&out, force)?;
            if let Some(truth_path) = truth_out {
                std::fs::write(&truth_path, serde_json::to_string_pretty(&truth)?)?;
            }
            println!("wrote {} records to {}", dataset.records.len(), out.display());
            Ok(())
        }
        Command::Fit {
            preset,
            mode,
            features,
            out,
        } => {
            let dataset = require_dataset(&global)?;
            let mask = parse_features(&features)?;
            let fitted = model::fit(&dataset.records, mode, preset, &mask)?;
            model::save_model(&fitted, &out)?;
            println!(
                "fitted {mode} model for {preset} on {} records (objective {:.3e})",
                fitted.fit_meta.training_record_count, fitted.fit_meta.objective_value
            );
            Ok(())
        }
        Command::Evaluate { mode, k, features } => {
            let dataset = require_dataset(&global)?;
            let mask = parse_features(&features)?;
            let table = eval::cross_validate(
                &dataset.records,
                k,
                mode,
                &mask,
                confidence,
                global.seed,
            )?;
            if global.output_format == "csv" {
                print!("{}", table.to_csv());
            } else {
                print!("{}", table.to_text());
            }
            Ok(())
        }
        Command::Estimate { profile: profile_path } => {
            let model_path = global
                .model
                .as_ref()
                .ok_or_else(|| CliError::Usage("--model is required for estimate".into()))?;
            let m = model::load_model(model_path)?;
            let parsed = profile::parse_profile_file(&profile_path)?;
            let mask: Vec<EventId> = m.coefficients.keys().copied().collect();
            let events = parsed.event_vector(&mask)?;
            let estimate = match m.mode {
                ModelMode::Posterior => m.estimate_posterior(&events)?,
                ModelMode::PriorUf => m.estimate_prior(&events)?,
                ModelMode::TimeBaseline => {
                    return Err(CliError::Usage(
                        "time-baseline models need a duration, not a profile".into(),
                    ))
                }
            };
            println!("{estimate}");
            Ok(())
        }
        Command::Correlate => {
            let dataset = require_dataset(&global)?;
            let table = model::correlation_table(&dataset.records)?;
            if global.output_format == "csv" {
                println!("event,pcc");
                for (event, pcc) in &table {
                    println!("{event},{pcc}");
                }
            } else {
                println!("{:<6} {:>8}", "event", "pcc");
                for (event, pcc) in &table {
                    println!("{:<6} {:>8.3}", event.name(), pcc);
                }
            }
            Ok(())
        }
        Command::Attribute {
            profile: profile_path,
            category_map,
        } => {
            let model_path = global
                .model
                .as_ref()
                .ok_or_else(|| CliError::Usage("--model is required for attribute".into()))?;
            let m = model::load_model(model_path)?;
            let parsed = profile::parse_profile_file(&profile_path)?;
            let map = match category_map {
                Some(path) => attribution::load_category_map(&std::fs::read_to_string(path)?)?,
                None => attribution::default_x265_map(),
            };
            let report = attribution::attribute(&parsed.functions, &m, &map)?;
            if global.output_format == "csv" {
                print!("{}", report.to_csv());
            } else {
                print!("{}", report.to_text());
            }
            Ok(())
        }
        Command::Report {
            posterior_model,
            prior_model,
            normalizer,
            crf,
        } => {
            let dataset = require_dataset(&global)?;
            let load_all = |paths: &[PathBuf]| -> Result<BTreeMap<Preset, EnergyModel>, CliError> {
                let mut map = BTreeMap::new();
                for path in paths {
                    let m = model::load_model(path)?;
                    map.insert(m.preset, m);
                }
                Ok(map)
            };
            let posterior = load_all(&posterior_model)?;
            let prior = load_all(&prior_model)?;
            let rows =
                pipeline::report_energy_per_pixels(&dataset, &posterior, &prior, normalizer, crf)?;
            if global.output_format == "csv" {
                print!("{}", pipeline::render_energy_report_csv(&rows));
            } else {
                print!("{}", pipeline::render_energy_report_text(&rows, normalizer));
            }
            Ok(())
        }
    }
}

fn host_provenance() -> Provenance {
    let read = |path: &str| std::fs::read_to_string(path).unwrap_or_default();
    let cpu_model = read("/proc/cpuinfo")
        .lines()
        .find(|l| l.starts_with("model name"))
        .and_then(|l| l.split(':').nth(1))
        .map(|s| s.trim().to_owned())
        .unwrap_or_default();
    Provenance {
        host: read("/etc/hostname").trim().to_owned(),
        cpu_model,
        encoder_version: String::new(),
        profiler_version: String::new(),
        created_at: format!("{:?}", std::time::SystemTime::now()),
    }
}
