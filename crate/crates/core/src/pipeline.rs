//! End-to-end collection workflow: run the encoder under the power meter for
//! measured energies, run it again under the profiler for event counts, and
//! assemble encode records. Energy is only ever taken from unprofiled runs
//! (profiling slows the process several-fold), and profiled runs are never
//! energy-measured.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError, Provenance};
use crate::model::{EncodeRecord, EnergyModel, ModelError, Preset};
use crate::power::{self, CommandSpec, EnergyMeter, MeasureConfig, PowerError};
use crate::profile::{self, ProfileError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("required tool `{0}` not found on PATH")]
    ToolMissing(String),
    #[error("no records match the report filter")]
    EmptyFilter,
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub path: PathBuf,
    pub sequence_id: String,
    /// Total luma pixels encoded (frames x width x height).
    pub pixels: u64,
    pub frames: u32,
}

/// What to collect: the sequence/preset/CRF axes plus measurement parameters
/// and the command templates for the encoder and profiler.
///
/// Templates are argv vectors with `{input}`, `{preset}`, `{crf}`, `{frames}`,
/// `{output}` and `{profile_out}` placeholders; the encoder invocation is
/// config-driven rather than hard-coded to one x265 build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunPlan {
    pub sequences: Vec<SequenceSpec>,
    pub presets: Vec<Preset>,
    pub crfs: Vec<i32>,
    pub repeats: usize,
    pub confidence_percent: u32,
    pub threshold: f64,
    pub encoder_template: Vec<String>,
    /// Profiler wrapper template; must produce a cachegrind-format file at
    /// `{profile_out}`. `None` disables profiling (measure-only collection).
    pub profiler_template: Option<Vec<String>>,
}

/// Injection point for the meter so collection can run against the real
/// powercap tree or a fake.
pub struct CollectTools<'a> {
    pub meter: Option<&'a mut dyn EnergyMeter>,
    pub p_idle_w: f64,
    pub measure: MeasureConfig,
    pub work_dir: PathBuf,
    pub provenance: Provenance,
}

fn on_path(program: &str) -> bool {
    let p = Path::new(program);
    if p.components().count() > 1 {
        return p.exists();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(program).is_file()))
        .unwrap_or(false)
}

fn expand(template: &[String], vars: &BTreeMap<&str, String>) -> CommandSpec {
    let subst = |s: &String| -> String {
        let mut out = s.clone();
        for (key, value) in vars {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        out
    };
    CommandSpec {
        program: subst(&template[0]),
        args: template[1..].iter().map(subst).collect(),
    }
}

/// Runs the plan cell by cell. Per-cell failures are logged and skipped so a
/// partial dataset still comes out; missing executables fail fast before any
/// encode starts. Ultrafast event vectors are propagated into `events_uf` of
/// the other presets' records for the same sequence and CRF.
pub fn run_collect(plan: &RunPlan, tools: &mut CollectTools<'_>) -> Result<Dataset, PipelineError> {
    for template in std::iter::once(&plan.encoder_template).chain(plan.profiler_template.iter()) {
        let program = template
            .first()
            .ok_or_else(|| PipelineError::ToolMissing("<empty template>".into()))?;
        if !on_path(program) {
            return Err(PipelineError::ToolMissing(program.clone()));
        }
    }
    std::fs::create_dir_all(&tools.work_dir)?;

    // Ultrafast first so prior features are available for the slower presets.
    let mut presets = plan.presets.clone();
    presets.sort();
    presets.dedup();

    let mut records: Vec<EncodeRecord> = Vec::new();
    let mut uf_events: BTreeMap<(String, i32), crate::events::EventVector> = BTreeMap::new();

    for sequence in &plan.sequences {
        for &crf in &plan.crfs {
            for &preset in &presets {
                match collect_cell(plan, tools, sequence, preset, crf) {
                    Ok(mut record) => {
                        if preset == Preset::Ultrafast {
                            uf_events
                                .insert((sequence.sequence_id.clone(), crf), record.events.clone());
                            record.events_uf = Some(record.events.clone());
                        } else if let Some(uf) =
                            uf_events.get(&(sequence.sequence_id.clone(), crf))
                        {
                            record.events_uf = Some(uf.clone());
                        }
                        records.push(record);
                    }
                    Err(e) => {
                        log::warn!(
                            "cell ({}, {}, crf {}) failed, skipping: {e}",
                            sequence.sequence_id,
                            preset,
                            crf
                        );
                    }
                }
            }
        }
    }
    Ok(Dataset::new(records, tools.provenance.clone())?)
}

fn collect_cell(
    plan: &RunPlan,
    tools: &mut CollectTools<'_>,
    sequence: &SequenceSpec,
    preset: Preset,
    crf: i32,
) -> Result<EncodeRecord, PipelineError> {
    let cell = format!("{}_{preset}_{crf}", sequence.sequence_id);
    let output = tools.work_dir.join(format!("{cell}.bin"));
    let profile_out = tools.work_dir.join(format!("{cell}.profile"));
    let mut vars: BTreeMap<&str, String> = BTreeMap::new();
    vars.insert("input", sequence.path.display().to_string());
    vars.insert("preset", preset.name().to_owned());
    vars.insert("crf", crf.to_string());
    vars.insert("frames", sequence.frames.to_string());
    vars.insert("output", output.display().to_string());
    vars.insert("profile_out", profile_out.display().to_string());

    // Measured, unprofiled encode.
    let encoder = expand(&plan.encoder_template, &vars);
    let mut energy_j = None;
    let mut time_s;
    if let Some(meter) = tools.meter.as_deref_mut() {
        let config = MeasureConfig {
            repeats: plan.repeats.max(2),
            threshold: plan.threshold,
            confidence: crate::eval::Confidence::from_percent(plan.confidence_percent)
                .unwrap_or(crate::eval::Confidence::P95),
            ..tools.measure.clone()
        };
        let measurement = power::measure_workload(meter, &encoder, tools.p_idle_w, &config)?;
        if measurement.significant {
            energy_j = Some(measurement.e_enc);
        } else {
            log::warn!("cell {cell}: measurement not significant, energy left blank");
        }
        time_s = measurement.duration_t;
    } else {
        // Profile-only collection: still run the encoder once for wall time.
        let start = std::time::Instant::now();
        let status = std::process::Command::new(&encoder.program)
            .args(&encoder.args)
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .map_err(|e| PowerError::Spawn {
                command: encoder.program.clone(),
                source: e,
            })?;
        if !status.success() {
            return Err(PipelineError::Power(PowerError::CommandFailed(status)));
        }
        time_s = start.elapsed().as_secs_f64();
    }
    if time_s <= 0.0 {
        time_s = f64::MIN_POSITIVE;
    }

    // Separate profiled encode; never energy-measured.
    let mut events = crate::events::EventVector::new();
    if let Some(template) = &plan.profiler_template {
        let profiler = expand(template, &vars);
        let status = std::process::Command::new(&profiler.program)
            .args(&profiler.args)
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .map_err(|e| PowerError::Spawn {
                command: profiler.program.clone(),
                source: e,
            })?;
        if !status.success() {
            return Err(PipelineError::Power(PowerError::CommandFailed(status)));
        }
        let parsed = profile::parse_profile_file(&profile_out)?;
        events = parsed.totals;
    }

    Ok(EncodeRecord {
        sequence_id: sequence.sequence_id.clone(),
        preset,
        crf,
        events,
        events_uf: None,
        energy_j,
        time_s,
        pixels: sequence.pixels,
    })
}

/// One row of the energy-per-pixels report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyPerPixelsRow {
    pub preset: Preset,
    pub measured: Option<f64>,
    pub posterior: Option<f64>,
    pub prior: Option<f64>,
    pub n: usize,
}

/// Mean energy per `normalizer` pixels for each preset: measured next to the
/// posterior and prior model estimates, optionally filtered to one CRF.
pub fn report_energy_per_pixels(
    dataset: &Dataset,
    posterior: &BTreeMap<Preset, EnergyModel>,
    prior: &BTreeMap<Preset, EnergyModel>,
    normalizer: u64,
    crf: Option<i32>,
) -> Result<Vec<EnergyPerPixelsRow>, PipelineError> {
    let records: Vec<&EncodeRecord> = dataset
        .records
        .iter()
        .filter(|r| crf.map_or(true, |c| r.crf == c))
        .collect();
    if records.is_empty() {
        return Err(PipelineError::EmptyFilter);
    }
    let mut rows = Vec::new();
    for preset in Preset::ALL {
        let subset: Vec<&&EncodeRecord> =
            records.iter().filter(|r| r.preset == preset).collect();
        if subset.is_empty() {
            continue;
        }
        let norm = |r: &EncodeRecord, e: f64| e * normalizer as f64 / r.pixels as f64;
        let mean_of = |values: Vec<f64>| -> Option<f64> {
            if values.is_empty() {
                None
            } else {
                Some(values.iter().sum::<f64>() / values.len() as f64)
            }
        };
        let measured = mean_of(
            subset
                .iter()
                .filter_map(|r| r.energy_j.map(|e| norm(r, e)))
                .collect(),
        );
        let posterior_mean = match posterior.get(&preset) {
            Some(model) => mean_of(
                subset
                    .iter()
                    .map(|r| model.estimate_record(r).map(|e| norm(r, e)))
                    .collect::<Result<Vec<f64>, ModelError>>()?,
            ),
            None => None,
        };
        let prior_mean = match prior.get(&preset) {
            Some(model) => mean_of(
                subset
                    .iter()
                    .filter(|r| r.events_uf.is_some())
                    .map(|r| model.estimate_record(r).map(|e| norm(r, e)))
                    .collect::<Result<Vec<f64>, ModelError>>()?,
            ),
            None => None,
        };
        rows.push(EnergyPerPixelsRow {
            preset,
            measured,
            posterior: posterior_mean,
            prior: prior_mean,
            n: subset.len(),
        });
    }
    Ok(rows)
}

pub fn render_energy_report_csv(rows: &[EnergyPerPixelsRow]) -> String {
    let mut out = String::from("preset,measured_j,posterior_j,prior_j,n\n");
    for row in rows {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.preset,
            cell(row.measured),
            cell(row.posterior),
            cell(row.prior),
            row.n
        ));
    }
    out
}

pub fn render_energy_report_text(rows: &[EnergyPerPixelsRow], normalizer: u64) -> String {
    let mut out = format!(
        "energy in joules per {normalizer} pixels\n{:<10} {:>12} {:>12} {:>12} {:>4}\n",
        "preset", "measured", "posterior", "prior", "n"
    );
    let cell = |v: Option<f64>| v.map(|x| format!("{x:>12.4}")).unwrap_or_else(|| format!("{:>12}", "-"));
    for row in rows {
        out.push_str(&format!(
            "{:<10} {} {} {} {:>4}\n",
            row.preset.name(),
            cell(row.measured),
            cell(row.posterior),
            cell(row.prior),
            row.n
        ));
    }
    out
}

/// True when all external programs used by the plan exist; used by the
/// optional real-encoder integration path.
pub fn tools_available(programs: &[&str]) -> bool {
    programs.iter().all(|p| on_path(p))
}
