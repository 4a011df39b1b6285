//! Linear energy models: posterior (own-preset events), prior (ultrafast
//! events), and the single-feature encoding-time baseline, plus the
//! relative-error least-squares fitter and correlation analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::events::{EventId, EventVector};
use crate::solver::{self, NnlsError};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// x265 speed/efficiency operating points, fastest to slowest.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Ultrafast,
    Superfast,
    Veryfast,
    Faster,
    Fast,
    Medium,
    Slow,
    Slower,
    Veryslow,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::Ultrafast,
        Preset::Superfast,
        Preset::Veryfast,
        Preset::Faster,
        Preset::Fast,
        Preset::Medium,
        Preset::Slow,
        Preset::Slower,
        Preset::Veryslow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ultrafast => "ultrafast",
            Preset::Superfast => "superfast",
            Preset::Veryfast => "veryfast",
            Preset::Faster => "faster",
            Preset::Fast => "fast",
            Preset::Medium => "medium",
            Preset::Slow => "slow",
            Preset::Slower => "slower",
            Preset::Veryslow => "veryslow",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}`"))
    }
}

/// One (sequence, preset, CRF) datapoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeRecord {
    pub sequence_id: String,
    pub preset: Preset,
    pub crf: i32,
    /// Events of the record's own preset run.
    pub events: EventVector,
    /// Events of the ultrafast run of the same sequence+CRF, when collected.
    pub events_uf: Option<EventVector>,
    /// Measured encoding energy E_enc in joules; `None` for profile-only
    /// collection gaps.
    pub energy_j: Option<f64>,
    /// Encoding wall time in seconds.
    pub time_s: f64,
    /// Total luma pixels encoded.
    pub pixels: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Estimate from the profile of the encode that was run.
    Posterior,
    /// Estimate a target preset's energy from the ultrafast run's events.
    PriorUf,
    /// Single-feature baseline on encoding wall time.
    TimeBaseline,
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::Posterior => "posterior",
            ModelMode::PriorUf => "prior_uf",
            ModelMode::TimeBaseline => "time_baseline",
        })
    }
}

impl FromStr for ModelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "posterior" => Ok(ModelMode::Posterior),
            "prior_uf" | "prior-uf" | "prior" => Ok(ModelMode::PriorUf),
            "time_baseline" | "time-baseline" | "time" => Ok(ModelMode::TimeBaseline),
            other => Err(format!("unknown model mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub training_record_count: usize,
    /// Final value of sum_b ((x_b.e - y_b)/y_b)^2.
    pub objective_value: f64,
    pub solver_iterations: usize,
    pub schema_version: u32,
}

/// A fitted per-preset energy model. Coefficients are joules per event
/// occurrence (or joules per second in time-baseline mode) and are always
/// non-negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyModel {
    pub preset: Preset,
    pub mode: ModelMode,
    /// Event coefficients; key set equals the feature mask. Empty in
    /// time-baseline mode.
    pub coefficients: BTreeMap<EventId, f64>,
    /// Joules per second; only meaningful in time-baseline mode.
    pub time_coefficient: f64,
    pub fit_meta: FitMeta,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model mode is {actual}, expected {expected}")]
    WrongMode {
        expected: ModelMode,
        actual: ModelMode,
    },
    #[error("event vector is missing required events: {0:?}")]
    MissingEvents(Vec<EventId>),
    #[error("insufficient data: {have} usable records for {need} coefficients")]
    InsufficientData { have: usize, need: usize },
    #[error("prior_uf fit requires ultrafast events on every record; {0} records lack them")]
    PriorFeaturesMissing(usize),
    #[error("zero variance in correlation input")]
    ZeroVariance,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("solver failed: {0}")]
    Solver(#[from] NnlsError),
    #[error("model file error: {0}")]
    File(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl EnergyModel {
    pub fn feature_mask(&self) -> BTreeSet<EventId> {
        self.coefficients.keys().copied().collect()
    }

    fn dot(&self, events: &EventVector) -> Result<f64, ModelError> {
        let mask: Vec<EventId> = self.coefficients.keys().copied().collect();
        let missing = events.missing(&mask);
        if !missing.is_empty() {
            return Err(ModelError::MissingEvents(missing));
        }
        Ok(self
            .coefficients
            .iter()
            .map(|(&e, &c)| events.get(e).unwrap() as f64 * c)
            .sum())
    }

    /// Estimated energy = sum over masked events of count * coefficient.
    pub fn estimate_posterior(&self, events: &EventVector) -> Result<f64, ModelError> {
        if self.mode != ModelMode::Posterior {
            return Err(ModelError::WrongMode {
                expected: ModelMode::Posterior,
                actual: self.mode,
            });
        }
        self.dot(events)
    }

    /// Same linear form, but the coefficients were trained for this model's
    /// target preset against ultrafast-run features.
    pub fn estimate_prior(&self, events_uf: &EventVector) -> Result<f64, ModelError> {
        if self.mode != ModelMode::PriorUf {
            return Err(ModelError::WrongMode {
                expected: ModelMode::PriorUf,
                actual: self.mode,
            });
        }
        self.dot(events_uf)
    }

    pub fn estimate_time(&self, time_s: f64) -> Result<f64, ModelError> {
        if self.mode != ModelMode::TimeBaseline {
            return Err(ModelError::WrongMode {
                expected: ModelMode::TimeBaseline,
                actual: self.mode,
            });
        }
        Ok(self.time_coefficient * time_s)
    }

    /// Estimate for a full record using whichever features this model's mode
    /// requires.
    pub fn estimate_record(&self, record: &EncodeRecord) -> Result<f64, ModelError> {
        match self.mode {
            ModelMode::Posterior => self.estimate_posterior(&record.events),
            ModelMode::PriorUf => {
                let uf = record.events_uf.as_ref().ok_or_else(|| {
                    ModelError::PriorFeaturesMissing(1)
                })?;
                self.estimate_prior(uf)
            }
            ModelMode::TimeBaseline => self.estimate_time(record.time_s),
        }
    }
}

/// Fits per-event energies for one preset by least squares on relative
/// residuals: minimize sum_b ((x_b.e - y_b)/y_b)^2 subject to e >= 0. Rows are
/// scaled by 1/y_b, which keeps the problem linear and the fit deterministic
/// for a fixed record order.
pub fn fit(
    records: &[EncodeRecord],
    mode: ModelMode,
    preset: Preset,
    feature_mask: &BTreeSet<EventId>,
) -> Result<EnergyModel, ModelError> {
    let usable: Vec<&EncodeRecord> = records
        .iter()
        .filter(|r| r.preset == preset)
        .filter(|r| match r.energy_j {
            Some(e) if e > 0.0 => true,
            _ => {
                log::warn!(
                    "excluding record {}/{}/{} from fit: energy missing or non-positive",
                    r.sequence_id,
                    r.preset,
                    r.crf
                );
                false
            }
        })
        .collect();

    if mode == ModelMode::PriorUf {
        let lacking = usable.iter().filter(|r| r.events_uf.is_none()).count();
        if lacking > 0 {
            return Err(ModelError::PriorFeaturesMissing(lacking));
        }
    }

    let features: Vec<EventId> = feature_mask.iter().copied().collect();
    let n_features = match mode {
        ModelMode::TimeBaseline => 1,
        _ => features.len(),
    };
    if usable.len() < n_features || n_features == 0 {
        return Err(ModelError::InsufficientData {
            have: usable.len(),
            need: n_features.max(1),
        });
    }

    // Feature rows, before scaling.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(usable.len());
    for record in &usable {
        let row = match mode {
            ModelMode::TimeBaseline => vec![record.time_s],
            _ => {
                let source = match mode {
                    ModelMode::PriorUf => record.events_uf.as_ref().unwrap(),
                    _ => &record.events,
                };
                let missing = source.missing(&features);
                if !missing.is_empty() {
                    return Err(ModelError::MissingEvents(missing));
                }
                features
                    .iter()
                    .map(|&e| source.get(e).unwrap() as f64)
                    .collect()
            }
        };
        rows.push(row);
    }

    // Features whose column is all-zero are unidentifiable: their coefficient
    // is fixed to 0 and the fit proceeds on the remainder.
    let active: Vec<usize> = (0..n_features)
        .filter(|&j| {
            let nonzero = rows.iter().any(|r| r[j] != 0.0);
            if !nonzero {
                let name = match mode {
                    ModelMode::TimeBaseline => "time_s".to_owned(),
                    _ => features[j].to_string(),
                };
                log::warn!(
                    "feature {name} is all-zero over the training set; coefficient fixed to 0"
                );
            }
            nonzero
        })
        .collect();
    if active.is_empty() {
        return Err(ModelError::InsufficientData {
            have: usable.len(),
            need: 1,
        });
    }

    // Row scaling by 1/y turns the relative-error objective into ordinary
    // least squares against a vector of ones.
    let m = usable.len();
    let mut a = DMatrix::<f64>::zeros(m, active.len());
    for (i, (record, row)) in usable.iter().zip(&rows).enumerate() {
        let y = record.energy_j.unwrap();
        for (k, &j) in active.iter().enumerate() {
            a[(i, k)] = row[j] / y;
        }
    }
    let b = DVector::<f64>::from_element(m, 1.0);
    let solution = solver::nnls(&a, &b)?;

    let mut full = vec![0.0_f64; n_features];
    for (k, &j) in active.iter().enumerate() {
        full[j] = solution.x[k];
    }

    let (coefficients, time_coefficient) = match mode {
        ModelMode::TimeBaseline => (BTreeMap::new(), full[0]),
        _ => (
            features.iter().copied().zip(full.iter().copied()).collect(),
            0.0,
        ),
    };

    Ok(EnergyModel {
        preset,
        mode,
        coefficients,
        time_coefficient,
        fit_meta: FitMeta {
            training_record_count: m,
            objective_value: solution.objective,
            solver_iterations: solution.iterations,
            schema_version: MODEL_SCHEMA_VERSION,
        },
    })
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, ModelError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(ModelError::TooFewSamples {
            need: 2,
            got: xs.len().min(ys.len()),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(ModelError::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Per-event correlation of (count, measured energy) across records. Events
/// with zero variance (or absent counts) are reported as absent entries.
pub fn correlation_table(
    records: &[EncodeRecord],
) -> Result<BTreeMap<EventId, f64>, ModelError> {
    let with_energy: Vec<&EncodeRecord> = records
        .iter()
        .filter(|r| r.energy_j.is_some())
        .collect();
    if with_energy.len() < 2 {
        return Err(ModelError::TooFewSamples {
            need: 2,
            got: with_energy.len(),
        });
    }
    let energies: Vec<f64> = with_energy.iter().map(|r| r.energy_j.unwrap()).collect();
    let mut table = BTreeMap::new();
    for event in EventId::ALL {
        let counts: Option<Vec<f64>> = with_energy
            .iter()
            .map(|r| r.events.get(event).map(|c| c as f64))
            .collect();
        let Some(counts) = counts else { continue };
        match pearson(&counts, &energies) {
            Ok(pcc) => {
                table.insert(event, pcc);
            }
            Err(ModelError::ZeroVariance) => {
                log::warn!("event {event}: zero variance, omitted from correlation table");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

/// Coefficient with a lossless bit-level encoding next to the readable value.
/// The `bits` field wins on load, so save -> load round-trips exactly.
#[derive(Debug, Serialize, Deserialize)]
struct CoefficientFile {
    joules_per_unit: f64,
    bits: String,
}

impl CoefficientFile {
    fn encode(value: f64) -> Self {
        Self {
            joules_per_unit: value,
            bits: format!("{:016X}", value.to_bits()),
        }
    }

    fn decode(&self) -> Result<f64, ModelError> {
        let bits = u64::from_str_radix(&self.bits, 16)
            .map_err(|_| ModelError::File(format!("bad coefficient bits `{}`", self.bits)))?;
        Ok(f64::from_bits(bits))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    preset: Preset,
    mode: ModelMode,
    feature_mask: Vec<EventId>,
    coefficients: BTreeMap<EventId, CoefficientFile>,
    time_coefficient: CoefficientFile,
    fit_meta: FitMeta,
}

pub fn save_model(model: &EnergyModel, path: &Path) -> Result<(), ModelError> {
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        preset: model.preset,
        mode: model.mode,
        feature_mask: model.coefficients.keys().copied().collect(),
        coefficients: model
            .coefficients
            .iter()
            .map(|(&e, &c)| (e, CoefficientFile::encode(c)))
            .collect(),
        time_coefficient: CoefficientFile::encode(model.time_coefficient),
        fit_meta: model.fit_meta.clone(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| ModelError::File(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<EnergyModel, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| ModelError::File(e.to_string()))?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(ModelError::File(format!(
            "unsupported model schema version {}",
            file.schema_version
        )));
    }
    let mut coefficients = BTreeMap::new();
    for (event, coeff) in &file.coefficients {
        coefficients.insert(*event, coeff.decode()?);
    }
    if coefficients.keys().copied().collect::<Vec<_>>() != file.feature_mask {
        return Err(ModelError::File(
            "feature_mask does not match coefficient keys".into(),
        ));
    }
    Ok(EnergyModel {
        preset: file.preset,
        mode: file.mode,
        coefficients,
        time_coefficient: file.time_coefficient.decode()?,
        fit_meta: file.fit_meta,
    })
}
