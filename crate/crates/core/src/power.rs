//! Workload energy measurement on the CPU's cumulative energy counters.
//!
//! Implements the E_total / E_idle protocol: idle power is calibrated once per
//! session, each workload run records the counter delta over its duration, and
//! the encoding energy is the difference. Results are gated on the relative
//! confidence-interval half-width of the per-run energies.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::eval::{self, Confidence};

/// Default powercap tree root; overridable via this environment variable,
/// which is what enables fake-meter injection in tests.
pub const POWERCAP_ROOT_ENV: &str = "ENCENERGY_POWERCAP_ROOT";
pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap/intel-rapl";

#[derive(Debug, thiserror::Error)]
pub enum PowerError {
    #[error("meter domain `{domain}` unavailable: {reason}")]
    DomainUnavailable { domain: String, reason: String },
    #[error("command failed with status {0}")]
    CommandFailed(std::process::ExitStatus),
    #[error("failed to spawn command `{command}`: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error("calibration window {got:?} below minimum {min:?}")]
    WindowTooShort { got: Duration, min: Duration },
    #[error("repeats must be >= 2, got {0}")]
    TooFewRepeats(usize),
    #[error("another measurement is in progress (lock file {0} exists)")]
    Locked(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One sample of a cumulative energy counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterReading {
    /// Monotonic nanoseconds.
    pub timestamp_ns: u64,
    /// Cumulative counter value in microjoules, below the domain's max range.
    pub raw_energy_uj: u64,
    pub domain: String,
}

/// Result of one measured workload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyMeasurement {
    pub e_total: f64,
    pub e_idle: f64,
    pub duration_t: f64,
    /// e_total - e_idle, exact by construction.
    pub e_enc: f64,
    pub repeats: usize,
    pub significant: bool,
    /// CI half-width of per-run e_enc relative to the mean.
    pub ci_halfwidth_rel: f64,
    /// Runs whose e_enc came out negative (idle calibration drift).
    pub negative_runs: usize,
}

/// A cumulative microjoule counter with a wraparound range.
pub trait EnergyMeter {
    fn domain(&self) -> &str;
    fn max_range_uj(&self) -> u64;
    fn read(&mut self) -> Result<CounterReading, PowerError>;
}

fn monotonic_ns() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

/// Linux powercap meter: reads `energy_uj` under the powercap tree.
#[derive(Debug)]
pub struct PowercapMeter {
    domain: String,
    energy_path: PathBuf,
    max_range_uj: u64,
}

impl PowercapMeter {
    pub fn root() -> PathBuf {
        std::env::var_os(POWERCAP_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_POWERCAP_ROOT))
    }

    /// Opens the zone whose `name` file matches `domain` (e.g. "package-0"),
    /// searching the root and one level of subzones.
    pub fn open(domain: &str) -> Result<Self, PowerError> {
        let root = Self::root();
        let unavailable = |reason: String| PowerError::DomainUnavailable {
            domain: domain.to_owned(),
            reason,
        };
        let entries = std::fs::read_dir(&root)
            .map_err(|e| unavailable(format!("cannot read {}: {e}", root.display())))?;
        let mut zones: Vec<PathBuf> = Vec::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                zones.push(path.clone());
                if let Ok(sub) = std::fs::read_dir(&path) {
                    zones.extend(sub.flatten().map(|e| e.path()).filter(|p| p.is_dir()));
                }
            }
        }
        zones.sort();
        for zone in zones {
            let name_path = zone.join("name");
            let Ok(name) = std::fs::read_to_string(&name_path) else {
                continue;
            };
            if name.trim() == domain {
                let max_range_uj = std::fs::read_to_string(zone.join("max_energy_range_uj"))
                    .ok()
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| unavailable("missing max_energy_range_uj".into()))?;
                return Ok(Self {
                    domain: domain.to_owned(),
                    energy_path: zone.join("energy_uj"),
                    max_range_uj,
                });
            }
        }
        Err(unavailable("no matching powercap zone".into()))
    }
}

impl EnergyMeter for PowercapMeter {
    fn domain(&self) -> &str {
        &self.domain
    }

    fn max_range_uj(&self) -> u64 {
        self.max_range_uj
    }

    fn read(&mut self) -> Result<CounterReading, PowerError> {
        let raw = std::fs::read_to_string(&self.energy_path).map_err(|e| {
            PowerError::DomainUnavailable {
                domain: self.domain.clone(),
                reason: format!("cannot read energy_uj: {e}"),
            }
        })?;
        let raw_energy_uj: u64 =
            raw.trim()
                .parse()
                .map_err(|_| PowerError::DomainUnavailable {
                    domain: self.domain.clone(),
                    reason: format!("bad energy_uj value `{}`", raw.trim()),
                })?;
        Ok(CounterReading {
            timestamp_ns: monotonic_ns(),
            raw_energy_uj,
            domain: self.domain.clone(),
        })
    }
}

/// Deterministic constant-power meter with a simulated clock. Every read
/// advances the clock by a fixed step; useful for tests and demos.
pub struct SimulatedMeter {
    pub power_w: f64,
    pub step: Duration,
    pub max_range_uj: u64,
    clock_ns: u64,
    /// Per-read multiplicative noise on the accumulated energy, if any.
    pub noise: Option<Box<dyn FnMut(u64) -> f64>>,
}

impl SimulatedMeter {
    pub fn constant(power_w: f64, step: Duration) -> Self {
        Self {
            power_w,
            step,
            max_range_uj: u64::MAX,
            clock_ns: 0,
            noise: None,
        }
    }
}

impl EnergyMeter for SimulatedMeter {
    fn domain(&self) -> &str {
        "simulated"
    }

    fn max_range_uj(&self) -> u64 {
        self.max_range_uj
    }

    fn read(&mut self) -> Result<CounterReading, PowerError> {
        let t_s = self.clock_ns as f64 / 1e9;
        let mut energy_uj = self.power_w * t_s * 1e6;
        if let Some(noise) = &mut self.noise {
            energy_uj *= 1.0 + noise(self.clock_ns);
        }
        let reading = CounterReading {
            timestamp_ns: self.clock_ns,
            raw_energy_uj: (energy_uj as u64) % self.max_range_uj,
            domain: "simulated".into(),
        };
        self.clock_ns += self.step.as_nanos() as u64;
        Ok(reading)
    }
}

/// Counter delta in joules, assuming at most one wrap between the readings.
pub fn delta_energy(before: &CounterReading, after: &CounterReading, max_range_uj: u64) -> f64 {
    debug_assert_eq!(before.domain, after.domain);
    debug_assert!(before.timestamp_ns <= after.timestamp_ns);
    let delta_uj = if after.raw_energy_uj >= before.raw_energy_uj {
        after.raw_energy_uj - before.raw_energy_uj
    } else {
        max_range_uj - before.raw_energy_uj + after.raw_energy_uj
    };
    delta_uj as f64 / 1e6
}

/// Measurement knobs; defaults follow the measurement protocol (95% level, 2%
/// relative half-width, up to 20 repeats, >= 1 Hz sampling).
#[derive(Debug, Clone)]
pub struct MeasureConfig {
    pub repeats: usize,
    pub max_repeats: usize,
    pub confidence: Confidence,
    /// Significance threshold on the relative CI half-width.
    pub threshold: f64,
    pub poll_interval: Duration,
    pub min_idle_window: Duration,
    /// Advisory lock serializing measurements machine-wide; `None` disables.
    pub lock_path: Option<PathBuf>,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            repeats: 2,
            max_repeats: 20,
            confidence: Confidence::P95,
            threshold: 0.02,
            poll_interval: Duration::from_millis(500),
            min_idle_window: Duration::from_secs(1),
            lock_path: Some(std::env::temp_dir().join("encenergy-measure.lock")),
        }
    }
}

/// External command to run as the measured workload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandSpec {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandSpec {
    pub fn new(program: impl Into<String>, args: &[&str]) -> Self {
        Self {
            program: program.into(),
            args: args.iter().map(|s| s.to_string()).collect(),
        }
    }
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(path: &Path) -> Result<Self, PowerError> {
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
        {
            Ok(_) => Ok(Self(path.to_owned())),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PowerError::Locked(path.to_owned()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Average idle power over a quiesced window: delta energy / elapsed time.
/// The caller is responsible for quiescing the machine.
pub fn calibrate_idle(
    meter: &mut dyn EnergyMeter,
    window: Duration,
    config: &MeasureConfig,
) -> Result<f64, PowerError> {
    if window < config.min_idle_window {
        return Err(PowerError::WindowTooShort {
            got: window,
            min: config.min_idle_window,
        });
    }
    let range = meter.max_range_uj();
    let start = meter.read()?;
    let deadline = Instant::now() + window;
    let mut prev = start.clone();
    let mut total_j = 0.0;
    // Poll so at most one counter wrap can occur between samples.
    loop {
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        std::thread::sleep(config.poll_interval.min(deadline - now));
        let sample = meter.read()?;
        total_j += delta_energy(&prev, &sample, range);
        prev = sample;
    }
    let end = meter.read()?;
    total_j += delta_energy(&prev, &end, range);
    let elapsed_s = (end.timestamp_ns - start.timestamp_ns) as f64 / 1e9;
    Ok(total_j / elapsed_s)
}

/// Energy and duration of one run, from counter deltas and the reading
/// timestamps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RunEnergy {
    pub e_total: f64,
    pub duration_s: f64,
}

/// Runs the command once while sampling the meter.
pub fn run_once(
    meter: &mut dyn EnergyMeter,
    command: &CommandSpec,
    poll_interval: Duration,
) -> Result<RunEnergy, PowerError> {
    let range = meter.max_range_uj();
    let start = meter.read()?;
    let mut child = Command::new(&command.program)
        .args(&command.args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| PowerError::Spawn {
            command: command.program.clone(),
            source: e,
        })?;
    let mut prev = start.clone();
    let mut total_j = 0.0;
    let status = loop {
        match child.try_wait()? {
            Some(status) => break status,
            None => {
                std::thread::sleep(poll_interval);
                let sample = meter.read()?;
                total_j += delta_energy(&prev, &sample, range);
                prev = sample;
            }
        }
    };
    if !status.success() {
        return Err(PowerError::CommandFailed(status));
    }
    let end = meter.read()?;
    total_j += delta_energy(&prev, &end, range);
    Ok(RunEnergy {
        e_total: total_j,
        duration_s: (end.timestamp_ns - start.timestamp_ns) as f64 / 1e9,
    })
}

/// Pure summary of a set of runs into an `EnergyMeasurement`. Split out from
/// the sampling so the protocol arithmetic can be checked exactly.
pub fn summarize_runs(
    runs: &[RunEnergy],
    p_idle_w: f64,
    confidence: Confidence,
    threshold: f64,
) -> EnergyMeasurement {
    let n = runs.len();
    let e_encs: Vec<f64> = runs
        .iter()
        .map(|r| r.e_total - p_idle_w * r.duration_s)
        .collect();
    let negative_runs = e_encs.iter().filter(|&&e| e < 0.0).count();
    if negative_runs > 0 {
        log::warn!("{negative_runs} run(s) with negative encoding energy (idle drift)");
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let e_total = mean(&runs.iter().map(|r| r.e_total).collect::<Vec<_>>());
    let duration_t = mean(&runs.iter().map(|r| r.duration_s).collect::<Vec<_>>());
    let e_enc = mean(&e_encs);
    let e_idle = e_total - e_enc; // keeps e_enc = e_total - e_idle exact

    let ci_halfwidth_rel = if n >= 2 {
        let std = eval::sample_std(&e_encs);
        let half = confidence.z_score() * std / (n as f64).sqrt();
        if e_enc != 0.0 {
            (half / e_enc).abs()
        } else if half == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        f64::INFINITY
    };
    EnergyMeasurement {
        e_total,
        e_idle,
        duration_t,
        e_enc,
        repeats: n,
        significant: ci_halfwidth_rel <= threshold,
        ci_halfwidth_rel,
        negative_runs,
    }
}

/// Runs the workload repeatedly and returns the mean encoding energy with a
/// significance verdict. Runs at least `repeats` times, then keeps repeating
/// until the CI half-width is within the threshold or `max_repeats` is hit;
/// below-cap failure yields `significant = false` rather than an error.
pub fn measure_workload(
    meter: &mut dyn EnergyMeter,
    command: &CommandSpec,
    p_idle_w: f64,
    config: &MeasureConfig,
) -> Result<EnergyMeasurement, PowerError> {
    if config.repeats < 2 {
        return Err(PowerError::TooFewRepeats(config.repeats));
    }
    let _lock = config
        .lock_path
        .as_deref()
        .map(LockGuard::acquire)
        .transpose()?;
    let mut runs: Vec<RunEnergy> = Vec::new();
    loop {
        runs.push(run_once(meter, command, config.poll_interval)?);
        if runs.len() < config.repeats {
            continue;
        }
        let summary = summarize_runs(&runs, p_idle_w, config.confidence, config.threshold);
        if summary.significant || runs.len() >= config.max_repeats {
            return Ok(summary);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reading(t_ns: u64, uj: u64) -> CounterReading {
        CounterReading {
            timestamp_ns: t_ns,
            raw_energy_uj: uj,
            domain: "test".into(),
        }
    }

    #[test]
    fn delta_no_wrap() {
        let d = delta_energy(&reading(0, 5_000_000), &reading(1, 8_000_000), 1 << 32);
        assert_relative_eq!(d, 3.0);
    }

    #[test]
    fn delta_with_one_wrap_matches_modular_oracle() {
        let range: u64 = 1 << 32;
        let before = range - 1_000_000;
        let after = 1_000_000u64;
        let d = delta_energy(&reading(0, before), &reading(1, after), range);
        // Integer oracle: (after - before) mod range.
        let oracle = (after as i128 - before as i128).rem_euclid(range as i128) as f64 / 1e6;
        assert_relative_eq!(d, oracle);
        assert_relative_eq!(d, 2.0);
    }

    #[test]
    fn delta_zero() {
        let r = reading(5, 123);
        assert_eq!(delta_energy(&r, &r.clone(), 1 << 32), 0.0);
    }

    #[test]
    fn delta_path_additivity() {
        let range: u64 = 1000;
        let a = reading(0, 990);
        let b = reading(1, 5); // one wrap between a and b
        let c = reading(2, 100);
        let direct = delta_energy(&a, &c, range);
        let split = delta_energy(&a, &b, range) + delta_energy(&b, &c, range);
        assert_relative_eq!(direct, split, epsilon = 1e-12);
    }

    #[test]
    fn simulated_meter_reads_are_monotonic_in_time() {
        let mut meter = SimulatedMeter::constant(10.0, Duration::from_millis(100));
        let a = meter.read().unwrap();
        let b = meter.read().unwrap();
        assert!(b.timestamp_ns >= a.timestamp_ns);
        assert!(b.raw_energy_uj >= a.raw_energy_uj);
    }

    #[test]
    fn summarize_constant_power_is_exact() {
        // 20 W workload, 10 W idle, 2 s runs: e_enc = 20 J per run.
        let runs = vec![
            RunEnergy {
                e_total: 40.0,
                duration_s: 2.0,
            };
            3
        ];
        let m = summarize_runs(&runs, 10.0, Confidence::P95, 0.02);
        assert_relative_eq!(m.e_enc, 20.0, epsilon = 1e-12);
        assert_relative_eq!(m.e_total - m.e_idle, m.e_enc, epsilon = 1e-15);
        assert!(m.significant);
        assert_eq!(m.repeats, 3);
        assert_eq!(m.negative_runs, 0);
    }

    #[test]
    fn summarize_idle_equal_to_workload_cancels() {
        let runs = vec![
            RunEnergy {
                e_total: 20.0,
                duration_s: 2.0,
            };
            2
        ];
        let m = summarize_runs(&runs, 10.0, Confidence::P95, 0.02);
        assert_relative_eq!(m.e_enc, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn summarize_mean_matches_oracle_recomputation() {
        let runs = vec![
            RunEnergy {
                e_total: 41.0,
                duration_s: 2.0,
            },
            RunEnergy {
                e_total: 39.5,
                duration_s: 1.9,
            },
            RunEnergy {
                e_total: 40.2,
                duration_s: 2.1,
            },
        ];
        let p_idle = 10.0;
        let m = summarize_runs(&runs, p_idle, Confidence::P95, 0.02);
        let oracle: f64 = runs
            .iter()
            .map(|r| r.e_total - p_idle * r.duration_s)
            .sum::<f64>()
            / runs.len() as f64;
        assert_relative_eq!(m.e_enc, oracle, epsilon = 1e-12);
    }

    #[test]
    fn negative_energy_flagged() {
        let runs = vec![
            RunEnergy {
                e_total: 5.0,
                duration_s: 1.0,
            },
            RunEnergy {
                e_total: 25.0,
                duration_s: 1.0,
            },
        ];
        let m = summarize_runs(&runs, 10.0, Confidence::P95, 0.02);
        assert_eq!(m.negative_runs, 1);
    }

    #[test]
    fn measure_workload_rejects_single_repeat() {
        let mut meter = SimulatedMeter::constant(10.0, Duration::from_millis(1));
        let config = MeasureConfig {
            repeats: 1,
            lock_path: None,
            ..MeasureConfig::default()
        };
        assert!(matches!(
            measure_workload(&mut meter, &CommandSpec::new("true", &[]), 0.0, &config),
            Err(PowerError::TooFewRepeats(1))
        ));
    }

    #[test]
    fn measure_workload_constant_power() {
        let mut meter = SimulatedMeter::constant(20.0, Duration::from_millis(50));
        let config = MeasureConfig {
            repeats: 2,
            max_repeats: 3,
            poll_interval: Duration::from_millis(1),
            lock_path: None,
            ..MeasureConfig::default()
        };
        let m = measure_workload(
            &mut meter,
            &CommandSpec::new("true", &[]),
            5.0,
            &config,
        )
        .unwrap();
        // Simulated clock: power is exactly 20 W over each run, whatever the
        // wall time was, so e_enc/duration = 15 W.
        assert_relative_eq!(m.e_enc / m.duration_t, 15.0, max_relative = 1e-9);
        assert!(m.repeats >= 2);
    }

    #[test]
    fn command_failure_reported() {
        let mut meter = SimulatedMeter::constant(10.0, Duration::from_millis(1));
        let config = MeasureConfig {
            poll_interval: Duration::from_millis(1),
            lock_path: None,
            ..MeasureConfig::default()
        };
        assert!(matches!(
            measure_workload(&mut meter, &CommandSpec::new("false", &[]), 0.0, &config),
            Err(PowerError::CommandFailed(_))
        ));
    }

    #[test]
    fn lock_serializes_measurements() {
        let dir = tempfile::tempdir().unwrap();
        let lock = dir.path().join("measure.lock");
        let _guard = LockGuard::acquire(&lock).unwrap();
        assert!(matches!(
            LockGuard::acquire(&lock),
            Err(PowerError::Locked(_))
        ));
        drop(_guard);
        assert!(LockGuard::acquire(&lock).is_ok());
    }

    #[test]
    fn calibrate_idle_window_guard() {
        let mut meter = SimulatedMeter::constant(10.0, Duration::from_millis(1));
        let config = MeasureConfig::default();
        assert!(matches!(
            calibrate_idle(&mut meter, Duration::ZERO, &config),
            Err(PowerError::WindowTooShort { .. })
        ));
    }

    #[test]
    fn calibrate_idle_synthetic_counter() {
        // Counter advances 1 uJ per us of simulated time -> 1 W.
        let mut meter = SimulatedMeter::constant(1.0, Duration::from_secs(10));
        let config = MeasureConfig {
            min_idle_window: Duration::ZERO,
            poll_interval: Duration::from_millis(1),
            ..MeasureConfig::default()
        };
        let p = calibrate_idle(&mut meter, Duration::from_millis(5), &config).unwrap();
        assert_relative_eq!(p, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn powercap_meter_reads_fake_tree() {
        let dir = tempfile::tempdir().unwrap();
        let zone = dir.path().join("intel-rapl:0");
        std::fs::create_dir_all(&zone).unwrap();
        std::fs::write(zone.join("name"), "package-0\n").unwrap();
        std::fs::write(zone.join("max_energy_range_uj"), "262143328850\n").unwrap();
        std::fs::write(zone.join("energy_uj"), "123456789\n").unwrap();
        std::env::set_var(POWERCAP_ROOT_ENV, dir.path());
        let mut meter = PowercapMeter::open("package-0").unwrap();
        let r1 = meter.read().unwrap();
        assert_eq!(r1.raw_energy_uj, 123_456_789);
        assert!(r1.raw_energy_uj < meter.max_range_uj());
        let r2 = meter.read().unwrap();
        assert!(r2.timestamp_ns >= r1.timestamp_ns);
        assert!(matches!(
            PowercapMeter::open("package-7").unwrap_err(),
            PowerError::DomainUnavailable { .. }
        ));
        std::env::remove_var(POWERCAP_ROOT_ENV);
    }
}
