//! Percentage errors, MAPE, confidence intervals, and grouped k-fold
//! cross-validation of the per-preset energy models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::events::EventId;
use crate::model::{self, EncodeRecord, ModelError, ModelMode, Preset};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("measured energy must be positive, got {0}")]
    ZeroMeasured(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("need at least 2 samples for a confidence interval, got {0}")]
    InsufficientSamples(usize),
    #[error("unsupported confidence level {0}% (have 90, 95, 99)")]
    UnknownConfidence(u32),
    #[error("only {groups} distinct sequences for {k} folds")]
    TooFewGroups { groups: usize, k: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Confidence level with its normal z-score; the measurement protocol
/// defaults to 95%.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confidence(u32);

impl Confidence {
    pub const P95: Confidence = Confidence(95);

    pub fn from_percent(percent: u32) -> Result<Self, EvalError> {
        match percent {
            90 | 95 | 99 => Ok(Confidence(percent)),
            other => Err(EvalError::UnknownConfidence(other)),
        }
    }

    pub fn percent(self) -> u32 {
        self.0
    }

    pub fn z_score(self) -> f64 {
        match self.0 {
            90 => 1.645,
            95 => 1.96,
            99 => 2.576,
            _ => unreachable!("validated on construction"),
        }
    }
}

/// One signed percentage error, keyed by preset and bitstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorSample {
    pub preset: Preset,
    /// sequence + CRF identifier.
    pub bitstream_id: String,
    /// Signed percentage error.
    pub r: f64,
}

/// Per-preset evaluation row: MAPE plus the confidence interval of the signed
/// percentage errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub preset: Preset,
    pub mape: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_err: f64,
    pub std_err: f64,
    pub n: usize,
    pub z: f64,
}

/// Full cross-validation table: one row per preset plus the unweighted mean of
/// the per-preset MAPEs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationTable {
    pub rows: Vec<EvaluationResult>,
    pub average_mape: f64,
}

/// Signed percentage error of an estimate against a measurement.
pub fn percentage_error(estimated: f64, measured: f64) -> Result<f64, EvalError> {
    if measured <= 0.0 {
        return Err(EvalError::ZeroMeasured(measured));
    }
    Ok((estimated - measured) / measured * 100.0)
}

/// Mean of absolute percentage errors.
pub fn mape(samples: &[f64]) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(samples.iter().map(|r| r.abs()).sum::<f64>() / samples.len() as f64)
}

fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Sample (n-1) standard deviation.
pub fn sample_std(samples: &[f64]) -> f64 {
    let m = mean(samples);
    let ss: f64 = samples.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (samples.len() as f64 - 1.0)).sqrt()
}

/// Two-sided confidence interval about the mean: m +/- z * s / sqrt(n).
pub fn confidence_interval(
    samples: &[f64],
    confidence: Confidence,
) -> Result<(f64, f64), EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::InsufficientSamples(samples.len()));
    }
    let m = mean(samples);
    let half = confidence.z_score() * sample_std(samples) / (samples.len() as f64).sqrt();
    Ok((m - half, m + half))
}

/// Splits records into `k` folds by whole sequences: every record of a
/// sequence lands in the same fold, fold sizes differ by at most one group,
/// and the split is deterministic for a fixed seed. Returns record indices.
pub fn kfold_split(
    records: &[EncodeRecord],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, EvalError> {
    let mut groups: Vec<&str> = records.iter().map(|r| r.sequence_id.as_str()).collect();
    groups.sort();
    groups.dedup();
    if groups.len() < k || k == 0 {
        return Err(EvalError::TooFewGroups {
            groups: groups.len(),
            k,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut shuffled: Vec<&str> = groups.clone();
    shuffled.shuffle(&mut rng);

    let mut fold_of_group: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, group) in shuffled.iter().enumerate() {
        fold_of_group.insert(group, i % k);
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (idx, record) in records.iter().enumerate() {
        folds[fold_of_group[record.sequence_id.as_str()]].push(idx);
    }
    Ok(folds)
}

/// K-fold cross-validation: per fold, fit per-preset models on out-of-fold
/// records and evaluate on in-fold records; validation errors are pooled per
/// preset across folds. In prior-UF mode the ultrafast preset gets no row.
pub fn cross_validate(
    records: &[EncodeRecord],
    k: usize,
    mode: ModelMode,
    feature_mask: &BTreeSet<EventId>,
    confidence: Confidence,
    seed: u64,
) -> Result<EvaluationTable, EvalError> {
    let folds = kfold_split(records, k, seed)?;
    let presets: Vec<Preset> = {
        let mut set: BTreeSet<Preset> = records.iter().map(|r| r.preset).collect();
        if mode == ModelMode::PriorUf {
            set.remove(&Preset::Ultrafast);
        }
        Preset::ALL
            .iter()
            .copied()
            .filter(|p| set.contains(p))
            .collect()
    };

    let mut pooled: BTreeMap<Preset, Vec<ErrorSample>> = BTreeMap::new();
    for fold in &folds {
        let in_fold: BTreeSet<usize> = fold.iter().copied().collect();
        let train: Vec<EncodeRecord> = records
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_fold.contains(i))
            .map(|(_, r)| r.clone())
            .collect();
        for &preset in &presets {
            let model = model::fit(&train, mode, preset, feature_mask)?;
            for &idx in fold {
                let record = &records[idx];
                if record.preset != preset {
                    continue;
                }
                let Some(measured) = record.energy_j else { continue };
                if measured <= 0.0 {
                    continue;
                }
                let estimated = model.estimate_record(record)?;
                let r = percentage_error(estimated, measured)?;
                pooled.entry(preset).or_default().push(ErrorSample {
                    preset,
                    bitstream_id: format!("{}@crf{}", record.sequence_id, record.crf),
                    r,
                });
            }
        }
    }

    let mut rows = Vec::new();
    for &preset in &presets {
        let samples: Vec<f64> = pooled
            .get(&preset)
            .map(|s| s.iter().map(|e| e.r).collect())
            .unwrap_or_default();
        if samples.is_empty() {
            continue;
        }
        let (ci_low, ci_high) = confidence_interval(&samples, confidence)?;
        rows.push(EvaluationResult {
            preset,
            mape: mape(&samples)?,
            ci_low,
            ci_high,
            mean_err: mean(&samples),
            std_err: sample_std(&samples),
            n: samples.len(),
            z: confidence.z_score(),
        });
    }
    if rows.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let average_mape = rows.iter().map(|r| r.mape).sum::<f64>() / rows.len() as f64;
    Ok(EvaluationTable { rows, average_mape })
}

impl EvaluationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("preset,mape_pct,ci_low_pct,ci_high_pct,n\n");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                row.preset, row.mape, row.ci_low, row.ci_high, row.n
            );
        }
        let _ = writeln!(out, "average,{},,,", self.average_mape);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>12} {:>12} {:>6}",
            "preset", "mape_pct", "ci_low_pct", "ci_high_pct", "n"
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>10.3} {:>12.3} {:>12.3} {:>6}",
                row.preset.name(),
                row.mape,
                row.ci_low,
                row.ci_high,
                row.n
            );
        }
        let _ = writeln!(out, "{:<10} {:>10.3}", "average", self.average_mape);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn percentage_error_definition() {
        assert_relative_eq!(percentage_error(105.0, 100.0).unwrap(), 5.0);
        assert_relative_eq!(percentage_error(100.0, 100.0).unwrap(), 0.0);
        assert_relative_eq!(percentage_error(90.0, 120.0).unwrap(), -25.0);
        assert!(matches!(
            percentage_error(1.0, 0.0).unwrap_err(),
            EvalError::ZeroMeasured(_)
        ));
    }

    #[test]
    fn mape_examples() {
        assert_relative_eq!(mape(&[5.0, -5.0]).unwrap(), 5.0);
        assert_relative_eq!(mape(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        // Hand sum: (3 + 7 + 2 + 8) / 4 = 5.
        assert_relative_eq!(mape(&[3.0, -7.0, 2.0, -8.0]).unwrap(), 5.0);
        assert!(matches!(mape(&[]).unwrap_err(), EvalError::EmptyInput));
    }

    #[test]
    fn ci_zero_variance_collapses_to_point() {
        let (lo, hi) = confidence_interval(&[4.0, 4.0, 4.0], Confidence::P95).unwrap();
        assert_relative_eq!(lo, 4.0);
        assert_relative_eq!(hi, 4.0);
    }

    #[test]
    fn ci_two_samples_direct_formula() {
        // {-1, +1}: mean 0, sample std sqrt(2), half-width 1.96*sqrt(2)/sqrt(2).
        let (lo, hi) = confidence_interval(&[-1.0, 1.0], Confidence::P95).unwrap();
        assert_relative_eq!(lo, -1.96, max_relative = 1e-12);
        assert_relative_eq!(hi, 1.96, max_relative = 1e-12);
    }

    #[test]
    fn z_scores() {
        assert_eq!(Confidence::from_percent(95).unwrap().z_score(), 1.96);
        assert_eq!(Confidence::from_percent(90).unwrap().z_score(), 1.645);
        assert_eq!(Confidence::from_percent(99).unwrap().z_score(), 2.576);
        assert!(Confidence::from_percent(80).is_err());
    }

    #[test]
    fn ci_insufficient_samples() {
        assert!(matches!(
            confidence_interval(&[1.0], Confidence::P95).unwrap_err(),
            EvalError::InsufficientSamples(1)
        ));
    }

    fn synthetic_records(n_sequences: usize) -> Vec<EncodeRecord> {
        use crate::events::EventVector;
        let mut records = Vec::new();
        for s in 0..n_sequences {
            for crf in [18, 23] {
                records.push(EncodeRecord {
                    sequence_id: format!("seq{s:02}"),
                    preset: Preset::Medium,
                    crf,
                    events: EventVector::from_counts([(
                        EventId::Ir,
                        (s as u64 + 1) * 1000 + crf as u64,
                    )]),
                    events_uf: None,
                    energy_j: Some(((s as u64 + 1) * 1000 + crf as u64) as f64 * 1e-3),
                    time_s: 1.0,
                    pixels: 100_000,
                });
            }
        }
        records
    }

    #[test]
    fn kfold_exact_partition_ten_sequences() {
        let records = synthetic_records(10);
        let folds = kfold_split(&records, 10, 7).unwrap();
        assert_eq!(folds.len(), 10);
        for fold in &folds {
            assert_eq!(fold.len(), 2); // both CRFs of one sequence
            let seqs: BTreeSet<&str> = fold
                .iter()
                .map(|&i| records[i].sequence_id.as_str())
                .collect();
            assert_eq!(seqs.len(), 1);
        }
    }

    #[test]
    fn kfold_22_sequences_pigeonhole() {
        let records = synthetic_records(22);
        let folds = kfold_split(&records, 10, 3).unwrap();
        let mut group_sizes: Vec<usize> = folds
            .iter()
            .map(|fold| {
                fold.iter()
                    .map(|&i| records[i].sequence_id.as_str())
                    .collect::<BTreeSet<_>>()
                    .len()
            })
            .collect();
        group_sizes.sort_unstable();
        assert_eq!(group_sizes, vec![2, 2, 2, 2, 2, 2, 2, 2, 3, 3]);
    }

    #[test]
    fn kfold_deterministic_and_disjoint() {
        let records = synthetic_records(13);
        let a = kfold_split(&records, 5, 42).unwrap();
        let b = kfold_split(&records, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = kfold_split(&records, 5, 43).unwrap();
        assert_ne!(a, c);
        let all: Vec<usize> = a.iter().flatten().copied().collect();
        let unique: BTreeSet<usize> = all.iter().copied().collect();
        assert_eq!(all.len(), records.len());
        assert_eq!(unique.len(), records.len());
    }

    #[test]
    fn kfold_too_few_groups() {
        let records = synthetic_records(3);
        assert!(matches!(
            kfold_split(&records, 10, 0).unwrap_err(),
            EvalError::TooFewGroups { groups: 3, k: 10 }
        ));
    }

    #[test]
    fn cross_validate_noise_free_is_exact() {
        let records = synthetic_records(12);
        let mask: BTreeSet<EventId> = [EventId::Ir].into_iter().collect();
        let table = cross_validate(
            &records,
            4,
            ModelMode::Posterior,
            &mask,
            Confidence::P95,
            1,
        )
        .unwrap();
        assert!(table.average_mape < 1e-6, "{}", table.average_mape);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].n, 24);
    }

    proptest! {
        #[test]
        fn mape_order_and_sign_invariant(mut rs in proptest::collection::vec(-50.0..50.0f64, 1..30)) {
            let base = mape(&rs).unwrap();
            rs.reverse();
            prop_assert!((mape(&rs).unwrap() - base).abs() < 1e-12);
            let flipped: Vec<f64> = rs.iter().map(|r| -r).collect();
            prop_assert!((mape(&flipped).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn ci_contains_mean(rs in proptest::collection::vec(-50.0..50.0f64, 2..30)) {
            let (lo, hi) = confidence_interval(&rs, Confidence::P95).unwrap();
            let m = rs.iter().sum::<f64>() / rs.len() as f64;
            prop_assert!(lo <= m + 1e-12 && m <= hi + 1e-12);
        }
    }

    #[test]
    fn ci_halfwidth_scales_inverse_sqrt_n() {
        // Duplicating the sample set keeps the mean fixed; after adjusting for
        // the slight (n-1) change in the sample std, the half-width shrinks by
        // sqrt((2n-1)/(2(n-1))) / sqrt(2) ... verify via direct recomputation.
        let samples = [1.0, 3.0, -2.0, 4.0, 0.5];
        let doubled: Vec<f64> = samples.iter().chain(samples.iter()).copied().collect();
        let (lo1, hi1) = confidence_interval(&samples, Confidence::P95).unwrap();
        let (lo2, hi2) = confidence_interval(&doubled, Confidence::P95).unwrap();
        let half1 = (hi1 - lo1) / 2.0;
        let half2 = (hi2 - lo2) / 2.0;
        let s1 = sample_std(&samples);
        let s2 = sample_std(&doubled);
        // Fix sigma: half-width ratio must be exactly (s2/s1) / sqrt(2).
        let expected_ratio = (s2 / s1) / 2.0_f64.sqrt();
        assert_relative_eq!(half2 / half1, expected_ratio, max_relative = 1e-9);
    }
}
