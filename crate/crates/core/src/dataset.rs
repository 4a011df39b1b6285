//! Dataset store: encode records as CSV with a JSON sidecar carrying
//! provenance and the schema version.
//!
//! Event columns are fixed in canonical event order; events that were not
//! recorded are empty cells, never zeros. Floats are written in shortest
//! round-trip decimal form, so save -> load preserves every value exactly.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::events::{EventId, EventVector};
use crate::model::{EncodeRecord, Preset};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("duplicate record key ({0}, {1}, {2})")]
    DuplicateKey(String, Preset, i32),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad field `{field}` in row {row}: {reason}")]
    BadField {
        row: usize,
        field: String,
        reason: String,
    },
    #[error("sidecar error: {0}")]
    Sidecar(String),
    #[error("refusing to overwrite `{0}` without force")]
    WouldOverwrite(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub host: String,
    pub cpu_model: String,
    pub encoder_version: String,
    pub profiler_version: String,
    pub created_at: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    schema_version: u32,
    provenance: Provenance,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<EncodeRecord>,
    pub provenance: Provenance,
    pub schema_version: u32,
}

impl Dataset {
    pub fn new(records: Vec<EncodeRecord>, provenance: Provenance) -> Result<Self, DatasetError> {
        let mut seen: BTreeSet<(String, Preset, i32)> = BTreeSet::new();
        for r in &records {
            if !seen.insert((r.sequence_id.clone(), r.preset, r.crf)) {
                return Err(DatasetError::DuplicateKey(
                    r.sequence_id.clone(),
                    r.preset,
                    r.crf,
                ));
            }
        }
        Ok(Self {
            records,
            provenance,
            schema_version: DATASET_SCHEMA_VERSION,
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        path.with_file_name(name)
    }

    pub fn save(&self, path: &Path, force: bool) -> Result<(), DatasetError> {
        if path.exists() && !force {
            return Err(DatasetError::WouldOverwrite(path.to_owned()));
        }
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = vec![
            "sequence_id".into(),
            "preset".into(),
            "crf".into(),
            "energy_j".into(),
            "time_s".into(),
            "pixels".into(),
        ];
        header.extend(EventId::ALL.iter().map(|e| e.name().to_owned()));
        header.extend(EventId::ALL.iter().map(|e| format!("uf_{}", e.name())));
        writer.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = vec![
                r.sequence_id.clone(),
                r.preset.name().to_owned(),
                r.crf.to_string(),
                r.energy_j.map(|e| format!("{e}")).unwrap_or_default(),
                format!("{}", r.time_s),
                r.pixels.to_string(),
            ];
            for &event in &EventId::ALL {
                row.push(
                    r.events
                        .get(event)
                        .map(|c| c.to_string())
                        .unwrap_or_default(),
                );
            }
            for &event in &EventId::ALL {
                row.push(
                    r.events_uf
                        .as_ref()
                        .and_then(|v| v.get(event))
                        .map(|c| c.to_string())
                        .unwrap_or_default(),
                );
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        let sidecar = Sidecar {
            schema_version: self.schema_version,
            provenance: self.provenance.clone(),
        };
        std::fs::write(
            Self::sidecar_path(path),
            serde_json::to_string_pretty(&sidecar).map_err(|e| DatasetError::Sidecar(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| -> Option<usize> { headers.iter().position(|h| h == name) };
        let need = |name: &str| -> Result<usize, DatasetError> {
            col(name).ok_or_else(|| DatasetError::BadField {
                row: 0,
                field: name.into(),
                reason: "missing column".into(),
            })
        };
        let c_seq = need("sequence_id")?;
        let c_preset = need("preset")?;
        let c_crf = need("crf")?;
        let c_energy = need("energy_j")?;
        let c_time = need("time_s")?;
        let c_pixels = need("pixels")?;
        let c_events: Vec<(EventId, Option<usize>)> = EventId::ALL
            .iter()
            .map(|&e| (e, col(e.name())))
            .collect();
        let c_uf: Vec<(EventId, Option<usize>)> = EventId::ALL
            .iter()
            .map(|&e| (e, col(&format!("uf_{}", e.name()))))
            .collect();

        let mut records = Vec::new();
        for (i, result) in reader.records().enumerate() {
            let row = result?;
            let rowno = i + 2;
            let field = |idx: usize| row.get(idx).unwrap_or("").trim();
            let bad = |name: &str, reason: String| DatasetError::BadField {
                row: rowno,
                field: name.into(),
                reason,
            };
            let preset: Preset = field(c_preset)
                .parse()
                .map_err(|e: String| bad("preset", e))?;
            let crf: i32 = field(c_crf)
                .parse()
                .map_err(|e| bad("crf", format!("{e}")))?;
            let energy_j = match field(c_energy) {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|e| bad("energy_j", e.to_string()))?),
            };
            let time_s: f64 = field(c_time)
                .parse()
                .map_err(|e: std::num::ParseFloatError| bad("time_s", e.to_string()))?;
            let pixels: u64 = field(c_pixels)
                .parse()
                .map_err(|e: std::num::ParseIntError| bad("pixels", e.to_string()))?;
            let mut events = EventVector::new();
            for &(event, idx) in &c_events {
                if let Some(idx) = idx {
                    let s = field(idx);
                    if !s.is_empty() {
                        events.set(
                            event,
                            s.parse().map_err(|e: std::num::ParseIntError| {
                                bad(event.name(), e.to_string())
                            })?,
                        );
                    }
                }
            }
            let mut uf = EventVector::new();
            for &(event, idx) in &c_uf {
                if let Some(idx) = idx {
                    let s = field(idx);
                    if !s.is_empty() {
                        uf.set(
                            event,
                            s.parse().map_err(|e: std::num::ParseIntError| {
                                bad(event.name(), e.to_string())
                            })?,
                        );
                    }
                }
            }
            records.push(EncodeRecord {
                sequence_id: field(c_seq).to_owned(),
                preset,
                crf,
                events,
                events_uf: if uf.is_empty() { None } else { Some(uf) },
                energy_j,
                time_s,
                pixels,
            });
        }

        let sidecar_path = Self::sidecar_path(path);
        let (schema_version, provenance) = if sidecar_path.exists() {
            let text = std::fs::read_to_string(&sidecar_path)?;
            let sidecar: Sidecar = serde_json::from_str(&text)
                .map_err(|e| DatasetError::Sidecar(e.to_string()))?;
            (sidecar.schema_version, sidecar.provenance)
        } else {
            (DATASET_SCHEMA_VERSION, Provenance::default())
        };

        let mut dataset = Self::new(records, provenance)?;
        dataset.schema_version = schema_version;
        Ok(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<EncodeRecord> {
        vec![
            EncodeRecord {
                sequence_id: "BasketballDrive".into(),
                preset: Preset::Medium,
                crf: 23,
                events: EventVector::from_counts([
                    (EventId::Ir, 123_456_789_012),
                    (EventId::Dr, 45_000_000_000),
                ]),
                events_uf: Some(EventVector::from_counts([(EventId::Ir, 9_876_543_210)])),
                energy_j: Some(0.1 + 0.2),
                time_s: 12.3456789,
                pixels: 8 * 1920 * 1080,
            },
            EncodeRecord {
                sequence_id: "RaceHorses".into(),
                preset: Preset::Ultrafast,
                crf: 18,
                events: EventVector::from_counts([(EventId::Ir, 1)]),
                events_uf: None,
                energy_j: None,
                time_s: 0.5,
                pixels: 416 * 240,
            },
        ]
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let dataset = Dataset::new(sample_records(), Provenance::default()).unwrap();
        dataset.save(&path, false).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.records.len(), 2);
        let a = &loaded.records[0];
        let b = &dataset.records[0];
        assert_eq!(a.sequence_id, b.sequence_id);
        assert_eq!(a.preset, b.preset);
        assert_eq!(a.crf, b.crf);
        assert_eq!(
            a.energy_j.unwrap().to_bits(),
            b.energy_j.unwrap().to_bits()
        );
        assert_eq!(a.time_s.to_bits(), b.time_s.to_bits());
        assert_eq!(a.events, b.events);
        assert_eq!(a.events_uf, b.events_uf);
        // Missing energy and absent events stay absent.
        assert_eq!(loaded.records[1].energy_j, None);
        assert!(loaded.records[1].events.get(EventId::Dr).is_none());
    }

    #[test]
    fn duplicate_key_rejected() {
        let mut records = sample_records();
        records.push(records[0].clone());
        assert!(matches!(
            Dataset::new(records, Provenance::default()).unwrap_err(),
            DatasetError::DuplicateKey(..)
        ));
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let dataset = Dataset::new(sample_records(), Provenance::default()).unwrap();
        dataset.save(&path, false).unwrap();
        assert!(matches!(
            dataset.save(&path, false).unwrap_err(),
            DatasetError::WouldOverwrite(_)
        ));
        dataset.save(&path, true).unwrap();
    }
}
