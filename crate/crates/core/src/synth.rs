//! Synthetic dataset generator: the testing oracle for the fit/evaluate
//! pipeline. Event vectors share a latent workload-size factor per record to
//! mimic the strong inter-event correlation seen on real encodes, energies are
//! exact dot products with known non-negative coefficients plus optional
//! multiplicative noise, and everything is deterministic per seed.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Provenance};
use crate::events::{EventId, EventVector};
use crate::model::{EncodeRecord, Preset};

/// Baseline per-event magnitude relative to instruction reads, chosen to look
/// like a cache/branch-simulated encode: reads dominate, last-level misses are
/// orders of magnitude rarer.
fn base_magnitude(event: EventId) -> f64 {
    match event {
        EventId::Ir => 1.0,
        EventId::Dr => 0.35,
        EventId::Dw => 0.20,
        EventId::I1mr => 8e-3,
        EventId::D1mr => 1.2e-2,
        EventId::D1mw => 6e-3,
        EventId::ILmr => 4e-4,
        EventId::DLmr => 8e-4,
        EventId::DLmw => 5e-4,
        EventId::Bc => 0.18,
        EventId::Bcm => 1.4e-2,
        EventId::Bi => 1.0e-2,
        EventId::Bim => 1.5e-3,
    }
}

/// Work multiplier per preset, fastest to slowest.
fn preset_workload(preset: Preset) -> f64 {
    match preset {
        Preset::Ultrafast => 1.0,
        Preset::Superfast => 1.7,
        Preset::Veryfast => 2.2,
        Preset::Faster => 2.3,
        Preset::Fast => 2.5,
        Preset::Medium => 2.9,
        Preset::Slow => 5.8,
        Preset::Slower => 18.0,
        Preset::Veryslow => 27.0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub presets: Vec<Preset>,
    pub n_sequences: usize,
    pub crfs: Vec<i32>,
    /// Known per-preset coefficients (joules per event). When `None`, a
    /// deterministic set is drawn from the seed.
    pub true_coefficients: Option<BTreeMap<Preset, BTreeMap<EventId, f64>>>,
    /// Relative scale of the zero-mean multiplicative energy noise.
    pub noise_rel: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn basic(presets: Vec<Preset>, n_sequences: usize, noise_rel: f64, seed: u64) -> Self {
        Self {
            presets,
            n_sequences,
            crfs: vec![23],
            true_coefficients: None,
            noise_rel,
            seed,
        }
    }
}

/// Ground truth emitted next to a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub coefficients: BTreeMap<Preset, BTreeMap<EventId, f64>>,
    pub noise_rel: f64,
    /// The multiplicative noise factor eta applied to each record, keyed by
    /// (sequence_id, preset, crf).
    pub noise_samples: Vec<f64>,
}

fn random_coefficients(rng: &mut ChaCha20Rng) -> BTreeMap<EventId, f64> {
    // Joules per event, scaled inversely to the event magnitude so every term
    // contributes comparably. All strictly positive.
    EventId::ALL
        .iter()
        .map(|&e| {
            let scale = 1e-9 / base_magnitude(e).sqrt();
            (e, scale * rng.gen_range(0.5..1.5))
        })
        .collect()
}

/// Deterministic synthetic dataset plus the ground truth that generated it.
pub fn synth_dataset(spec: &SynthSpec) -> (Dataset, GroundTruth) {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let coefficients: BTreeMap<Preset, BTreeMap<EventId, f64>> = match &spec.true_coefficients {
        Some(c) => c.clone(),
        None => spec
            .presets
            .iter()
            .map(|&p| (p, random_coefficients(&mut rng)))
            .collect(),
    };

    // Per-sequence pixel counts spanning a few orders of magnitude, like a
    // mixed-resolution corpus (8 frames each).
    let sequences: Vec<(String, u64)> = (0..spec.n_sequences)
        .map(|i| {
            let pixels_per_frame = rng.gen_range(1.0e5..2.1e6);
            (format!("seq{i:03}"), (pixels_per_frame * 8.0) as u64)
        })
        .collect();

    let jitter = Normal::new(0.0, 0.3).unwrap();
    let noise = Normal::new(0.0, spec.noise_rel.max(0.0)).unwrap();

    let mut records = Vec::new();
    let mut noise_samples = Vec::new();
    for (sequence_id, pixels) in &sequences {
        for &crf in &spec.crfs {
            // Shared latent workload: events per pixel, lower CRF works harder.
            let crf_factor = 1.3_f64.powf((28.0 - crf as f64) / 5.0);
            let per_pixel = 55.0 * crf_factor * (1.0 + 0.15 * jitter.sample(&mut rng));
            let latent_uf = *pixels as f64 * per_pixel;
            let uf_events = draw_events(latent_uf, &mut rng, &jitter);

            for &preset in &spec.presets {
                let events = if preset == Preset::Ultrafast {
                    uf_events.clone()
                } else {
                    scale_events(&uf_events, preset_workload(preset), &mut rng, &jitter)
                };
                let e_star = &coefficients[&preset];
                let clean: f64 = events
                    .iter()
                    .map(|(e, n)| n as f64 * e_star[&e])
                    .sum();
                let eta = if spec.noise_rel > 0.0 {
                    noise.sample(&mut rng).clamp(-0.9, 9.0)
                } else {
                    0.0
                };
                noise_samples.push(eta);
                let energy = clean * (1.0 + eta);
                // Wall time consistent with a ~40-60 W package draw.
                let time_s = clean / rng.gen_range(40.0..60.0);
                records.push(EncodeRecord {
                    sequence_id: sequence_id.clone(),
                    preset,
                    crf,
                    events,
                    events_uf: Some(uf_events.clone()),
                    energy_j: Some(energy),
                    time_s,
                    pixels: *pixels,
                });
            }
        }
    }

    let provenance = Provenance {
        host: "synthetic".into(),
        cpu_model: format!("synth seed {}", spec.seed),
        encoder_version: "n/a".into(),
        profiler_version: "n/a".into(),
        created_at: String::new(),
    };
    let dataset = Dataset::new(records, provenance).expect("synth keys are unique");
    (
        dataset,
        GroundTruth {
            coefficients,
            noise_rel: spec.noise_rel,
            noise_samples,
        },
    )
}

/// Draws the 13 events around the latent size, respecting the miss hierarchy:
/// children are derived from their parent with a ratio < 1.
fn draw_events(latent: f64, rng: &mut ChaCha20Rng, jitter: &Normal<f64>) -> EventVector {
    let mut v = EventVector::new();
    let draw_top = |rng: &mut ChaCha20Rng, event: EventId| {
        let j = (jitter.sample(rng)).exp();
        let count = (latent * base_magnitude(event) * j).round().max(0.0) as u64;
        count
    };
    let ir = draw_top(rng, EventId::Ir);
    let dr = draw_top(rng, EventId::Dr);
    let dw = draw_top(rng, EventId::Dw);
    let bc = draw_top(rng, EventId::Bc);
    let bi = draw_top(rng, EventId::Bi);
    v.set(EventId::Ir, ir);
    v.set(EventId::Dr, dr);
    v.set(EventId::Dw, dw);
    v.set(EventId::Bc, bc);
    v.set(EventId::Bi, bi);
    let child = |rng: &mut ChaCha20Rng, parent: u64, ratio: f64| -> u64 {
        let j = (jitter.sample(rng)).exp();
        ((parent as f64) * (ratio * j).min(1.0)).round() as u64
    };
    let i1mr = child(rng, ir, 8e-3);
    let d1mr = child(rng, dr, 3.4e-2);
    let d1mw = child(rng, dw, 3e-2);
    v.set(EventId::I1mr, i1mr);
    v.set(EventId::D1mr, d1mr);
    v.set(EventId::D1mw, d1mw);
    v.set(EventId::ILmr, child(rng, i1mr, 5e-2));
    v.set(EventId::DLmr, child(rng, d1mr, 6.6e-2));
    v.set(EventId::DLmw, child(rng, d1mw, 8.3e-2));
    v.set(EventId::Bcm, child(rng, bc, 7.8e-2));
    v.set(EventId::Bim, child(rng, bi, 0.15));
    v
}

/// Scales an ultrafast vector to a slower preset with fresh per-event jitter,
/// clamping children back under their parents.
fn scale_events(
    uf: &EventVector,
    factor: f64,
    rng: &mut ChaCha20Rng,
    jitter: &Normal<f64>,
) -> EventVector {
    let mut v = EventVector::new();
    for (event, count) in uf.iter() {
        let j = (jitter.sample(rng)).exp();
        v.set(event, ((count as f64) * factor * j).round() as u64);
    }
    // Re-impose the miss hierarchy after independent jitter.
    for event in EventId::ALL {
        if let (Some(c), Some(parent)) = (v.get(event), event.parent()) {
            let p = v.get(parent).unwrap_or(0);
            if c > p {
                v.set(event, p);
            }
        }
    }
    v
}
