//! Synthetic recordings and truth tables shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use soundscape::audio_io::AudioClip;
use soundscape::geo::{GeoPoint, OccurrenceTable, Site, SiteId};
use soundscape::postproc::{PredictionRow, RowId};
use soundscape::scoring::{ClassVocabulary, FrameProbabilities, NOCALL};

pub const SR: u32 = 32_000;

/// Tonal "species": identifier and carrier frequency.
pub const SPECIES: [(&str, f64); 5] = [
    ("amerob", 1_800.0),
    ("bkcchi", 3_000.0),
    ("norcar", 4_500.0),
    ("sonspa", 6_500.0),
    ("wooths", 9_000.0),
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vocab() -> ClassVocabulary {
    ClassVocabulary::new(SPECIES.iter().map(|s| s.0)).unwrap()
}

pub fn sine(freq: f64, amplitude: f64, sr: u32, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| amplitude * (2.0 * PI * freq * i as f64 / sr as f64).sin())
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Call {
    pub species: usize,
    pub start_s: f64,
    pub duration_s: f64,
}

/// A soundscape of `duration_s` seconds: white noise plus tonal calls, each
/// placed inside one 5-s row so that row truth is unambiguous.
pub struct SyntheticSoundscape {
    pub clip: AudioClip,
    pub calls: Vec<Call>,
    /// Species present in each row, keyed by the row's end second.
    pub rows: BTreeMap<u32, BTreeSet<usize>>,
}

pub fn synth_soundscape(clip_id: &str, duration_s: u32, seed: u64) -> SyntheticSoundscape {
    let mut r = rng(seed);
    let mut calls = Vec::new();
    let mut rows = BTreeMap::new();
    for b in 0..duration_s / 5 {
        let mut present = BTreeSet::new();
        if r.random_bool(0.45) {
            let n = if r.random_bool(0.25) { 2 } else { 1 };
            while present.len() < n {
                present.insert(r.random_range(0..SPECIES.len()));
            }
            for &species in &present {
                let start_s = 5.0 * b as f64 + r.random_range(0.3..1.5);
                calls.push(Call {
                    species,
                    start_s,
                    duration_s: r.random_range(2.0..3.2),
                });
            }
        }
        rows.insert(5 * (b + 1), present);
    }
    let clip = render(clip_id, duration_s as f64, &calls, 0.02, &mut r);
    SyntheticSoundscape { clip, calls, rows }
}

/// Renders calls as raised-cosine-gated tones over Gaussian noise.
pub fn render(
    clip_id: &str,
    duration_s: f64,
    calls: &[Call],
    noise_std: f64,
    r: &mut ChaCha8Rng,
) -> AudioClip {
    let n = (duration_s * SR as f64) as usize;
    let noise = Normal::new(0.0, noise_std).unwrap();
    let mut samples: Vec<f64> = (0..n).map(|_| noise.sample(r)).collect();
    let ramp = 0.02 * SR as f64;
    for call in calls {
        let freq = SPECIES[call.species].1;
        let start = (call.start_s * SR as f64) as usize;
        let len = (call.duration_s * SR as f64) as usize;
        for i in 0..len.min(n.saturating_sub(start)) {
            let gate = if (i as f64) < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp).cos()
            } else if ((len - i) as f64) < ramp {
                0.5 - 0.5 * (PI * (len - i) as f64 / ramp).cos()
            } else {
                1.0
            };
            let t = (start + i) as f64 / SR as f64;
            samples[start + i] += 0.25 * gate * (2.0 * PI * freq * t).sin();
        }
    }
    AudioClip::new(clip_id, samples, SR).unwrap()
}

pub fn label_set(present: &BTreeSet<usize>) -> BTreeSet<String> {
    present.iter().map(|&s| SPECIES[s].0.to_string()).collect()
}

/// Truth rows in submission form; rows without birds are `nocall`.
pub fn truth_rows(
    clip_id: &str,
    site: SiteId,
    rows: &BTreeMap<u32, BTreeSet<usize>>,
) -> Vec<PredictionRow> {
    rows.iter()
        .map(|(&k, present)| {
            let mut labels: Vec<String> = label_set(present).into_iter().collect();
            if labels.is_empty() {
                labels.push(NOCALL.to_string());
            }
            PredictionRow {
                row_id: RowId {
                    clip_id: clip_id.to_string(),
                    site,
                    end_second: k,
                }
                .to_string(),
                labels,
            }
        })
        .collect()
}

/// Occurrences a few km from `site` for every listed species.
pub fn nearby_occurrences(site: &Site, species: &[&str]) -> OccurrenceTable {
    let mut occ = OccurrenceTable::default();
    for s in species {
        let p = GeoPoint::new(
            site.location.latitude_deg() + 0.02,
            site.location.longitude_deg(),
        )
        .unwrap();
        occ.add(*s, p);
    }
    occ
}

/// A calibration benchmark: per-second presence with long bouts, noisy raw
/// window probabilities, and some species that never occur near the site.
pub struct CalibrationBench {
    pub vocab: ClassVocabulary,
    pub frames: Vec<FrameProbabilities>,
    pub truth: Vec<PredictionRow>,
    pub frame_truth: BTreeMap<(String, u32), BTreeSet<String>>,
    pub sites: BTreeMap<String, Site>,
    pub occurrences: OccurrenceTable,
}

pub fn calibration_bench(n_clips: usize, duration_s: u32, seed: u64) -> CalibrationBench {
    let mut r = rng(seed);
    let names: Vec<String> = (0..12).map(|i| format!("sp{i:02}")).collect();
    let vocab = ClassVocabulary::new(names.iter().cloned()).unwrap();
    // The last four species live far away and never call in these clips.
    let local = 8;
    let site = Site::with_default_location(SiteId::Ssw);
    let mut occurrences = nearby_occurrences(
        &site,
        &names[..local]
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    for name in &names[local..] {
        occurrences.add(name.clone(), GeoPoint::new(-30.0, 140.0).unwrap());
    }
    let noise = Normal::new(0.0, 1.6).unwrap();
    let mut frames = Vec::new();
    let mut truth = Vec::new();
    let mut frame_truth = BTreeMap::new();
    let mut sites = BTreeMap::new();
    for c in 0..n_clips {
        let clip_id = format!("{}_SSW_{c:02}", 100 + c);
        sites.insert(clip_id.clone(), site);
        let n = duration_s as usize;
        // presence[s][t] for second t in 1..=n
        let mut presence = vec![vec![false; n + 1]; names.len()];
        for p in presence.iter_mut().take(local) {
            if !r.random_bool(0.45) {
                continue;
            }
            let mut on = false;
            for slot in p.iter_mut().skip(1) {
                on = if on {
                    r.random_bool(0.94)
                } else {
                    r.random_bool(0.03)
                };
                *slot = on;
            }
        }
        let window = |s: usize, k: usize| (k.saturating_sub(4)..=k).any(|t| presence[s][t]);
        for k in 5..=n {
            let probs = (0..names.len())
                .map(|s| {
                    let mu = if window(s, k) { 0.6 } else { -1.4 };
                    let z: f64 = mu + noise.sample(&mut r);
                    1.0 / (1.0 + (-z).exp())
                })
                .collect();
            frames.push(FrameProbabilities {
                clip_id: clip_id.clone(),
                end_second: k as u32,
                probs,
            });
        }
        let mut rows = BTreeMap::new();
        for k in (5..=n).step_by(5) {
            let present: BTreeSet<usize> = (0..names.len()).filter(|&s| window(s, k)).collect();
            let labels: BTreeSet<String> = present.iter().map(|&s| names[s].clone()).collect();
            frame_truth.insert((clip_id.clone(), k as u32), labels);
            rows.insert(k as u32, present);
        }
        for row in rows_to_truth(&clip_id, &rows, &names) {
            truth.push(row);
        }
    }
    CalibrationBench {
        vocab,
        frames,
        truth,
        frame_truth,
        sites,
        occurrences,
    }
}

fn rows_to_truth(
    clip_id: &str,
    rows: &BTreeMap<u32, BTreeSet<usize>>,
    names: &[String],
) -> Vec<PredictionRow> {
    rows.iter()
        .map(|(&k, present)| {
            let mut labels: Vec<String> = present.iter().map(|&s| names[s].clone()).collect();
            if labels.is_empty() {
                labels.push(NOCALL.to_string());
            }
            PredictionRow {
                row_id: RowId {
                    clip_id: clip_id.to_string(),
                    site: SiteId::Ssw,
                    end_second: k,
                }
                .to_string(),
                labels,
            }
        })
        .collect()
}

/// A brute-force F1 over label sets, independent of the metrics module.
pub fn oracle_row_f1(pred: &BTreeSet<String>, truth: &BTreeSet<String>) -> f64 {
    let tp = pred.intersection(truth).count() as f64;
    2.0 * tp / (pred.len() + truth.len()) as f64
}
