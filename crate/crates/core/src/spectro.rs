//! Log-mel spectrograms, training-clip segmentation, the weak-signal filter and
//! stratified fold assignment.
//!
//! The STFT is centered: the signal is reflect-padded by `n_fft / 2` on both
//! sides so frame `t` is centered on sample `t * hop_length`. Power spectra are
//! projected onto a slaney-normalized triangular mel filterbank and converted
//! to decibels relative to the spectrogram's own maximum.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use realfft::{RealFftPlanner, RealToComplex};
use thiserror::Error;

use crate::audio_io::AudioClip;

const MELS_MAGIC: &[u8; 4] = b"MELS";
const MELS_VERSION: u32 = 1;
/// Frames computed per parallel task.
const FRAMES_PER_TASK: usize = 256;

#[derive(Debug, Error)]
pub enum SpectroError {
    #[error("invalid mel configuration: {0}")]
    InvalidConfig(String),
    #[error("mel filter {0} covers no FFT bin; reduce n_mels or raise n_fft")]
    DegenerateBand(usize),
    #[error("clip has no samples")]
    EmptyClip,
    #[error("clip sample rate {actual} Hz does not match configured {expected} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },
    #[error("malformed MELS data: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpectroError>;

/// Parameters of the log-mel transform.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub n_fft: usize,
    pub hop_length: usize,
    pub power_exponent: f64,
    pub log_floor_db: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 32_000,
            n_mels: 128,
            f_min_hz: 0.0,
            f_max_hz: 16_000.0,
            n_fft: 3200,
            hop_length: 80,
            power_exponent: 2.0,
            log_floor_db: -80.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SpectroError::InvalidConfig(msg.to_string()));
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        if self.n_fft < 2 {
            return bad("n_fft must be at least 2");
        }
        if self.hop_length == 0 || self.hop_length > self.n_fft {
            return bad("hop_length must be in 1..=n_fft");
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz) {
            return bad("need 0 <= f_min_hz < f_max_hz");
        }
        if self.f_max_hz > self.sample_rate_hz as f64 / 2.0 {
            return bad("f_max_hz exceeds the Nyquist frequency");
        }
        if !(self.power_exponent > 0.0) {
            return bad("power_exponent must be positive");
        }
        if !(self.log_floor_db < 0.0) {
            return bad("log_floor_db must be negative");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count of a centered STFT over `num_samples` samples.
    pub fn n_frames(&self, num_samples: usize) -> usize {
        1 + num_samples / self.hop_length
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop_length as f64
    }

    /// Index of the frame centered closest to `seconds`.
    pub fn frame_at(&self, seconds: f64) -> usize {
        (seconds * self.frames_per_second()).round() as usize
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies of the `n_mels` filters, evenly spaced on the mel scale.
pub fn mel_center_frequencies(config: &MelConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(config.f_min_hz);
    let mel_hi = hz_to_mel(config.f_max_hz);
    (1..=config.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect()
}

/// One triangular filter stored as its non-zero span.
#[derive(Debug, Clone)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Triangular mel filterbank, `n_mels x (n_fft/2 + 1)`, stored sparsely.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bins: usize,
    filters: Vec<MelFilter>,
    center_hz: Vec<f64>,
}

/// Builds the area-normalized triangular filterbank for `config`.
pub fn mel_filterbank(config: &MelConfig) -> Result<MelFilterbank> {
    config.validate()?;
    let n_bins = config.n_bins();
    let mel_lo = hz_to_mel(config.f_min_hz);
    let mel_hi = hz_to_mel(config.f_max_hz);
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate_hz as f64 / config.n_fft as f64;

    let mut filters = Vec::with_capacity(config.n_mels);
    for m in 0..config.n_mels {
        let (lower, center, upper) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (upper - lower);
        let mut first_bin = None;
        let mut weights = Vec::new();
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rising = (f - lower) / (center - lower);
            let falling = (upper - f) / (upper - center);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                first_bin.get_or_insert(k);
                weights.push(w * norm);
            } else if first_bin.is_some() {
                break;
            }
        }
        let Some(first_bin) = first_bin else {
            return Err(SpectroError::DegenerateBand(m));
        };
        filters.push(MelFilter { first_bin, weights });
    }
    Ok(MelFilterbank {
        n_bins,
        filters,
        center_hz: edges[1..=config.n_mels].to_vec(),
    })
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Center frequency of each filter in Hz.
    pub fn center_hz(&self) -> &[f64] {
        &self.center_hz
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_mels(), self.n_bins));
        for (m, f) in self.filters.iter().enumerate() {
            for (j, &w) in f.weights.iter().enumerate() {
                out[[m, f.first_bin + j]] = w;
            }
        }
        out
    }

    /// Projects one power spectrum onto the mel bands.
    pub fn project(&self, spectrum: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.filters) {
            *o = f
                .weights
                .iter()
                .zip(&spectrum[f.first_bin..f.first_bin + f.weights.len()])
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

/// Periodic Hann window of length `n` (the DFT-even form used for STFTs).
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m >= n as i64 {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// A log-mel spectrogram in dB, shaped `n_mels x n_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub clip_id: String,
    pub start_offset_s: f64,
    pub data: Array2<f64>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    /// Copies frames `start..start + len`, keeping the dB reference of the parent.
    pub fn slice_frames(&self, start: usize, len: usize) -> MelSpectrogram {
        let end = (start + len).min(self.n_frames());
        MelSpectrogram {
            clip_id: self.clip_id.clone(),
            start_offset_s: self.start_offset_s
                + start as f64 * self.config.hop_length as f64 / self.config.sample_rate_hz as f64,
            data: self.data.slice(s![.., start..end]).to_owned(),
            config: self.config.clone(),
        }
    }

    /// Values linearly rescaled from `[log_floor_db, 0]` to `[0, 1]`.
    pub fn unit_scaled(&self) -> Array2<f64> {
        let floor = self.config.log_floor_db;
        self.data.mapv(|v| ((v - floor) / -floor).clamp(0.0, 1.0))
    }
}

/// Linear mel power (before dB conversion), `n_mels x n_frames`.
pub fn mel_power(
    samples: &[f64],
    config: &MelConfig,
    filterbank: &MelFilterbank,
) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Err(SpectroError::EmptyClip);
    }
    let n_fft = config.n_fft;
    let hop = config.hop_length;
    let n_mels = filterbank.n_mels();
    let n_frames = config.n_frames(samples.len());
    let pad = (n_fft / 2) as i64;
    let window = hann_window(n_fft);
    let fft: Arc<dyn RealToComplex<f64>> = RealFftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let half_exponent = config.power_exponent / 2.0;

    let mut frame_major = vec![0.0; n_frames * n_mels];
    frame_major
        .par_chunks_mut(FRAMES_PER_TASK * n_mels)
        .enumerate()
        .for_each(|(task, chunk)| {
            let mut input = fft.make_input_vec();
            let mut spectrum = fft.make_output_vec();
            let mut scratch = fft.make_scratch_vec();
            let mut power = vec![0.0; spectrum.len()];
            for (j, out) in chunk.chunks_mut(n_mels).enumerate() {
                let t = task * FRAMES_PER_TASK + j;
                let origin = (t * hop) as i64 - pad;
                if origin >= 0 && origin as usize + n_fft <= samples.len() {
                    let src = &samples[origin as usize..origin as usize + n_fft];
                    for ((x, &s), &w) in input.iter_mut().zip(src).zip(&window) {
                        *x = s * w;
                    }
                } else {
                    for (i, (x, &w)) in input.iter_mut().zip(&window).enumerate() {
                        *x = samples[reflect_index(origin + i as i64, samples.len())] * w;
                    }
                }
                fft.process_with_scratch(&mut input, &mut spectrum, &mut scratch)
                    .expect("buffer sizes come from the plan");
                for (p, c) in power.iter_mut().zip(&spectrum) {
                    let sq = c.norm_sqr();
                    *p = if half_exponent == 1.0 {
                        sq
                    } else {
                        sq.powf(half_exponent)
                    };
                }
                filterbank.project(&power, out);
            }
        });
    let frame_major = Array2::from_shape_vec((n_frames, n_mels), frame_major)
        .expect("shape matches buffer length");
    Ok(frame_major
        .reversed_axes()
        .as_standard_layout()
        .into_owned())
}

/// `10 log10(x / max x)` clamped at `floor_db`. An all-zero input maps to the floor.
pub fn power_to_db(power: &Array2<f64>, floor_db: f64) -> Array2<f64> {
    let max = power.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Array2::from_elem(power.raw_dim(), floor_db);
    }
    power.mapv(|p| {
        if p > 0.0 {
            (10.0 * (p / max).log10()).max(floor_db)
        } else {
            floor_db
        }
    })
}

/// Computes the max-referenced log-mel spectrogram of a clip.
pub fn compute_logmel(clip: &AudioClip, config: &MelConfig) -> Result<MelSpectrogram> {
    let filterbank = mel_filterbank(config)?;
    compute_logmel_with(clip, config, &filterbank)
}

/// As [`compute_logmel`], reusing a prebuilt filterbank.
pub fn compute_logmel_with(
    clip: &AudioClip,
    config: &MelConfig,
    filterbank: &MelFilterbank,
) -> Result<MelSpectrogram> {
    if clip.sample_rate_hz() != config.sample_rate_hz {
        return Err(SpectroError::SampleRateMismatch {
            expected: config.sample_rate_hz,
            actual: clip.sample_rate_hz(),
        });
    }
    let power = mel_power(clip.samples(), config, filterbank)?;
    Ok(MelSpectrogram {
        clip_id: clip.clip_id.clone(),
        start_offset_s: 0.0,
        data: power_to_db(&power, config.log_floor_db),
        config: config.clone(),
    })
}

/// A fixed-length piece of a longer clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start_offset_s: f64,
    pub clip: AudioClip,
}

/// Cuts a clip into `window_s` segments every `stride_s` seconds.
///
/// When the strided grid does not end exactly at the clip end, one more
/// segment is right-aligned to the end. Clips shorter than the window yield a
/// single zero-padded segment.
pub fn segment(clip: &AudioClip, window_s: f64, stride_s: f64) -> Result<Vec<Segment>> {
    if !(window_s > 0.0 && stride_s > 0.0 && stride_s <= window_s) {
        return Err(SpectroError::InvalidConfig(
            "segmentation needs 0 < stride_s <= window_s".into(),
        ));
    }
    let sr = clip.sample_rate_hz();
    let window = (window_s * sr as f64).round() as usize;
    let stride = ((stride_s * sr as f64).round() as usize).max(1);
    let samples = clip.samples();
    let make = |start: usize| {
        let mut buf = vec![0.0; window];
        let end = (start + window).min(samples.len());
        buf[..end - start].copy_from_slice(&samples[start..end]);
        Segment {
            start_offset_s: start as f64 / sr as f64,
            clip: AudioClip::new(clip.clip_id.clone(), buf, sr).expect("samples already validated"),
        }
    };
    if samples.len() <= window {
        return Ok(vec![make(0)]);
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= samples.len() {
        out.push(make(start));
        start += stride;
    }
    let last_end = out.last().map_or(0, |s| {
        (s.start_offset_s * sr as f64).round() as usize + window
    });
    if last_end < samples.len() {
        out.push(make(samples.len() - window));
    }
    Ok(out)
}

/// Minimum max/mean levels on the `[0, 1]`-rescaled spectrogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalQualityThresholds {
    pub min_max_value: f64,
    pub min_mean_value: f64,
}

impl Default for SignalQualityThresholds {
    fn default() -> Self {
        Self {
            min_max_value: 0.15,
            min_mean_value: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalDecision {
    Keep,
    Discard,
}

impl SignalDecision {
    pub fn is_kept(self) -> bool {
        self == SignalDecision::Keep
    }
}

/// Discards spectrograms whose rescaled max or mean falls below the thresholds.
pub fn weak_signal_filter(spec: &MelSpectrogram, t: &SignalQualityThresholds) -> SignalDecision {
    let scaled = spec.unit_scaled();
    let max = scaled.iter().copied().fold(0.0, f64::max);
    let mean = scaled.mean().unwrap_or(0.0);
    if max < t.min_max_value || mean < t.min_mean_value {
        SignalDecision::Discard
    } else {
        SignalDecision::Keep
    }
}

/// Assigns each sample to one of `k` folds so every class is spread evenly.
///
/// Within a class, samples are shuffled with a seeded generator and dealt
/// round-robin; the deal position carries over between classes so fold sizes
/// also stay balanced overall. Classes are visited in sorted order, making the
/// result independent of hash ordering.
pub fn assign_stratified_folds<L: Ord>(labels: &[L], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(SpectroError::InvalidConfig("need at least 2 folds".into()));
    }
    if labels.is_empty() {
        return Err(SpectroError::InvalidConfig("no samples to split".into()));
    }
    let mut by_class: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for indices in by_class.values_mut() {
        indices.shuffle(&mut rng);
        for &i in indices.iter() {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

/// Writes the binary MELS container (little-endian, f32 payload, row-major).
pub fn write_mels<W: Write>(spec: &MelSpectrogram, mut w: W) -> Result<()> {
    w.write_all(MELS_MAGIC)?;
    w.write_all(&MELS_VERSION.to_le_bytes())?;
    w.write_all(&(spec.n_mels() as u32).to_le_bytes())?;
    w.write_all(&(spec.n_frames() as u32).to_le_bytes())?;
    w.write_all(&spec.start_offset_s.to_le_bytes())?;
    let mut buf = Vec::with_capacity(spec.data.len() * 4);
    for &v in spec.data.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a MELS container. The file carries no transform parameters, so the
/// default [`MelConfig`] is attached with `n_mels` taken from the header.
pub fn read_mels<R: Read>(clip_id: impl Into<String>, mut r: R) -> Result<MelSpectrogram> {
    let mut header = [0u8; 24];
    r.read_exact(&mut header)
        .map_err(|_| SpectroError::Format("truncated header".into()))?;
    if &header[..4] != MELS_MAGIC {
        return Err(SpectroError::Format("bad magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != MELS_VERSION {
        return Err(SpectroError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let n_mels = u32_at(8) as usize;
    let n_frames = u32_at(12) as usize;
    let start_offset_s = f64::from_le_bytes(header[16..24].try_into().unwrap());
    let mut payload = vec![0u8; n_mels * n_frames * 4];
    r.read_exact(&mut payload)
        .map_err(|_| SpectroError::Format("truncated payload".into()))?;
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let data = Array2::from_shape_vec((n_mels, n_frames), values)
        .map_err(|e| SpectroError::Format(e.to_string()))?;
    Ok(MelSpectrogram {
        clip_id: clip_id.into(),
        start_offset_s,
        data,
        config: MelConfig {
            n_mels,
            ..MelConfig::default()
        },
    })
}

/// Debug export: one line per mel bin, frames as columns.
pub fn write_mels_csv<W: Write>(spec: &MelSpectrogram, mut w: W) -> Result<()> {
    for row in spec.data.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}
