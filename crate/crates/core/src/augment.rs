//! Spectrogram augmentation chain.
//!
//! Stages run in a fixed order: mixing, random power, white noise, pink noise,
//! bandpass noise, upper-frequency attenuation. Each stage fires independently
//! with its own probability. Additive stages work in linear power, where the
//! dB spectrogram maps to `10^(v/10)` (max entry 1), and re-reference the result
//! so its maximum is again 0 dB.

use std::collections::BTreeSet;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::spectro::{mel_center_frequencies, MelSpectrogram};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("spectrogram shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("mixing needs 2 or 3 inputs with matching weights, got {0}")]
    MixArity(usize),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kv(#[from] KvError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// A spectrogram with its (hard) multi-label target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSpectrogram {
    pub spec: MelSpectrogram,
    pub labels: BTreeSet<String>,
}

impl LabeledSpectrogram {
    pub fn new<I, S>(spec: MelSpectrogram, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            spec,
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub mix_probability: f64,
    pub power_probability: f64,
    pub white_noise_probability: f64,
    pub pink_noise_probability: f64,
    pub bandpass_noise_probability: f64,
    pub upper_attenuation_probability: f64,
    /// Exponent range for random power.
    pub random_power_range: (f64, f64),
    pub white_noise_snr_db: (f64, f64),
    pub pink_noise_snr_db: (f64, f64),
    pub bandpass_noise_snr_db: (f64, f64),
    /// Width of the bandpass noise band, in mel bins.
    pub bandpass_width_bins: (usize, usize),
    /// Where the attenuation ramp starts, as a fraction of `n_mels`.
    pub upper_cutoff_fraction: (f64, f64),
    pub upper_attenuation_db: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mix_probability: 0.7,
            power_probability: 0.5,
            white_noise_probability: 0.5,
            pink_noise_probability: 0.5,
            bandpass_noise_probability: 0.5,
            upper_attenuation_probability: 0.5,
            random_power_range: (0.5, 3.0),
            white_noise_snr_db: (3.0, 30.0),
            pink_noise_snr_db: (3.0, 30.0),
            bandpass_noise_snr_db: (3.0, 30.0),
            bandpass_width_bins: (4, 32),
            upper_cutoff_fraction: (0.5, 0.9),
            upper_attenuation_db: (5.0, 30.0),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every stage disabled.
    pub fn disabled() -> Self {
        Self {
            mix_probability: 0.0,
            power_probability: 0.0,
            white_noise_probability: 0.0,
            pink_noise_probability: 0.0,
            bandpass_noise_probability: 0.0,
            upper_attenuation_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AugmentError::InvalidConfig(m));
        for (name, p) in [
            ("mix_probability", self.mix_probability),
            ("power_probability", self.power_probability),
            ("white_noise_probability", self.white_noise_probability),
            ("pink_noise_probability", self.pink_noise_probability),
            (
                "bandpass_noise_probability",
                self.bandpass_noise_probability,
            ),
            (
                "upper_attenuation_probability",
                self.upper_attenuation_probability,
            ),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        for (name, (lo, hi)) in [
            ("random_power_range", self.random_power_range),
            ("white_noise_snr_db", self.white_noise_snr_db),
            ("pink_noise_snr_db", self.pink_noise_snr_db),
            ("bandpass_noise_snr_db", self.bandpass_noise_snr_db),
            ("upper_cutoff_fraction", self.upper_cutoff_fraction),
            ("upper_attenuation_db", self.upper_attenuation_db),
        ] {
            if !(lo <= hi) {
                return bad(format!("{name} is empty"));
            }
        }
        if !(self.random_power_range.0 > 0.0) {
            return bad("random power exponents must be positive".into());
        }
        let (w_lo, w_hi) = self.bandpass_width_bins;
        if w_lo == 0 || w_lo > w_hi {
            return bad("bandpass_width_bins must be a non-empty range of positive widths".into());
        }
        let (c_lo, c_hi) = self.upper_cutoff_fraction;
        if c_lo < 0.0 || c_hi > 1.0 {
            return bad("upper_cutoff_fraction must lie in [0, 1]".into());
        }
        if self.upper_attenuation_db.0 < 0.0 {
            return bad("upper_attenuation_db must be non-negative".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        let pair = |(a, b): (f64, f64)| format!("{a},{b}");
        kv.insert("mix_probability", self.mix_probability);
        kv.insert("power_probability", self.power_probability);
        kv.insert("white_noise_probability", self.white_noise_probability);
        kv.insert("pink_noise_probability", self.pink_noise_probability);
        kv.insert(
            "bandpass_noise_probability",
            self.bandpass_noise_probability,
        );
        kv.insert(
            "upper_attenuation_probability",
            self.upper_attenuation_probability,
        );
        kv.insert("random_power_range", pair(self.random_power_range));
        kv.insert("white_noise_snr_db", pair(self.white_noise_snr_db));
        kv.insert("pink_noise_snr_db", pair(self.pink_noise_snr_db));
        kv.insert("bandpass_noise_snr_db", pair(self.bandpass_noise_snr_db));
        kv.insert(
            "bandpass_width_bins",
            format!(
                "{},{}",
                self.bandpass_width_bins.0, self.bandpass_width_bins.1
            ),
        );
        kv.insert("upper_cutoff_fraction", pair(self.upper_cutoff_fraction));
        kv.insert("upper_attenuation_db", pair(self.upper_attenuation_db));
        kv.insert("seed", self.seed);
        kv
    }

    /// Applies every recognized key from `kv`; unknown keys are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv, "")?;
        kv.reject_unknown(|k| KEYS.contains(&k))?;
        Ok(c)
    }

    /// Applies keys named `{prefix}{field}` and ignores everything else.
    pub fn apply_kv(&mut self, kv: &KvMap, prefix: &str) -> Result<()> {
        let k = |name: &str| format!("{prefix}{name}");
        kv.read(&k("mix_probability"), &mut self.mix_probability)?;
        kv.read(&k("power_probability"), &mut self.power_probability)?;
        kv.read(
            &k("white_noise_probability"),
            &mut self.white_noise_probability,
        )?;
        kv.read(
            &k("pink_noise_probability"),
            &mut self.pink_noise_probability,
        )?;
        kv.read(
            &k("bandpass_noise_probability"),
            &mut self.bandpass_noise_probability,
        )?;
        kv.read(
            &k("upper_attenuation_probability"),
            &mut self.upper_attenuation_probability,
        )?;
        kv.read_pair(&k("random_power_range"), &mut self.random_power_range)?;
        kv.read_pair(&k("white_noise_snr_db"), &mut self.white_noise_snr_db)?;
        kv.read_pair(&k("pink_noise_snr_db"), &mut self.pink_noise_snr_db)?;
        kv.read_pair(&k("bandpass_noise_snr_db"), &mut self.bandpass_noise_snr_db)?;
        kv.read_pair(&k("bandpass_width_bins"), &mut self.bandpass_width_bins)?;
        kv.read_pair(&k("upper_cutoff_fraction"), &mut self.upper_cutoff_fraction)?;
        kv.read_pair(&k("upper_attenuation_db"), &mut self.upper_attenuation_db)?;
        kv.read(&k("seed"), &mut self.seed)?;
        self.validate()
    }
}

pub const KEYS: &[&str] = &[
    "mix_probability",
    "power_probability",
    "white_noise_probability",
    "pink_noise_probability",
    "bandpass_noise_probability",
    "upper_attenuation_probability",
    "random_power_range",
    "white_noise_snr_db",
    "pink_noise_snr_db",
    "bandpass_noise_snr_db",
    "bandpass_width_bins",
    "upper_cutoff_fraction",
    "upper_attenuation_db",
    "seed",
];

/// Indexed, deterministic source of mixing partners.
pub trait SpectrogramPool: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> &LabeledSpectrogram;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SpectrogramPool for [LabeledSpectrogram] {
    fn len(&self) -> usize {
        <[LabeledSpectrogram]>::len(self)
    }
    fn get(&self, index: usize) -> &LabeledSpectrogram {
        &self[index]
    }
}

impl SpectrogramPool for Vec<LabeledSpectrogram> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn get(&self, index: usize) -> &LabeledSpectrogram {
        &self[index]
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn db_to_power(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn power_to_db(p: f64, floor: f64) -> f64 {
    if p > 0.0 {
        (10.0 * p.log10()).max(floor)
    } else {
        floor
    }
}

/// Shifts the spectrogram down so its max is 0 dB (if it rose above) and clamps at the floor.
fn rereference(data: &mut Array2<f64>, floor: f64) {
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        data.mapv_inplace(|v| (v - max).max(floor));
    }
}

/// Pixel-wise convex combination in linear power with explicit weights.
/// The label set is the union of the inputs' labels.
pub fn mix_with_weights(
    samples: &[&LabeledSpectrogram],
    weights: &[f64],
) -> Result<LabeledSpectrogram> {
    if !(2..=3).contains(&samples.len()) || weights.len() != samples.len() {
        return Err(AugmentError::MixArity(samples.len()));
    }
    let first = samples[0];
    let shape = first.spec.data.dim();
    for s in &samples[1..] {
        if s.spec.data.dim() != shape {
            return Err(AugmentError::ShapeMismatch(shape, s.spec.data.dim()));
        }
    }
    let labels: BTreeSet<String> = samples
        .iter()
        .flat_map(|s| s.labels.iter().cloned())
        .collect();
    if let Some(i) = weights.iter().position(|&w| w == 1.0) {
        return Ok(LabeledSpectrogram {
            spec: samples[i].spec.clone(),
            labels,
        });
    }
    let floor = first.spec.config.log_floor_db;
    let mut power = Array2::<f64>::zeros(shape);
    for (s, &w) in samples.iter().zip(weights) {
        Zip::from(&mut power)
            .and(&s.spec.data)
            .for_each(|p, &v| *p += w * db_to_power(v));
    }
    let max = power.iter().copied().fold(0.0, f64::max);
    let data = if max > 0.0 {
        power.mapv(|p| power_to_db(p / max, floor))
    } else {
        Array2::from_elem(shape, floor)
    };
    Ok(LabeledSpectrogram {
        spec: MelSpectrogram {
            data,
            ..first.spec.clone()
        },
        labels,
    })
}

/// Mixes 2 or 3 spectrograms with Dirichlet(1, ..., 1) weights.
pub fn mix<R: Rng + ?Sized>(
    samples: &[&LabeledSpectrogram],
    rng: &mut R,
) -> Result<LabeledSpectrogram> {
    let draws: Vec<f64> = samples.iter().map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let weights: Vec<f64> = draws.iter().map(|d| d / total).collect();
    mix_with_weights(samples, &weights)
}

/// Raises the `[0, 1]`-rescaled spectrogram to `gamma` and maps it back.
pub fn apply_power(spec: &MelSpectrogram, gamma: f64) -> MelSpectrogram {
    let floor = spec.config.log_floor_db;
    let data = spec
        .data
        .mapv(|v| floor - floor * ((v - floor) / -floor).clamp(0.0, 1.0).powf(gamma));
    MelSpectrogram {
        data,
        ..spec.clone()
    }
}

pub fn random_power<R: Rng + ?Sized>(
    spec: &MelSpectrogram,
    rng: &mut R,
    range: (f64, f64),
) -> MelSpectrogram {
    apply_power(spec, uniform(rng, range))
}

/// Adds exponentially distributed noise power `profile[row] * N * Exp(1)`, where
/// the profile is normalized to mean 1 over the pixels it covers and `N` is the
/// mean input power divided by the linear SNR.
pub(crate) fn noisy_power<R: Rng + ?Sized>(
    power: &Array2<f64>,
    profile: &[f64],
    snr_db: f64,
    rng: &mut R,
) -> Array2<f64> {
    let active: Vec<usize> = (0..profile.len()).filter(|&r| profile[r] > 0.0).collect();
    if active.is_empty() {
        return power.clone();
    }
    let profile_mean = active.iter().map(|&r| profile[r]).sum::<f64>() / active.len() as f64;
    let signal_mean = power.mean().unwrap_or(0.0);
    let noise_mean = signal_mean / db_to_power(snr_db);
    let mut out = power.clone();
    for &r in &active {
        let level = noise_mean * profile[r] / profile_mean;
        for p in out.row_mut(r).iter_mut() {
            *p += level * rng.sample::<f64, _>(Exp1);
        }
    }
    out
}

fn add_noise<R: Rng + ?Sized>(
    spec: &MelSpectrogram,
    profile: &[f64],
    snr_db: f64,
    rng: &mut R,
) -> MelSpectrogram {
    let floor = spec.config.log_floor_db;
    let power = spec.data.mapv(db_to_power);
    let noisy = noisy_power(&power, profile, snr_db, rng);
    let mut data = spec.data.clone();
    for (r, &weight) in profile.iter().enumerate() {
        if weight > 0.0 {
            for (v, &p) in data.row_mut(r).iter_mut().zip(noisy.row(r)) {
                *v = power_to_db(p, floor);
            }
        }
    }
    rereference(&mut data, floor);
    MelSpectrogram {
        data,
        ..spec.clone()
    }
}

pub fn add_white_noise<R: Rng + ?Sized>(
    spec: &MelSpectrogram,
    rng: &mut R,
    snr_db: (f64, f64),
) -> MelSpectrogram {
    let snr = uniform(rng, snr_db);
    add_noise(spec, &vec![1.0; spec.n_mels()], snr, rng)
}

/// Noise with per-bin power proportional to `1 / center_frequency`.
pub fn add_pink_noise<R: Rng + ?Sized>(
    spec: &MelSpectrogram,
    rng: &mut R,
    snr_db: (f64, f64),
) -> MelSpectrogram {
    let snr = uniform(rng, snr_db);
    add_noise(spec, &pink_profile(spec), snr, rng)
}

fn pink_profile(spec: &MelSpectrogram) -> Vec<f64> {
    let config = crate::spectro::MelConfig {
        n_mels: spec.n_mels(),
        ..spec.config.clone()
    };
    let centers = mel_center_frequencies(&config);
    (0..centers.len())
        .map(|r| {
            let f = if r == 0 && centers.len() > 1 {
                centers[1]
            } else {
                centers[r]
            };
            1.0 / f
        })
        .collect()
}

/// White noise restricted to mel rows `low..=high`.
pub fn add_band_noise<R: Rng + ?Sized>(
    spec: &MelSpectrogram,
    rng: &mut R,
    low: usize,
    high: usize,
    snr_db: f64,
) -> MelSpectrogram {
    let profile: Vec<f64> = (0..spec.n_mels())
        .map(|r| if (low..=high).contains(&r) { 1.0 } else { 0.0 })
        .collect();
    add_noise(spec, &profile, snr_db, rng)
}

/// Band noise with a randomly placed band of random width.
pub fn add_bandpass_noise<R: Rng + ?Sized>(
    spec: &MelSpectrogram,
    rng: &mut R,
    width_bins: (usize, usize),
    snr_db: (f64, f64),
) -> MelSpectrogram {
    let n = spec.n_mels();
    let width = rng.random_range(width_bins.0..=width_bins.1).clamp(1, n);
    let low = rng.random_range(0..=n - width);
    let snr = uniform(rng, snr_db);
    add_band_noise(spec, rng, low, low + width - 1, snr)
}

/// Attenuates rows above `cutoff_bin` by a dB ramp that is 0 at the cutoff and
/// `attenuation_db` at the top row.
pub fn attenuate_upper(
    spec: &MelSpectrogram,
    cutoff_bin: usize,
    attenuation_db: f64,
) -> MelSpectrogram {
    let floor = spec.config.log_floor_db;
    let top = spec.n_mels().saturating_sub(1);
    let mut data = spec.data.clone();
    if attenuation_db != 0.0 && cutoff_bin < top {
        let span = (top - cutoff_bin) as f64;
        for r in cutoff_bin + 1..=top {
            let cut = attenuation_db * (r - cutoff_bin) as f64 / span;
            data.row_mut(r).mapv_inplace(|v| (v - cut).max(floor));
        }
    }
    MelSpectrogram {
        data,
        ..spec.clone()
    }
}

pub fn lower_upper_frequencies<R: Rng + ?Sized>(
    spec: &MelSpectrogram,
    rng: &mut R,
    cutoff_fraction: (f64, f64),
    attenuation_db: (f64, f64),
) -> MelSpectrogram {
    let fraction = uniform(rng, cutoff_fraction);
    let cutoff = ((fraction * spec.n_mels() as f64) as usize).min(spec.n_mels().saturating_sub(1));
    let attenuation = uniform(rng, attenuation_db);
    attenuate_upper(spec, cutoff, attenuation)
}

/// Runs the full chain on one sample.
pub fn augment_pipeline<P, R>(
    sample: &LabeledSpectrogram,
    pool: &P,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<LabeledSpectrogram>
where
    P: SpectrogramPool + ?Sized,
    R: Rng + ?Sized,
{
    let mut out = sample.clone();
    if !pool.is_empty() && rng.random_bool(config.mix_probability) {
        let partners = rng.random_range(1..=2);
        let picks: Vec<usize> = (0..partners)
            .map(|_| rng.random_range(0..pool.len()))
            .collect();
        let mut inputs = vec![sample];
        inputs.extend(picks.iter().map(|&i| pool.get(i)));
        out = mix(&inputs, rng)?;
    }
    if rng.random_bool(config.power_probability) {
        out.spec = random_power(&out.spec, rng, config.random_power_range);
    }
    if rng.random_bool(config.white_noise_probability) {
        out.spec = add_white_noise(&out.spec, rng, config.white_noise_snr_db);
    }
    if rng.random_bool(config.pink_noise_probability) {
        out.spec = add_pink_noise(&out.spec, rng, config.pink_noise_snr_db);
    }
    if rng.random_bool(config.bandpass_noise_probability) {
        out.spec = add_bandpass_noise(
            &out.spec,
            rng,
            config.bandpass_width_bins,
            config.bandpass_noise_snr_db,
        );
    }
    if rng.random_bool(config.upper_attenuation_probability) {
        out.spec = lower_upper_frequencies(
            &out.spec,
            rng,
            config.upper_cutoff_fraction,
            config.upper_attenuation_db,
        );
    }
    Ok(out)
}

/// Generator for sample `index`: the config seed selects the key and the index
/// selects the stream, so results do not depend on scheduling.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Augments every sample in parallel.
pub fn augment_batch<P>(
    samples: &[LabeledSpectrogram],
    pool: &P,
    config: &AugmentConfig,
) -> Result<Vec<LabeledSpectrogram>>
where
    P: SpectrogramPool + ?Sized,
{
    config.validate()?;
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| augment_pipeline(s, pool, config, &mut sample_rng(config.seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectro::MelConfig;

    fn spec(data: Array2<f64>) -> MelSpectrogram {
        MelSpectrogram {
            clip_id: "t".into(),
            start_offset_s: 0.0,
            config: MelConfig {
                n_mels: data.nrows(),
                ..MelConfig::default()
            },
            data,
        }
    }

    fn random_spec(seed: u64, rows: usize, cols: usize) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-80.0..0.0));
        data[[0, 0]] = 0.0;
        spec(data)
    }

    fn labeled(seed: u64, labels: &[&str]) -> LabeledSpectrogram {
        LabeledSpectrogram::new(random_spec(seed, 16, 20), labels.iter().copied())
    }

    fn in_bounds(s: &MelSpectrogram) -> bool {
        s.data
            .iter()
            .all(|&v| v.is_finite() && (-80.0..=0.0).contains(&v))
    }

    #[test]
    fn mixing_identical_inputs_is_identity() {
        let a = labeled(1, &["a"]);
        let out = mix_with_weights(&[&a, &a], &[0.3, 0.7]).unwrap();
        for (x, y) in out.spec.data.iter().zip(a.spec.data.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_weight_returns_first_input() {
        let a = labeled(1, &["a"]);
        let b = labeled(2, &["b", "c"]);
        let out = mix_with_weights(&[&a, &b], &[1.0, 0.0]).unwrap();
        assert_eq!(out.spec, a.spec);
        let want: BTreeSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(out.labels, want);
    }

    #[test]
    fn mix_rejects_bad_inputs() {
        let a = labeled(1, &["a"]);
        let small = LabeledSpectrogram::new(random_spec(3, 8, 20), ["b"]);
        assert!(matches!(
            mix_with_weights(&[&a, &small], &[0.5, 0.5]),
            Err(AugmentError::ShapeMismatch(..))
        ));
        assert!(matches!(
            mix_with_weights(&[&a], &[1.0]),
            Err(AugmentError::MixArity(1))
        ));
    }

    #[test]
    fn random_mix_stays_bounded() {
        let a = labeled(1, &["a"]);
        let b = labeled(2, &["b"]);
        let c = labeled(3, &["c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = mix(&[&a, &b, &c], &mut rng).unwrap();
        assert!(in_bounds(&out.spec));
        assert_eq!(
            out.spec
                .data
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
            0.0
        );
    }

    #[test]
    fn power_identity_and_square() {
        let s = random_spec(4, 8, 8);
        let same = apply_power(&s, 1.0);
        for (x, y) in same.data.iter().zip(s.data.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        // rescaled 0.5 is -40 dB; squared gives 0.25, i.e. -60 dB
        let half = spec(Array2::from_elem((1, 1), -40.0));
        assert!((apply_power(&half, 2.0).data[[0, 0]] + 60.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(in_bounds(&random_power(&s, &mut rng, (0.5, 3.0))));
    }

    #[test]
    fn zero_attenuation_is_identity() {
        let s = random_spec(5, 16, 10);
        assert_eq!(attenuate_upper(&s, 4, 0.0), s);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            lower_upper_frequencies(&s, &mut rng, (0.5, 0.9), (0.0, 0.0)),
            s
        );
    }

    #[test]
    fn attenuation_ramp_reaches_target_at_top() {
        let s = spec(Array2::from_elem((5, 2), -10.0));
        let out = attenuate_upper(&s, 1, 20.0);
        let col: Vec<f64> = out.data.column(0).to_vec();
        assert_eq!(
            col,
            vec![-10.0, -10.0, -10.0 - 20.0 / 3.0, -10.0 - 40.0 / 3.0, -30.0]
        );
    }

    #[test]
    fn band_noise_touches_only_its_row() {
        let mut data = Array2::from_elem((8, 50), -60.0);
        data[[0, 0]] = 0.0;
        let s = spec(data);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = add_band_noise(&s, &mut rng, 3, 3, 30.0);
        for r in 0..8 {
            let changed = out.data.row(r) != s.data.row(r);
            assert_eq!(changed, r == 3, "row {r}");
        }
    }

    #[test]
    fn white_noise_at_zero_snr_doubles_mean_power() {
        let power = Array2::from_elem((32, 400), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = noisy_power(&power, &[1.0; 32], 0.0, &mut rng);
        let ratio = noisy.mean().unwrap() / power.mean().unwrap();
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn pink_profile_decreases_with_frequency() {
        let s = random_spec(6, 16, 4);
        let p = pink_profile(&s);
        assert_eq!(p[0], p[1]);
        assert!(p[1..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn noise_stages_stay_bounded() {
        let s = random_spec(7, 16, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for out in [
            add_white_noise(&s, &mut rng, (3.0, 30.0)),
            add_pink_noise(&s, &mut rng, (3.0, 30.0)),
            add_bandpass_noise(&s, &mut rng, (4, 32), (3.0, 30.0)),
        ] {
            assert!(in_bounds(&out));
            assert_eq!(out.data.dim(), s.data.dim());
        }
    }

    #[test]
    fn pipeline_all_disabled_is_identity() {
        let a = labeled(1, &["a"]);
        let pool = vec![labeled(2, &["b"]), labeled(3, &["c"])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_pipeline(&a, &pool, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn pipeline_mixing_unions_labels() {
        let a = labeled(1, &["a"]);
        let pool = vec![labeled(2, &["b"]), labeled(3, &["c"]), labeled(4, &["d"])];
        let config = AugmentConfig {
            mix_probability: 1.0,
            ..AugmentConfig::disabled()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment_pipeline(&a, &pool, &config, &mut rng).unwrap();
            assert!(out.labels.len() >= 2);
            assert!(out.labels.contains("a"));
        }
    }

    #[test]
    fn batch_is_deterministic() {
        let samples: Vec<_> = (0..6).map(|i| labeled(i, &["x"])).collect();
        let config = AugmentConfig {
            seed: 17,
            ..AugmentConfig::default()
        };
        let a = augment_batch(&samples, &samples, &config).unwrap();
        let b = augment_batch(&samples, &samples, &config).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let c = pool.install(|| augment_batch(&samples, &samples, &config).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn config_kv_round_trip_and_validation() {
        let config = AugmentConfig {
            seed: 5,
            white_noise_snr_db: (1.0, 2.5),
            bandpass_width_bins: (2, 9),
            ..AugmentConfig::default()
        };
        assert_eq!(AugmentConfig::from_kv(&config.to_kv()).unwrap(), config);
        let bad = KvMap::parse("mix_probability = 1.5").unwrap();
        assert!(AugmentConfig::from_kv(&bad).is_err());
        let unknown = KvMap::parse("colour = red").unwrap();
        assert!(AugmentConfig::from_kv(&unknown).is_err());
    }
}
