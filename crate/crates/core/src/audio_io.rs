//! WAV decoding and band-limited resampling.
//!
//! Everything downstream works on mono `f64` buffers at [`CANONICAL_SAMPLE_RATE`].
//! Integer PCM is scaled by `1 / 2^(bits-1)` so that the most negative code maps
//! to exactly `-1.0`.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

/// Sample rate every pipeline stage expects after canonicalization.
pub const CANONICAL_SAMPLE_RATE: u32 = 32_000;

/// Half-width of the resampling kernel in input samples (64 taps total).
const SINC_HALF_TAPS: usize = 32;
/// Kaiser shape parameter for the resampling window.
const KAISER_BETA: f64 = 8.6;
/// Largest polyphase table built; coprime rate pairs beyond this evaluate the
/// kernel per tap.
const MAX_PHASES: usize = 8192;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt audio file: {0}")]
    CorruptFile(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// A decoded mono recording.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    /// Builds a clip, rejecting a zero sample rate and non-finite samples.
    pub fn new(clip_id: impl Into<String>, samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidClip(
                "sample rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidClip(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Decodes a PCM WAV file (16/24/32-bit integer or 32-bit float) into a mono clip
/// at the file's native rate. The clip id is the file stem.
pub fn decode(path: &Path) -> Result<AudioClip> {
    let clip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let reader = hound::WavReader::new(file).map_err(map_hound_error)?;
    decode_reader(clip_id, reader)
}

/// Decodes WAV bytes already in memory.
pub fn decode_bytes(clip_id: impl Into<String>, bytes: &[u8]) -> Result<AudioClip> {
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(map_hound_error)?;
    decode_reader(clip_id.into(), reader)
}

fn decode_reader<R: std::io::Read>(
    clip_id: String,
    reader: hound::WavReader<R>,
) -> Result<AudioClip> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::CorruptFile("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound_error)?,
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(map_hound_error)?
        }
        (format, bits) => {
            return Err(AudioError::UnsupportedFormat(format!(
                "{bits}-bit {format:?} samples"
            )))
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::CorruptFile("partial trailing frame".into()));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    AudioClip::new(clip_id, samples, spec.sample_rate)
}

/// Read failures on an already opened source mean the stream ended early or
/// is malformed, so they surface as `CorruptFile`.
fn map_hound_error(err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) => AudioError::CorruptFile(e.to_string()),
        hound::Error::FormatError(msg) => AudioError::CorruptFile(msg.to_string()),
        hound::Error::TooWide | hound::Error::Unsupported | hound::Error::InvalidSampleFormat => {
            AudioError::UnsupportedFormat(err.to_string())
        }
        other => AudioError::CorruptFile(other.to_string()),
    }
}

fn map_write_error(err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) => AudioError::Io(e),
        other => AudioError::UnsupportedFormat(other.to_string()),
    }
}

/// Sample encodings supported by [`encode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Pcm24,
    Float32,
}

/// Writes a mono clip as a WAV file. Integer encodings clamp to the
/// representable range.
pub fn encode(clip: &AudioClip, path: &Path, encoding: WavEncoding) -> Result<()> {
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Pcm24 => (24, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_write_error)?;
    match encoding {
        WavEncoding::Float32 => {
            for &s in &clip.samples {
                writer.write_sample(s as f32).map_err(map_write_error)?;
            }
        }
        WavEncoding::Pcm16 | WavEncoding::Pcm24 => {
            let full = (1i64 << (bits - 1)) as f64;
            for &s in &clip.samples {
                let v = (s * full).round().clamp(-full, full - 1.0) as i32;
                writer.write_sample(v).map_err(map_write_error)?;
            }
        }
    }
    writer.finalize().map_err(map_write_error)
}

/// Resamples with a 64-tap Kaiser-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`. When downsampling the
/// kernel cutoff is lowered to the target Nyquist frequency. A clip already at
/// the target rate is returned unchanged.
pub fn resample(clip: &AudioClip, target_hz: u32) -> Result<AudioClip> {
    if target_hz == 0 {
        return Err(AudioError::InvalidClip(
            "target rate must be positive".into(),
        ));
    }
    let source_hz = clip.sample_rate_hz;
    if source_hz == target_hz {
        return Ok(clip.clone());
    }
    let input = &clip.samples;
    let out_len = ((input.len() as u128 * target_hz as u128 + source_hz as u128 / 2)
        / source_hz as u128) as usize;
    // Cutoff relative to the input Nyquist.
    let cutoff = (target_hz as f64 / source_hz as f64).min(1.0);
    let half_width = SINC_HALF_TAPS as f64 / cutoff;
    let reach = half_width.ceil() as i64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let tap = |t: f64| cutoff * sinc(cutoff * t) * kaiser(t / half_width, i0_beta);

    // Output n sits at input position n*source/target = q + r/target. The
    // fractional part only takes target/gcd distinct values, so the kernel is
    // tabulated once per phase.
    let g = gcd(source_hz as u64, target_hz as u64);
    let phases = (target_hz as u64 / g) as usize;
    let table: Option<Vec<Vec<f64>>> = (phases <= MAX_PHASES).then(|| {
        (0..phases)
            .map(|p| {
                let frac = (p as u64 * g) as f64 / target_hz as f64;
                (-reach..=reach + 1).map(|j| tap(j as f64 - frac)).collect()
            })
            .collect()
    });

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * source_hz as u64;
        let q = (pos / target_hz as u64) as i64;
        let r = pos % target_hz as u64;
        let lo = (q - reach).max(0);
        let hi = (q + reach + 1).min(input.len() as i64 - 1);
        let mut acc = 0.0;
        let mut norm = 0.0;
        let mut i = lo;
        while i <= hi {
            let w = match &table {
                Some(t) => t[(r / g) as usize][(i - q + reach) as usize],
                None => tap(i as f64 - (q as f64 + r as f64 / target_hz as f64)),
            };
            acc += w * input[i as usize];
            norm += w;
            i += 1;
        }
        // Normalizing by the tap sum keeps DC gain at exactly one, including at
        // the clip edges where the kernel is truncated.
        out.push(if norm.abs() > 1e-12 { acc / norm } else { 0.0 });
    }
    AudioClip::new(clip.clip_id.clone(), out, target_hz)
}

/// Convenience: resample to [`CANONICAL_SAMPLE_RATE`].
pub fn canonicalize(clip: &AudioClip) -> Result<AudioClip> {
    resample(clip, CANONICAL_SAMPLE_RATE)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn kaiser(x: f64, i0_beta: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / i0_beta
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half_sq = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= half_sq / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(
        spec: hound::WavSpec,
        write: impl FnOnce(&mut hound::WavWriter<std::io::Cursor<&mut Vec<u8>>>),
    ) -> Vec<u8> {
        let mut buf = Vec::new();
        {
            let mut w = hound::WavWriter::new(std::io::Cursor::new(&mut buf), spec).unwrap();
            write(&mut w);
            w.finalize().unwrap();
        }
        buf
    }

    fn int_spec(channels: u16, bits: u16) -> hound::WavSpec {
        hound::WavSpec {
            channels,
            sample_rate: 32_000,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        }
    }

    #[test]
    fn silent_16bit_decodes_to_zeros() {
        let bytes = wav_bytes(int_spec(1, 16), |w| {
            for _ in 0..32_000 {
                w.write_sample(0i16).unwrap();
            }
        });
        let clip = decode_bytes("s", &bytes).unwrap();
        assert_eq!(clip.len(), 32_000);
        assert_eq!(clip.sample_rate_hz(), 32_000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_is_averaged_to_mono() {
        let bytes = wav_bytes(int_spec(2, 16), |w| {
            for _ in 0..100 {
                w.write_sample(16384i16).unwrap();
                w.write_sample(-16384i16).unwrap();
            }
        });
        let clip = decode_bytes("st", &bytes).unwrap();
        assert_eq!(clip.len(), 100);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn most_negative_16bit_code_is_minus_one() {
        let bytes = wav_bytes(int_spec(1, 16), |w| {
            w.write_sample(i16::MIN).unwrap();
            w.write_sample(i16::MAX).unwrap();
        });
        let clip = decode_bytes("m", &bytes).unwrap();
        assert_eq!(clip.samples()[0], -32768.0 / 32768.0);
        assert_eq!(clip.samples()[1], 32767.0 / 32768.0);
    }

    #[test]
    fn decodes_24bit() {
        let bytes = wav_bytes(int_spec(1, 24), |w| {
            w.write_sample(-(1i32 << 23)).unwrap();
            w.write_sample(1i32 << 22).unwrap();
        });
        let clip = decode_bytes("m", &bytes).unwrap();
        assert_eq!(clip.samples(), &[-1.0, 0.5]);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(matches!(
            decode_bytes("x", b"OggS not a wav file at all"),
            Err(AudioError::CorruptFile(_)) | Err(AudioError::UnsupportedFormat(_))
        ));
        let bytes = wav_bytes(int_spec(1, 16), |w| {
            for _ in 0..1000 {
                w.write_sample(7i16).unwrap();
            }
        });
        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            decode_bytes("t", truncated),
            Err(AudioError::CorruptFile(_))
        ));
    }

    #[test]
    fn rejects_8bit() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let bytes = wav_bytes(spec, |w| w.write_sample(3i8).unwrap());
        assert!(matches!(
            decode_bytes("b", &bytes),
            Err(AudioError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let samples: Vec<f64> = (0..500)
            .map(|i| ((i as f64) * 0.37).sin() as f32 as f64)
            .collect();
        let clip = AudioClip::new("f", samples.clone(), 22_050).unwrap();
        encode(&clip, &path, WavEncoding::Float32).unwrap();
        let back = decode(&path).unwrap();
        assert_eq!(back.clip_id, "f");
        assert_eq!(back.sample_rate_hz(), 22_050);
        assert_eq!(back.samples(), samples.as_slice());
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(AudioClip::new("n", vec![0.0, f64::NAN], 100).is_err());
        assert!(AudioClip::new("n", vec![0.0], 0).is_err());
    }

    #[test]
    fn resample_lengths() {
        let clip = AudioClip::new("r", vec![0.1; 48_000], 48_000).unwrap();
        assert_eq!(resample(&clip, 32_000).unwrap().len(), 32_000);
        let clip = AudioClip::new("r", vec![0.1; 1001], 44_100).unwrap();
        // 1001 * 32000 / 44100 = 726.35
        assert_eq!(resample(&clip, 32_000).unwrap().len(), 726);
    }

    #[test]
    fn resample_identity_when_rates_match() {
        let clip = AudioClip::new("r", vec![0.1, -0.3, 0.7], 32_000).unwrap();
        assert_eq!(resample(&clip, 32_000).unwrap(), clip);
    }

    #[test]
    fn resample_preserves_dc() {
        let clip = AudioClip::new("r", vec![0.25; 4_800], 48_000).unwrap();
        let out = resample(&clip, 32_000).unwrap();
        for &s in out.samples() {
            assert!((s - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn kaiser_bessel_reference_value() {
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-14);
    }
}
