//! Per-second class probabilities from 5-second windows.
//!
//! A clip's spectrogram is computed once and cut into windows by frame index.
//! Window `k` covers `[k - 5, k]` seconds; windows advance one second at a time.
//! Several scorers can be blended with simplex weights, and the weights can be
//! searched against a validation objective.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::audio_io::AudioClip;
use crate::augment::LabeledSpectrogram;
use crate::optim::{sigmoid, softplus, CosineSchedule};
use crate::spectro::{self, MelConfig, MelSpectrogram, SpectroError};

pub const NOCALL: &str = "nocall";

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("clip lasts {duration_s:.3} s, shorter than the {window_s} s window")]
    ClipTooShort { duration_s: f64, window_s: u32 },
    #[error("streams are not aligned: {0}")]
    Misaligned(String),
    #[error("invalid ensemble weights: {0}")]
    InvalidWeights(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("label `{0}` is not in the vocabulary")]
    UnknownLabel(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("malformed scorer model: {0}")]
    Model(String),
    #[error(transparent)]
    Spectro(#[from] SpectroError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScoringError>;

/// Ordered species identifiers. `nocall` is never a member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassVocabulary {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l == NOCALL {
                return Err(ScoringError::Vocabulary(
                    "`nocall` cannot be a class".into(),
                ));
            }
            if l.is_empty() || l.contains(char::is_whitespace) || l.contains(',') {
                return Err(ScoringError::Vocabulary(format!("invalid label `{l}`")));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(ScoringError::Vocabulary(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// Class probabilities for the window ending at `end_second`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameProbabilities {
    pub clip_id: String,
    pub end_second: u32,
    pub probs: Vec<f64>,
}

/// Groups frames by clip, preserving order within each clip.
pub fn group_by_clip(frames: &[FrameProbabilities]) -> BTreeMap<&str, Vec<&FrameProbabilities>> {
    let mut out: BTreeMap<&str, Vec<&FrameProbabilities>> = BTreeMap::new();
    for f in frames {
        out.entry(f.clip_id.as_str()).or_default().push(f);
    }
    out
}

/// Anything that maps one 5-second window to per-class probabilities.
pub trait Scorer: Sync {
    fn vocabulary(&self) -> &ClassVocabulary;
    fn score(&self, window: &MelSpectrogram) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub window_s: u32,
    pub stride_s: u32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_s: 5,
            stride_s: 1,
        }
    }
}

/// End seconds `window, window + stride, ...` up to the clip duration.
pub fn window_end_seconds(duration_s: f64, w: &WindowConfig) -> Vec<u32> {
    let last = duration_s.floor() as u32;
    if last < w.window_s {
        return Vec::new();
    }
    (w.window_s..=last)
        .step_by(w.stride_s.max(1) as usize)
        .collect()
}

/// Scores every window of a precomputed clip spectrogram.
pub fn score_spectrogram<S: Scorer + ?Sized>(
    spec: &MelSpectrogram,
    duration_s: f64,
    scorer: &S,
    w: &WindowConfig,
) -> Result<Vec<FrameProbabilities>> {
    let ends = window_end_seconds(duration_s, w);
    if ends.is_empty() {
        return Err(ScoringError::ClipTooShort {
            duration_s,
            window_s: w.window_s,
        });
    }
    let window_frames = spec.config.frame_at(w.window_s as f64);
    Ok(ends
        .par_iter()
        .map(|&k| {
            let start = spec.config.frame_at((k - w.window_s) as f64);
            let window = spec.slice_frames(start, window_frames);
            FrameProbabilities {
                clip_id: spec.clip_id.clone(),
                end_second: k,
                probs: scorer.score(&window),
            }
        })
        .collect())
}

/// Computes the clip spectrogram once and scores windows at `w.stride_s`.
pub fn sliding_window_inference<S: Scorer + ?Sized>(
    clip: &AudioClip,
    scorer: &S,
    mel: &MelConfig,
    w: &WindowConfig,
) -> Result<Vec<FrameProbabilities>> {
    let duration_s = clip.duration_s();
    if duration_s < w.window_s as f64 {
        return Err(ScoringError::ClipTooShort {
            duration_s,
            window_s: w.window_s,
        });
    }
    let spec = spectro::compute_logmel(clip, mel)?;
    score_spectrogram(&spec, duration_s, scorer, w)
}

/// Non-negative blend weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(ScoringError::InvalidWeights("no weights".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ScoringError::InvalidWeights(
                "weights must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ScoringError::InvalidWeights(format!(
                "weights sum to {sum}, not 1"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Weighted per-frame average of aligned streams.
pub fn ensemble_average(
    streams: &[Vec<FrameProbabilities>],
    weights: &EnsembleWeights,
) -> Result<Vec<FrameProbabilities>> {
    let w = weights.as_slice();
    if streams.len() != w.len() {
        return Err(ScoringError::Misaligned(format!(
            "{} streams but {} weights",
            streams.len(),
            w.len()
        )));
    }
    let first = &streams[0];
    for (s, stream) in streams.iter().enumerate().skip(1) {
        if stream.len() != first.len() {
            return Err(ScoringError::Misaligned(format!(
                "stream {s} has a different length"
            )));
        }
        for (a, b) in first.iter().zip(stream) {
            if a.clip_id != b.clip_id
                || a.end_second != b.end_second
                || a.probs.len() != b.probs.len()
            {
                return Err(ScoringError::Misaligned(format!(
                    "stream {s} differs at ({}, {})",
                    a.clip_id, a.end_second
                )));
            }
        }
    }
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let mut probs = vec![0.0; frame.probs.len()];
            for (stream, &wi) in streams.iter().zip(w) {
                for (p, q) in probs.iter_mut().zip(&stream[i].probs) {
                    *p += wi * q;
                }
            }
            for p in &mut probs {
                *p = p.clamp(0.0, 1.0);
            }
            FrameProbabilities {
                clip_id: frame.clip_id.clone(),
                end_second: frame.end_second,
                probs,
            }
        })
        .collect())
}

const WEIGHT_GRID_STEPS: usize = 20;
const MAX_ASCENT_PASSES: usize = 50;

/// Sets coordinate `i` to `value` and rescales the others to keep the sum at one.
fn with_coordinate(w: &[f64], i: usize, value: f64) -> Vec<f64> {
    let rest: f64 = w
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, x)| x)
        .sum();
    let others = (w.len() - 1) as f64;
    let mut out: Vec<f64> = w
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            if j == i {
                value
            } else if rest > 0.0 {
                x * (1.0 - value) / rest
            } else {
                (1.0 - value) / others
            }
        })
        .collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    out
}

/// Coordinate ascent over the weight simplex from the uniform point.
///
/// Each coordinate is tried at every multiple of 0.05 with the rest rescaled;
/// only strict improvements are accepted, so ties keep the earlier candidate.
pub fn optimize_ensemble_weights<F>(
    streams: &[Vec<FrameProbabilities>],
    objective: F,
) -> Result<EnsembleWeights>
where
    F: Fn(&[FrameProbabilities]) -> f64,
{
    let m = streams.len();
    if m == 0 {
        return Err(ScoringError::InvalidWeights("no streams".into()));
    }
    if m == 1 {
        return Ok(EnsembleWeights(vec![1.0]));
    }
    let eval = |w: &[f64]| -> Result<f64> {
        Ok(objective(&ensemble_average(
            streams,
            &EnsembleWeights(w.to_vec()),
        )?))
    };
    let mut weights = vec![1.0 / m as f64; m];
    let mut best = eval(&weights)?;
    for _ in 0..MAX_ASCENT_PASSES {
        let mut improved = false;
        for i in 0..m {
            for g in 0..=WEIGHT_GRID_STEPS {
                let candidate = with_coordinate(&weights, i, g as f64 / WEIGHT_GRID_STEPS as f64);
                if candidate == weights {
                    continue;
                }
                let value = eval(&candidate)?;
                if value > best {
                    best = value;
                    weights = candidate;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(EnsembleWeights(weights))
}

/// Per-mel-bin mean over time.
pub fn mean_pooled_features(spec: &MelSpectrogram) -> Vec<f64> {
    spec.data
        .mean_axis(Axis(1))
        .map(|a| a.to_vec())
        .unwrap_or_else(|| vec![0.0; spec.n_mels()])
}

/// Independent per-class logistic models over standardized mean-pooled mel features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMelScorer {
    vocab: ClassVocabulary,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    /// `n_classes x n_features`
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl LinearMelScorer {
    pub fn new(
        vocab: ClassVocabulary,
        feature_mean: Vec<f64>,
        feature_std: Vec<f64>,
        weights: Array2<f64>,
        bias: Array1<f64>,
    ) -> Result<Self> {
        let (c, f) = weights.dim();
        if c != vocab.len() || bias.len() != c || feature_mean.len() != f || feature_std.len() != f
        {
            return Err(ScoringError::Model("parameter shapes disagree".into()));
        }
        if feature_std.iter().any(|s| !(*s > 0.0)) {
            return Err(ScoringError::Model("feature std must be positive".into()));
        }
        Ok(Self {
            vocab,
            feature_mean,
            feature_std,
            weights,
            bias,
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    fn standardize(&self, raw: &[f64]) -> Array1<f64> {
        raw.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    /// Class logits for already pooled (unstandardized) features.
    pub fn logits(&self, pooled: &[f64]) -> Array1<f64> {
        self.weights.dot(&self.standardize(pooled)) + &self.bias
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &mut dyn Iterator<Item = f64>| {
            v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
        };
        let mut out = String::new();
        writeln!(out, "linear-mel-scorer 1").unwrap();
        writeln!(out, "labels {}", self.vocab.labels().join(" ")).unwrap();
        writeln!(out, "mean {}", join(&mut self.feature_mean.iter().copied())).unwrap();
        writeln!(out, "std {}", join(&mut self.feature_std.iter().copied())).unwrap();
        writeln!(out, "bias {}", join(&mut self.bias.iter().copied())).unwrap();
        for row in self.weights.rows() {
            writeln!(out, "weights {}", join(&mut row.iter().copied())).unwrap();
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let bad = |m: &str| ScoringError::Model(m.to_string());
        let mut lines = std::io::BufReader::new(r).lines();
        let header = lines.next().transpose()?.ok_or_else(|| bad("empty file"))?;
        if header.trim() != "linear-mel-scorer 1" {
            return Err(bad("unrecognized header"));
        }
        let mut labels = None;
        let mut mean = None;
        let mut std = None;
        let mut bias = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let floats = |rest: &str| -> Result<Vec<f64>> {
            rest.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad("bad number")))
                .collect()
        };
        for line in lines {
            let line = line?;
            let (key, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match key {
                "labels" => {
                    labels = Some(
                        rest.split_whitespace()
                            .map(String::from)
                            .collect::<Vec<_>>(),
                    )
                }
                "mean" => mean = Some(floats(rest)?),
                "std" => std = Some(floats(rest)?),
                "bias" => bias = Some(floats(rest)?),
                "weights" => rows.push(floats(rest)?),
                "" => {}
                _ => return Err(bad("unknown key")),
            }
        }
        let vocab = ClassVocabulary::new(labels.ok_or_else(|| bad("missing labels"))?)?;
        let mean = mean.ok_or_else(|| bad("missing mean"))?;
        let n_features = mean.len();
        if rows.iter().any(|r| r.len() != n_features) {
            return Err(bad("weight row length mismatch"));
        }
        let weights = Array2::from_shape_vec((rows.len(), n_features), rows.concat())
            .map_err(|_| bad("weight shape"))?;
        Self::new(
            vocab,
            mean,
            std.ok_or_else(|| bad("missing std"))?,
            weights,
            Array1::from(bias.ok_or_else(|| bad("missing bias"))?),
        )
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::load(std::fs::File::open(path)?)
    }
}

impl Scorer for LinearMelScorer {
    fn vocabulary(&self) -> &ClassVocabulary {
        &self.vocab
    }

    fn score(&self, window: &MelSpectrogram) -> Vec<f64> {
        self.logits(&mean_pooled_features(window))
            .iter()
            .map(|&z| sigmoid(z))
            .collect()
    }
}

/// Loss and gradient of mean label-smoothed binary cross-entropy.
#[derive(Debug, Clone)]
pub struct BceEvaluation {
    pub loss: f64,
    pub grad_weights: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

/// Mean BCE-with-logits over all (sample, class) entries against smoothed
/// targets `y (1 - eps) + eps / 2`.
///
/// `features` is `n_samples x n_features`, `targets` is `n_samples x n_classes`.
pub fn smoothed_bce(
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    features: &Array2<f64>,
    targets: &Array2<f64>,
    eps: f64,
) -> BceEvaluation {
    let logits = features.dot(&weights.t()) + bias;
    let n = (targets.nrows() * targets.ncols()) as f64;
    let mut loss = 0.0;
    let mut dz = Array2::zeros(logits.raw_dim());
    for ((z, &y), d) in logits.iter().zip(targets.iter()).zip(dz.iter_mut()) {
        let t = y * (1.0 - eps) + eps / 2.0;
        loss += softplus(*z) - t * z;
        *d = (sigmoid(*z) - t) / n;
    }
    BceEvaluation {
        loss: loss / n,
        grad_weights: dz.t().dot(features),
        grad_bias: dz.sum_axis(Axis(0)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerTrainingConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub label_smoothing: f64,
}

impl Default for ScorerTrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            base_lr: 0.001,
            label_smoothing: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScorerTraining {
    pub scorer: LinearMelScorer,
    /// Loss before each epoch's update, followed by the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent with a cosine-annealed learning rate.
pub fn train_linear_scorer(
    dataset: &[LabeledSpectrogram],
    vocab: &ClassVocabulary,
    config: &ScorerTrainingConfig,
) -> Result<ScorerTraining> {
    if dataset.is_empty() {
        return Err(ScoringError::EmptyDataset);
    }
    let n_features = dataset[0].spec.n_mels();
    let mut raw = Array2::zeros((dataset.len(), n_features));
    let mut targets = Array2::zeros((dataset.len(), vocab.len()));
    for (i, sample) in dataset.iter().enumerate() {
        if sample.spec.n_mels() != n_features {
            return Err(ScoringError::Spectro(SpectroError::InvalidConfig(
                "training spectrograms disagree on n_mels".into(),
            )));
        }
        raw.row_mut(i)
            .assign(&Array1::from(mean_pooled_features(&sample.spec)));
        for label in &sample.labels {
            let c = vocab
                .index_of(label)
                .ok_or_else(|| ScoringError::UnknownLabel(label.clone()))?;
            targets[[i, c]] = 1.0;
        }
    }
    let mean = raw.mean_axis(Axis(0)).expect("non-empty");
    let std = raw
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let features = (&raw - &mean) / &std;

    let schedule = CosineSchedule::new(config.base_lr, config.epochs);
    let mut weights = Array2::zeros((vocab.len(), n_features));
    let mut bias = Array1::zeros(vocab.len());
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let eval = smoothed_bce(&weights, &bias, &features, &targets, config.label_smoothing);
        losses.push(eval.loss);
        let lr = schedule.lr_at(epoch);
        weights.scaled_add(-lr, &eval.grad_weights);
        bias.scaled_add(-lr, &eval.grad_bias);
    }
    losses.push(smoothed_bce(&weights, &bias, &features, &targets, config.label_smoothing).loss);
    Ok(ScorerTraining {
        scorer: LinearMelScorer::new(vocab.clone(), mean.to_vec(), std.to_vec(), weights, bias)?,
        losses,
    })
}

/// Writes frames as `clip_id,end_second,<label_1>,...,<label_C>`.
///
/// Values use the shortest representation that parses back to the same `f64`.
pub fn write_probability_csv<W: Write>(
    vocab: &ClassVocabulary,
    frames: &[FrameProbabilities],
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["clip_id".to_string(), "end_second".to_string()];
    header.extend(vocab.labels().iter().cloned());
    out.write_record(&header)?;
    for f in frames {
        let mut record = Vec::with_capacity(f.probs.len() + 2);
        record.push(f.clip_id.clone());
        record.push(f.end_second.to_string());
        record.extend(f.probs.iter().map(|p| p.to_string()));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a probability CSV.
///
/// With `expected`, every expected class must have a column and the returned
/// vectors follow the expected order; otherwise the file's own columns define
/// the vocabulary. Frames come back sorted by `(clip_id, end_second)`.
pub fn read_probability_csv<R: Read>(
    r: R,
    expected: Option<&ClassVocabulary>,
) -> Result<(ClassVocabulary, Vec<FrameProbabilities>)> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader.headers()?.clone();
    if header.get(0) != Some("clip_id") || header.get(1) != Some("end_second") {
        return Err(ScoringError::Schema(
            "header must start with `clip_id,end_second`".into(),
        ));
    }
    let file_labels: Vec<&str> = header.iter().skip(2).collect();
    let file_vocab = ClassVocabulary::new(file_labels.iter().copied())?;
    let vocab = match expected {
        Some(v) => v.clone(),
        None => file_vocab.clone(),
    };
    if vocab.is_empty() {
        return Err(ScoringError::Schema("no class columns".into()));
    }
    let columns: Vec<usize> = vocab
        .labels()
        .iter()
        .map(|l| {
            file_vocab
                .index_of(l)
                .map(|i| i + 2)
                .ok_or_else(|| ScoringError::Schema(format!("missing class column `{l}`")))
        })
        .collect::<Result<_>>()?;

    let mut frames = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = line + 2;
        let clip_id = record.get(0).unwrap_or_default().to_string();
        let end_second: u32 = record
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| ScoringError::Schema(format!("row {row}: bad end_second")))?;
        let probs = columns
            .iter()
            .map(|&c| {
                let v: f64 = record
                    .get(c)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| ScoringError::Schema(format!("row {row}: bad number")))?;
                if (0.0..=1.0).contains(&v) {
                    Ok(v)
                } else {
                    Err(ScoringError::Range(format!("row {row}: probability {v}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        frames.push(FrameProbabilities {
            clip_id,
            end_second,
            probs,
        });
    }
    frames.sort_by(|a, b| {
        (a.clip_id.as_str(), a.end_second).cmp(&(b.clip_id.as_str(), b.end_second))
    });
    if let Some(w) = frames
        .windows(2)
        .find(|w| w[0].clip_id == w[1].clip_id && w[0].end_second == w[1].end_second)
    {
        return Err(ScoringError::Schema(format!(
            "duplicate frame ({}, {})",
            w[0].clip_id, w[0].end_second
        )));
    }
    Ok((vocab, frames))
}

/// Loads externally produced probabilities (see [`read_probability_csv`]).
pub fn load_precomputed_scores(
    path: &Path,
    expected: Option<&ClassVocabulary>,
) -> Result<(ClassVocabulary, Vec<FrameProbabilities>)> {
    read_probability_csv(std::fs::File::open(path)?, expected)
}
