//! Second-stage calibration of per-species frame probabilities.
//!
//! Each `(clip, row, species)` triple becomes one sample with four features
//! taken from that species' 1-second-stride probability stream: the 3- and
//! 9-frame rolling means around the row, the clip-wide maximum, and the
//! distance from the site to the nearest recorded occurrence. The species
//! itself is never a feature, so one model serves every species.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{self, OccurrenceTable, Site};
use crate::optim::{gradient_descent, sigmoid, softplus, DescentOptions, StepRule};
use crate::scoring::{ClassVocabulary, FrameProbabilities};

pub const N_FEATURES: usize = 4;
/// Seconds between prediction rows.
pub const ROW_STRIDE_S: u32 = 5;
/// First window end second in a clip.
pub const FIRST_K: u32 = 5;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("probability stream is empty")]
    EmptyStream,
    #[error("clip `{clip_id}`: {reason}")]
    MissingFrames { clip_id: String, reason: String },
    #[error("no site known for clip `{0}`")]
    UnknownClipSite(String),
    #[error("no ground truth for clip `{0}` at second {1}")]
    MissingTruth(String, u32),
    #[error("training labels are all {0}")]
    DegenerateLabels(bool),
    #[error("training samples carry no labels")]
    Unlabeled,
    #[error("leave-one-clip-out needs at least 2 clips, got {0}")]
    TooFewClips(usize),
    #[error("malformed calibrator model: {0}")]
    Model(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CalibError>;

/// Species present per `(clip_id, end_second)`.
pub type FrameTruth = BTreeMap<(String, u32), BTreeSet<String>>;

/// Mean of `stream[pos - width/2 ..= pos + width/2]` restricted to indices
/// inside the stream. `stream[0]` holds the first window of the clip.
pub fn rolling_mean(stream: &[f64], pos: usize, width: usize) -> f64 {
    let half = width / 2;
    let lo = pos.saturating_sub(half);
    let hi = (pos + half).min(stream.len() - 1);
    let window = &stream[lo..=hi];
    window.iter().sum::<f64>() / window.len() as f64
}

pub fn clip_max(stream: &[f64]) -> Result<f64> {
    stream
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(CalibError::EmptyStream)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub clip_id: String,
    pub end_second: u32,
    pub species: String,
    pub rm3: f64,
    pub rm9: f64,
    pub clip_max: f64,
    pub min_haversine_km: f64,
    pub label: Option<bool>,
}

impl CalibrationSample {
    /// Model inputs; the distance is optionally `ln(1 + d)`.
    pub fn features(&self, log_distance: bool) -> [f64; N_FEATURES] {
        let d = if log_distance {
            self.min_haversine_km.ln_1p()
        } else {
            self.min_haversine_km
        };
        [self.rm3, self.rm9, self.clip_max, d]
    }
}

/// Row end seconds `5, 10, ...` up to `last_k`.
pub fn row_seconds(last_k: u32) -> impl Iterator<Item = u32> {
    (FIRST_K..=last_k).step_by(ROW_STRIDE_S as usize)
}

/// Splits frames by clip and checks each clip runs `k = 5, 6, ..., n` without gaps.
fn clip_streams(
    frames: &[FrameProbabilities],
    n_classes: usize,
) -> Result<BTreeMap<&str, Vec<&FrameProbabilities>>> {
    let mut clips = crate::scoring::group_by_clip(frames);
    for (clip_id, frames) in clips.iter_mut() {
        frames.sort_by_key(|f| f.end_second);
        let missing = |reason: String| CalibError::MissingFrames {
            clip_id: clip_id.to_string(),
            reason,
        };
        if frames[0].end_second != FIRST_K {
            return Err(missing(format!(
                "first frame ends at {} s, expected {FIRST_K}",
                frames[0].end_second
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.end_second != FIRST_K + i as u32 {
                return Err(missing(format!(
                    "no frame ending at {} s",
                    FIRST_K + i as u32
                )));
            }
            if f.probs.len() != n_classes {
                return Err(missing(format!(
                    "frame {} has {} classes",
                    f.end_second,
                    f.probs.len()
                )));
            }
        }
    }
    Ok(clips)
}

/// One sample per clip, row `k ∈ {5, 10, ..., n}` and vocabulary species.
///
/// Samples are ordered by clip, then row, then vocabulary index. Species
/// missing from `occ` get the largest possible distance.
pub fn build_samples(
    frames: &[FrameProbabilities],
    vocab: &ClassVocabulary,
    sites: &BTreeMap<String, Site>,
    occ: &OccurrenceTable,
    truth: Option<&FrameTruth>,
) -> Result<Vec<CalibrationSample>> {
    let clips = clip_streams(frames, vocab.len())?;
    let per_clip: Vec<Result<Vec<CalibrationSample>>> = clips
        .par_iter()
        .map(|(&clip_id, frames)| {
            let site = sites
                .get(clip_id)
                .ok_or_else(|| CalibError::UnknownClipSite(clip_id.to_string()))?;
            let last_k = frames.last().map(|f| f.end_second).unwrap_or(FIRST_K);
            let mut out = Vec::new();
            let streams: Vec<Vec<f64>> = (0..vocab.len())
                .map(|c| frames.iter().map(|f| f.probs[c]).collect())
                .collect();
            let maxima: Vec<f64> = streams.iter().map(|s| clip_max(s)).collect::<Result<_>>()?;
            let distances: Vec<f64> = vocab
                .labels()
                .iter()
                .map(|s| geo::min_distance_or_max(s, site, occ))
                .collect();
            for k in row_seconds(last_k) {
                let pos = (k - FIRST_K) as usize;
                let present = match truth {
                    Some(t) => Some(
                        t.get(&(clip_id.to_string(), k))
                            .ok_or_else(|| CalibError::MissingTruth(clip_id.to_string(), k))?,
                    ),
                    None => None,
                };
                for (c, species) in vocab.labels().iter().enumerate() {
                    out.push(CalibrationSample {
                        clip_id: clip_id.to_string(),
                        end_second: k,
                        species: species.clone(),
                        rm3: rolling_mean(&streams[c], pos, 3),
                        rm9: rolling_mean(&streams[c], pos, 9),
                        clip_max: maxima[c],
                        min_haversine_km: distances[c],
                        label: present.map(|p| p.contains(species)),
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut samples = Vec::new();
    for chunk in per_clip {
        samples.extend(chunk?);
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibratorKind {
    Logistic,
    /// Linear SVM on squared hinge loss with a sigmoid fitted to its margins.
    LinearSvm,
}

impl CalibratorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CalibratorKind::Logistic => "logistic",
            CalibratorKind::LinearSvm => "linear-svm",
        }
    }
}

impl std::str::FromStr for CalibratorKind {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(CalibratorKind::Logistic),
            "linear-svm" | "svm" => Ok(CalibratorKind::LinearSvm),
            other => Err(CalibError::Model(format!(
                "unknown calibrator kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratorConfig {
    pub kind: CalibratorKind,
    pub l2_lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub log_distance: bool,
}

impl Default for CalibratorConfig {
    fn default() -> Self {
        Self {
            kind: CalibratorKind::Logistic,
            l2_lambda: 1e-3,
            max_iters: 10_000,
            tol: 1e-8,
            log_distance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorModel {
    pub kind: CalibratorKind,
    pub log_distance: bool,
    pub feature_mean: [f64; N_FEATURES],
    pub feature_std: [f64; N_FEATURES],
    pub weights: [f64; N_FEATURES],
    pub bias: f64,
    /// Maps an SVM margin `f` to `sigmoid(a f + b)`; `(1, 0)` for logistic models.
    pub sigmoid_a: f64,
    pub sigmoid_b: f64,
}

impl CalibratorModel {
    /// A model that outputs 0.5 for every sample.
    pub fn zero(kind: CalibratorKind) -> Self {
        Self {
            kind,
            log_distance: true,
            feature_mean: [0.0; N_FEATURES],
            feature_std: [1.0; N_FEATURES],
            weights: [0.0; N_FEATURES],
            bias: 0.0,
            sigmoid_a: 1.0,
            sigmoid_b: 0.0,
        }
    }

    pub fn standardize(&self, raw: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|j| (raw[j] - self.feature_mean[j]) / self.feature_std[j])
    }

    pub fn decision(&self, sample: &CalibrationSample) -> f64 {
        let x = self.standardize(&sample.features(self.log_distance));
        dot(&self.weights, &x) + self.bias
    }

    pub fn confidence(&self, sample: &CalibrationSample) -> f64 {
        sigmoid(self.sigmoid_a * self.decision(sample) + self.sigmoid_b)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = String::new();
        writeln!(out, "calibrator 1").unwrap();
        writeln!(out, "kind {}", self.kind.as_str()).unwrap();
        writeln!(out, "log_distance {}", self.log_distance).unwrap();
        writeln!(out, "mean {}", join(&self.feature_mean)).unwrap();
        writeln!(out, "std {}", join(&self.feature_std)).unwrap();
        writeln!(out, "weights {}", join(&self.weights)).unwrap();
        writeln!(out, "bias {}", self.bias).unwrap();
        writeln!(out, "sigmoid {} {}", self.sigmoid_a, self.sigmoid_b).unwrap();
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let bad = |m: &str| CalibError::Model(m.to_string());
        let mut lines = std::io::BufReader::new(r).lines();
        if lines.next().transpose()?.as_deref().map(str::trim) != Some("calibrator 1") {
            return Err(bad("unrecognized header"));
        }
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        for line in lines {
            let line = line?;
            if let Some((k, v)) = line.split_once(' ') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
        let floats = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(&format!("bad number in `{k}`"))))
                .collect()
        };
        let array = |k: &str| -> Result<[f64; N_FEATURES]> {
            floats(k)?
                .try_into()
                .map_err(|_| bad(&format!("`{k}` needs {N_FEATURES} values")))
        };
        let sig = floats("sigmoid")?;
        let bias = floats("bias")?;
        if sig.len() != 2 || bias.len() != 1 {
            return Err(bad("bad sigmoid or bias"));
        }
        let model = Self {
            kind: get("kind")?.trim().parse()?,
            log_distance: get("log_distance")?
                .trim()
                .parse()
                .map_err(|_| bad("bad log_distance"))?,
            feature_mean: array("mean")?,
            feature_std: array("std")?,
            weights: array("weights")?,
            bias: bias[0],
            sigmoid_a: sig[0],
            sigmoid_b: sig[1],
        };
        if model.feature_std.iter().any(|s| !(*s > 0.0)) {
            return Err(bad("standard deviations must be positive"));
        }
        Ok(model)
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::load(std::fs::File::open(path)?)
    }
}

fn dot(a: &[f64; N_FEATURES], b: &[f64; N_FEATURES]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standardized design matrix with 0/1 targets.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: Vec<[f64; N_FEATURES]>,
    pub y: Vec<f64>,
}

/// Parameter layout for the objectives: four weights followed by the bias.
pub const N_PARAMS: usize = N_FEATURES + 1;

/// Mean log loss plus `lambda/2 |w|^2` (bias unregularized), with gradient.
pub fn logistic_objective(d: &Design, lambda: f64, params: &[f64]) -> (f64, Vec<f64>) {
    let w: [f64; N_FEATURES] = params[..N_FEATURES].try_into().unwrap();
    let b = params[N_FEATURES];
    let n = d.y.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; N_PARAMS];
    for (x, &y) in d.x.iter().zip(&d.y) {
        let z = dot(&w, x) + b;
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        for j in 0..N_FEATURES {
            grad[j] += r * x[j];
        }
        grad[N_FEATURES] += r;
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    for j in 0..N_FEATURES {
        loss += 0.5 * lambda * w[j] * w[j];
        grad[j] += lambda * w[j];
    }
    (loss, grad)
}

/// Mean squared hinge loss on `±1` targets plus `lambda/2 |w|^2`, with gradient.
pub fn squared_hinge_objective(d: &Design, lambda: f64, params: &[f64]) -> (f64, Vec<f64>) {
    let w: [f64; N_FEATURES] = params[..N_FEATURES].try_into().unwrap();
    let b = params[N_FEATURES];
    let n = d.y.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; N_PARAMS];
    for (x, &y) in d.x.iter().zip(&d.y) {
        let s = 2.0 * y - 1.0;
        let margin = 1.0 - s * (dot(&w, x) + b);
        if margin > 0.0 {
            loss += margin * margin;
            let r = -2.0 * s * margin;
            for j in 0..N_FEATURES {
                grad[j] += r * x[j];
            }
            grad[N_FEATURES] += r;
        }
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    for j in 0..N_FEATURES {
        loss += 0.5 * lambda * w[j] * w[j];
        grad[j] += lambda * w[j];
    }
    (loss, grad)
}

/// Mean log loss of `sigmoid(a f + b)` against Platt's smoothed targets.
pub fn platt_objective(margins: &[f64], targets: &[f64], params: &[f64]) -> (f64, Vec<f64>) {
    let (a, b) = (params[0], params[1]);
    let n = margins.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; 2];
    for (&f, &t) in margins.iter().zip(targets) {
        let z = a * f + b;
        loss += softplus(z) - t * z;
        let r = sigmoid(z) - t;
        grad[0] += r * f;
        grad[1] += r;
    }
    (loss / n, grad.into_iter().map(|g| g / n).collect())
}

fn descent_options(config: &CalibratorConfig) -> DescentOptions {
    DescentOptions {
        max_iters: config.max_iters,
        tol: config.tol,
        step: StepRule::Backtracking { initial: 1.0 },
    }
}

/// Trains on labeled samples. Sample order does not affect the result.
pub fn train_calibrator(
    samples: &[CalibrationSample],
    config: &CalibratorConfig,
) -> Result<CalibratorModel> {
    let mut rows: Vec<([f64; N_FEATURES], f64)> = samples
        .iter()
        .map(|s| {
            let y = s.label.ok_or(CalibError::Unlabeled)?;
            Ok((s.features(config.log_distance), if y { 1.0 } else { 0.0 }))
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(CalibError::Unlabeled);
    }
    let positives = rows.iter().filter(|r| r.1 == 1.0).count();
    if positives == 0 || positives == rows.len() {
        return Err(CalibError::DegenerateLabels(positives > 0));
    }
    // Canonical order makes every floating-point sum independent of input order.
    rows.sort_by(|a, b| {
        a.0.iter()
            .chain([&a.1])
            .zip(b.0.iter().chain([&b.1]))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let n = rows.len() as f64;
    let mut mean = [0.0; N_FEATURES];
    for (x, _) in &rows {
        for j in 0..N_FEATURES {
            mean[j] += x[j] / n;
        }
    }
    let mut std = [0.0; N_FEATURES];
    for (x, _) in &rows {
        for j in 0..N_FEATURES {
            std[j] += (x[j] - mean[j]).powi(2) / n;
        }
    }
    let std = std.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
    let design = Design {
        x: rows
            .iter()
            .map(|(x, _)| std::array::from_fn(|j| (x[j] - mean[j]) / std[j]))
            .collect(),
        y: rows.iter().map(|r| r.1).collect(),
    };

    let opts = descent_options(config);
    let lambda = config.l2_lambda;
    let objective = |p: &[f64]| match config.kind {
        CalibratorKind::Logistic => logistic_objective(&design, lambda, p),
        CalibratorKind::LinearSvm => squared_hinge_objective(&design, lambda, p),
    };
    // Descent runs on `u = theta / scale`, with each scale set from a bound on
    // that coordinate's curvature, so a large lambda does not stall the bias.
    let data_curvature = match config.kind {
        CalibratorKind::Logistic => 0.25,
        CalibratorKind::LinearSvm => 2.0,
    };
    let scale: Vec<f64> = (0..N_PARAMS)
        .map(|j| {
            let h = if j < N_FEATURES {
                data_curvature + lambda
            } else {
                data_curvature
            };
            h.sqrt().recip()
        })
        .collect();
    let fit = gradient_descent(
        |u| {
            let theta: Vec<f64> = u.iter().zip(&scale).map(|(u, s)| u * s).collect();
            let (loss, grad) = objective(&theta);
            (loss, grad.iter().zip(&scale).map(|(g, s)| g * s).collect())
        },
        vec![0.0; N_PARAMS],
        &opts,
    );
    let theta: Vec<f64> = fit.params.iter().zip(&scale).map(|(u, s)| u * s).collect();
    let weights: [f64; N_FEATURES] = theta[..N_FEATURES].try_into().unwrap();
    let bias = theta[N_FEATURES];

    let (sigmoid_a, sigmoid_b) = match config.kind {
        CalibratorKind::Logistic => (1.0, 0.0),
        CalibratorKind::LinearSvm => {
            let margins: Vec<f64> = design.x.iter().map(|x| dot(&weights, x) + bias).collect();
            let n_pos = positives as f64;
            let n_neg = n - n_pos;
            let hi = (n_pos + 1.0) / (n_pos + 2.0);
            let lo = 1.0 / (n_neg + 2.0);
            let targets: Vec<f64> = design
                .y
                .iter()
                .map(|&y| if y == 1.0 { hi } else { lo })
                .collect();
            let platt = gradient_descent(
                |p| platt_objective(&margins, &targets, p),
                vec![1.0, 0.0],
                &opts,
            );
            (platt.params[0], platt.params[1])
        }
    };
    Ok(CalibratorModel {
        kind: config.kind,
        log_distance: config.log_distance,
        feature_mean: mean,
        feature_std: std,
        weights,
        bias,
        sigmoid_a,
        sigmoid_b,
    })
}

/// Confidence per sample, aligned with `samples`.
pub fn calibrate(model: &CalibratorModel, samples: &[CalibrationSample]) -> Vec<f64> {
    samples.iter().map(|s| model.confidence(s)).collect()
}

#[derive(Debug, Clone)]
pub struct LeaveOneClipOut {
    /// Held-out confidence per input sample, aligned with the input.
    pub confidences: Vec<f64>,
    /// Model trained without each clip, in sorted clip order.
    pub fold_models: Vec<(String, CalibratorModel)>,
}

/// Trains one calibrator per held-out clip and predicts that clip with it.
pub fn leave_one_clip_out(
    samples: &[CalibrationSample],
    config: &CalibratorConfig,
) -> Result<LeaveOneClipOut> {
    let clips: BTreeSet<&str> = samples.iter().map(|s| s.clip_id.as_str()).collect();
    if clips.len() < 2 {
        return Err(CalibError::TooFewClips(clips.len()));
    }
    let fold_models: Vec<(String, CalibratorModel)> = clips
        .par_iter()
        .map(|&held_out| {
            let train: Vec<CalibrationSample> = samples
                .iter()
                .filter(|s| s.clip_id != held_out)
                .cloned()
                .collect();
            Ok((held_out.to_string(), train_calibrator(&train, config)?))
        })
        .collect::<Result<_>>()?;
    let by_clip: BTreeMap<&str, &CalibratorModel> =
        fold_models.iter().map(|(c, m)| (c.as_str(), m)).collect();
    let confidences = samples
        .par_iter()
        .map(|s| by_clip[s.clip_id.as_str()].confidence(s))
        .collect();
    Ok(LeaveOneClipOut {
        confidences,
        fold_models,
    })
}

/// Regroups per-sample values into one vector per `(clip, row)` in vocabulary order.
/// Species absent from the samples get 0.
pub fn to_frames(
    samples: &[CalibrationSample],
    values: &[f64],
    vocab: &ClassVocabulary,
) -> Vec<FrameProbabilities> {
    let mut rows: BTreeMap<(&str, u32), Vec<f64>> = BTreeMap::new();
    for (s, &v) in samples.iter().zip(values) {
        let row = rows
            .entry((s.clip_id.as_str(), s.end_second))
            .or_insert_with(|| vec![0.0; vocab.len()]);
        if let Some(c) = vocab.index_of(&s.species) {
            row[c] = v;
        }
    }
    rows.into_iter()
        .map(|((clip_id, end_second), probs)| FrameProbabilities {
            clip_id: clip_id.to_string(),
            end_second,
            probs,
        })
        .collect()
}

/// The raw frame probability at each sample's row, aligned with `samples`.
pub fn raw_at_rows(
    samples: &[CalibrationSample],
    frames: &[FrameProbabilities],
    vocab: &ClassVocabulary,
) -> Vec<f64> {
    let index: BTreeMap<(&str, u32), &FrameProbabilities> = frames
        .iter()
        .map(|f| ((f.clip_id.as_str(), f.end_second), f))
        .collect();
    samples
        .iter()
        .map(|s| {
            let c = vocab.index_of(&s.species);
            index
                .get(&(s.clip_id.as_str(), s.end_second))
                .zip(c)
                .map(|(f, c)| f.probs[c])
                .unwrap_or(0.0)
        })
        .collect()
}

/// Writes `clip_id,end_second,species,rm3,rm9,clip_max,min_hav_km,label`.
pub fn write_samples_csv<W: Write>(samples: &[CalibrationSample], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "clip_id",
        "end_second",
        "species",
        "rm3",
        "rm9",
        "clip_max",
        "min_hav_km",
        "label",
    ])?;
    for s in samples {
        out.write_record([
            s.clip_id.clone(),
            s.end_second.to_string(),
            s.species.clone(),
            s.rm3.to_string(),
            s.rm9.to_string(),
            s.clip_max.to_string(),
            s.min_haversine_km.to_string(),
            s.label.map(|l| u8::from(l).to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
