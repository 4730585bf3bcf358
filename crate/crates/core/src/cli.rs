//! Command-line pipeline stages.
//!
//! Every stage reads files written by an earlier one, so a run is a chain of
//! `soundscape <stage>` invocations sharing `--out`. Settings come from flat
//! `key = value` files (`--config`, may repeat, later files win) and then from
//! flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use thiserror::Error;
use walkdir::WalkDir;

use crate::audio_io::{self, AudioError};
use crate::augment::{self, AugmentConfig, AugmentError, LabeledSpectrogram};
use crate::calib::{self, CalibError, CalibratorConfig, CalibratorModel, FrameTruth};
use crate::geo::{GeoError, OccurrenceTable, Site, SiteId, SiteTable};
use crate::kv::{KvError, KvMap};
use crate::metrics::{self, F1Mode, MetricsError};
use crate::postproc::{self, PostprocConfig, PostprocError, PredictionRow, RowId, SiteContext};
use crate::scoring::{
    self, ClassVocabulary, EnsembleWeights, FrameProbabilities, LinearMelScorer, Scorer,
    ScorerTrainingConfig, ScoringError, WindowConfig,
};
use crate::spectro::{self, MelConfig, SignalQualityThresholds, SpectroError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("cannot load scores: {0}")]
    ScorerLoad(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::ScorerLoad(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        match e {
            AudioError::InvalidClip(_) => CliError::Other(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<SpectroError> for CliError {
    fn from(e: SpectroError) -> Self {
        match e {
            SpectroError::InvalidConfig(_) | SpectroError::DegenerateBand(_) => {
                CliError::Config(e.to_string())
            }
            SpectroError::Io(_) | SpectroError::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::InvalidConfig(_) | AugmentError::Kv(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ScoringError> for CliError {
    fn from(e: ScoringError) -> Self {
        match e {
            ScoringError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<GeoError> for CliError {
    fn from(e: GeoError) -> Self {
        match e {
            GeoError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<CalibError> for CliError {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<PostprocError> for CliError {
    fn from(e: PostprocError) -> Self {
        match e {
            PostprocError::InvalidConfig(_) | PostprocError::Kv(_) => {
                CliError::Config(e.to_string())
            }
            PostprocError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            CliError::Io(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "soundscape",
    version,
    about = "Bird-call detection in long field recordings"
)]
pub struct Cli {
    /// `key = value` settings file; may be given more than once.
    #[arg(long, global = true)]
    pub config: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut training recordings into segments, filter silence, write spectrograms and folds.
    Preprocess(PreprocessArgs),
    /// Fit the linear mel scorer on preprocessed spectrograms.
    TrainScorer(TrainScorerArgs),
    /// Write augmented copies of preprocessed spectrograms.
    Augment(AugmentArgs),
    /// Score soundscapes every second with 5-s windows.
    Infer(InferArgs),
    /// Fit the second-stage calibrator with leave-one-clip-out validation.
    TrainCalibrator(TrainCalibratorArgs),
    /// Apply rejection rules, boosts and thresholds to build a submission.
    Postprocess(PostprocessArgs),
    /// Search bird and nocall thresholds against ground truth.
    SweepThresholds(SweepArgs),
    /// Score a submission against ground truth.
    Evaluate(EvaluateArgs),
    /// Render a spectrogram file as a PGM image.
    ExportSpectrogram(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory of WAV files; without `--metadata` the parent directory name is the label.
    #[arg(long)]
    pub audio_dir: PathBuf,
    /// CSV with `filename,primary_label` (filename relative to the audio dir).
    #[arg(long)]
    pub metadata: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainScorerArgs {
    /// Defaults to `<out>/mels`.
    #[arg(long)]
    pub mels_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Defaults to `<out>/mels`.
    #[arg(long)]
    pub mels_dir: Option<PathBuf>,
    /// Augmented copies per input spectrogram.
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// A WAV file or a directory of them.
    #[arg(long)]
    pub audio: Option<PathBuf>,
    /// Scorer model files; several are averaged.
    #[arg(long)]
    pub scorer: Vec<PathBuf>,
    /// Precomputed probability CSVs; several are averaged.
    #[arg(long)]
    pub precomputed: Vec<PathBuf>,
    /// One weight per scorer or precomputed stream, whitespace separated.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SiteArgs {
    /// `clip_id,site_id`; defaults to `<out>/clip_sites.csv` when present.
    #[arg(long)]
    pub clip_sites: Option<PathBuf>,
    /// `site_id,latitude,longitude` overriding the built-in locations.
    #[arg(long)]
    pub sites: Option<PathBuf>,
    /// `species,latitude,longitude`.
    #[arg(long)]
    pub occurrences: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCalibratorArgs {
    /// Defaults to `<out>/probs.csv`.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Ground-truth `row_id,birds`.
    #[arg(long)]
    pub truth: PathBuf,
    #[command(flatten)]
    pub site: SiteArgs,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// Defaults to `<out>/probs.csv`.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Calibrator model; defaults to `<out>/calibrator.txt`.
    #[arg(long)]
    pub calibrator: Option<PathBuf>,
    /// Use these calibrated confidences instead of running a calibrator.
    #[arg(long, conflicts_with = "calibrator")]
    pub calibrated: Option<PathBuf>,
    #[command(flatten)]
    pub site: SiteArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Adjusted confidences; defaults to `<out>/adjusted.csv`.
    #[arg(long)]
    pub adjusted: Option<PathBuf>,
    #[arg(long)]
    pub truth: PathBuf,
    /// `clip_id,site_id`; defaults to `<out>/clip_sites.csv`.
    #[arg(long)]
    pub clip_sites: Option<PathBuf>,
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Defaults to `<out>/submission.csv`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub truth: PathBuf,
    /// `row-mean` or `global-micro`.
    #[arg(long)]
    pub mode: Option<F1Mode>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub mels: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub window_s: f64,
    pub stride_s: f64,
    pub folds: usize,
    pub quality: SignalQualityThresholds,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_s: 7.0,
            stride_s: 5.0,
            folds: 5,
            quality: SignalQualityThresholds::default(),
        }
    }
}

/// Everything a stage can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub mel: MelConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub scorer: ScorerTrainingConfig,
    pub calib: CalibratorConfig,
    pub postproc: PostprocConfig,
    pub sweep_step: f64,
    pub f1_mode: F1Mode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 0,
            out: PathBuf::from("out"),
            mel: MelConfig::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            scorer: ScorerTrainingConfig::default(),
            calib: CalibratorConfig::default(),
            postproc: PostprocConfig::default(),
            sweep_step: 0.01,
            f1_mode: F1Mode::RowMean,
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "seed",
    "jobs",
    "out",
    "mel.sample_rate_hz",
    "mel.n_mels",
    "mel.f_min_hz",
    "mel.f_max_hz",
    "mel.n_fft",
    "mel.hop_length",
    "mel.power_exponent",
    "mel.log_floor_db",
    "preprocess.window_s",
    "preprocess.stride_s",
    "preprocess.folds",
    "preprocess.min_max_value",
    "preprocess.min_mean_value",
    "scorer.epochs",
    "scorer.base_lr",
    "scorer.label_smoothing",
    "calib.kind",
    "calib.l2_lambda",
    "calib.max_iters",
    "calib.tol",
    "calib.log_distance",
    "sweep.step",
    "metrics.mode",
];

fn is_known_key(key: &str) -> bool {
    TOP_KEYS.contains(&key)
        || key
            .strip_prefix("augment.")
            .is_some_and(|k| augment::KEYS.contains(&k))
        || key
            .strip_prefix("postproc.")
            .is_some_and(PostprocConfig::is_key)
}

impl PipelineConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(is_known_key)?;
        let mut c = Self::default();
        kv.read("seed", &mut c.seed)?;
        kv.read("jobs", &mut c.jobs)?;
        if let Some(out) = kv.get_str("out") {
            c.out = PathBuf::from(out);
        }
        let m = &mut c.mel;
        kv.read("mel.sample_rate_hz", &mut m.sample_rate_hz)?;
        kv.read("mel.n_mels", &mut m.n_mels)?;
        kv.read("mel.f_min_hz", &mut m.f_min_hz)?;
        kv.read("mel.f_max_hz", &mut m.f_max_hz)?;
        kv.read("mel.n_fft", &mut m.n_fft)?;
        kv.read("mel.hop_length", &mut m.hop_length)?;
        kv.read("mel.power_exponent", &mut m.power_exponent)?;
        kv.read("mel.log_floor_db", &mut m.log_floor_db)?;
        let p = &mut c.preprocess;
        kv.read("preprocess.window_s", &mut p.window_s)?;
        kv.read("preprocess.stride_s", &mut p.stride_s)?;
        kv.read("preprocess.folds", &mut p.folds)?;
        kv.read("preprocess.min_max_value", &mut p.quality.min_max_value)?;
        kv.read("preprocess.min_mean_value", &mut p.quality.min_mean_value)?;
        c.augment.apply_kv(kv, "augment.")?;
        kv.read("scorer.epochs", &mut c.scorer.epochs)?;
        kv.read("scorer.base_lr", &mut c.scorer.base_lr)?;
        kv.read("scorer.label_smoothing", &mut c.scorer.label_smoothing)?;
        if let Some(kind) = kv.get_str("calib.kind") {
            c.calib.kind = kind
                .parse()
                .map_err(|e: CalibError| CliError::Config(e.to_string()))?;
        }
        kv.read("calib.l2_lambda", &mut c.calib.l2_lambda)?;
        kv.read("calib.max_iters", &mut c.calib.max_iters)?;
        kv.read("calib.tol", &mut c.calib.tol)?;
        kv.read("calib.log_distance", &mut c.calib.log_distance)?;
        c.postproc.apply_kv(kv, "postproc.")?;
        kv.read("sweep.step", &mut c.sweep_step)?;
        if let Some(mode) = kv.get_str("metrics.mode") {
            c.f1_mode = mode.parse().map_err(CliError::Config)?;
        }
        Ok(c)
    }

    /// Reads config files in order, then applies global flags.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut text = String::new();
        for path in &cli.config {
            let body = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            text.push_str(&body);
            text.push('\n');
        }
        let mut c = Self::from_kv(&KvMap::parse(&text)?)?;
        if let Some(seed) = cli.seed {
            c.seed = seed;
        }
        if let Some(jobs) = cli.jobs {
            c.jobs = jobs;
        }
        if let Some(out) = &cli.out {
            c.out = out.clone();
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.augment.validate()?;
        self.postproc.validate()?;
        let p = &self.preprocess;
        if !(p.window_s > 0.0 && p.stride_s > 0.0 && p.stride_s <= p.window_s) || p.folds < 2 {
            return Err(CliError::Config(
                "preprocess needs 0 < stride_s <= window_s and at least 2 folds".into(),
            ));
        }
        if !(self.scorer.base_lr > 0.0) || !(0.0..1.0).contains(&self.scorer.label_smoothing) {
            return Err(CliError::Config(
                "scorer needs base_lr > 0 and label_smoothing in [0, 1)".into(),
            ));
        }
        if !(self.calib.l2_lambda >= 0.0 && self.calib.tol >= 0.0) {
            return Err(CliError::Config(
                "calib needs l2_lambda >= 0 and tol >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Independent seed for a named stage, so stages reproduce on their own.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }
}

/// FNV-1a over the stage name, mixed with the run seed by SplitMix64.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parses arguments, runs the stage and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = PipelineConfig::resolve(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| {
        fs::create_dir_all(&config.out)?;
        match &cli.command {
            Command::Preprocess(a) => cmd_preprocess(&config, a),
            Command::TrainScorer(a) => cmd_train_scorer(&config, a),
            Command::Augment(a) => cmd_augment(&config, a),
            Command::Infer(a) => cmd_infer(&config, a),
            Command::TrainCalibrator(a) => cmd_train_calibrator(&config, a),
            Command::Postprocess(a) => cmd_postprocess(&config, a),
            Command::SweepThresholds(a) => cmd_sweep(&config, a),
            Command::Evaluate(a) => cmd_evaluate(&config, a),
            Command::ExportSpectrogram(a) => cmd_export_spectrogram(&config, a),
        }
    })
}

/// `(clip_id, segment_offset, fold, kept)`
type ManifestRow = (String, f64, usize, bool);

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{} does not exist",
            path.display()
        )))
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn is_wav(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// WAV files under `dir`, sorted by path.
fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Io(e.to_string()))?;
        if entry.file_type().is_file() && is_wav(entry.path()) {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

struct TrainingClip {
    path: PathBuf,
    clip_id: String,
    label: String,
}

fn training_clips(audio_dir: &Path, metadata: Option<&Path>) -> Result<Vec<TrainingClip>> {
    let clip = |path: PathBuf, label: String| {
        let clip_id = path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        TrainingClip {
            path,
            clip_id,
            label,
        }
    };
    match metadata {
        None => wav_files(audio_dir)?
            .into_iter()
            .map(|path| {
                let label = path
                    .parent()
                    .filter(|p| p != &audio_dir)
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| {
                        CliError::Config(format!(
                            "{} is not inside a label directory",
                            path.display()
                        ))
                    })?;
                Ok(clip(path, label))
            })
            .collect(),
        Some(meta) => {
            require_exists(meta)?;
            let mut reader = csv::Reader::from_path(meta)?;
            let headers = reader.headers()?.clone();
            let col = |name: &str| {
                headers
                    .iter()
                    .position(|h| h.trim() == name)
                    .ok_or_else(|| CliError::Config(format!("metadata has no `{name}` column")))
            };
            let (fcol, lcol) = (col("filename")?, col("primary_label")?);
            let mut clips = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                clips.push(clip(
                    audio_dir.join(rec[fcol].trim()),
                    rec[lcol].trim().to_string(),
                ));
            }
            clips.sort_by(|a, b| a.path.cmp(&b.path));
            Ok(clips)
        }
    }
}

fn cmd_preprocess(config: &PipelineConfig, args: &PreprocessArgs) -> Result<()> {
    require_exists(&args.audio_dir)?;
    let clips = training_clips(&args.audio_dir, args.metadata.as_deref())?;
    let labels: Vec<&str> = clips.iter().map(|c| c.label.as_str()).collect();
    let folds = if clips.is_empty() {
        Vec::new()
    } else {
        spectro::assign_stratified_folds(
            &labels,
            config.preprocess.folds,
            config.stage_seed("preprocess"),
        )?
    };
    let filterbank = spectro::mel_filterbank(&config.mel)?;
    let mels_dir = config.out.join("mels");
    let p = &config.preprocess;

    let per_clip: Vec<Result<Vec<ManifestRow>>> = clips
        .par_iter()
        .zip(&folds)
        .map(|(clip, &fold)| {
            let audio = audio_io::decode(&clip.path)?;
            let mut audio = audio_io::resample(&audio, config.mel.sample_rate_hz)?;
            audio.clip_id = clip.clip_id.clone();
            let mut rows = Vec::new();
            for seg in spectro::segment(&audio, p.window_s, p.stride_s)? {
                let mut spec = spectro::compute_logmel_with(&seg.clip, &config.mel, &filterbank)?;
                spec.start_offset_s = seg.start_offset_s;
                let kept = spectro::weak_signal_filter(&spec, &p.quality).is_kept();
                if kept {
                    let name = format!("{}_{:.0}.mels", clip.clip_id, seg.start_offset_s * 1000.0);
                    let mut w = create(&mels_dir.join(&clip.label).join(name))?;
                    spectro::write_mels(&spec, &mut w)?;
                    w.flush()?;
                }
                rows.push((clip.clip_id.clone(), seg.start_offset_s, fold, kept));
            }
            Ok(rows)
        })
        .collect();

    let mut w = csv::Writer::from_writer(create(&config.out.join("manifest.csv"))?);
    w.write_record(["clip_id", "segment_offset", "fold", "kept"])?;
    let mut n = 0;
    for rows in per_clip {
        for (clip_id, offset, fold, kept) in rows? {
            w.write_record([
                clip_id,
                offset.to_string(),
                fold.to_string(),
                kept.to_string(),
            ])?;
            n += 1;
        }
    }
    w.flush()?;
    info!("preprocess: {} clips, {n} segments", clips.len());
    Ok(())
}

/// `(label, path)` for every `.mels` file under `<dir>/<label>/`, sorted.
fn mels_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    require_exists(dir)?;
    let mut out = Vec::new();
    for entry in WalkDir::new(dir)
        .min_depth(2)
        .max_depth(2)
        .sort_by_file_name()
    {
        let entry = entry.map_err(|e| CliError::Io(e.to_string()))?;
        let path = entry.path();
        if entry.file_type().is_file() && path.extension().is_some_and(|e| e == "mels") {
            let label = path
                .parent()
                .and_then(Path::file_name)
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            out.push((label, entry.into_path()));
        }
    }
    Ok(out)
}

fn load_labeled(dir: &Path) -> Result<Vec<LabeledSpectrogram>> {
    mels_files(dir)?
        .par_iter()
        .map(|(label, path)| {
            let stem = path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let spec = spectro::read_mels(stem, std::io::BufReader::new(fs::File::open(path)?))?;
            Ok(LabeledSpectrogram::new(spec, [label.clone()]))
        })
        .collect()
}

fn cmd_train_scorer(config: &PipelineConfig, args: &TrainScorerArgs) -> Result<()> {
    let dir = args
        .mels_dir
        .clone()
        .unwrap_or_else(|| config.out.join("mels"));
    let dataset = load_labeled(&dir)?;
    let labels: BTreeSet<&String> = dataset.iter().flat_map(|s| &s.labels).collect();
    let vocab = ClassVocabulary::new(labels.into_iter().cloned())?;
    let mut train = config.scorer;
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(lr) = args.base_lr {
        train.base_lr = lr;
    }
    let fit = scoring::train_linear_scorer(&dataset, &vocab, &train)?;
    let mut w = create(&config.out.join("scorer.txt"))?;
    fit.scorer.save(&mut w)?;
    w.flush()?;
    info!(
        "train-scorer: {} spectrograms, {} classes, loss {:.6} -> {:.6}",
        dataset.len(),
        vocab.len(),
        fit.losses.first().copied().unwrap_or(f64::NAN),
        fit.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_augment(config: &PipelineConfig, args: &AugmentArgs) -> Result<()> {
    let dir = args
        .mels_dir
        .clone()
        .unwrap_or_else(|| config.out.join("mels"));
    let files = mels_files(&dir)?;
    let dataset = load_labeled(&dir)?;
    let out_dir = config.out.join("augmented");
    for copy in 0..args.copies {
        let aug = AugmentConfig {
            seed: stage_seed(config.stage_seed("augment"), &copy.to_string()),
            ..config.augment.clone()
        };
        let augmented = augment::augment_batch(&dataset, &dataset, &aug)?;
        for ((label, path), sample) in files.iter().zip(&augmented) {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let mut w = create(&out_dir.join(label).join(format!("{stem}_aug{copy}.mels")))?;
            spectro::write_mels(&sample.spec, &mut w)?;
            w.flush()?;
        }
    }
    info!(
        "augment: {} spectrograms x {} copies",
        dataset.len(),
        args.copies
    );
    Ok(())
}

/// The site code embedded in a soundscape file name such as `7019_COR_20190904`.
pub fn site_from_clip_id(clip_id: &str) -> Option<SiteId> {
    clip_id.split('_').skip(1).find_map(|t| t.parse().ok())
}

fn read_weights(path: &Path, n: usize) -> Result<EnsembleWeights> {
    require_exists(path)?;
    let text = fs::read_to_string(path)?;
    let weights: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::Config(format!("bad weight `{t}`")))
        })
        .collect::<Result<_>>()?;
    if weights.len() != n {
        return Err(CliError::Config(format!(
            "{} weights for {n} streams",
            weights.len()
        )));
    }
    EnsembleWeights::new(weights).map_err(|e| CliError::Config(e.to_string()))
}

fn cmd_infer(config: &PipelineConfig, args: &InferArgs) -> Result<()> {
    let (vocab, streams) = if !args.precomputed.is_empty() {
        let mut vocab: Option<ClassVocabulary> = None;
        let mut streams = Vec::new();
        for path in &args.precomputed {
            require_exists(path)?;
            let (v, frames) = scoring::load_precomputed_scores(path, vocab.as_ref())
                .map_err(|e| CliError::ScorerLoad(format!("{}: {e}", path.display())))?;
            vocab.get_or_insert(v);
            streams.push(frames);
        }
        (vocab.expect("at least one stream"), streams)
    } else if !args.scorer.is_empty() {
        let audio = args
            .audio
            .as_ref()
            .ok_or_else(|| CliError::Config("--audio is required with --scorer".into()))?;
        require_exists(audio)?;
        let scorers: Vec<LinearMelScorer> = args
            .scorer
            .iter()
            .map(|p| {
                LinearMelScorer::load_path(p)
                    .map_err(|e| CliError::ScorerLoad(format!("{}: {e}", p.display())))
            })
            .collect::<Result<_>>()?;
        let vocab = scorers[0].vocabulary().clone();
        if scorers.iter().any(|s| s.vocabulary() != &vocab) {
            return Err(CliError::ScorerLoad(
                "scorers disagree on the class vocabulary".into(),
            ));
        }
        let files = if audio.is_dir() {
            wav_files(audio)?
        } else {
            vec![audio.clone()]
        };
        let filterbank = spectro::mel_filterbank(&config.mel)?;
        let window = WindowConfig::default();
        let mut streams: Vec<Vec<FrameProbabilities>> = vec![Vec::new(); scorers.len()];
        for path in &files {
            let clip = audio_io::decode(path)?;
            let clip = audio_io::resample(&clip, config.mel.sample_rate_hz)?;
            let spec = spectro::compute_logmel_with(&clip, &config.mel, &filterbank)?;
            for (stream, scorer) in streams.iter_mut().zip(&scorers) {
                stream.extend(scoring::score_spectrogram(
                    &spec,
                    clip.duration_s(),
                    scorer,
                    &window,
                )?);
            }
        }
        (vocab, streams)
    } else {
        return Err(CliError::Config(
            "infer needs --scorer or --precomputed".into(),
        ));
    };

    let weights = match &args.weights {
        Some(p) => read_weights(p, streams.len())?,
        None => EnsembleWeights::uniform(streams.len()),
    };
    let frames = scoring::ensemble_average(&streams, &weights)?;
    let mut w = create(&config.out.join("probs.csv"))?;
    scoring::write_probability_csv(&vocab, &frames, &mut w)?;
    w.flush()?;

    let clips: BTreeSet<&str> = frames.iter().map(|f| f.clip_id.as_str()).collect();
    let sites: Vec<(&str, SiteId)> = clips
        .iter()
        .filter_map(|&c| site_from_clip_id(c).map(|s| (c, s)))
        .collect();
    if !sites.is_empty() {
        let mut w = csv::Writer::from_writer(create(&config.out.join("clip_sites.csv"))?);
        w.write_record(["clip_id", "site_id"])?;
        for (clip, site) in sites {
            w.write_record([clip, site.as_str()])?;
        }
        w.flush()?;
    }
    info!("infer: {} clips, {} frames", clips.len(), frames.len());
    Ok(())
}

fn read_clip_sites(path: &Path) -> Result<BTreeMap<String, SiteId>> {
    require_exists(path)?;
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        out.insert(rec[0].trim().to_string(), rec[1].trim().parse()?);
    }
    Ok(out)
}

/// Ground-truth labels by `(clip, end_second)` and the site of every clip in it.
fn truth_frames(rows: &[PredictionRow]) -> Result<(FrameTruth, BTreeMap<String, SiteId>)> {
    let mut truth = FrameTruth::new();
    let mut sites = BTreeMap::new();
    for row in rows {
        let id: RowId = row.row_id.parse()?;
        let birds = row
            .labels
            .iter()
            .filter(|l| l.as_str() != scoring::NOCALL)
            .cloned()
            .collect();
        sites.insert(id.clip_id.clone(), id.site);
        truth.insert((id.clip_id, id.end_second), birds);
    }
    Ok((truth, sites))
}

struct SiteInputs {
    clip_sites: BTreeMap<String, Site>,
    occurrences: OccurrenceTable,
}

fn site_inputs(
    config: &PipelineConfig,
    args: &SiteArgs,
    known: BTreeMap<String, SiteId>,
    clips: &BTreeSet<&str>,
) -> Result<SiteInputs> {
    require_exists(&args.occurrences)?;
    let occurrences = OccurrenceTable::load(&args.occurrences)?;
    let table = match &args.sites {
        Some(p) => {
            require_exists(p)?;
            SiteTable::load(p)?
        }
        None => SiteTable::default(),
    };
    let mut ids = known;
    let default_path = config.out.join("clip_sites.csv");
    match &args.clip_sites {
        Some(p) => ids.extend(read_clip_sites(p)?),
        None if default_path.exists() => ids.extend(read_clip_sites(&default_path)?),
        None => {}
    }
    for &clip in clips {
        if !ids.contains_key(clip) {
            let site = site_from_clip_id(clip)
                .ok_or_else(|| CliError::Config(format!("no site known for clip `{clip}`")))?;
            ids.insert(clip.to_string(), site);
        }
    }
    Ok(SiteInputs {
        clip_sites: ids.into_iter().map(|(c, id)| (c, table.site(id))).collect(),
        occurrences,
    })
}

fn load_probs(path: &Path) -> Result<(ClassVocabulary, Vec<FrameProbabilities>)> {
    require_exists(path)?;
    scoring::load_precomputed_scores(path, None)
        .map_err(|e| CliError::ScorerLoad(format!("{}: {e}", path.display())))
}

fn cmd_train_calibrator(config: &PipelineConfig, args: &TrainCalibratorArgs) -> Result<()> {
    let probs_path = args
        .probs
        .clone()
        .unwrap_or_else(|| config.out.join("probs.csv"));
    let (vocab, frames) = load_probs(&probs_path)?;
    require_exists(&args.truth)?;
    let (truth, truth_sites) = truth_frames(&postproc::load_submission(&args.truth)?)?;
    let clips: BTreeSet<&str> = frames.iter().map(|f| f.clip_id.as_str()).collect();
    let inputs = site_inputs(config, &args.site, truth_sites, &clips)?;
    let samples = calib::build_samples(
        &frames,
        &vocab,
        &inputs.clip_sites,
        &inputs.occurrences,
        Some(&truth),
    )?;

    let mut w = create(&config.out.join("calibration_samples.csv"))?;
    calib::write_samples_csv(&samples, &mut w)?;
    w.flush()?;

    let loco = calib::leave_one_clip_out(&samples, &config.calib)?;
    let oof = calib::to_frames(&samples, &loco.confidences, &vocab);
    let mut w = create(&config.out.join("oof_calibrated.csv"))?;
    scoring::write_probability_csv(&vocab, &oof, &mut w)?;
    w.flush()?;

    let model = calib::train_calibrator(&samples, &config.calib)?;
    let mut w = create(&config.out.join("calibrator.txt"))?;
    model.save(&mut w)?;
    w.flush()?;
    info!(
        "train-calibrator: {} samples, {} folds",
        samples.len(),
        loco.fold_models.len()
    );
    Ok(())
}

fn write_scored_rows(
    path: &Path,
    vocab: &ClassVocabulary,
    adjusted: &[FrameProbabilities],
) -> Result<()> {
    let mut w = create(path)?;
    scoring::write_probability_csv(vocab, adjusted, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_postprocess(config: &PipelineConfig, args: &PostprocessArgs) -> Result<()> {
    let probs_path = args
        .probs
        .clone()
        .unwrap_or_else(|| config.out.join("probs.csv"));
    let (vocab, raw) = load_probs(&probs_path)?;
    let clips: BTreeSet<&str> = raw.iter().map(|f| f.clip_id.as_str()).collect();
    let inputs = site_inputs(config, &args.site, BTreeMap::new(), &clips)?;
    let calibrated = match &args.calibrated {
        Some(p) => {
            require_exists(p)?;
            scoring::load_precomputed_scores(p, Some(&vocab))
                .map_err(|e| CliError::ScorerLoad(format!("{}: {e}", p.display())))?
                .1
        }
        None => {
            let path = args
                .calibrator
                .clone()
                .unwrap_or_else(|| config.out.join("calibrator.txt"));
            require_exists(&path)?;
            let model = CalibratorModel::load_path(&path)
                .map_err(|e| CliError::ScorerLoad(e.to_string()))?;
            let samples =
                calib::build_samples(&raw, &vocab, &inputs.clip_sites, &inputs.occurrences, None)?;
            calib::to_frames(&samples, &calib::calibrate(&model, &samples), &vocab)
        }
    };
    let ctx = SiteContext::new(
        &inputs.clip_sites,
        &vocab,
        &inputs.occurrences,
        &config.postproc,
    );
    let adjusted = postproc::adjust_confidences(&calibrated, &raw, &ctx, &config.postproc)?;
    write_scored_rows(&config.out.join("adjusted.csv"), &vocab, &adjusted)?;
    let rows = postproc::assemble_rows(
        &postproc::scored_rows(&adjusted, &ctx)?,
        &vocab,
        &config.postproc,
    );
    let mut w = create(&config.out.join("submission.csv"))?;
    postproc::write_submission(&rows, &mut w)?;
    w.flush()?;
    info!("postprocess: {} rows", rows.len());
    Ok(())
}

fn cmd_sweep(config: &PipelineConfig, args: &SweepArgs) -> Result<()> {
    let path = args
        .adjusted
        .clone()
        .unwrap_or_else(|| config.out.join("adjusted.csv"));
    let (vocab, adjusted) = load_probs(&path)?;
    require_exists(&args.truth)?;
    let truth = postproc::load_submission(&args.truth)?;
    let (_, truth_sites) = truth_frames(&truth)?;
    let mut ids = truth_sites;
    let clip_sites = args
        .clip_sites
        .clone()
        .unwrap_or_else(|| config.out.join("clip_sites.csv"));
    if clip_sites.exists() {
        ids.extend(read_clip_sites(&clip_sites)?);
    }
    for f in &adjusted {
        if !ids.contains_key(&f.clip_id) {
            if let Some(site) = site_from_clip_id(&f.clip_id) {
                ids.insert(f.clip_id.clone(), site);
            }
        }
    }
    let sites: BTreeMap<String, Site> = ids
        .into_iter()
        .map(|(c, id)| (c, Site::with_default_location(id)))
        .collect();
    let ctx = SiteContext::new(
        &sites,
        &vocab,
        &OccurrenceTable::default(),
        &config.postproc,
    );
    let scored = postproc::scored_rows(&adjusted, &ctx)?;
    let step = args.step.unwrap_or(config.sweep_step);
    let best = metrics::sweep_thresholds(
        &scored,
        &truth,
        &vocab,
        &config.postproc,
        step,
        config.f1_mode,
    )?;
    let mut kv = KvMap::default();
    kv.insert("postproc.bird_threshold", best.bird_threshold);
    kv.insert("postproc.nocall_threshold", best.nocall_threshold);
    fs::write(config.out.join("thresholds.conf"), kv.to_text())?;
    println!(
        "bird_threshold {} nocall_threshold {} ({} candidates)\n{}",
        best.bird_threshold, best.nocall_threshold, best.candidates_evaluated, best.report
    );
    Ok(())
}

fn cmd_evaluate(config: &PipelineConfig, args: &EvaluateArgs) -> Result<()> {
    let pred_path = args
        .pred
        .clone()
        .unwrap_or_else(|| config.out.join("submission.csv"));
    require_exists(&pred_path)?;
    require_exists(&args.truth)?;
    let pred = postproc::load_submission(&pred_path)?;
    let truth = postproc::load_submission(&args.truth)?;
    let report = metrics::evaluate(&pred, &truth, args.mode.unwrap_or(config.f1_mode))?;
    let mut w = create(&config.out.join("report.csv"))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    println!("{report}");
    Ok(())
}

/// Binary PGM with time on the x axis and the lowest mel band at the bottom.
pub fn write_pgm<W: Write>(
    spec: &spectro::MelSpectrogram,
    floor_db: f64,
    mut w: W,
) -> std::io::Result<()> {
    let (rows, cols) = spec.data.dim();
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in (0..rows).rev() {
        for c in 0..cols {
            let v = ((spec.data[[r, c]] - floor_db) / -floor_db).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    w.write_all(&pixels)
}

fn cmd_export_spectrogram(config: &PipelineConfig, args: &ExportArgs) -> Result<()> {
    require_exists(&args.mels)?;
    let stem = args
        .mels
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let spec = spectro::read_mels(
        stem.clone(),
        std::io::BufReader::new(fs::File::open(&args.mels)?),
    )?;
    let mut w = create(&config.out.join(format!("{stem}.pgm")))?;
    write_pgm(&spec, config.mel.log_floor_db, &mut w)?;
    w.flush()?;
    Ok(())
}
