//! From calibrated confidences to submission rows.
//!
//! Per row the order is fixed: rejection rules zero out implausible species,
//! the site's frequent species are boosted, then the bird and nocall
//! thresholds pick the label set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::geo::{self, GeoError, OccurrenceTable, Site, SiteId};
use crate::kv::{KvError, KvMap};
use crate::scoring::{ClassVocabulary, FrameProbabilities, NOCALL};

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("invalid postprocessing config: {0}")]
    InvalidConfig(String),
    #[error("inputs are not aligned: {0}")]
    Misaligned(String),
    #[error("no site known for clip `{0}`")]
    UnknownClipSite(String),
    #[error("malformed row id `{0}`")]
    RowId(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PostprocError>;

/// Species identifiers for Great Horned Owl and Plumbeous Pigeon.
pub const DEFAULT_BLACKLIST: [&str; 2] = ["grhowl", "plupig2"];

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocConfig {
    pub max_distance_km: f64,
    pub min_raw_prob: f64,
    pub species_blacklist: BTreeSet<String>,
    pub frequent_bird_boost: f64,
    pub frequent_birds_per_site: BTreeMap<SiteId, BTreeSet<String>>,
    pub bird_threshold: f64,
    pub nocall_threshold: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            max_distance_km: 100.0,
            min_raw_prob: 0.01,
            species_blacklist: DEFAULT_BLACKLIST.iter().map(|s| s.to_string()).collect(),
            frequent_bird_boost: 0.1,
            frequent_birds_per_site: BTreeMap::new(),
            bird_threshold: 0.5,
            nocall_threshold: 0.5,
        }
    }
}

fn word_set(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(String::from).collect()
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PostprocError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.bird_threshold)
            || !(0.0..=1.0).contains(&self.nocall_threshold)
        {
            return bad("thresholds must be in [0, 1]");
        }
        if !(self.frequent_bird_boost >= 0.0) {
            return bad("frequent_bird_boost must be >= 0");
        }
        if !(self.max_distance_km >= 0.0) || !(0.0..=1.0).contains(&self.min_raw_prob) {
            return bad("max_distance_km must be >= 0 and min_raw_prob in [0, 1]");
        }
        Ok(())
    }

    pub fn frequent_birds(&self, site: SiteId) -> Option<&BTreeSet<String>> {
        self.frequent_birds_per_site.get(&site)
    }

    /// Keys `{prefix}max_distance_km`, `min_raw_prob`, `blacklist`
    /// (space-separated), `frequent_bird_boost`, `frequent.<SITE>`,
    /// `bird_threshold` and `nocall_threshold`.
    pub fn apply_kv(&mut self, kv: &KvMap, prefix: &str) -> Result<()> {
        let k = |name: &str| format!("{prefix}{name}");
        kv.read(&k("max_distance_km"), &mut self.max_distance_km)?;
        kv.read(&k("min_raw_prob"), &mut self.min_raw_prob)?;
        kv.read(&k("frequent_bird_boost"), &mut self.frequent_bird_boost)?;
        kv.read(&k("bird_threshold"), &mut self.bird_threshold)?;
        kv.read(&k("nocall_threshold"), &mut self.nocall_threshold)?;
        if let Some(v) = kv.get_str(&k("blacklist")) {
            self.species_blacklist = word_set(v);
        }
        for site in SiteId::ALL {
            if let Some(v) = kv.get_str(&k(&format!("frequent.{site}"))) {
                self.frequent_birds_per_site.insert(site, word_set(v));
            }
        }
        self.validate()
    }

    pub fn is_key(name: &str) -> bool {
        matches!(
            name,
            "max_distance_km"
                | "min_raw_prob"
                | "frequent_bird_boost"
                | "bird_threshold"
                | "nocall_threshold"
                | "blacklist"
        ) || name
            .strip_prefix("frequent.")
            .is_some_and(|s| s.parse::<SiteId>().is_ok())
    }

    pub fn to_kv(&self, prefix: &str) -> KvMap {
        let mut kv = KvMap::default();
        let k = |name: &str| format!("{prefix}{name}");
        let join = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(" ");
        kv.insert(k("max_distance_km"), self.max_distance_km);
        kv.insert(k("min_raw_prob"), self.min_raw_prob);
        kv.insert(k("blacklist"), join(&self.species_blacklist));
        kv.insert(k("frequent_bird_boost"), self.frequent_bird_boost);
        for (site, birds) in &self.frequent_birds_per_site {
            kv.insert(k(&format!("frequent.{site}")), join(birds));
        }
        kv.insert(k("bird_threshold"), self.bird_threshold);
        kv.insert(k("nocall_threshold"), self.nocall_threshold);
        kv
    }
}

/// `{clip_id}_{site_id}_{end_second}`; the clip id may itself contain `_`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowId {
    pub clip_id: String,
    pub site: SiteId,
    pub end_second: u32,
}

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.clip_id, self.site, self.end_second)
    }
}

impl FromStr for RowId {
    type Err = PostprocError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || PostprocError::RowId(s.to_string());
        let mut parts = s.rsplitn(3, '_');
        let end_second = parts.next().and_then(|k| k.parse().ok()).ok_or_else(bad)?;
        let site = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let clip_id = parts.next().filter(|c| !c.is_empty()).ok_or_else(bad)?;
        Ok(Self {
            clip_id: clip_id.to_string(),
            site,
            end_second,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRow {
    pub row_id: String,
    /// Birds in vocabulary order, then `nocall` if present. Never empty.
    pub labels: Vec<String>,
}

impl PredictionRow {
    pub fn label_set(&self) -> BTreeSet<&str> {
        self.labels.iter().map(String::as_str).collect()
    }
}

/// Per-species rejection inputs for one clip's site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSpeciesInfo {
    pub min_distance_km: Vec<f64>,
    pub blacklisted: Vec<bool>,
    pub frequent: Vec<bool>,
}

impl SiteSpeciesInfo {
    pub fn new(
        vocab: &ClassVocabulary,
        site: &Site,
        occ: &OccurrenceTable,
        cfg: &PostprocConfig,
    ) -> Self {
        let frequent = cfg.frequent_birds(site.id);
        Self {
            min_distance_km: vocab
                .labels()
                .iter()
                .map(|s| geo::min_distance_or_max(s, site, occ))
                .collect(),
            blacklisted: vocab
                .labels()
                .iter()
                .map(|s| cfg.species_blacklist.contains(s))
                .collect(),
            frequent: vocab
                .labels()
                .iter()
                .map(|s| frequent.is_some_and(|f| f.contains(s)))
                .collect(),
        }
    }
}

/// Zeroes every species that is too far from the site, too unlikely in the
/// raw frame, or blacklisted.
pub fn reject_frame(
    confidences: &mut [f64],
    raw: &[f64],
    info: &SiteSpeciesInfo,
    cfg: &PostprocConfig,
) {
    for (c, conf) in confidences.iter_mut().enumerate() {
        if is_rejected(c, raw, info, cfg) {
            *conf = 0.0;
        }
    }
}

fn is_rejected(c: usize, raw: &[f64], info: &SiteSpeciesInfo, cfg: &PostprocConfig) -> bool {
    info.min_distance_km[c] > cfg.max_distance_km
        || raw[c] < cfg.min_raw_prob
        || info.blacklisted[c]
}

/// Adds the boost to the site's frequent species, capped at 1.
pub fn boost_frame(confidences: &mut [f64], info: &SiteSpeciesInfo, cfg: &PostprocConfig) {
    for (c, conf) in confidences.iter_mut().enumerate() {
        if info.frequent[c] {
            *conf = (*conf + cfg.frequent_bird_boost).min(1.0);
        }
    }
}

/// `1 - max` over the species confidences of one row.
pub fn nocall_confidence(confidences: &[f64]) -> f64 {
    1.0 - confidences.iter().copied().fold(0.0, f64::max)
}

pub fn assemble_row(
    row_id: String,
    confidences: &[f64],
    vocab: &ClassVocabulary,
    cfg: &PostprocConfig,
) -> PredictionRow {
    let mut labels: Vec<String> = vocab
        .labels()
        .iter()
        .zip(confidences)
        .filter(|(_, &c)| c >= cfg.bird_threshold)
        .map(|(l, _)| l.clone())
        .collect();
    if labels.is_empty() || nocall_confidence(confidences) >= cfg.nocall_threshold {
        labels.push(NOCALL.to_string());
    }
    PredictionRow { row_id, labels }
}

/// Clip-to-site lookup with per-site species info computed once.
pub struct SiteContext<'a> {
    sites: &'a BTreeMap<String, Site>,
    info: BTreeMap<SiteId, SiteSpeciesInfo>,
}

impl<'a> SiteContext<'a> {
    pub fn new(
        sites: &'a BTreeMap<String, Site>,
        vocab: &ClassVocabulary,
        occ: &OccurrenceTable,
        cfg: &PostprocConfig,
    ) -> Self {
        let info = sites
            .values()
            .map(|site| (site.id, SiteSpeciesInfo::new(vocab, site, occ, cfg)))
            .collect();
        Self { sites, info }
    }

    pub fn site(&self, clip_id: &str) -> Result<&'a Site> {
        self.sites
            .get(clip_id)
            .ok_or_else(|| PostprocError::UnknownClipSite(clip_id.to_string()))
    }

    pub fn info(&self, clip_id: &str) -> Result<&SiteSpeciesInfo> {
        Ok(&self.info[&self.site(clip_id)?.id])
    }
}

fn raw_index(raw: &[FrameProbabilities]) -> BTreeMap<(&str, u32), &FrameProbabilities> {
    raw.iter()
        .map(|f| ((f.clip_id.as_str(), f.end_second), f))
        .collect()
}

/// Applies the rejection rules to every calibrated row, using the raw frame
/// probability at the same `(clip, end_second)`.
pub fn apply_fp_reduction(
    calibrated: &[FrameProbabilities],
    raw: &[FrameProbabilities],
    ctx: &SiteContext<'_>,
    cfg: &PostprocConfig,
) -> Result<Vec<FrameProbabilities>> {
    let raw = raw_index(raw);
    calibrated
        .iter()
        .map(|f| {
            let r = raw
                .get(&(f.clip_id.as_str(), f.end_second))
                .filter(|r| r.probs.len() == f.probs.len())
                .ok_or_else(|| {
                    PostprocError::Misaligned(format!(
                        "no raw frame for ({}, {})",
                        f.clip_id, f.end_second
                    ))
                })?;
            let mut out = f.clone();
            reject_frame(&mut out.probs, &r.probs, ctx.info(&f.clip_id)?, cfg);
            Ok(out)
        })
        .collect()
}

pub fn apply_fn_reduction(
    calibrated: &[FrameProbabilities],
    ctx: &SiteContext<'_>,
    cfg: &PostprocConfig,
) -> Result<Vec<FrameProbabilities>> {
    calibrated
        .iter()
        .map(|f| {
            let mut out = f.clone();
            boost_frame(&mut out.probs, ctx.info(&f.clip_id)?, cfg);
            Ok(out)
        })
        .collect()
}

/// Rejection followed by boosting, without thresholds. Rejected species stay
/// at 0 even when they are frequent at the site.
pub fn adjust_confidences(
    calibrated: &[FrameProbabilities],
    raw: &[FrameProbabilities],
    ctx: &SiteContext<'_>,
    cfg: &PostprocConfig,
) -> Result<Vec<FrameProbabilities>> {
    let raw = raw_index(raw);
    calibrated
        .iter()
        .map(|f| {
            let r = raw
                .get(&(f.clip_id.as_str(), f.end_second))
                .filter(|r| r.probs.len() == f.probs.len())
                .ok_or_else(|| {
                    PostprocError::Misaligned(format!(
                        "no raw frame for ({}, {})",
                        f.clip_id, f.end_second
                    ))
                })?;
            let info = ctx.info(&f.clip_id)?;
            let mut out = f.clone();
            for (c, conf) in out.probs.iter_mut().enumerate() {
                if is_rejected(c, &r.probs, info, cfg) {
                    *conf = 0.0;
                } else if info.frequent[c] {
                    *conf = (*conf + cfg.frequent_bird_boost).min(1.0);
                }
            }
            Ok(out)
        })
        .collect()
}

/// A row id with its adjusted per-species confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRow {
    pub row_id: String,
    pub confidences: Vec<f64>,
}

/// Attaches row ids, sorted by `(clip_id, site, end_second)`.
pub fn scored_rows(
    adjusted: &[FrameProbabilities],
    ctx: &SiteContext<'_>,
) -> Result<Vec<ScoredRow>> {
    let mut keyed: Vec<(RowId, &FrameProbabilities)> = adjusted
        .iter()
        .map(|f| {
            Ok((
                RowId {
                    clip_id: f.clip_id.clone(),
                    site: ctx.site(&f.clip_id)?.id,
                    end_second: f.end_second,
                },
                f,
            ))
        })
        .collect::<Result<_>>()?;
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(keyed
        .into_iter()
        .map(|(id, f)| ScoredRow {
            row_id: id.to_string(),
            confidences: f.probs.clone(),
        })
        .collect())
}

pub fn assemble_rows(
    scored: &[ScoredRow],
    vocab: &ClassVocabulary,
    cfg: &PostprocConfig,
) -> Vec<PredictionRow> {
    scored
        .iter()
        .map(|r| assemble_row(r.row_id.clone(), &r.confidences, vocab, cfg))
        .collect()
}

/// The full rule chain: reject, boost, threshold.
pub fn postprocess(
    calibrated: &[FrameProbabilities],
    raw: &[FrameProbabilities],
    vocab: &ClassVocabulary,
    ctx: &SiteContext<'_>,
    cfg: &PostprocConfig,
) -> Result<Vec<PredictionRow>> {
    cfg.validate()?;
    let scored = scored_rows(&adjust_confidences(calibrated, raw, ctx, cfg)?, ctx)?;
    Ok(assemble_rows(&scored, vocab, cfg))
}

/// The `n` species with the most occurrences within `max_distance_km` of the
/// site; ties go to the lexicographically smaller identifier.
pub fn frequent_birds(
    occ: &OccurrenceTable,
    site: &Site,
    max_distance_km: f64,
    n: usize,
) -> BTreeSet<String> {
    let mut counts: Vec<(usize, &str)> = occ
        .species()
        .map(|s| {
            let near = occ
                .points(s)
                .unwrap_or_default()
                .iter()
                .filter(|&&p| geo::haversine_km(p, site.location) <= max_distance_km)
                .count();
            (near, s)
        })
        .filter(|(c, _)| *c > 0)
        .collect();
    counts.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    counts
        .into_iter()
        .take(n)
        .map(|(_, s)| s.to_string())
        .collect()
}

pub fn write_submission<W: Write>(rows: &[PredictionRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row_id", "birds"])?;
    for r in rows {
        out.write_record([r.row_id.as_str(), r.labels.join(" ").as_str()])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads `row_id,birds`; also used for ground truth.
pub fn read_submission<R: Read>(r: R) -> Result<Vec<PredictionRow>> {
    let mut reader = csv::Reader::from_reader(r);
    if reader
        .headers()?
        .iter()
        .map(str::trim)
        .ne(["row_id", "birds"])
    {
        return Err(PostprocError::Schema(
            "expected header `row_id,birds`".into(),
        ));
    }
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            let labels: Vec<String> = rec[1].split_whitespace().map(String::from).collect();
            if labels.is_empty() {
                return Err(PostprocError::Schema(format!(
                    "row `{}` has no labels",
                    &rec[0]
                )));
            }
            Ok(PredictionRow {
                row_id: rec[0].trim().to_string(),
                labels,
            })
        })
        .collect()
}

pub fn load_submission(path: &Path) -> Result<Vec<PredictionRow>> {
    read_submission(std::fs::File::open(path)?)
}
