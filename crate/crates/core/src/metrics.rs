//! Row-wise F1 with separate scores for rows with and without birds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::postproc::{self, PostprocConfig, PredictionRow, ScoredRow};
use crate::scoring::{ClassVocabulary, NOCALL};

pub const HNVS_NOCALL_WEIGHT: f64 = 0.63;
pub const HNVS_CALL_WEIGHT: f64 = 0.37;
pub const LNVS_NOCALL_WEIGHT: f64 = 0.54;
pub const LNVS_CALL_WEIGHT: f64 = 0.46;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label sets must be non-empty")]
    EmptySet,
    #[error("prediction and truth rows differ: {0}")]
    RowMismatch(String),
    #[error("no rows to evaluate")]
    NoRows,
    #[error("grid step must divide 1 evenly, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `2 |pred ∩ truth| / (|pred| + |truth|)`.
pub fn row_f1<S: AsRef<str> + Ord>(pred: &BTreeSet<S>, truth: &BTreeSet<S>) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let hits = pred.intersection(truth).count();
    Ok(2.0 * hits as f64 / (pred.len() + truth.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum F1Mode {
    /// Per-row F1 averaged over rows.
    #[default]
    RowMean,
    /// TP, FP and FN pooled over all rows before one F1.
    GlobalMicro,
}

impl std::str::FromStr for F1Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "row-mean" => Ok(F1Mode::RowMean),
            "global-micro" => Ok(F1Mode::GlobalMicro),
            other => Err(format!("unknown F1 mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub f1_overall: f64,
    pub f1_call: f64,
    pub f1_nocall: f64,
    pub hnvs: f64,
    pub lnvs: f64,
    pub n_rows: usize,
    pub n_call: usize,
    pub n_nocall: usize,
}

impl MetricReport {
    pub fn from_parts(
        f1_overall: f64,
        f1_call: f64,
        f1_nocall: f64,
        n_rows: usize,
        n_call: usize,
        n_nocall: usize,
    ) -> Self {
        Self {
            f1_overall,
            f1_call,
            f1_nocall,
            hnvs: HNVS_NOCALL_WEIGHT * f1_nocall + HNVS_CALL_WEIGHT * f1_call,
            lnvs: LNVS_NOCALL_WEIGHT * f1_nocall + LNVS_CALL_WEIGHT * f1_call,
            n_rows,
            n_call,
            n_nocall,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "f1_overall,f1_call,f1_nocall,hnvs,lnvs,n_rows,n_call,n_nocall"
        )?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.f1_overall,
            self.f1_call,
            self.f1_nocall,
            self.hnvs,
            self.lnvs,
            self.n_rows,
            self.n_call,
            self.n_nocall
        )?;
        Ok(())
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12}{:>10}", "metric", "value")?;
        for (name, v) in [
            ("f1_overall", self.f1_overall),
            ("f1_call", self.f1_call),
            ("f1_nocall", self.f1_nocall),
            ("hnvs", self.hnvs),
            ("lnvs", self.lnvs),
        ] {
            writeln!(f, "{name:<12}{v:>10.4}")?;
        }
        write!(
            f,
            "rows {} (call {}, nocall {})",
            self.n_rows, self.n_call, self.n_nocall
        )
    }
}

/// Running totals for one group of rows.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    rows: usize,
    f1_sum: f64,
    hits: usize,
    sizes: usize,
}

impl Tally {
    fn add(&mut self, hits: usize, n_pred: usize, n_truth: usize) {
        self.rows += 1;
        self.f1_sum += 2.0 * hits as f64 / (n_pred + n_truth) as f64;
        self.hits += hits;
        self.sizes += n_pred + n_truth;
    }

    /// An empty group scores 1.
    fn score(&self, mode: F1Mode) -> f64 {
        match mode {
            _ if self.rows == 0 => 1.0,
            F1Mode::RowMean => self.f1_sum / self.rows as f64,
            F1Mode::GlobalMicro => 2.0 * self.hits as f64 / self.sizes as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tallies {
    all: Tally,
    call: Tally,
    nocall: Tally,
}

impl Tallies {
    fn add(&mut self, truth_has_bird: bool, hits: usize, n_pred: usize, n_truth: usize) {
        self.all.add(hits, n_pred, n_truth);
        if truth_has_bird {
            self.call.add(hits, n_pred, n_truth);
        } else {
            self.nocall.add(hits, n_pred, n_truth);
        }
    }

    fn report(&self, mode: F1Mode) -> MetricReport {
        MetricReport::from_parts(
            self.all.score(mode),
            self.call.score(mode),
            self.nocall.score(mode),
            self.all.rows,
            self.call.rows,
            self.nocall.rows,
        )
    }
}

fn truth_by_id(truth: &[PredictionRow]) -> Result<BTreeMap<&str, BTreeSet<&str>>> {
    let mut out = BTreeMap::new();
    for row in truth {
        let set = row.label_set();
        if set.is_empty() {
            return Err(MetricsError::EmptySet);
        }
        if out.insert(row.row_id.as_str(), set).is_some() {
            return Err(MetricsError::RowMismatch(format!(
                "duplicate truth row `{}`",
                row.row_id
            )));
        }
    }
    Ok(out)
}

fn has_bird(set: &BTreeSet<&str>) -> bool {
    set.iter().any(|l| *l != NOCALL)
}

/// Scores predictions against truth rows with the same ids, in any order.
/// A group without rows (no call rows, say) scores 1.
pub fn evaluate(
    pred: &[PredictionRow],
    truth: &[PredictionRow],
    mode: F1Mode,
) -> Result<MetricReport> {
    let truth = truth_by_id(truth)?;
    let mut pred_by_id: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for row in pred {
        if pred_by_id
            .insert(row.row_id.as_str(), row.label_set())
            .is_some()
        {
            return Err(MetricsError::RowMismatch(format!(
                "duplicate prediction row `{}`",
                row.row_id
            )));
        }
    }
    if pred_by_id.len() != truth.len() {
        return Err(MetricsError::RowMismatch(format!(
            "{} predicted rows, {} truth rows",
            pred_by_id.len(),
            truth.len()
        )));
    }
    let mut tallies = Tallies::default();
    for (id, t) in &truth {
        let p = pred_by_id
            .get(id)
            .ok_or_else(|| MetricsError::RowMismatch(format!("no prediction for `{id}`")))?;
        if p.is_empty() {
            return Err(MetricsError::EmptySet);
        }
        tallies.add(has_bird(t), p.intersection(t).count(), p.len(), t.len());
    }
    Ok(tallies.report(mode))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub bird_threshold: f64,
    pub nocall_threshold: f64,
    pub report: MetricReport,
    pub candidates_evaluated: usize,
}

/// Everything about one row that the sweep needs, for every bird threshold.
struct RowProfile<'a> {
    id: &'a str,
    truth_size: usize,
    truth_has_bird: bool,
    truth_nocall: bool,
    nocall_confidence: f64,
    /// Predicted bird count and correct birds at each bird-threshold index.
    counts: Vec<(usize, usize)>,
}

fn grid_points(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(MetricsError::InvalidStep(step));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(MetricsError::InvalidStep(step));
    }
    Ok(n as usize)
}

/// Exhaustive search over `(bird, nocall)` thresholds on `{0, step, ..., 1}²`
/// maximizing the overall F1. Ties go to the higher bird threshold, then the
/// higher nocall threshold.
pub fn sweep_thresholds(
    scored: &[ScoredRow],
    truth: &[PredictionRow],
    vocab: &ClassVocabulary,
    base: &PostprocConfig,
    step: f64,
    mode: F1Mode,
) -> Result<SweepResult> {
    if scored.is_empty() {
        return Err(MetricsError::NoRows);
    }
    let n = grid_points(step)?;
    let grid: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let truth = truth_by_id(truth)?;
    if truth.len() != scored.len() {
        return Err(MetricsError::RowMismatch(format!(
            "{} scored rows, {} truth rows",
            scored.len(),
            truth.len()
        )));
    }

    let mut profiles: Vec<RowProfile> = scored
        .iter()
        .map(|row| {
            let t = truth.get(row.row_id.as_str()).ok_or_else(|| {
                MetricsError::RowMismatch(format!("no truth for `{}`", row.row_id))
            })?;
            let mut by_conf: Vec<(f64, bool)> = vocab
                .labels()
                .iter()
                .zip(&row.confidences)
                .map(|(l, &c)| (c, t.contains(l.as_str())))
                .collect();
            by_conf.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut correct_prefix = Vec::with_capacity(by_conf.len() + 1);
            correct_prefix.push(0);
            for (_, hit) in &by_conf {
                correct_prefix.push(correct_prefix.last().unwrap() + usize::from(*hit));
            }
            let counts = grid
                .iter()
                .map(|&b| {
                    let k = by_conf.partition_point(|(c, _)| *c >= b);
                    (k, correct_prefix[k])
                })
                .collect();
            Ok(RowProfile {
                id: row.row_id.as_str(),
                truth_size: t.len(),
                truth_has_bird: has_bird(t),
                truth_nocall: t.contains(NOCALL),
                nocall_confidence: postproc::nocall_confidence(&row.confidences),
                counts,
            })
        })
        .collect::<Result<_>>()?;
    // Same summation order as `evaluate`.
    profiles.sort_by(|a, b| a.id.cmp(b.id));

    let score_at = |i: usize, j: usize| -> f64 {
        let mut tallies = Tallies::default();
        for p in &profiles {
            let (birds, correct) = p.counts[i];
            let nocall = birds == 0 || p.nocall_confidence >= grid[j];
            let hits = correct + usize::from(nocall && p.truth_nocall);
            tallies.add(
                p.truth_has_bird,
                hits,
                birds + usize::from(nocall),
                p.truth_size,
            );
        }
        tallies.report(mode).f1_overall
    };

    let per_bird: Vec<(f64, usize, usize)> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::NEG_INFINITY, i, 0);
            for j in (0..=n).rev() {
                let v = score_at(i, j);
                if v > best.0 {
                    best = (v, i, j);
                }
            }
            best
        })
        .collect();
    let mut best = per_bird[n];
    for &candidate in per_bird.iter().rev() {
        if candidate.0 > best.0 {
            best = candidate;
        }
    }

    let cfg = PostprocConfig {
        bird_threshold: grid[best.1],
        nocall_threshold: grid[best.2],
        ..base.clone()
    };
    let rows = postproc::assemble_rows(scored, vocab, &cfg);
    let owned_truth: Vec<PredictionRow> = truth
        .iter()
        .map(|(id, set)| PredictionRow {
            row_id: id.to_string(),
            labels: set.iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    Ok(SweepResult {
        bird_threshold: cfg.bird_threshold,
        nocall_threshold: cfg.nocall_threshold,
        report: evaluate(&rows, &owned_truth, mode)?,
        candidates_evaluated: (n + 1) * (n + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set<'a>(labels: &[&'a str]) -> BTreeSet<&'a str> {
        labels.iter().copied().collect()
    }

    fn row(id: &str, labels: &[&str]) -> PredictionRow {
        PredictionRow {
            row_id: id.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn row_f1_values() {
        assert_eq!(row_f1(&set(&["a"]), &set(&["a"])).unwrap(), 1.0);
        assert_eq!(row_f1(&set(&["a", "b"]), &set(&["a"])).unwrap(), 2.0 / 3.0);
        assert_eq!(row_f1(&set(&["b"]), &set(&["a"])).unwrap(), 0.0);
        assert!(matches!(
            row_f1(&set(&[]), &set(&["a"])),
            Err(MetricsError::EmptySet)
        ));
    }

    #[test]
    fn weighted_scores() {
        let truth = vec![row("r1", &["nocall"]), row("r2", &["a"])];
        let pred = vec![row("r1", &["nocall"]), row("r2", &["b"])];
        let r = evaluate(&pred, &truth, F1Mode::RowMean).unwrap();
        assert_eq!((r.f1_nocall, r.f1_call, r.f1_overall), (1.0, 0.0, 0.5));
        assert_eq!(r.hnvs, 0.63);
        assert_eq!(r.lnvs, 0.54);
        let perfect = evaluate(&truth, &truth, F1Mode::RowMean).unwrap();
        assert_eq!(
            (perfect.hnvs, perfect.lnvs, perfect.f1_overall),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn global_micro_pools_counts() {
        let truth = vec![row("r1", &["a"]), row("r2", &["a", "b", "c"])];
        let pred = vec![row("r1", &["b"]), row("r2", &["a", "b", "c"])];
        let r = evaluate(&pred, &truth, F1Mode::GlobalMicro).unwrap();
        assert_eq!(r.f1_overall, 6.0 / 8.0);
        let m = evaluate(&pred, &truth, F1Mode::RowMean).unwrap();
        assert_eq!(m.f1_overall, 0.5);
    }

    #[test]
    fn mismatched_rows() {
        let truth = vec![row("r1", &["a"])];
        assert!(matches!(
            evaluate(&[row("r2", &["a"])], &truth, F1Mode::RowMean),
            Err(MetricsError::RowMismatch(_))
        ));
        assert!(evaluate(
            &[row("r1", &["a"]), row("r1", &["a"])],
            &truth,
            F1Mode::RowMean
        )
        .is_err());
    }

    fn random_case(
        seed: u64,
        rows: usize,
    ) -> (ClassVocabulary, Vec<ScoredRow>, Vec<PredictionRow>) {
        let vocab = ClassVocabulary::new(["a", "b", "c", "d"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scored = Vec::new();
        let mut truth = Vec::new();
        for r in 0..rows {
            let id = format!("c_COL_{}", 5 * r);
            let conf: Vec<f64> = (0..4)
                .map(|_| (rng.random::<f64>() * 20.0).round() / 20.0)
                .collect();
            let labels: Vec<&str> = ["a", "b", "c", "d"]
                .iter()
                .zip(&conf)
                .filter(|(_, &c)| rng.random::<f64>() < c)
                .map(|(l, _)| *l)
                .collect();
            truth.push(if labels.is_empty() {
                row(&id, &["nocall"])
            } else {
                row(&id, &labels)
            });
            scored.push(ScoredRow {
                row_id: id,
                confidences: conf,
            });
        }
        (vocab, scored, truth)
    }

    #[test]
    fn sweep_matches_brute_force() {
        let (vocab, scored, truth) = random_case(11, 60);
        for mode in [F1Mode::RowMean, F1Mode::GlobalMicro] {
            let base = PostprocConfig::default();
            let best = sweep_thresholds(&scored, &truth, &vocab, &base, 0.05, mode).unwrap();
            assert_eq!(best.candidates_evaluated, 21 * 21);
            let mut brute = (f64::NEG_INFINITY, 0.0, 0.0);
            for i in (0..=20).rev() {
                for j in (0..=20).rev() {
                    let cfg = PostprocConfig {
                        bird_threshold: i as f64 / 20.0,
                        nocall_threshold: j as f64 / 20.0,
                        ..base.clone()
                    };
                    let rows = postproc::assemble_rows(&scored, &vocab, &cfg);
                    let v = evaluate(&rows, &truth, mode).unwrap().f1_overall;
                    if v > brute.0 {
                        brute = (v, cfg.bird_threshold, cfg.nocall_threshold);
                    }
                }
            }
            assert_eq!(
                (
                    best.report.f1_overall,
                    best.bird_threshold,
                    best.nocall_threshold
                ),
                brute
            );
            let default_rows = postproc::assemble_rows(&scored, &vocab, &base);
            assert!(
                best.report.f1_overall >= evaluate(&default_rows, &truth, mode).unwrap().f1_overall
            );
        }
    }

    #[test]
    fn coarse_grid_and_perfect_data() {
        let vocab = ClassVocabulary::new(["a"]).unwrap();
        let scored = vec![ScoredRow {
            row_id: "x_SSW_5".into(),
            confidences: vec![1.0],
        }];
        let truth = vec![row("x_SSW_5", &["a"])];
        let r = sweep_thresholds(
            &scored,
            &truth,
            &vocab,
            &PostprocConfig::default(),
            0.5,
            F1Mode::RowMean,
        )
        .unwrap();
        assert_eq!(r.candidates_evaluated, 9);
        assert_eq!(r.report.f1_overall, 1.0);
        assert!(r.bird_threshold <= 1.0);
        assert!(sweep_thresholds(
            &scored,
            &truth,
            &vocab,
            &PostprocConfig::default(),
            0.3,
            F1Mode::RowMean
        )
        .is_err());
    }

    #[test]
    fn report_formats() {
        let r = MetricReport::from_parts(1.0, 0.5, 0.25, 3, 1, 2);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("f1_overall,f1_call,f1_nocall,hnvs,lnvs,n_rows,n_call,n_nocall\n1,0.5,0.25,{},{},3,1,2\n", r.hnvs, r.lnvs)
        );
        assert!(r.to_string().contains("hnvs"));
    }
}
