use std::collections::BTreeMap;

use proptest::prelude::*;
use soundscape::geo::{GeoPoint, OccurrenceTable, Site, SiteId};
use soundscape::postproc::{self, PostprocConfig, RowId, SiteContext};
use soundscape::scoring::{ClassVocabulary, FrameProbabilities, NOCALL};

const SPECIES: [&str; 5] = ["near", "far", "grhowl", "freq", "other"];

fn setup() -> (
    ClassVocabulary,
    BTreeMap<String, Site>,
    OccurrenceTable,
    PostprocConfig,
) {
    let vocab = ClassVocabulary::new(SPECIES).unwrap();
    let site = Site::with_default_location(SiteId::Cor);
    let (lat, lon) = (site.location.latitude_deg(), site.location.longitude_deg());
    let mut occ = OccurrenceTable::default();
    for s in ["near", "grhowl", "freq", "other"] {
        occ.add(s, GeoPoint::new(lat, lon + 0.1).unwrap());
    }
    occ.add("far", GeoPoint::new(lat + 5.0, lon).unwrap());
    let mut cfg = PostprocConfig::default();
    cfg.frequent_birds_per_site
        .insert(SiteId::Cor, ["freq".to_string(), "far".to_string()].into());
    let sites = [("7_COR_x".to_string(), site), ("8_COR_y".to_string(), site)].into();
    (vocab, sites, occ, cfg)
}

fn frames_from(values: &[f64]) -> Vec<FrameProbabilities> {
    values
        .chunks_exact(SPECIES.len())
        .enumerate()
        .map(|(i, c)| FrameProbabilities {
            clip_id: if i % 2 == 0 { "7_COR_x" } else { "8_COR_y" }.into(),
            end_second: 5 * (i as u32 / 2 + 1),
            probs: c.to_vec(),
        })
        .collect()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    (1usize..12).prop_flat_map(|n| prop::collection::vec(0.0f64..=1.0, n * SPECIES.len()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fp_reduction_is_idempotent(cal in values(), raw_seed in values()) {
        let (vocab, sites, occ, cfg) = setup();
        let calibrated = frames_from(&cal);
        let raw: Vec<FrameProbabilities> = calibrated
            .iter()
            .enumerate()
            .map(|(i, f)| FrameProbabilities {
                probs: (0..SPECIES.len())
                    .map(|c| raw_seed[(i * SPECIES.len() + c) % raw_seed.len()] * 0.05)
                    .collect(),
                ..f.clone()
            })
            .collect();
        let ctx = SiteContext::new(&sites, &vocab, &occ, &cfg);
        let once = postproc::apply_fp_reduction(&calibrated, &raw, &ctx, &cfg).unwrap();
        let twice = postproc::apply_fp_reduction(&once, &raw, &ctx, &cfg).unwrap();
        prop_assert_eq!(&once, &twice);
        // Rejected species stay at zero through the composed pipeline.
        let adjusted = postproc::adjust_confidences(&calibrated, &raw, &ctx, &cfg).unwrap();
        for (o, a) in once.iter().zip(&adjusted) {
            for (c, (x, y)) in o.probs.iter().zip(&a.probs).enumerate() {
                if *x == 0.0 {
                    prop_assert_eq!(*y, 0.0, "species {}", SPECIES[c]);
                }
            }
        }
    }

    #[test]
    fn raising_bird_threshold_never_adds_birds(
        conf in prop::collection::vec(0.0f64..=1.0, SPECIES.len()),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
        nocall in 0.0f64..=1.0,
    ) {
        let vocab = ClassVocabulary::new(SPECIES).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let row = |t| {
            let cfg = PostprocConfig { bird_threshold: t, nocall_threshold: nocall, ..PostprocConfig::default() };
            postproc::assemble_row("r".into(), &conf, &vocab, &cfg)
        };
        let (low, high) = (row(lo), row(hi));
        prop_assert!(!low.labels.is_empty() && !high.labels.is_empty());
        let low_birds: Vec<&String> = low.labels.iter().filter(|l| *l != NOCALL).collect();
        prop_assert!(high.labels.iter().filter(|l| *l != NOCALL).all(|l| low_birds.contains(&l)));
        let n = postproc::nocall_confidence(&conf);
        prop_assert!((0.0..=1.0).contains(&n));
    }

    #[test]
    fn emitted_row_ids_parse_back(cal in values()) {
        let (vocab, sites, occ, cfg) = setup();
        let frames = frames_from(&cal);
        let ctx = SiteContext::new(&sites, &vocab, &occ, &cfg);
        let rows = postproc::postprocess(&frames, &frames, &vocab, &ctx, &cfg).unwrap();
        prop_assert_eq!(rows.len(), frames.len());
        for r in &rows {
            let id: RowId = r.row_id.parse().unwrap();
            prop_assert_eq!(id.site, SiteId::Cor);
            prop_assert_eq!(id.end_second % 5, 0);
            prop_assert_eq!(id.to_string(), r.row_id.clone());
        }
        let mut buf = Vec::new();
        postproc::write_submission(&rows, &mut buf).unwrap();
        prop_assert_eq!(postproc::read_submission(buf.as_slice()).unwrap(), rows);
    }
}

#[test]
fn boost_and_rejection_do_not_commute() {
    let (vocab, sites, occ, cfg) = setup();
    let calibrated = vec![FrameProbabilities {
        clip_id: "7_COR_x".into(),
        end_second: 5,
        probs: vec![0.5, 0.5, 0.5, 0.5, 0.5],
    }];
    let ctx = SiteContext::new(&sites, &vocab, &occ, &cfg);
    let reject_then_boost = postproc::apply_fn_reduction(
        &postproc::apply_fp_reduction(&calibrated, &calibrated, &ctx, &cfg).unwrap(),
        &ctx,
        &cfg,
    )
    .unwrap();
    let boost_then_reject = postproc::apply_fp_reduction(
        &postproc::apply_fn_reduction(&calibrated, &ctx, &cfg).unwrap(),
        &calibrated,
        &ctx,
        &cfg,
    )
    .unwrap();
    assert_ne!(reject_then_boost, boost_then_reject);
    let fixed = postproc::adjust_confidences(&calibrated, &calibrated, &ctx, &cfg).unwrap();
    // near, far (rejected despite being frequent), grhowl (blacklisted), freq (boosted), other.
    assert_eq!(fixed[0].probs, vec![0.5, 0.0, 0.0, 0.5 + 0.1, 0.5]);
}
