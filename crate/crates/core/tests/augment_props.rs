use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use soundscape::augment::{self, AugmentConfig, LabeledSpectrogram};
use soundscape::spectro::{MelConfig, MelSpectrogram};

const FLOOR: f64 = -80.0;

fn spec_strategy() -> impl Strategy<Value = MelSpectrogram> {
    (2usize..12, 1usize..20).prop_flat_map(|(mels, frames)| {
        prop::collection::vec(FLOOR..=0.0, mels * frames).prop_map(move |mut v| {
            // Max-referenced input: the loudest cell sits at 0 dB.
            v[0] = 0.0;
            MelSpectrogram {
                clip_id: "s".into(),
                start_offset_s: 0.0,
                data: Array2::from_shape_vec((mels, frames), v).unwrap(),
                config: MelConfig {
                    n_mels: mels,
                    ..MelConfig::default()
                },
            }
        })
    })
}

fn bounded(spec: &MelSpectrogram, shape: (usize, usize)) -> bool {
    spec.data.dim() == shape
        && spec
            .data
            .iter()
            .all(|v| v.is_finite() && (FLOOR..=0.0).contains(v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stages_keep_shape_and_bounds(spec in spec_strategy(), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = spec.data.dim();
        let n = spec.n_mels();
        prop_assert!(bounded(&augment::random_power(&spec, &mut rng, (0.5, 3.0)), shape));
        prop_assert!(bounded(&augment::add_white_noise(&spec, &mut rng, (3.0, 30.0)), shape));
        prop_assert!(bounded(&augment::add_pink_noise(&spec, &mut rng, (3.0, 30.0)), shape));
        prop_assert!(bounded(&augment::add_bandpass_noise(&spec, &mut rng, (1, n), (3.0, 30.0)), shape));
        prop_assert!(bounded(&augment::lower_upper_frequencies(&spec, &mut rng, (0.5, 0.9), (3.0, 20.0)), shape));
        let other = LabeledSpectrogram::new(spec.clone(), ["b"]);
        let this = LabeledSpectrogram::new(spec.clone(), ["a"]);
        let mixed = augment::mix(&[&this, &other], &mut rng).unwrap();
        prop_assert!(bounded(&mixed.spec, shape));
    }

    #[test]
    fn batch_ignores_thread_count(specs in prop::collection::vec(spec_strategy(), 1..6), seed: u64) {
        let shape = specs[0].data.dim();
        let samples: Vec<LabeledSpectrogram> = specs
            .into_iter()
            .enumerate()
            .filter(|(_, s)| s.data.dim() == shape)
            .map(|(i, s)| LabeledSpectrogram::new(s, [format!("c{i}")]))
            .collect();
        let config = AugmentConfig { seed, ..AugmentConfig::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| augment::augment_batch(&samples, &samples, &config).unwrap())
        };
        let one = run(1);
        prop_assert!(one.iter().all(|s| bounded(&s.spec, shape)));
        prop_assert_eq!(one, run(3));
    }
}
