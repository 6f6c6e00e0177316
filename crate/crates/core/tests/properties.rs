//! Property tests over randomly generated inputs.

use advbench::autodiff::{self, softmax_with_temperature};
use advbench::data::{self, LabeledDataset};
use advbench::metrics::{AttackKind, SweepRecord};
use advbench::nn::{init_params, reference_spec};
use advbench::report;
use advbench::tensor::Tensor;
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..12)
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, 2..10).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in logits(), t in prop::sample::select(vec![1.0, 10.0, 100.0])) {
        let p = softmax_with_temperature(&Tensor::from_vec(&[z.len()], z.clone()), t).unwrap();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_ignores_shifts(z in logits(), shift in -100.0f64..100.0, t in 0.5f64..100.0) {
        let a = softmax_with_temperature(&Tensor::from_vec(&[z.len()], z.clone()), t).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let b = softmax_with_temperature(&Tensor::from_vec(&[z.len()], shifted), t).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn higher_temperature_is_flatter(z in logits()) {
        let spread = |t: f64| {
            let p = softmax_with_temperature(&Tensor::from_vec(&[z.len()], z.clone()), t).unwrap();
            let d = p.data();
            d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        let (s1, s10, s100) = (spread(1.0), spread(10.0), spread(100.0));
        prop_assert!(s1 >= s10 - 1e-15 && s10 >= s100 - 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(p in distribution(), seed in any::<u64>()) {
        let q: Vec<f64> = {
            let mut r = advbench::rng::XorShift64Star::new(seed);
            let raw: Vec<f64> = p.iter().map(|_| 0.001 + r.next_f64()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        };
        let n = p.len();
        let (tp, tq) = (Tensor::from_vec(&[n], p), Tensor::from_vec(&[n], q));
        prop_assert!(autodiff::kl_divergence(&tp, &tq).unwrap() >= -1e-15);
        prop_assert!(autodiff::kl_divergence(&tp, &tp).unwrap().abs() < 1e-15);
    }

    #[test]
    fn idx_round_trip_preserves_pixel_bytes(
        n in 1usize..5,
        h in 1usize..6,
        w in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut r = advbench::rng::XorShift64Star::new(seed);
        let bytes: Vec<u8> = (0..n * h * w).map(|_| r.below(256) as u8).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.below(10)).collect();
        let images = Tensor::from_vec(&[n, 1, h, w], bytes.iter().map(|&b| b as f64 / 255.0).collect());
        let ds = LabeledDataset::new(images, labels.clone(), 10, "idx").unwrap();
        let (img, lab) = data::encode_idx(&ds).unwrap();
        prop_assert_eq!(&img[16..], bytes.as_slice());
        prop_assert_eq!(data::parse_idx_images(&img).unwrap(), ds.images.clone());
        prop_assert_eq!(data::parse_idx_labels(&lab).unwrap(), labels);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), name in prop::sample::select(vec!["mlp", "student-cnn", "teacher-cnn"])) {
        let spec = reference_spec(name, &[1, 8, 8], 6).unwrap();
        let state = init_params(&spec, seed).unwrap();
        let bytes = report::encode_checkpoint(&state);
        let back = report::decode_checkpoint(&bytes, Some(&spec)).unwrap();
        prop_assert_eq!(report::encode_checkpoint(&back), bytes);
        prop_assert_eq!(back.params, state.params);
    }

    #[test]
    fn csv_round_trip_within_formatting_precision(
        rows in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..10.0, 0.0f64..1.0, any::<bool>()), 1..8)
    ) {
        let records: Vec<SweepRecord> = rows
            .iter()
            .map(|&(epsilon, a, b, mean_l2, success_rate, cw)| SweepRecord {
                epsilon,
                top1_error: a.max(b),
                top5_error: a.min(b),
                mean_l2,
                success_rate,
                attack: if cw { AttackKind::Cw } else { AttackKind::Fgsm },
            })
            .collect();
        let text = report::format_csv(&records).unwrap();
        prop_assert!(!text.contains('\r'));
        let back = report::parse_csv(&text).unwrap();
        for (x, y) in records.iter().zip(&back) {
            prop_assert!((x.epsilon - y.epsilon).abs() <= 5e-5);
            prop_assert!((x.top1_error - y.top1_error).abs() <= 5e-5);
            prop_assert!((x.top5_error - y.top5_error).abs() <= 5e-5);
            prop_assert!((x.mean_l2 - y.mean_l2).abs() <= 5e-7);
            prop_assert!((x.success_rate - y.success_rate).abs() <= 5e-5);
            prop_assert_eq!(x.attack, y.attack);
        }
    }
}
