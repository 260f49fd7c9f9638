use proptest::prelude::*;

use rmoe::data::{load_idx, split, synth_dataset, write_idx, SplitSpec};
use rmoe::distortions::{distort_all, DistortionKind, DistortionSpec};
use rmoe::eval::{normalized_auc, AccuracyCurve};
use rmoe::mixture::{project_to_simplex, weighted_mixture, EnsembleOutput, WeightVector};
use rmoe::nn::Tensor;

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn ensemble(experts: usize, classes: usize) -> impl Strategy<Value = EnsembleOutput> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, classes), experts)
        .prop_map(|rows| EnsembleOutput::new(rows.into_iter().map(normalize).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixture_of_simplex_rows_is_a_distribution(
        p in ensemble(3, 5),
        raw in prop::collection::vec(0.0f64..1.0, 3),
    ) {
        let w = project_to_simplex(&raw);
        let q = weighted_mixture(&p, w.as_slice()).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Each class probability lies between the experts' extremes.
        for (c, &qc) in q.iter().enumerate() {
            let lo = (0..3).map(|i| p.row(i)[c]).fold(f64::INFINITY, f64::min);
            let hi = (0..3).map(|i| p.row(i)[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(qc >= lo - 1e-12 && qc <= hi + 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent_and_closest(v in prop::collection::vec(-3.0f64..3.0, 2..7)) {
        let w = project_to_simplex(&v);
        let again = project_to_simplex(w.as_slice());
        for (a, b) in w.as_slice().iter().zip(again.as_slice()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let dist = |u: &[f64]| u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let d = dist(w.as_slice());
        for i in 0..v.len() {
            prop_assert!(d <= dist(WeightVector::vertex(v.len(), i).as_slice()) + 1e-12);
        }
        prop_assert!(d <= dist(WeightVector::uniform(v.len()).as_slice()) + 1e-12);
    }

    #[test]
    fn auc_lies_between_extreme_accuracies(acc in prop::collection::vec(0.0f64..=1.0, 2..12)) {
        let n = acc.len();
        let curve = AccuracyCurve {
            kind: DistortionKind::Blur,
            levels: (0..n).map(|i| i as f64 * 0.5).collect(),
            accuracies: acc.clone(),
        };
        let a = normalized_auc(&curve).unwrap();
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn distortions_stay_in_range_and_level_zero_is_identity(
        pixels in prop::collection::vec(0.0f32..=255.0, 2 * 8 * 8),
        noise in 0.0f64..150.0,
        blur in 0.0f64..5.0,
        seed in any::<u64>(),
    ) {
        let x = Tensor::new(vec![2, 1, 8, 8], pixels).unwrap();
        for kind in [DistortionKind::Noise, DistortionKind::Blur] {
            let zero = distort_all(&x, DistortionSpec::new(kind, 0.0).unwrap(), seed).unwrap();
            prop_assert_eq!(&zero, &x);
        }
        let n = distort_all(&x, DistortionSpec::new(DistortionKind::Noise, noise).unwrap(), seed).unwrap();
        let b = distort_all(&x, DistortionSpec::new(DistortionKind::Blur, blur).unwrap(), seed).unwrap();
        for t in [&n, &b] {
            prop_assert!(t.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }
}

#[test]
fn idx_files_reload_the_same_dataset() {
    let ds = synth_dataset(3, 5, 16, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx(&ds, &i, &l).unwrap();
    let back = load_idx(&i, &l).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.num_classes, ds.num_classes);
    let spec = SplitSpec { train: 0.6, val: 0.2, test: 0.2, seed: 1 };
    assert_eq!(split(&back, &spec).unwrap().test, split(&ds, &spec).unwrap().test);
}
