use proptest::prelude::*;
use regce::data::{Dataset, ImageSet};
use regce::noise::{
    inject_asymmetric_cifar10, inject_asymmetric_next_class, inject_noise, inject_symmetric, noise_stats, NoiseKind,
    NoiseSpec,
};

fn labels_only(labels: Vec<usize>, k: usize) -> Dataset {
    let n = labels.len();
    let pixels = (0..n).map(|i| i as f32).collect();
    Dataset::new(ImageSet::new(n, 1, 1, 1, pixels).unwrap(), labels, k).unwrap()
}

fn sym(rate: f64, seed: u64) -> NoiseSpec {
    NoiseSpec {
        kind: NoiseKind::Symmetric,
        rate,
        seed,
    }
}

#[test]
fn symmetric_targets_uniform_over_other_classes() {
    let ds = labels_only((0..10_000).map(|i| i % 10).collect(), 10);
    let noisy = inject_symmetric(&ds, &sym(1.0, 3)).unwrap();
    let mut offsets = [0usize; 9];
    for (&t, &y) in ds.labels.iter().zip(&noisy.noisy_labels) {
        assert_ne!(t, y);
        offsets[(y + 10 - t) % 10 - 1] += 1;
    }
    let expected = 10_000.0 / 9.0;
    let chi2: f64 = offsets.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of chi-square with 8 degrees of freedom.
    assert!(chi2 < 20.090, "chi2 {chi2} offsets {offsets:?}");
}

#[test]
fn cifar10_map_per_class_fixture() {
    // Every sample selected: rate 1 on one sample of each class.
    let ds = labels_only((0..10).collect(), 10);
    let spec = NoiseSpec {
        kind: NoiseKind::AsymmetricCifar10,
        rate: 1.0,
        seed: 0,
    };
    let noisy = inject_asymmetric_cifar10(&ds, &spec).unwrap();
    //                 airplane auto bird cat deer dog frog horse ship truck
    let expected = vec![0, 1, 0, 5, 7, 3, 6, 7, 8, 1];
    assert_eq!(noisy.noisy_labels, expected);
    let mask: Vec<bool> = (0..10).map(|i| expected[i] != i).collect();
    assert_eq!(noisy.corruption_mask.unwrap(), mask);
}

#[test]
fn cifar10_confusion_only_on_mapped_pairs() {
    let ds = labels_only((0..1000).map(|i| i % 10).collect(), 10);
    let spec = NoiseSpec {
        kind: NoiseKind::AsymmetricCifar10,
        rate: 0.4,
        seed: 11,
    };
    let stats = noise_stats(&inject_asymmetric_cifar10(&ds, &spec).unwrap()).unwrap();
    let allowed = [(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)];
    for (t, row) in stats.confusion.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            if t != y && c > 0 {
                assert!(allowed.contains(&(t, y)), "unexpected flip {t}->{y}");
            }
        }
    }
    assert_eq!(stats.confusion.iter().flatten().sum::<usize>(), 1000);
}

#[test]
fn next_class_wraps() {
    let ds = labels_only(vec![9; 20], 10);
    let spec = NoiseSpec {
        kind: NoiseKind::AsymmetricNextClass,
        rate: 1.0,
        seed: 0,
    };
    assert!(inject_asymmetric_next_class(&ds, &spec).unwrap().noisy_labels.iter().all(|&l| l == 0));
}

#[test]
fn clean_stats_are_diagonal() {
    let ds = labels_only((0..30).map(|i| i % 3).collect(), 3);
    let stats = noise_stats(&regce::data::NoisyDataset::clean(&ds)).unwrap();
    assert_eq!(stats.actual_rate, 0.0);
    assert_eq!(stats.confusion, vec![vec![10, 0, 0], vec![0, 10, 0], vec![0, 0, 10]]);
}

fn kind_strategy() -> impl Strategy<Value = NoiseKind> {
    prop_oneof![
        Just(NoiseKind::Symmetric),
        Just(NoiseKind::AsymmetricCifar10),
        Just(NoiseKind::AsymmetricNextClass)
    ]
}

proptest! {
    #[test]
    fn injection_invariants(
        labels in prop::collection::vec(0usize..10, 1..300),
        rate in 0.0f64..=1.0,
        seed in any::<u64>(),
        kind in kind_strategy(),
    ) {
        let ds = labels_only(labels, 10);
        let spec = NoiseSpec { kind, rate, seed };
        let a = inject_noise(&ds, &spec).unwrap();
        let b = inject_noise(&ds, &spec).unwrap();
        prop_assert_eq!(&a.noisy_labels, &b.noisy_labels);
        // Images and true labels untouched.
        prop_assert_eq!(a.images.as_ref(), ds.images.as_ref());
        prop_assert_eq!(a.true_labels.as_ref().unwrap(), &ds.labels);
        let mask = a.corruption_mask.as_ref().unwrap();
        for i in 0..ds.len() {
            prop_assert_eq!(mask[i], a.noisy_labels[i] != ds.labels[i]);
        }
        let corrupted = mask.iter().filter(|&&m| m).count();
        let selected = (rate * ds.len() as f64 + 1e-9).floor() as usize;
        if kind == NoiseKind::Symmetric || kind == NoiseKind::AsymmetricNextClass {
            prop_assert_eq!(corrupted, selected);
        } else {
            prop_assert!(corrupted <= selected);
        }
        let stats = noise_stats(&a).unwrap();
        prop_assert_eq!(stats.actual_rate, corrupted as f64 / ds.len() as f64);
    }
}
