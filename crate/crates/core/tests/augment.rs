use proptest::prelude::*;
use regce::augment::{
    augment, augment_batch, make_dual_batch, mixup, weak_augment, AugKind, AugPolicy, SampleKey,
};
use regce::data::ImageSet;

fn images(n: usize, shape: [usize; 3], seed: u64) -> ImageSet {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    ImageSet::new(n, shape[0], shape[1], shape[2], (0..len).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

#[test]
fn same_key_same_output() {
    let set = images(1, [3, 16, 16], 1);
    for policy in [AugPolicy::weak(), AugPolicy::strong()] {
        let key = SampleKey::new(5, 2, 0, 1);
        let a = augment(set.image(0), set.shape(), &policy, &mut key.rng());
        let b = augment(set.image(0), set.shape(), &policy, &mut key.rng());
        assert_eq!(a, b);
    }
}

#[test]
fn dual_batch_contract() {
    let set = images(3, [3, 8, 8], 2);
    let labels = vec![4, 7, 1];
    let batch = make_dual_batch(&set, &[2, 0], &labels, 9, 3, &AugPolicy::weak(), &AugPolicy::strong()).unwrap();
    assert_eq!(batch.len(), 4);
    assert_eq!(batch.labels, vec![1, 4, 1, 4]);
    assert_eq!(batch.views, vec![0, 0, 1, 1]);
    let len = set.image_len();
    let mut rng = SampleKey::new(9, 3, 2, 0).rng();
    assert_eq!(&batch.pixels[..len], weak_augment(set.image(2), set.shape(), &AugPolicy::weak(), &mut rng));

    let none = AugPolicy::none();
    let copies = make_dual_batch(&set, &[0, 1], &labels, 9, 3, &none, &none).unwrap();
    assert_eq!(copies.pixels[..2 * len], copies.pixels[2 * len..]);
    assert_eq!(copies.pixels[..2 * len], set.gather(&[0, 1])[..]);
}

#[test]
fn policy_validation() {
    let shape = [3, 16, 16];
    assert!(AugPolicy::strong().validate(shape).is_ok());
    assert_eq!(AugPolicy::strong().cutout_side(shape), 8);
    assert_eq!(AugPolicy::strong().cutout_side([3, 32, 32]), 16);
    let bad = AugPolicy { flip_prob: 1.2, ..AugPolicy::weak() };
    assert!(bad.validate(shape).is_err());
    let big = AugPolicy { cutout: Some(17), ..AugPolicy::strong() };
    assert!(big.validate(shape).is_err());
    let json = r#"{"kind": "strong", "cutout": 4, "flip": 0.5}"#;
    assert!(serde_json::from_str::<AugPolicy>(json).is_err());
}

proptest! {
    #[test]
    fn range_and_shape_preserved(seed in any::<u64>(), strong in any::<bool>()) {
        let set = images(1, [3, 12, 12], seed);
        let policy = AugPolicy::of_kind(if strong { AugKind::Strong } else { AugKind::Weak });
        let out = augment(set.image(0), set.shape(), &policy, &mut SampleKey::new(seed, 0, 0, 0).rng());
        prop_assert_eq!(out.len(), set.image_len());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn independent_of_batch_composition(seed in any::<u64>(), epoch in 0u64..50) {
        let set = images(6, [3, 8, 8], 3);
        let policy = AugPolicy::strong();
        let full = augment_batch(&set, &[0, 1, 2, 3, 4, 5], seed, epoch, 1, &policy);
        let part = augment_batch(&set, &[4, 1], seed, epoch, 1, &policy);
        let len = set.image_len();
        prop_assert_eq!(&part[..len], &full[4 * len..5 * len]);
        prop_assert_eq!(&part[len..], &full[len..2 * len]);
    }

    #[test]
    fn weak_preserves_pixel_values(seed in any::<u64>()) {
        // Crop/flip only moves pixels: every output value occurs in the input.
        let set = images(1, [1, 8, 8], seed);
        let out = augment(set.image(0), set.shape(), &AugPolicy::weak(), &mut SampleKey::new(seed, 1, 0, 0).rng());
        prop_assert!(out.iter().all(|v| set.image(0).contains(v)));
    }

    #[test]
    fn mixed_rows_stay_on_simplex(
        a in prop::collection::vec(0.0f64..1.0, 5),
        b in prop::collection::vec(0.0f64..1.0, 5),
        lambda in 0.0f64..=1.0,
    ) {
        let norm = |v: &[f64]| {
            let total: f64 = v.iter().map(|x| x + 1e-3).sum();
            v.iter().map(|x| (x + 1e-3) / total).collect::<Vec<_>>()
        };
        let (pa, pb) = (norm(&a), norm(&b));
        let (_, p) = mixup(&[0.0], &pa, &[1.0], &pb, lambda).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
