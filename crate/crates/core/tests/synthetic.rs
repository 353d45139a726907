use regce::data::{generate_synthetic_dataset, Dataset, SyntheticSpec};

/// Plain 3-nearest-neighbour vote on raw pixels; ties go to the nearest.
fn knn3_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let mut correct = 0;
    for i in 0..test.len() {
        let q = test.images.image(i);
        let mut best: Vec<(f32, usize)> = (0..train.len())
            .map(|j| {
                let d = train.images.image(j).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
                (d, train.labels[j])
            })
            .collect();
        best.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut votes = vec![0usize; train.num_classes];
        best[..3].iter().for_each(|&(_, l)| votes[l] += 1);
        let top = *votes.iter().max().unwrap();
        let pred = if top == 1 { best[0].1 } else { votes.iter().position(|&v| v == top).unwrap() };
        correct += (pred == test.labels[i]) as usize;
    }
    correct as f64 / test.len() as f64
}

#[test]
fn default_spec_is_separable_by_knn() {
    let (train, test) = generate_synthetic_dataset(&SyntheticSpec::default()).unwrap();
    assert!(train.class_histogram().iter().all(|&c| c == 400));
    assert!(test.class_histogram().iter().all(|&c| c == 100));
    let acc = knn3_accuracy(&train, &test);
    eprintln!("3-NN accuracy {acc:.3}");
    assert!(acc > 0.6, "3-NN accuracy {acc}");
}
