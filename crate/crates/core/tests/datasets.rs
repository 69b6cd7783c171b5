use std::collections::BTreeSet;

use adra_core::autodiff::Tensor;
use adra_core::datasets::{
    build_corpus, build_hold_one_out, build_one_vs_rest, build_small_mode, generate, generate_grid,
    read_dataset, render_factors, small_mode_test_sets, write_dataset, FactorSpec, LabeledDataset,
    Split, SyntheticSpec,
};
use adra_core::Error;

fn small_spec(noise: f32) -> SyntheticSpec {
    SyntheticSpec {
        factors: FactorSpec {
            image_size: 16,
            noise_std: noise,
            ..FactorSpec::default()
        },
        train_per_class: 20,
        test_per_class: 10,
        ..SyntheticSpec::default()
    }
}

/// Ten balanced classes with `per` samples each; pixels encode the index.
fn toy(per: usize, split: Split) -> LabeledDataset {
    let n = 10 * per;
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let images = Tensor::from_fn(&[n, 1, 1, 1], |i| i as f32);
    LabeledDataset::new(images, labels, 10, split).unwrap()
}

#[test]
fn noise_free_generation_is_reproducible() {
    let a = generate(&small_spec(0.0), 3).unwrap();
    let b = generate(&small_spec(0.0), 3).unwrap();
    assert_eq!(a, b);
    let bits = |d: &LabeledDataset| {
        d.images
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.train), bits(&b.train));
    let noisy = generate(&small_spec(0.02), 3).unwrap();
    assert_eq!(noisy, generate(&small_spec(0.02), 3).unwrap());
    assert_ne!(
        noisy.train.images,
        generate(&small_spec(0.02), 4).unwrap().train.images
    );
}

#[test]
fn factor_rows_re_render_to_the_stored_image() {
    let spec = SyntheticSpec {
        jitter: 0.0,
        ..small_spec(0.0)
    };
    let data = generate(&spec, 9).unwrap();
    let rows = data.test.factors.as_ref().unwrap();
    let again = render_factors(&spec.factors, rows).unwrap();
    assert_eq!(again.data(), data.test.images.data());
    let pairs = spec.task_pairs();
    for (row, &label) in rows.iter().zip(&data.test.labels) {
        assert_eq!((row[0], row[1]), pairs[label]);
    }
}

#[test]
fn jitter_moves_shapes_off_the_grid() {
    let spec = small_spec(0.0);
    let data = generate(&spec, 9).unwrap();
    let grid = render_factors(&spec.factors, data.test.factors.as_ref().unwrap()).unwrap();
    let per = 3 * 16 * 16;
    let moved = data
        .test
        .images
        .data()
        .chunks(per)
        .zip(grid.data().chunks(per))
        .filter(|(a, b)| a != b)
        .count();
    assert!(moved * 10 >= data.test.len() * 9, "{moved}");
    // Offsets stay within one grid step, so the bulk of the shape overlaps.
    for (a, b) in data
        .test
        .images
        .data()
        .chunks(per)
        .zip(grid.data().chunks(per))
    {
        let mass = |x: &[f32]| x.iter().map(|v| v.abs()).sum::<f32>();
        let diff: f32 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff < mass(b), "{diff} vs {}", mass(b));
    }
}

#[test]
fn task_and_reserve_pairs_are_disjoint() {
    let spec = SyntheticSpec::default();
    let data = generate(&small_spec(0.02), 1).unwrap();
    let task: BTreeSet<_> = spec.task_pairs().into_iter().collect();
    let reserve: BTreeSet<_> = spec.reserve_pairs().into_iter().collect();
    assert!(task.is_disjoint(&reserve));
    assert_eq!(task.len() + reserve.len(), 20);
    for row in data.reserve.factors.as_ref().unwrap() {
        assert!(!task.contains(&(row[0], row[1])));
    }
}

#[test]
fn exhaustive_grid_is_balanced() {
    let spec = FactorSpec {
        image_size: 16,
        ..FactorSpec::default()
    };
    let grid = generate_grid(&spec, 0).unwrap();
    assert_eq!(grid.len(), spec.combinations());
    let counts = grid.class_counts();
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1);
    // Direct count over the grid: each pair appears positions_x·positions_y·sizes times.
    assert!(counts.iter().all(|&c| c == 4 * 4 * 3));
    let distinct: BTreeSet<_> = grid.factors.as_ref().unwrap().iter().collect();
    assert_eq!(distinct.len(), grid.len());
}

#[test]
fn generated_splits_are_balanced_and_labeled() {
    let data = generate(&small_spec(0.02), 2).unwrap();
    assert_eq!(data.train.class_counts(), vec![20; 10]);
    assert_eq!(data.test.class_counts(), vec![10; 10]);
    assert_eq!(data.train.images.shape(), &[200, 3, 16, 16]);
    assert!(data.train.images.is_finite());
}

#[test]
fn one_vs_rest_counts() {
    let (train, test) = (toy(20, Split::Train), toy(10, Split::Test));
    let (nominal, set) = build_one_vs_rest(&train, &test, 3).unwrap();
    assert!(nominal.labels.iter().all(|&l| l == 3));
    let recount = train.labels.iter().filter(|&&l| l == 3).count();
    assert_eq!(nominal.len(), recount);
    let positives = set.anomalous.iter().filter(|&&a| a).count();
    assert_eq!(positives * 10, set.len() * 9);
    assert!(build_one_vs_rest(&train, &test, 10).is_err());
}

#[test]
fn hold_one_out_complements_one_vs_rest() {
    let (train, test) = (toy(20, Split::Train), toy(10, Split::Test));
    for c in 0..10 {
        let (ovr, _) = build_one_vs_rest(&train, &test, c).unwrap();
        let (hoo, set) = build_hold_one_out(&train, &test, c).unwrap();
        let a: BTreeSet<u32> = ovr.images.data().iter().map(|v| v.to_bits()).collect();
        let b: BTreeSet<u32> = hoo.images.data().iter().map(|v| v.to_bits()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), train.len());
        let positives = set.anomalous.iter().filter(|&&x| x).count();
        assert_eq!(positives * 10, set.len());
        let counts = hoo.class_counts();
        for (k, (&got, &want)) in counts.iter().zip(&train.class_counts()).enumerate() {
            assert_eq!(got, if k == c { 0 } else { want });
        }
    }
}

#[test]
fn small_mode_mixtures() {
    let train = toy(100, Split::Train);
    let only_a = build_small_mode(&train, 1, 2, 0.0, 5).unwrap();
    assert!(only_a.labels.iter().all(|&l| l == 1));
    let both = build_small_mode(&train, 1, 2, 1.0, 5).unwrap();
    assert_eq!(both.class_counts()[1], 100);
    assert_eq!(both.class_counts()[2], 100);
    let half = build_small_mode(&train, 1, 2, 0.5, 5).unwrap();
    assert_eq!(half.class_counts()[2], 50);
    assert_eq!(half, build_small_mode(&train, 1, 2, 0.5, 5).unwrap());
    assert_ne!(
        half.images,
        build_small_mode(&train, 1, 2, 0.5, 6).unwrap().images
    );
    // Half-up rounding: 0.025 · 100 = 2.5 → 3.
    assert_eq!(
        build_small_mode(&train, 1, 2, 0.025, 5)
            .unwrap()
            .class_counts()[2],
        3
    );
    assert!(matches!(
        build_small_mode(&train, 1, 2, 1.5, 5),
        Err(Error::Config(_))
    ));
    assert!(build_small_mode(&train, 1, 1, 0.5, 5).is_err());
}

#[test]
fn small_mode_test_sets_exclude_the_other_pair_member() {
    let test = toy(10, Split::Test);
    let (primary, secondary) = small_mode_test_sets(&test, 1, 2).unwrap();
    assert!(!primary.classes.contains(&2));
    assert!(!secondary.classes.contains(&1));
    assert_eq!(primary.anomalous.iter().filter(|&&a| !a).count(), 10);
    assert_eq!(secondary.len(), 90);
}

#[test]
fn corpus_respects_exclusions() {
    let train = toy(100, Split::Train);
    let all_but_four: BTreeSet<usize> = (0..10).filter(|&c| c != 4).collect();
    let single = build_corpus(&train, &all_but_four, 50, 1, false).unwrap();
    assert!(single.source_indices.iter().all(|&i| train.labels[i] == 4));

    let nominal: BTreeSet<usize> = [7].into();
    let corpus = build_corpus(&train, &nominal, 300, 2, false).unwrap();
    let distinct: BTreeSet<usize> = corpus.source_indices.iter().copied().collect();
    assert_eq!(distinct.len(), 300);
    assert!(corpus.source_indices.iter().all(|&i| train.labels[i] != 7));

    assert!(build_corpus(&train, &all_but_four, 150, 1, false).is_err());
    let repeated = build_corpus(&train, &all_but_four, 150, 1, true).unwrap();
    assert_eq!(repeated.len(), 150);
    assert_eq!(
        repeated,
        build_corpus(&train, &all_but_four, 150, 1, true).unwrap()
    );
}

#[test]
fn corpus_draw_is_close_to_uniform_over_classes() {
    let train = toy(200, Split::Train);
    let keep: BTreeSet<usize> = (5..10).collect();
    let corpus = build_corpus(&train, &keep, 500, 11, false).unwrap();
    let mut counts = [0usize; 5];
    for &i in &corpus.source_indices {
        counts[train.labels[i]] += 1;
    }
    // Multinomial with p = 1/5: mean 100, sd = sqrt(500·0.2·0.8) ≈ 8.94.
    let sd = (500.0f64 * 0.2 * 0.8).sqrt();
    for c in counts {
        assert!((c as f64 - 100.0).abs() <= 4.0 * sd, "{counts:?}");
    }
}

#[test]
fn dataset_files_round_trip() {
    let data = generate(&small_spec(0.02), 4).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &data.test).unwrap();
    assert_eq!(&bytes[..5], b"ADRA\x01");
    let back = read_dataset(&mut bytes.as_slice(), Split::Test).unwrap();
    assert_eq!(back, data.test);

    let plain = toy(3, Split::Train);
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &plain).unwrap();
    // magic + rank + 4 dims + 30 floats + count + 30 labels
    assert_eq!(bytes.len(), 5 + 4 + 16 + 120 + 4 + 120);
    assert_eq!(
        read_dataset(&mut bytes.as_slice(), Split::Train).unwrap(),
        plain
    );

    for cut in [3, 20, bytes.len() - 1] {
        assert!(matches!(
            read_dataset(&mut &bytes[..cut], Split::Train),
            Err(Error::Format(_))
        ));
    }
    let mut wrong = bytes.clone();
    wrong[4] = 2;
    assert!(matches!(
        read_dataset(&mut wrong.as_slice(), Split::Train),
        Err(Error::Format(_))
    ));
}
