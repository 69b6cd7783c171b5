use adra_core::autodiff::check::{
    central_difference, max_relative_error, FD_FLOOR, FD_RTOL, FD_STEP,
};
use adra_core::autodiff::{ParamStore, Tape, Tensor};
use adra_core::model::{BackboneConfig, Model, ParamRole, Stage};
use adra_core::objectives::{hsc_loss, l2sp_penalty, one_class_loss, radial, score, Origin};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn loss(z: &[f64], d: usize, origins: &[Origin]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let v = tape.input(Tensor::new(vec![z.len() / d, d], z.to_vec()).unwrap());
    let l = hsc_loss(&mut tape, v, origins).unwrap();
    tape.value(l).item()
}

fn analytic_grad(z: &[f64], d: usize, origins: &[Origin]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let v = tape.watch(Tensor::new(vec![z.len() / d, d], z.to_vec()).unwrap());
    let l = hsc_loss(&mut tape, v, origins).unwrap();
    let grads = tape.backward(l, &mut ParamStore::new()).unwrap();
    grads.get(v).unwrap().data().to_vec()
}

fn h_of(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() + 1.0).sqrt() - 1.0
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let d = 4;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 + seed as usize % 7;
        let z: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let origins: Vec<Origin> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    Origin::Nominal
                } else {
                    Origin::Corpus
                }
            })
            .collect();
        if z.chunks(d).any(|r| h_of(r) < 1e-3) {
            continue;
        }
        let numeric = central_difference(|p| loss(p, d, &origins), &z, FD_STEP);
        let err = max_relative_error(&analytic_grad(&z, d, &origins), &numeric, FD_FLOOR);
        assert!(err <= FD_RTOL, "seed {seed}: {err}");
    }
}

#[test]
fn loss_moves_in_the_expected_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 3;
    let z: Vec<f64> = (0..6 * d).map(|_| rng.sample(StandardNormal)).collect();
    let origins = [
        Origin::Nominal,
        Origin::Corpus,
        Origin::Nominal,
        Origin::Corpus,
        Origin::Corpus,
        Origin::Nominal,
    ];
    let base = loss(&z, d, &origins);
    for (i, o) in origins.iter().enumerate() {
        let mut shrunk = z.clone();
        shrunk[i * d..(i + 1) * d]
            .iter_mut()
            .for_each(|v| *v *= 0.8);
        let changed = loss(&shrunk, d, &origins);
        match o {
            Origin::Nominal => assert!(changed < base),
            Origin::Corpus => assert!(changed > base),
        }
    }
}

#[test]
fn one_class_loss_is_hsc_without_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = Tensor::<f64>::from_fn(&[9, 5], |_| rng.sample(StandardNormal));
    let origins = vec![Origin::Nominal; 9];
    let mut tape = Tape::<f64>::new();
    let v = tape.input(z);
    let a = hsc_loss(&mut tape, v, &origins).unwrap();
    let b = one_class_loss(&mut tape, v, &origins).unwrap();
    assert_eq!(
        tape.value(a).item().to_bits(),
        tape.value(b).item().to_bits()
    );

    let mut tape = Tape::<f64>::new();
    let zero = tape.input(Tensor::zeros(&[3, 2]));
    let l = one_class_loss(&mut tape, zero, &[Origin::Nominal; 3]).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    // h = 1 and h = 3 average to 2.
    let mut tape = Tape::<f64>::new();
    let z = tape.input(Tensor::new(vec![2, 2], vec![3f64.sqrt(), 0.0, 15f64.sqrt(), 0.0]).unwrap());
    let l = one_class_loss(&mut tape, z, &[Origin::Nominal; 2]).unwrap();
    assert!((tape.value(l).item() - 2.0).abs() < 1e-12);
}

fn store(values: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (id, v) in values {
        s.insert(id, Tensor::from_vec(v.clone()), true).unwrap();
    }
    s
}

fn penalty(current: &ParamStore<f64>, anchor: &ParamStore<f64>, strength: f64) -> f64 {
    let mut tape = Tape::new();
    let p = l2sp_penalty(&mut tape, current, anchor, strength).unwrap();
    tape.value(p).item()
}

#[test]
fn l2sp_closed_forms_and_errors() {
    let anchor = store(&[("a", vec![1.0])]);
    assert_eq!(penalty(&anchor, &anchor, 1e-2), 0.0);
    let moved = store(&[("a", vec![3.0])]);
    assert!((penalty(&moved, &anchor, 1e-2) - 0.04).abs() < 1e-15);

    let mut tape = Tape::new();
    assert!(l2sp_penalty(&mut tape, &store(&[("b", vec![1.0])]), &anchor, 1.0).is_err());
    assert!(l2sp_penalty(&mut tape, &store(&[("a", vec![1.0, 2.0])]), &anchor, 1.0).is_err());
}

#[test]
fn l2sp_matches_direct_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draw = |n: usize| {
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<_>>()
    };
    let anchor = store(&[("w", draw(12)), ("b", draw(3))]);
    let current = store(&[("w", draw(12)), ("b", draw(3)), ("extra", draw(4))]);
    let mut direct = 0.0;
    for a in anchor.iter() {
        let c = current.by_name(&a.id).unwrap();
        direct += a
            .value
            .data()
            .iter()
            .zip(c.value.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>();
    }
    direct *= 1e-2;
    let got = penalty(&current, &anchor, 1e-2);
    assert!((got - direct).abs() / direct <= 1e-6);
}

#[test]
fn scores_do_not_depend_on_batch_composition() {
    let cfg = BackboneConfig {
        stages: vec![Stage {
            channels: 4,
            blocks: 1,
        }],
        input_channels: 3,
        input_resolution: 8,
        stem_pool: true,
        embedding_dim: 4,
        class_count: 2,
    };
    let pre = Model::for_pretraining(cfg, 3).unwrap();
    let mut m = Model::from_backbone(&pre.backbone().unwrap(), Some(2), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in m
        .params
        .iter_mut()
        .filter(|p| ParamRole::of(&p.id).is_task_specific())
    {
        p.value = Tensor::from_fn(p.value.shape(), |_| rng.sample::<f32, _>(StandardNormal));
    }
    let x = Tensor::<f32>::from_fn(&[7, 3, 8, 8], |_| rng.sample(StandardNormal));
    let all = score(&m, &x).unwrap();
    assert!(all.iter().all(|s| *s >= 0.0));
    for (i, s) in all.iter().enumerate() {
        assert_eq!(
            score(&m, &x.slice_rows(i, i + 1)).unwrap()[0].to_bits(),
            s.to_bits()
        );
    }
}

proptest! {
    #[test]
    fn radial_is_bounded_by_the_norm(z in prop::collection::vec(-50.0f32..50.0, 1..16)) {
        let norm = z.iter().map(|v| v * v).sum::<f32>().sqrt();
        let h = radial(&z);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= norm * (1.0 + 1e-6));
    }

    #[test]
    fn radial_grows_with_the_norm(z in prop::collection::vec(-10.0f32..10.0, 1..8), s in 1.01f32..4.0) {
        let scaled: Vec<f32> = z.iter().map(|v| v * s).collect();
        prop_assert!(radial(&scaled) >= radial(&z));
    }
}
