//! Property tests for the invariants each module promises.

use mixacm::acm::{acm_loss_block, adaptive_max_pool_1d, kld_loss, AcMap, BlockTransform};
use mixacm::attacks::{fgsm, pgd, project, AttackConfig};
use mixacm::augment::mixup_with;
use mixacm::autodiff::Tape;
use mixacm::data::{batches, subsample, CropFlip, SynthConfig, Split};
use mixacm::model::{BlockCnn, ModelSpec};
use mixacm::tensor::Tensor;
use mixacm::theory::{adv_logistic_loss, logistic_loss, MixtureLambda};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(n: usize, c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n * c)
}

fn acm(a: &[f64], b: &[f64], n: usize, c: usize) -> f64 {
    let mut t = Tape::new();
    let ta = t.constant(Tensor::new(vec![n, c], a.to_vec()).unwrap());
    let sb = t.variable(Tensor::new(vec![n, c], b.to_vec()).unwrap());
    let l = acm_loss_block(&mut t, AcMap(ta), AcMap(sb), BlockTransform::None).unwrap();
    t.value(l).item().unwrap()
}

fn tiny_model(seed: u64, bias: bool) -> BlockCnn {
    BlockCnn::new(ModelSpec::from_channels(1, 3, &[2, 3], 1, bias, true).unwrap(), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn acm_loss_is_scale_invariant(a in rows(3, 5), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
        prop_assert!(acm(&a, &scaled, 3, 5).abs() < 1e-12);
    }

    #[test]
    fn acm_loss_is_symmetric_and_bounded(a in rows(2, 4), b in rows(2, 4)) {
        let ab = acm(&a, &b, 2, 4);
        let ba = acm(&b, &a, 2, 4);
        prop_assert!((ab - ba).abs() < 1e-12);
        // mean over 2 rows of a squared distance between unit vectors
        prop_assert!((0.0..=4.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn kld_is_nonnegative_and_zero_on_equal_logits(a in rows(3, 4), b in rows(3, 4), gamma in 0.5f64..20.0) {
        let mut t = Tape::new();
        let ta = t.constant(Tensor::new(vec![3, 4], a.clone()).unwrap());
        let sb = t.variable(Tensor::new(vec![3, 4], b).unwrap());
        let sa = t.variable(Tensor::new(vec![3, 4], a).unwrap());
        let l = kld_loss(&mut t, ta, sb, gamma).unwrap();
        let z = kld_loss(&mut t, ta, sa, gamma).unwrap();
        prop_assert!(t.value(l).item().unwrap() >= -1e-10);
        prop_assert!(t.value(z).item().unwrap().abs() < 1e-10);
    }

    #[test]
    fn adaptive_max_pool_is_identity_at_equal_size(a in rows(2, 6)) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(vec![2, 6], a.clone()).unwrap());
        let out = adaptive_max_pool_1d(&mut t, AcMap(v), 6).unwrap();
        prop_assert_eq!(t.value(out.0).data(), &a[..]);
    }

    #[test]
    fn mixup_identity_permutation_is_exact(x in rows(3, 4), lambda in 0.0f64..=1.0) {
        let xt = Tensor::new(vec![3, 4], x).unwrap();
        let y = Tensor::one_hot(&[0, 1, 1], 2).unwrap();
        let m = mixup_with(&xt, &y, lambda, &[0, 1, 2]).unwrap();
        prop_assert_eq!(&m.inputs, &xt);
        prop_assert_eq!(&m.soft_labels, &y);
    }

    #[test]
    fn mixup_stays_between_partners(x in rows(4, 3), lambda in 0.0f64..=1.0, seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let xt = Tensor::new(vec![4, 3], x.clone()).unwrap();
        let y = Tensor::one_hot(&[0, 1, 2, 0], 3).unwrap();
        let m = mixup_with(&xt, &y, lambda, &perm).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                let (a, b) = (x[i * 3 + c], x[perm[i] * 3 + c]);
                let v = m.inputs.data()[i * 3 + c];
                prop_assert!(v >= a.min(b) && v <= a.max(b));
            }
            let s: f64 = m.soft_labels.data()[i * 3..][..3].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_respects_both_constraints(x in 0.0f64..=1.0, cand in -2.0f64..3.0, eps in 0.0f64..0.5) {
        let v = project(x, cand, eps, (0.0, 1.0));
        prop_assert!((v - x).abs() <= eps);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn attacks_respect_budget_and_leave_parameters_alone(seed in 0u64..50, eps_k in 1u32..=8) {
        let model = tiny_model(seed, true);
        let before = model.params().checksum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, 1, 5, 5], |i| ((i as f64 * 0.37 + seed as f64).sin() + 1.0) / 2.0);
        let cfg = AttackConfig { epsilon: eps_k as f64 / 255.0, ..AttackConfig::pgd(3) };
        for adv in [pgd(&model, &x, &[0, 2], &cfg, &mut rng).unwrap(), fgsm(&model, &x, &[0, 2], &AttackConfig::fgsm(cfg.epsilon)).unwrap()] {
            for (a, o) in adv.data().iter().zip(x.data()) {
                prop_assert!((a - o).abs() <= cfg.epsilon);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
        prop_assert_eq!(model.params().checksum(), before);
    }

    #[test]
    fn deterministic_attack_without_random_start(seed in 0u64..50) {
        let model = tiny_model(seed, true);
        let x = Tensor::from_fn(&[2, 1, 5, 5], |i| (i as f64 * 0.11).fract());
        let cfg = AttackConfig { random_start: false, ..AttackConfig::pgd(4) };
        let a = pgd(&model, &x, &[1, 0], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = pgd(&model, &x, &[1, 0], &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bias_free_models_are_positively_homogeneous(seed in 0u64..100, c in 0.1f64..10.0) {
        let model = tiny_model(seed, false);
        let x = Tensor::from_fn(&[2, 1, 6, 6], |i| ((i * 7 + seed as usize) % 11) as f64 / 11.0);
        let f = model.logits(&x).unwrap();
        let fc = model.logits(&x.map(|v| c * v)).unwrap();
        for (a, b) in fc.data().iter().zip(f.data()) {
            prop_assert!((a - c * b).abs() <= 1e-9 * (c * b).abs().max(1e-12));
        }
    }

    #[test]
    fn taps_do_not_depend_on_batch_size(seed in 0u64..50, n in 1usize..5) {
        let model = tiny_model(seed, true);
        let x = Tensor::from_fn(&[n, 1, 6, 6], |i| (i as f64 * 0.3).sin().abs());
        let (_, taps) = model.forward_values(&x).unwrap();
        prop_assert_eq!(taps.len(), model.spec().tap_count());
        for (t, c) in taps.iter().zip(model.spec().tap_channels()) {
            prop_assert_eq!(t.shape()[0], n);
            prop_assert_eq!(t.shape()[1], c);
        }
    }

    #[test]
    fn adversarial_loss_dominates_plain_loss(f in -5.0f64..5.0, y in 0.0f64..=1.0, r in 0.0f64..2.0) {
        let adv = adv_logistic_loss(&[1.0], &[vec![f]], &[y], r).unwrap();
        prop_assert!(adv >= logistic_loss(f, y) - 1e-15);
    }

    #[test]
    fn crop_flip_keeps_shape_and_range(seed in 0u64..100, pad in 0usize..4) {
        let x = Tensor::from_fn(&[2, 1, 6, 6], |i| (i as f64 * 0.13).fract());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = CropFlip { enabled: true, pad }.apply(&x, &mut rng).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let same = CropFlip { enabled: false, pad }.apply(&x, &mut rng).unwrap();
        prop_assert_eq!(same, x);
    }

    #[test]
    fn batches_partition_the_dataset(n_per in 1usize..6, bs in 1usize..9, seed in 0u64..100) {
        let ds = SynthConfig::blobs(2, n_per, 6, 0.1, seed).generate(Split::Train).unwrap();
        let mut seen: Vec<usize> = batches(&ds, bs, seed).unwrap().flat_map(|b| b.unwrap().indices).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_is_stratified(per in 2usize..20, frac in 0.1f64..=1.0, seed in 0u64..100) {
        let ds = SynthConfig::blobs(3, per, 6, 0.1, seed).generate(Split::Train).unwrap();
        match subsample(&ds, frac, seed) {
            Ok(sub) => {
                let want = (frac * per as f64).round() as usize;
                prop_assert!(sub.class_counts().iter().all(|&c| c == want));
                prop_assert!(sub.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            Err(_) => prop_assert_eq!((frac * per as f64).round() as usize, 0),
        }
    }
}

#[test]
fn mixture_mean_matches_monte_carlo() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (a, b) in [(1.0, 1.0), (0.4, 2.0), (3.0, 0.7)] {
        let m = MixtureLambda::new(a, b).unwrap();
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| 1.0 - m.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!((mean - m.mean_one_minus()).abs() < 3.0 * se, "({a},{b}): {mean} vs {}", m.mean_one_minus());
        let _ = rng.random::<u8>();
    }
}

#[test]
fn teacher_receives_no_gradient_from_distillation() {
    use mixacm::acm::{mixacm_objective, DistillConfig};
    use mixacm::augment::MixedBatch;
    let teacher = BlockCnn::new(ModelSpec::from_channels(1, 3, &[4, 6], 1, true, true).unwrap(), 1).unwrap().into_frozen();
    let student = tiny_model(2, true);
    let x = Tensor::from_fn(&[2, 1, 6, 6], |i| (i as f64 * 0.21).fract());
    let batch = MixedBatch::unmixed(x, Tensor::one_hot(&[0, 1], 3).unwrap());
    let mut tape = Tape::new();
    let sp = student.bind(&mut tape);
    let checksum = teacher.params().checksum();
    let parts = mixacm_objective(&mut tape, &student, &sp, &teacher, &batch, &DistillConfig::default(), None).unwrap();
    tape.backward(parts.total).unwrap();
    assert!(!tape.requires_grad(parts.total) || sp.grads(&tape).iter().any(|g| g.norm_l2() > 0.0));
    assert_eq!(teacher.params().checksum(), checksum);
    let tb = teacher.bind_constant(&mut tape);
    assert!(tb.vars().iter().all(|&v| !tape.requires_grad(v) && tape.grad(v).is_none()));
}
