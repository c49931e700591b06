use std::f64::consts::PI;

use proptest::prelude::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rebo_core::autodiff::{ParamSet, Tensor};
use rebo_core::models::{softmax, TaskNet, CLASSIFIER_PREFIX};
use rebo_core::ssl_losses::{
    augment, consistency_loss, labeled_loss, pseudo_labels, training_loss_with_weights, unlabeled_loss_values, AugmentSpec,
    SslBatch, TrainGraph,
};

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn net(classes: usize) -> TaskNet {
    TaskNet::new(vec![3, 8, 16], vec![8], classes)
}

/// Zero weights except a bias of `margin` on `class` in the output layer.
fn biased(net: &TaskNet, class: usize, margin: f64) -> ParamSet {
    let mut theta = net.init(0).unwrap().zeros_like();
    let last = net.classifier_widths().len() - 2;
    let name = format!("{CLASSIFIER_PREFIX}.b{last}");
    theta.get_mut(&name).unwrap().data_mut()[class] = margin;
    theta
}

fn pairwise(c: &Tensor) -> Vec<f64> {
    let rows: Vec<&[f64]> = c.data().chunks(3).collect();
    let mut out = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            out.push((0..3).map(|k| (rows[i][k] - rows[j][k]).powi(2)).sum::<f64>().sqrt());
        }
    }
    out
}

#[test]
fn uniform_logits_give_log_classes() {
    let net = net(8);
    let theta = net.init(1).unwrap().zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cs = [cloud(&mut rng, 12), cloud(&mut rng, 12)];
    let refs: Vec<&Tensor> = cs.iter().collect();
    let l = labeled_loss(&net, &theta, &refs, &[Some(0), Some(5)]).unwrap();
    assert!((l - 8f64.ln()).abs() < 1e-12);
    assert!((l - 2.0794).abs() < 1e-4);
}

#[test]
fn large_margin_loss_vanishes() {
    let net = net(4);
    let theta = biased(&net, 2, 200.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = cloud(&mut rng, 10);
    let l = labeled_loss(&net, &theta, &[&c], &[Some(2)]).unwrap();
    assert!(l < 1e-60, "{l}");
    assert!(labeled_loss(&net, &theta, &[&c], &[None]).is_err());
}

#[test]
fn batch_loss_is_mean_of_sample_losses() {
    let net = net(4);
    let theta = net.init(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cs: Vec<Tensor> = (0..5).map(|_| cloud(&mut rng, 9)).collect();
    let ys: Vec<Option<usize>> = (0..5).map(|i| Some(i % 4)).collect();
    let refs: Vec<&Tensor> = cs.iter().collect();
    let batch = labeled_loss(&net, &theta, &refs, &ys).unwrap();
    let singles: f64 = cs.iter().zip(&ys).map(|(c, y)| labeled_loss(&net, &theta, &[c], &[*y]).unwrap()).sum::<f64>() / 5.0;
    assert!((batch - singles).abs() < 1e-12);
}

#[test]
fn augment_identity_and_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = cloud(&mut rng, 40);
    assert_eq!(augment(&c, &AugmentSpec::identity(), &mut rng).unwrap(), c);
    let spec = AugmentSpec {
        rotation: PI,
        ..AugmentSpec::identity()
    };
    let r = augment(&c, &spec, &mut rng).unwrap();
    assert_ne!(r, c);
    for (a, b) in pairwise(&c).iter().zip(pairwise(&r)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn jitter_displacement_follows_chi_three() {
    let sigma = 0.01;
    let spec = AugmentSpec {
        jitter: sigma,
        ..AugmentSpec::identity()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = cloud(&mut rng, 1024);
    let mut total = 0.0;
    let draws = 100;
    for _ in 0..draws {
        let j = augment(&c, &spec, &mut rng).unwrap();
        total += c
            .data()
            .chunks(3)
            .zip(j.data().chunks(3))
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / 1024.0;
    }
    let mean = total / draws as f64;
    // mean of a chi distribution with three degrees of freedom
    let chi3 = sigma * 2.0 * (2.0 / PI).sqrt();
    assert!((mean / chi3 - 1.0).abs() < 0.01, "{mean} vs {chi3}");
    let rough = sigma * 3f64.sqrt() * (2.0 / PI).sqrt();
    assert!((mean / rough - 1.0).abs() < 0.2);
}

#[test]
fn dropout_keeps_point_count() {
    let spec = AugmentSpec::strong();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = cloud(&mut rng, 64);
    assert_eq!(augment(&c, &spec, &mut rng).unwrap().shape(), &[64, 3]);
}

#[test]
fn unconfident_predictions_are_masked() {
    let net = net(4);
    let theta = net.init(6).unwrap().zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = cloud(&mut rng, 16);
    let l = consistency_loss(&net, &theta, &c, 0.95, &AugmentSpec::weak(), &AugmentSpec::strong(), &mut rng).unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn identity_views_give_negative_log_of_top_probability() {
    let net = net(4);
    let mut theta = biased(&net, 1, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // a little encoder signal so the loss depends on the cloud
    theta.add_scaled_in_place(&net.init(7).unwrap(), 0.1).unwrap();
    let c = cloud(&mut rng, 16);
    let id = AugmentSpec::identity();
    let l = consistency_loss(&net, &theta, &c, 0.5, &id, &id, &mut rng).unwrap();
    let p = softmax(net.predict_logits(&theta, &c).unwrap().data());
    let top = p.iter().cloned().fold(f64::MIN, f64::max);
    assert!(top >= 0.5);
    assert!((l + top.ln()).abs() < 1e-12, "{l} vs {}", -top.ln());
}

fn batch(rng: &mut ChaCha8Rng, nl: usize, nu: usize) -> SslBatch {
    let labeled: Vec<Tensor> = (0..nl).map(|_| cloud(rng, 12)).collect();
    let unlabeled: Vec<Tensor> = (0..nu).map(|_| cloud(rng, 12)).collect();
    let weak = unlabeled.iter().map(|c| augment(c, &AugmentSpec::weak(), rng).unwrap()).collect();
    let strong = unlabeled.iter().map(|c| augment(c, &AugmentSpec::strong(), rng).unwrap()).collect();
    SslBatch {
        labels: (0..nl).map(|i| i % 3).collect(),
        labeled,
        unlabeled_ids: (0..nu as u64).collect(),
        unlabeled,
        weak,
        strong,
    }
}

/// A network confident enough that some pseudo-labels pass the threshold.
fn confident() -> (TaskNet, ParamSet) {
    let net = net(3);
    let mut theta = biased(&net, 0, 2.0);
    theta.add_scaled_in_place(&net.init(11).unwrap(), 1.0).unwrap();
    (net, theta)
}

#[test]
fn weighted_loss_degenerate_cases() {
    let (net, theta) = confident();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = batch(&mut rng, 4, 6);
    let th = 0.6;
    let targets = pseudo_labels(&net, &theta, &b.weak.iter().collect::<Vec<_>>(), th).unwrap();
    assert!(targets.iter().any(Option::is_some));
    let lab = labeled_loss(&net, &theta, &b.labeled.iter().collect::<Vec<_>>(), &b.labels.iter().map(|&y| Some(y)).collect::<Vec<_>>())
        .unwrap();
    let u = unlabeled_loss_values(&net, &theta, &b.strong.iter().collect::<Vec<_>>(), &targets).unwrap();

    let zero = training_loss_with_weights(&net, &theta, &b, &[0.0; 6], th).unwrap();
    assert!((zero - lab).abs() < 1e-12);
    let ones = training_loss_with_weights(&net, &theta, &b, &[1.0; 6], th).unwrap();
    assert!((ones - (lab + u.iter().sum::<f64>() / 6.0)).abs() < 1e-12);

    let single = SslBatch {
        unlabeled_ids: vec![0],
        unlabeled: b.unlabeled[..1].to_vec(),
        weak: b.weak[..1].to_vec(),
        strong: b.strong[..1].to_vec(),
        ..b.clone()
    };
    let half = training_loss_with_weights(&net, &theta, &single, &[0.5], th).unwrap();
    let expected = lab + 0.5 * u[0];
    assert!((half - expected).abs() < 1e-12);
}

#[test]
fn weak_views_carry_no_gradient() {
    let (net, theta) = confident();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = batch(&mut rng, 3, 5);
    let mut g = TrainGraph::record(&net, &theta, &b, 0.6, true).unwrap();
    let targets = g.targets.clone();
    let grad = g.grad(&[1.0; 5]).unwrap();
    let mut moved = b.clone();
    for w in &mut moved.weak {
        *w = Tensor::zeros(w.shape());
    }
    let mut h = TrainGraph::record_with_targets(&net, &theta, &moved, targets, true).unwrap();
    assert_eq!(h.grad(&[1.0; 5]).unwrap(), grad);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Scaling every weight by `c` scales the unlabeled term by `c`.
    #[test]
    fn unlabeled_term_is_linear_in_the_weights(c in 0.01f64..1.0, seed in 0u64..1000) {
        let (net, theta) = confident();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = batch(&mut rng, 3, 5);
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let scaled: Vec<f64> = w.iter().map(|x| c * x).collect();
        let lab = training_loss_with_weights(&net, &theta, &b, &[0.0; 5], 0.6).unwrap();
        let full = training_loss_with_weights(&net, &theta, &b, &w, 0.6).unwrap() - lab;
        let part = training_loss_with_weights(&net, &theta, &b, &scaled, 0.6).unwrap() - lab;
        prop_assert!((part - c * full).abs() <= 1e-12 * (1.0 + full.abs()), "{} vs {}", part, c * full);
    }
}
