use std::collections::BTreeMap;

use rebo_core::autodiff::ParamSet;
use rebo_core::datagen::{Cohort, CohortCounts, Dataset, DatasetSpec, Point, Sample};
use rebo_core::models::CLASSIFIER_PREFIX;
use rebo_core::training::{
    continual_unseen, evaluate, finetune, predict_weights, run_epochs, train_baseline, train_rebo, transfer_retrain, warmup,
    ContinualMode, NoObserver, Pools, Recorder, TrainConfig, TrainState, Weighting,
};

fn data() -> Dataset {
    Dataset::generate(&DatasetSpec {
        classes: 4,
        points: 48,
        counts: CohortCounts {
            labeled: 16,
            unlabeled: 24,
            weak: 12,
            strong: 12,
            boxed: 0,
            test: 16,
        },
        seed: 3,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        seed: 5,
        alpha: 0.05,
        meta_lr: 0.01,
        warmup_epochs: 2,
        epochs: 2,
        labeled_batch: 4,
        unlabeled_batch: 8,
        val_batch: 4,
        iters_per_epoch: 3,
        threshold: 0.3,
        encoder: vec![3, 8, 16],
        classifier_hidden: vec![8],
        predictor_hidden: vec![8],
        warmup_phi_final_steps: 50,
        ..TrainConfig::default()
    }
}

fn open_pools(d: &Dataset) -> Pools {
    Pools::from_cohorts(d, &[Cohort::U, Cohort::W, Cohort::S])
}

fn warmed(cfg: &TrainConfig, d: &Dataset, pools: &Pools) -> TrainState {
    let mut s = TrainState::init(cfg, d.classes).unwrap();
    warmup(cfg, d, pools, &mut s).unwrap();
    s
}

#[test]
fn warmup_is_deterministic() {
    let (c, d) = (cfg(), data());
    let p = open_pools(&d);
    assert_eq!(warmed(&c, &d, &p), warmed(&c, &d, &p));
}

#[test]
fn warmup_task_parameters_ignore_the_unlabeled_pool() {
    let (c, d) = (cfg(), data());
    let a = warmed(&c, &d, &open_pools(&d));
    let b = warmed(&c, &d, &Pools::from_cohorts(&d, &[Cohort::S]));
    let none = warmed(&c, &d, &Pools::from_cohorts(&d, &[]));
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.theta, none.theta);
    assert_ne!(a.phi, none.phi);
}

#[test]
fn warmup_pushes_weights_apart() {
    let c = TrainConfig {
        warmup_phi_lr: 0.01,
        warmup_phi_final_steps: 1000,
        ..cfg()
    };
    let d = data();
    let mut s = TrainState::init(&c, d.classes).unwrap();
    let r = warmup(&c, &d, &open_pools(&d), &mut s).unwrap();
    assert!(r.mean_unlabeled <= 0.1, "{r:?}");
    assert!(r.mean_labeled >= 0.9, "{r:?}");
}

#[test]
fn fixed_weights_match_constant_weights() {
    let (c, d) = (cfg(), data());
    let p = open_pools(&d);
    let start = warmed(&c, &d, &p);
    for w in [0.0, 1.0] {
        let map: BTreeMap<u64, f64> = p.unlabeled.iter().map(|&id| (id, w)).collect();
        let mut fixed = start.clone();
        transfer_retrain(&c, &d, &p, &map, &mut fixed, &mut NoObserver).unwrap();
        let mut constant = start.clone();
        run_epochs(&c, &d, &p, &mut constant, Weighting::Constant(w), c.epochs, &mut NoObserver).unwrap();
        assert_eq!(fixed.theta, constant.theta, "w = {w}");
        assert_eq!(fixed.phi, start.phi);
        assert_eq!(fixed.counters.meta_gradients, 0);
    }
    let map: BTreeMap<u64, f64> = p.unlabeled.iter().map(|&id| (id, 1.0)).collect();
    let mut transfer = start.clone();
    transfer_retrain(&c, &d, &p, &map, &mut transfer, &mut NoObserver).unwrap();
    let mut base = start.clone();
    train_baseline(&c, &d, &p, &mut base, &mut NoObserver).unwrap();
    assert_eq!(transfer.theta, base.theta);
}

/// With every weight 0 the unlabeled samples cannot influence the task
/// parameters, so swapping the unlabeled pool for another of the same size
/// leaves the trajectory unchanged.
#[test]
fn zero_weights_make_training_labeled_only() {
    // every unlabeled sample gets a pseudo-label
    let c = TrainConfig { threshold: 1e-9, ..cfg() };
    let d = data();
    let weak = Pools::from_cohorts(&d, &[Cohort::W]);
    let strong = Pools::from_cohorts(&d, &[Cohort::S]);
    let start = warmed(&c, &d, &weak);
    let mut a = start.clone();
    run_epochs(&c, &d, &weak, &mut a, Weighting::Constant(0.0), 2, &mut NoObserver).unwrap();
    let mut b = start.clone();
    run_epochs(&c, &d, &strong, &mut b, Weighting::Constant(0.0), 2, &mut NoObserver).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_ne!(a.theta, start.theta);
    let mut one = start.clone();
    run_epochs(&c, &d, &weak, &mut one, Weighting::Constant(1.0), 2, &mut NoObserver).unwrap();
    assert_ne!(one.theta, a.theta);
}

#[test]
fn missing_fixed_weight_is_an_error() {
    let (c, d) = (cfg(), data());
    let p = open_pools(&d);
    let mut s = warmed(&c, &d, &p);
    let map: BTreeMap<u64, f64> = p.unlabeled[1..].iter().map(|&id| (id, 1.0)).collect();
    assert!(transfer_retrain(&c, &d, &p, &map, &mut s, &mut NoObserver).is_err());
}

#[test]
fn finetune_zero_epochs_is_a_no_op_and_otherwise_meta_steps() {
    let (c, d) = (cfg(), data());
    let p = open_pools(&d);
    let start = warmed(&c, &d, &p);
    let mut s = start.clone();
    finetune(&c, &d, &p, &mut s, 0, &mut NoObserver).unwrap();
    assert_eq!(s, start);
    finetune(&c, &d, &p, &mut s, 1, &mut NoObserver).unwrap();
    assert_eq!(s.counters.meta_gradients, c.iters_per_epoch as u64);
    assert_ne!(s.phi, start.phi);
}

#[test]
fn estimate_fix_never_moves_the_predictor() {
    let (c, d) = (cfg(), data());
    let seen = Pools::from_cohorts(&d, &[Cohort::U, Cohort::S]);
    let unseen = d.ids(&[Cohort::W]);
    let mut s = warmed(&c, &d, &seen);
    train_rebo(&c, &d, &seen, &mut s, &mut NoObserver).unwrap();
    let (phi, metas) = (s.phi.clone(), s.counters.meta_gradients);
    continual_unseen(&c, &d, &seen, &unseen, ContinualMode::EstimateFix, &mut s, 1, &mut NoObserver).unwrap();
    assert_eq!(s.phi, phi);
    assert_eq!(s.counters.meta_gradients, metas);
    let mut t = s.clone();
    continual_unseen(&c, &d, &seen, &unseen, ContinualMode::FineTune, &mut t, 1, &mut NoObserver).unwrap();
    assert!(t.counters.meta_gradients > metas);
}

#[test]
fn unseen_weight_inference_is_pure() {
    let (c, d) = (cfg(), data());
    let p = open_pools(&d);
    let s = warmed(&c, &d, &p);
    let net = c.task_net(d.classes);
    let pred = c.predictor(net.feature_dim());
    let ids = d.ids(&[Cohort::W]);
    let all = predict_weights(&net, &pred, &s.theta, &s.phi, &d, &ids).unwrap();
    assert_eq!(all, predict_weights(&net, &pred, &s.theta, &s.phi, &d, &ids).unwrap());
    let mut rev = ids.clone();
    rev.reverse();
    let back = predict_weights(&net, &pred, &s.theta, &s.phi, &d, &rev).unwrap();
    for (i, w) in back.iter().rev().enumerate() {
        assert_eq!(*w, all[i]);
    }
    let one = predict_weights(&net, &pred, &s.theta, &s.phi, &d, &ids[2..3]).unwrap();
    assert_eq!(one[0], all[2]);
}

/// Zero parameters except an output bias that always picks `class`.
fn constant_classifier(c: &TrainConfig, classes: usize, class: usize) -> ParamSet {
    let net = c.task_net(classes);
    let mut theta = net.init(0).unwrap().zeros_like();
    let last = net.classifier_widths().len() - 2;
    theta.get_mut(&format!("{CLASSIFIER_PREFIX}.b{last}")).unwrap().data_mut()[class] = 1.0;
    theta
}

fn labeled(id: u64, label: usize) -> Sample {
    let pts: Vec<Point> = (0..8).map(|i| [i as f64 * 0.1, 0.0, -0.2]).collect();
    Sample::from_points(id, &pts, Some(label), Cohort::T).unwrap()
}

#[test]
fn evaluate_counts_argmax_hits() {
    let c = cfg();
    let net = c.task_net(4);
    let theta = constant_classifier(&c, 4, 2);
    let all_two: Vec<Sample> = (0..5).map(|i| labeled(i, 2)).collect();
    assert_eq!(evaluate(&net, &theta, &all_two.iter().collect::<Vec<_>>()).unwrap(), 1.0);
    let mixed = [labeled(0, 0), labeled(1, 2), labeled(2, 3), labeled(3, 1)];
    let refs: Vec<&Sample> = mixed.iter().collect();
    assert_eq!(evaluate(&net, &theta, &refs).unwrap(), 0.25);
    let permuted = vec![refs[2], refs[0], refs[3], refs[1]];
    assert_eq!(evaluate(&net, &theta, &permuted).unwrap(), 0.25);
    assert!(evaluate(&net, &theta, &[]).is_err());
}

#[test]
fn frozen_unit_weights_reproduce_the_baseline() {
    let (c, d) = (cfg(), data());
    let p = open_pools(&d);
    let start = warmed(&c, &d, &p);
    let mut base = start.clone();
    train_baseline(&c, &d, &p, &mut base, &mut NoObserver).unwrap();

    let frozen = TrainConfig {
        meta_lr: 0.0,
        frozen_weight: Some(1.0),
        ..c.clone()
    };
    let mut r = start.clone();
    train_rebo(&frozen, &d, &p, &mut r, &mut NoObserver).unwrap();
    assert_eq!(r.theta, base.theta);
    assert!(r.counters.meta_gradients > 0);

    let mut live = start.clone();
    train_rebo(&c, &d, &p, &mut live, &mut NoObserver).unwrap();
    assert_ne!(live.theta, base.theta);
}

#[test]
fn metrics_cover_every_iteration() {
    let (c, d) = (cfg(), data());
    let p = open_pools(&d);
    let mut s = warmed(&c, &d, &p);
    let mut rec = Recorder::default();
    train_rebo(&c, &d, &p, &mut s, &mut rec).unwrap();
    assert_eq!(rec.records.len(), c.epochs * c.iters_per_epoch);
    let keys: Vec<(usize, usize)> = rec.records.iter().map(|r| (r.epoch, r.iteration)).collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    assert!(rec.records.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
}

#[test]
fn validation_loss_decreases_over_training() {
    let d = Dataset::generate(&DatasetSpec {
        classes: 4,
        points: 64,
        counts: CohortCounts {
            labeled: 40,
            unlabeled: 40,
            weak: 20,
            strong: 20,
            boxed: 0,
            test: 0,
        },
        seed: 8,
        ..DatasetSpec::default()
    })
    .unwrap();
    let c = TrainConfig {
        alpha: 0.1,
        epochs: 20,
        iters_per_epoch: 8,
        labeled_batch: 10,
        val_batch: 10,
        encoder: vec![3, 16, 32],
        classifier_hidden: vec![16],
        ..cfg()
    };
    let p = open_pools(&d);
    let mut s = TrainState::init(&c, d.classes).unwrap();
    warmup(&TrainConfig { warmup_epochs: 1, ..c.clone() }, &d, &p, &mut s).unwrap();
    let mut rec = Recorder::default();
    run_epochs(&c, &d, &p, &mut s, Weighting::Meta, c.epochs, &mut rec).unwrap();
    let epoch_mean = |e: usize| {
        let v: Vec<f64> = rec.records.iter().filter(|r| r.epoch == e).map(|r| r.val_loss).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (first, last) = (epoch_mean(0), epoch_mean(c.epochs - 1));
    assert!(last < first, "{first} -> {last}");
}
