use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rebo_core::autodiff::Tensor;
use rebo_core::datagen::ood::{
    corrupt_strong, crop_box, perturb_box, random_box_scene, render_block, weak_ood_cloud, BlockLayout, PlacedShape,
    StrongOodSpec,
};
use rebo_core::datagen::shapes::{generate_shape, norm, Point, ShapeJitter, NUM_SHAPES};
use rebo_core::datagen::{epoch_split, make_strong_ood, make_weak_ood, Cohort, CohortCounts, Dataset, DatasetSpec};
use rebo_core::models::TaskNet;

fn spec(counts: CohortCounts) -> DatasetSpec {
    DatasetSpec {
        points: 64,
        counts,
        seed: 17,
        ..DatasetSpec::default()
    }
}

#[test]
fn same_seed_same_dataset() {
    let s = spec(CohortCounts {
        labeled: 8,
        unlabeled: 8,
        weak: 4,
        strong: 4,
        boxed: 4,
        test: 4,
    });
    let a = Dataset::generate(&s).unwrap();
    assert_eq!(a, Dataset::generate(&s).unwrap());
    let other = Dataset::generate(&DatasetSpec { seed: 18, ..s }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn zero_count_cohort_is_absent() {
    let s = spec(CohortCounts {
        labeled: 4,
        unlabeled: 4,
        weak: 0,
        strong: 3,
        boxed: 0,
        test: 2,
    });
    let ds = Dataset::generate(&s).unwrap();
    assert_eq!(ds.counts(), s.counts);
    assert_eq!(ds.cohort(Cohort::W).count(), 0);
    assert_eq!(ds.len(), 13);
}

/// Logistic regression by full-batch gradient descent.
fn fit_logistic(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..2000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let e = 1.0 / (1.0 + (-z).exp()) - yi;
            for k in 0..d {
                gw[k] += e * xi[k];
            }
            gb += e;
        }
        let n = x.len() as f64;
        for k in 0..d {
            w[k] -= 0.5 * gw[k] / n;
        }
        b -= 0.5 * gb / n;
    }
    (w, b)
}

#[test]
fn sphere_and_cube_are_linearly_separable_under_random_encoder() {
    let net = TaskNet::new(vec![3, 32, 64, 64], vec![16], 2);
    let theta = net.init(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let jitter = ShapeJitter::default();
    let mut draw = |n: usize| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let pts = generate_shape(class, 256, &jitter, &mut rng).unwrap();
            let t = Tensor::matrix(256, 3, pts.concat()).unwrap();
            xs.push(net.feature(&theta, &t).unwrap().data().to_vec());
            ys.push(class as f64);
        }
        (xs, ys)
    };
    let (mut train_x, train_y) = draw(200);
    let (mut test_x, test_y) = draw(200);

    let d = train_x[0].len();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for k in 0..d {
        mean[k] = train_x.iter().map(|r| r[k]).sum::<f64>() / 200.0;
        sd[k] = (train_x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / 200.0).sqrt().max(1e-9);
    }
    for r in train_x.iter_mut().chain(test_x.iter_mut()) {
        for k in 0..d {
            r[k] = (r[k] - mean[k]) / sd[k];
        }
    }
    let (w, b) = fit_logistic(&train_x, &train_y);
    let correct = test_x
        .iter()
        .zip(&test_y)
        .filter(|(x, y)| {
            let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            (z > 0.0) == (**y > 0.5)
        })
        .count();
    let acc = correct as f64 / 200.0;
    assert!(acc > 0.9, "held-out accuracy {acc}");
}

#[test]
fn full_crop_without_noise_is_an_object() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layout = BlockLayout {
        shapes: vec![PlacedShape {
            class: 3,
            scale: 0.5,
            center: [0.1, -0.2, 0.5],
        }],
        clip: None,
        noise_fraction: 0.0,
        floor_fraction: 0.0,
    };
    let (pts, stats) = render_block(&layout, 128, &ShapeJitter::default(), &mut rng).unwrap();
    assert_eq!(stats.object, 128);
    assert_eq!(stats.noise + stats.floor, 0);
    let far = pts.iter().map(norm).fold(0.0, f64::max);
    assert!((far - 1.0).abs() < 1e-9);
}

#[test]
fn weak_blocks_respect_noise_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200;
    for _ in 0..100 {
        let (pts, stats) = weak_ood_cloud(n, &ShapeJitter::default(), &mut rng).unwrap();
        assert_eq!(pts.len(), n);
        assert_eq!(stats.object + stats.floor + stats.noise, n);
        let frac = stats.noise as f64 / n as f64;
        // rounding to whole points may move the fraction by half a point
        let slack = 0.5 / n as f64;
        assert!((0.1 - slack..=0.3 + slack).contains(&frac), "{frac}");
    }
}

#[test]
fn cohort_tags_on_generated_ood() {
    let s = spec(CohortCounts {
        labeled: 2,
        unlabeled: 2,
        weak: 5,
        strong: 5,
        boxed: 5,
        test: 0,
    });
    let weak = make_weak_ood(&s).unwrap();
    assert_eq!(weak.len(), 5);
    assert!(weak.iter().all(|x| x.cohort == Cohort::W && x.label.is_none()));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let strong = make_strong_ood(&weak, &StrongOodSpec::default(), &mut rng).unwrap();
    assert!(strong.iter().all(|x| x.cohort == Cohort::S && x.label.is_none()));
    let ds = Dataset::generate(&s).unwrap();
    for c in Cohort::ALL {
        assert!(ds.cohort(c).all(|x| x.cohort == c));
    }
    assert!(ds.cohort(Cohort::O).count() > 0);
}

#[test]
fn strong_jitter_inflates_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let jitter = ShapeJitter::default();
    let mut before = 0.0;
    let mut after = 0.0;
    let draws = 100;
    for i in 0..draws {
        let mut pts = generate_shape(i % NUM_SHAPES, 256, &jitter, &mut rng).unwrap();
        before += pts.iter().map(|p| norm(p).powi(2)).sum::<f64>() / 256.0;
        corrupt_strong(&mut pts, &StrongOodSpec::default(), &mut rng);
        after += pts.iter().map(norm).sum::<f64>() / 256.0;
    }
    let (sq, mean) = (before / draws as f64, after / draws as f64);
    let predicted = (sq + 3.0).sqrt();
    assert!(mean >= 1.7, "{mean}");
    assert!((mean / predicted - 1.0).abs() < 0.15, "{mean} vs {predicted}");
}

#[test]
fn box_perturbation_statistics() {
    use rebo_core::datagen::ood::Box3;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bx = Box3::new([0.3, -0.1, 0.2], [2.0, 1.0, 0.5]).unwrap();
    for _ in 0..1000 {
        let p = perturb_box(&bx, &mut rng);
        for k in 0..3 {
            let shift = (p.center[k] - bx.center[k]).abs() / bx.size[k];
            assert!((0.5 - 1e-12..=1.0 + 1e-12).contains(&shift), "{shift}");
        }
    }
    let ratios: Vec<f64> = (0..10_000).map(|_| perturb_box(&bx, &mut rng).size[0] / bx.size[0]).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ratios.len() as f64).sqrt();
    assert!((mean - 1.0).abs() < 0.1, "{mean}");
    assert!((sd / 0.2 - 1.0).abs() < 0.1, "{sd}");
}

#[test]
fn box_crops_overlap_partially() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let jitter = ShapeJitter::default();
    let mut partial = 0;
    for _ in 0..200 {
        let scene = random_box_scene(128, &jitter, &mut rng).unwrap();
        let object: Vec<Point> = scene.points[scene.object.clone()].to_vec();
        let kept = crop_box(&object, &perturb_box(&scene.object_box, &mut rng)).len();
        if kept < object.len() {
            partial += 1;
        }
    }
    assert!(partial >= 180, "{partial} of 200");
}

#[test]
fn split_sizes_and_randomness() {
    let pool: Vec<u64> = (0..100).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (tr, va) = epoch_split(&pool, &mut rng).unwrap();
    assert_eq!((tr.len(), va.len()), (50, 50));
    let union: HashSet<u64> = tr.iter().chain(&va).copied().collect();
    assert_eq!(union, pool.iter().copied().collect());

    let mut seen = HashSet::new();
    for _ in 0..10 {
        let (mut t, _) = epoch_split(&pool, &mut rng).unwrap();
        t.sort_unstable();
        seen.insert(t);
    }
    assert!(seen.len() > 1);

    let (t, v) = epoch_split(&[4, 5, 6], &mut rng).unwrap();
    assert_eq!((t.len(), v.len()), (2, 1));
    assert!(epoch_split(&[1], &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_clouds_fit_the_unit_sphere(seed in 0u64..1_000_000, class in 0usize..NUM_SHAPES) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = generate_shape(class, 96, &ShapeJitter::default(), &mut rng).unwrap();
        prop_assert!(pts.iter().all(|p| norm(p) <= 1.0 + 1e-9));
        let (block, _) = weak_ood_cloud(96, &ShapeJitter::default(), &mut rng).unwrap();
        prop_assert!(block.iter().all(|p| norm(p) <= 1.0 + 1e-9));
        let mut c = [0.0; 3];
        for p in &pts {
            for k in 0..3 {
                c[k] += p[k] / 96.0;
            }
        }
        prop_assert!(c.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn split_partitions_the_pool(n in 2usize..200, seed in 0u64..1000) {
        let pool: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, v) = epoch_split(&pool, &mut rng).unwrap();
        prop_assert_eq!(t.len(), n.div_ceil(2));
        prop_assert_eq!(v.len(), n / 2);
        let mut all: Vec<u64> = t.into_iter().chain(v).collect();
        all.sort_unstable();
        prop_assert_eq!(all, pool);
    }
}
