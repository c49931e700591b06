use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rebo_core::acceptance::AnalyticProblem;
use rebo_core::autodiff::{ParamSet, Tensor};
use rebo_core::bilevel::{
    cosine, dense_meta_gradient, epsilon_of, hvp_meta_gradient, meta_step, mixed_partials, oracle_meta_gradient,
    virtual_step, BilevelProblem, Difference, Regularizers, SslProblem, ORACLE_STEP,
};
use rebo_core::models::{TaskNet, WeightPredictor};
use rebo_core::ssl_losses::{augment, AugmentSpec, SslBatch};
use rebo_core::{Error, Result};

fn vp(name: &str, v: &[f64]) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(name, Tensor::vector(v.to_vec()).unwrap()).unwrap();
    p
}

/// `L_tr = 0.5 sum_i phi_i theta_i^2 + 0.5 |theta - a|^2`, `L_val = c . theta`.
/// The unrolled validation loss is linear in `phi` with slope
/// `-alpha * c_i * theta_i`.
struct Quadratic {
    a: Vec<f64>,
    c: Vec<f64>,
}

impl BilevelProblem for Quadratic {
    fn train_grad_theta(&self, theta: &ParamSet, phi: &ParamSet) -> Result<ParamSet> {
        let t = theta.get("t")?.data();
        let p = phi.get("p")?.data();
        Ok(vp("t", &(0..t.len()).map(|i| p[i] * t[i] + t[i] - self.a[i]).collect::<Vec<_>>()))
    }

    fn train_grad_phi(&self, theta: &ParamSet, _phi: &ParamSet) -> Result<ParamSet> {
        let t = theta.get("t")?.data();
        Ok(vp("p", &t.iter().map(|x| 0.5 * x * x).collect::<Vec<_>>()))
    }

    fn val_loss(&self, theta: &ParamSet) -> Result<f64> {
        Ok(theta.get("t")?.data().iter().zip(&self.c).map(|(t, c)| t * c).sum())
    }

    fn val_loss_and_grad(&self, theta: &ParamSet) -> Result<(f64, ParamSet)> {
        Ok((self.val_loss(theta)?, vp("t", &self.c)))
    }
}

/// `phi` only enters through a term that does not depend on `theta`.
struct Detached;

impl BilevelProblem for Detached {
    fn train_grad_theta(&self, theta: &ParamSet, _phi: &ParamSet) -> Result<ParamSet> {
        Ok(theta.clone())
    }
    fn train_grad_phi(&self, _theta: &ParamSet, phi: &ParamSet) -> Result<ParamSet> {
        Ok(phi.clone())
    }
    fn val_loss(&self, theta: &ParamSet) -> Result<f64> {
        Ok(theta.get("t")?.data().iter().sum())
    }
    fn val_loss_and_grad(&self, theta: &ParamSet) -> Result<(f64, ParamSet)> {
        Ok((self.val_loss(theta)?, vp("t", &vec![1.0; theta.num_scalars()])))
    }
}

#[test]
fn virtual_step_arithmetic() {
    let th = vp("w", &[1.0]);
    assert_eq!(virtual_step(&th, &vp("w", &[2.0]), 0.1).unwrap().get("w").unwrap().data(), &[0.8]);
    assert_eq!(virtual_step(&th, &vp("w", &[0.0]), 0.1).unwrap(), th);
    assert_eq!(virtual_step(&th, &vp("w", &[2.0]), 0.0).unwrap(), th);
}

#[test]
fn epsilon_rule() {
    assert!((epsilon_of(&vp("v", &[2.0, 0.0])).unwrap() - 0.005).abs() < 1e-18);
    assert!((epsilon_of(&vp("v", &[0.006, 0.008])).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(epsilon_of(&vp("v", &[1e-2])).unwrap(), 1.0);
    assert!(matches!(epsilon_of(&vp("v", &[0.0])), Err(Error::DegenerateStep)));
}

#[test]
fn oracle_on_linear_validation_loss() {
    let q = Quadratic {
        a: vec![0.5, -1.0, 2.0],
        c: vec![1.0, -2.0, 0.5],
    };
    let theta = vp("t", &[0.3, -0.7, 1.1]);
    let phi = vp("p", &[0.2, 0.4, -0.1]);
    let exact = |alpha: f64| -> Vec<f64> { (0..3).map(|i| -alpha * q.c[i] * [0.3, -0.7, 1.1][i]).collect() };
    let o1 = oracle_meta_gradient(&q, &theta, &phi, 0.1, ORACLE_STEP).unwrap().flatten();
    let o2 = oracle_meta_gradient(&q, &theta, &phi, 0.2, ORACLE_STEP).unwrap().flatten();
    for i in 0..3 {
        assert!((o1[i] - exact(0.1)[i]).abs() < 1e-9);
        assert!((o2[i] - 2.0 * o1[i]).abs() < 1e-9);
    }
    let h = hvp_meta_gradient(&q, &theta, &phi, 0.1, Difference::Central).unwrap();
    for (a, b) in h.grad.unwrap().flatten().iter().zip(exact(0.1)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn detached_weights_have_zero_meta_gradient() {
    let theta = vp("t", &[0.3, -0.7]);
    let phi = vp("p", &[0.2, 0.4]);
    let o = oracle_meta_gradient(&Detached, &theta, &phi, 0.1, ORACLE_STEP).unwrap();
    assert!(o.flatten().iter().all(|&x| x == 0.0));
    let h = hvp_meta_gradient(&Detached, &theta, &phi, 0.1, Difference::Central).unwrap();
    assert!(h.grad.unwrap().flatten().iter().all(|&x| x == 0.0));
}

#[test]
fn dense_construction_matches_closed_form() {
    let p = AnalyticProblem::random(6, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let theta: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let phi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (tp, pp) = (vp("theta", &theta), vp("phi", &phi));
    let m = mixed_partials(&p, &tp, &pp, 1e-5).unwrap();
    let g = p.train_grad_theta(&tp, &pp).unwrap();
    let (_, v) = p.val_loss_and_grad(&virtual_step(&tp, &g, 0.1).unwrap()).unwrap();
    let dense = dense_meta_gradient(&m, &v.flatten(), 0.1);
    for (a, b) in dense.iter().zip(p.exact_meta_gradient(&theta, &phi, 0.1)) {
        assert!((a - b).abs() < 1e-8);
    }
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn ssl_batch(rng: &mut ChaCha8Rng, nu: usize) -> SslBatch {
    let labeled: Vec<Tensor> = (0..3).map(|_| cloud(rng, 10)).collect();
    let unlabeled: Vec<Tensor> = (0..nu).map(|_| cloud(rng, 10)).collect();
    let weak = unlabeled.iter().map(|c| augment(c, &AugmentSpec::weak(), rng).unwrap()).collect();
    let strong = unlabeled.iter().map(|c| augment(c, &AugmentSpec::strong(), rng).unwrap()).collect();
    SslBatch {
        labels: vec![0, 1, 0],
        labeled,
        unlabeled_ids: (0..nu as u64).collect(),
        unlabeled,
        weak,
        strong,
    }
}

struct Fixture {
    net: TaskNet,
    pred: WeightPredictor,
    theta: ParamSet,
    phi: ParamSet,
    val: Vec<Tensor>,
}

fn fixture(seed: u64) -> Fixture {
    let net = TaskNet::new(vec![3, 6, 8], vec![6], 2);
    let pred = WeightPredictor::new(vec![8, 4, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Fixture {
        theta: net.init(seed).unwrap(),
        phi: pred.init(seed + 1).unwrap(),
        val: (0..2).map(|_| cloud(&mut rng, 10)).collect(),
        net,
        pred,
    }
}

#[test]
fn empty_unlabeled_batch_gives_exact_zero() {
    let f = fixture(1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = ssl_batch(&mut rng, 0);
    let prob = SslProblem::new(&f.net, &f.pred, &b, f.val.iter().collect(), vec![1, 0], &f.theta, 0.5).unwrap();
    for d in [Difference::Central, Difference::Forward] {
        let g = hvp_meta_gradient(&prob, &f.theta, &f.phi, 0.1, d).unwrap().grad.unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn meta_step_degenerate_cases_and_report() {
    let f = fixture(2);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let b = ssl_batch(&mut rng, 5);
    // threshold low enough that pseudo-labels exist
    let prob = SslProblem::new(&f.net, &f.pred, &b, f.val.iter().collect(), vec![1, 0], &f.theta, 0.5).unwrap();
    let hv = hvp_meta_gradient(&prob, &f.theta, &f.phi, 0.1, Difference::Central).unwrap().grad.unwrap();

    let vf = f.net.features_batch(&f.theta, &f.val.iter().collect::<Vec<_>>()).unwrap();
    let targets = vec![0.5; 5];
    let zero = Regularizers {
        predictor: &f.pred,
        unlabeled_features: &prob.unlabeled_features,
        targets: &targets,
        val_features: &vf,
        gamma: 0.0,
        xi: 0.0,
        eta: 0.0,
    };
    let (phi, rep) = meta_step(&prob, &f.theta, &f.phi, 0.1, 0.5, Difference::Central, Some(&zero)).unwrap();
    let dir = f.phi.add_scaled(&phi, -1.0).unwrap().scaled(1.0 / 0.5);
    assert!(cosine(&dir, &hv).unwrap() > 1.0 - 1e-12);
    assert_eq!(rep.tikhonov_norm + rep.entropy_norm + rep.od_norm, 0.0);

    let empty = ssl_batch(&mut rng, 0);
    let p0 = SslProblem::new(&f.net, &f.pred, &empty, f.val.iter().collect(), vec![1, 0], &f.theta, 0.5).unwrap();
    let (phi, _) = meta_step(&p0, &f.theta, &f.phi, 0.1, 0.5, Difference::Central, None).unwrap();
    assert_eq!(phi, f.phi);

    let full = Regularizers {
        gamma: 0.1,
        xi: 0.01,
        eta: 0.01,
        ..zero
    };
    let (_, rep) = meta_step(&prob, &f.theta, &f.phi, 0.1, 0.5, Difference::Central, Some(&full)).unwrap();
    for n in [rep.hvp_norm, rep.tikhonov_norm, rep.entropy_norm, rep.od_norm, rep.total_norm, rep.eps] {
        assert!(n.is_finite() && n >= 0.0);
    }
    assert!(rep.total_norm > 0.0 && !rep.skipped);
}

#[test]
fn finite_difference_agrees_with_oracle_on_network() {
    let f = fixture(3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = ssl_batch(&mut rng, 4);
    let prob = SslProblem::new(&f.net, &f.pred, &b, f.val.iter().collect(), vec![1, 0], &f.theta, 0.5).unwrap();
    assert!(prob.targets.iter().any(Option::is_some));
    let hv = hvp_meta_gradient(&prob, &f.theta, &f.phi, 0.1, Difference::Central).unwrap().grad.unwrap();
    let or = oracle_meta_gradient(&prob, &f.theta, &f.phi, 0.1, ORACLE_STEP).unwrap();
    assert!(cosine(&hv, &or).unwrap() >= 0.99);
}

#[test]
fn oracle_step_is_in_the_convergent_regime() {
    let f = fixture(4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let b = ssl_batch(&mut rng, 4);
    let prob = SslProblem::new(&f.net, &f.pred, &b, f.val.iter().collect(), vec![0, 1], &f.theta, 0.5).unwrap();
    let h = oracle_meta_gradient(&prob, &f.theta, &f.phi, 0.1, ORACLE_STEP).unwrap();
    let h10 = oracle_meta_gradient(&prob, &f.theta, &f.phi, 0.1, ORACLE_STEP / 10.0).unwrap();
    let change = h.add_scaled(&h10, -1.0).unwrap().norm() / h.norm();
    assert!(h.norm() > 0.0);
    assert!(change < 0.01, "{change}");
}
