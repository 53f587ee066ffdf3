//! Analytic gradients against central finite differences.

use crowdcount::grid::{Grid, Tensor};
use crowdcount::losses::{
    consistency_density_loss, consistency_seg_loss, inherent_consistency_loss,
    supervised_density_loss, supervised_seg_loss,
};
use crowdcount::model::{Model, NetworkConfig, PerturbationConfig};
use crowdcount::transform::{transform_scalar, transform_scalar_derivative};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + abs
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Grid {
    Grid::from_fn(h, w, |_, _| rng.random_range(lo..hi))
}

fn random_simplex(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(2, h, w);
    for i in 0..h * w {
        let p = rng.random_range(0.05..0.95);
        t.data[i] = 1.0 - p;
        t.data[h * w + i] = p;
    }
    t
}

/// Objective `Σ a·P + Σ b·M_D` for fixed random coefficients; its output
/// gradients are exactly `a` and `b`.
fn linear_objective(model: &Model, image: &Grid, a: &Tensor, b: &Grid, seed: u64) -> f64 {
    let perturb = PerturbationConfig::stochastic(0.05);
    let out = model
        .forward(image, &perturb, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    let s: f64 = out.class_score.data.iter().zip(&a.data).map(|(p, c)| p * c).sum();
    s + out.density.data().iter().zip(b.data()).map(|(d, c)| d * c).sum::<f64>()
}

#[test]
fn network_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = NetworkConfig::tiny();
    let mut model = Model::new(cfg, &mut rng).unwrap();
    // keep the density head in its linear regime so the check is not
    // dominated by the ReLU kink
    let bias = model
        .params
        .tensors_mut()
        .iter_mut()
        .find(|p| p.name == "density_head.bias")
        .unwrap();
    bias.data[0] = 0.5;
    let image = random_grid(&mut rng, 8, 8, 0.0, 1.0);
    let (oh, ow) = (4, 4);
    let a = {
        let mut t = Tensor::zeros(2, oh, ow);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    };
    let b = random_grid(&mut rng, oh, ow, -1.0, 1.0);
    let seed = 77;

    let perturb = PerturbationConfig::stochastic(0.05);
    let (_, trace) = model
        .forward_traced(&image, &perturb, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&trace, &a, &b, &mut grads);

    let h = 1e-6;
    let n = model.params.num_scalars();
    let mut checked = 0;
    for i in 0..n {
        let orig = model.params.scalar(i);
        *model.params.scalar_mut(i) = orig + h;
        let up = linear_objective(&model, &image, &a, &b, seed);
        *model.params.scalar_mut(i) = orig - h;
        let down = linear_objective(&model, &image, &a, &b, seed);
        *model.params.scalar_mut(i) = orig;
        let fd = (up - down) / (2.0 * h);
        let g = grads.scalar(i);
        assert!(close(g, fd, 1e-3, 1e-7), "param {i}: analytic {g} vs numeric {fd}");
        checked += 1;
    }
    assert_eq!(checked, n);
}

#[test]
fn accumulating_backward_adds_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::new(NetworkConfig::tiny(), &mut rng).unwrap();
    let image = random_grid(&mut rng, 8, 8, 0.0, 1.0);
    let (_, trace) = model
        .forward_traced(&image, &PerturbationConfig::EVAL, &mut rng)
        .unwrap();
    let a = random_simplex(&mut rng, 4, 4);
    let b = random_grid(&mut rng, 4, 4, -1.0, 1.0);
    let mut once = model.params.zeros_like();
    model.backward(&trace, &a, &b, &mut once);
    let mut twice = model.params.zeros_like();
    model.backward(&trace, &a, &b, &mut twice);
    model.backward(&trace, &a, &b, &mut twice);
    once.scale(2.0);
    assert!(once.max_abs_diff(&twice) < 1e-12);
}

#[test]
fn transform_derivative_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 6000.0;
    let h = 1e-9;
    for _ in 0..1000 {
        let x: f64 = rng.random_range(0.0..1e-3);
        // difference of tanh evaluated without cancellation:
        // tanh(a) - tanh(b) = sinh(a - b) / (cosh a cosh b)
        let (a, b) = (k * (x + h) / 2.0, k * (x - h) / 2.0);
        let fd = (k * h).sinh() / (a.cosh() * b.cosh()) / (2.0 * h);
        let g = transform_scalar_derivative(x, k);
        assert!((g - fd).abs() / fd.abs() < 1e-4, "x {x}: {g} vs {fd}");
        // the plain forward function agrees with the same oracle
        let naive = (transform_scalar(x + h, k) - transform_scalar(x - h, k)) / (2.0 * h);
        assert!((naive - fd).abs() / fd.abs() < 1e-4);
    }
}

fn fd_check_grid(
    f: &dyn Fn(&[Grid]) -> f64,
    inputs: &mut [Grid],
    analytic: &[Grid],
    what: &str,
) {
    let h = 1e-6;
    for j in 0..inputs.len() {
        for i in 0..inputs[j].len() {
            let orig = inputs[j].data()[i];
            inputs[j].data_mut()[i] = orig + h;
            let up = f(inputs);
            inputs[j].data_mut()[i] = orig - h;
            let down = f(inputs);
            inputs[j].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[j].data()[i];
            assert!(close(g, fd, 1e-3, 1e-8), "{what} [{j}][{i}]: {g} vs {fd}");
        }
    }
}

fn fd_check_tensor(f: &dyn Fn(&[Tensor]) -> f64, inputs: &mut [Tensor], analytic: &[Tensor], what: &str) {
    let h = 1e-6;
    for j in 0..inputs.len() {
        for i in 0..inputs[j].data.len() {
            let orig = inputs[j].data[i];
            inputs[j].data[i] = orig + h;
            let up = f(inputs);
            inputs[j].data[i] = orig - h;
            let down = f(inputs);
            inputs[j].data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[j].data[i];
            assert!(close(g, fd, 1e-3, 1e-8), "{what} [{j}][{i}]: {g} vs {fd}");
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (3, 4);

    let targets: Vec<Grid> = (0..2).map(|_| random_grid(&mut rng, h, w, 0.0, 2.0)).collect();
    let mut preds: Vec<Grid> = (0..2).map(|_| random_grid(&mut rng, h, w, 0.0, 2.0)).collect();
    let (_, g) = supervised_density_loss(&preds.iter().collect::<Vec<_>>(), &targets.iter().collect::<Vec<_>>()).unwrap();
    let f = |p: &[Grid]| {
        supervised_density_loss(&p.iter().collect::<Vec<_>>(), &targets.iter().collect::<Vec<_>>())
            .unwrap()
            .0
    };
    fd_check_grid(&f, &mut preds, &g, "L_Sd");

    let masks: Vec<Grid> = (0..2)
        .map(|_| Grid::from_fn(h, w, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 }))
        .collect();
    let mut scores: Vec<Tensor> = (0..2).map(|_| random_simplex(&mut rng, h, w)).collect();
    let (_, g) = supervised_seg_loss(&scores.iter().collect::<Vec<_>>(), &masks.iter().collect::<Vec<_>>()).unwrap();
    let f = |s: &[Tensor]| {
        supervised_seg_loss(&s.iter().collect::<Vec<_>>(), &masks.iter().collect::<Vec<_>>())
            .unwrap()
            .0
    };
    fd_check_tensor(&f, &mut scores, &g, "L_Sb");

    let approx: Vec<Grid> = (0..3).map(|_| random_grid(&mut rng, h, w, 0.0, 1.0)).collect();
    let mut crowd: Vec<Grid> = (0..3).map(|_| random_grid(&mut rng, h, w, 0.0, 1.0)).collect();
    let (_, g) = inherent_consistency_loss(&crowd.iter().collect::<Vec<_>>(), &approx.iter().collect::<Vec<_>>()).unwrap();
    let f = |c: &[Grid]| {
        inherent_consistency_loss(&c.iter().collect::<Vec<_>>(), &approx.iter().collect::<Vec<_>>())
            .unwrap()
            .0
    };
    fd_check_grid(&f, &mut crowd, &g.crowd_prob, "L_c' wrt M_B");
    let mut approx_v = approx.clone();
    let f = |a: &[Grid]| {
        inherent_consistency_loss(&crowd.iter().collect::<Vec<_>>(), &a.iter().collect::<Vec<_>>())
            .unwrap()
            .0
    };
    fd_check_grid(&f, &mut approx_v, &g.approx, "L_c' wrt M_AB");

    let teacher: Vec<Tensor> = (0..2).map(|_| random_simplex(&mut rng, h, w)).collect();
    let hard: Vec<Grid> = (0..2)
        .map(|_| Grid::from_fn(h, w, |_, _| if rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 }))
        .collect();
    let mut student: Vec<Tensor> = (0..2).map(|_| random_simplex(&mut rng, h, w)).collect();
    let (_, g) = consistency_seg_loss(
        &student.iter().collect::<Vec<_>>(),
        &teacher.iter().collect::<Vec<_>>(),
        &hard.iter().collect::<Vec<_>>(),
    )
    .unwrap();
    let f = |s: &[Tensor]| {
        consistency_seg_loss(
            &s.iter().collect::<Vec<_>>(),
            &teacher.iter().collect::<Vec<_>>(),
            &hard.iter().collect::<Vec<_>>(),
        )
        .unwrap()
        .0
    };
    fd_check_tensor(&f, &mut student, &g, "L_Cb");

    let t_den: Vec<Grid> = (0..2).map(|_| random_grid(&mut rng, h, w, 0.0, 2.0)).collect();
    let soft: Vec<Grid> = (0..2).map(|_| random_grid(&mut rng, h, w, 0.0, 7.0)).collect();
    let mut s_den: Vec<Grid> = (0..2).map(|_| random_grid(&mut rng, h, w, 0.0, 2.0)).collect();
    let (_, g) = consistency_density_loss(
        &s_den.iter().collect::<Vec<_>>(),
        &t_den.iter().collect::<Vec<_>>(),
        &soft.iter().collect::<Vec<_>>(),
    )
    .unwrap();
    let f = |s: &[Grid]| {
        consistency_density_loss(
            &s.iter().collect::<Vec<_>>(),
            &t_den.iter().collect::<Vec<_>>(),
            &soft.iter().collect::<Vec<_>>(),
        )
        .unwrap()
        .0
    };
    fd_check_grid(&f, &mut s_den, &g, "L_Cd");
}
