//! Each operation against a brute-force scalar reimplementation.

use crowdcount::data::{density_from_point_list, mask_from_density, Point};
use crowdcount::eval::{export_maps, EvalResult, ExportOptions};
use crowdcount::grid::{Grid, Tensor};
use crowdcount::losses::{
    consistency_density_loss, consistency_seg_loss, inherent_consistency_loss, ramp_lambda,
    supervised_density_loss, supervised_seg_loss, total_loss, LossParts, LossWeights,
};
use crowdcount::model::{count_from_density, Model, NetworkConfig, PerturbationConfig};
use crowdcount::transform::{approx_segmentation, transform_scalar, transform_scalar_derivative, TransformConfig};
use crowdcount::uncertainty::{
    hard_mask, mc_passes, shannon_entropy, soft_mask, ThresholdSchedule, UncertaintyBundle,
};
use crowdcount::data::Scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::LN_2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_grid(r: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Grid {
    Grid::from_fn(h, w, |_, _| r.random_range(lo..hi))
}

fn random_scores(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(2, h, w);
    for i in 0..h * w {
        let p: f64 = r.random_range(0.01..0.99);
        t.data[i] = 1.0 - p;
        t.data[h * w + i] = p;
    }
    t
}

fn pair_scores(h: usize, w: usize, crowd: f64) -> Tensor {
    let mut t = Tensor::zeros(2, h, w);
    t.channel_mut(0).fill(1.0 - crowd);
    t.channel_mut(1).fill(crowd);
    t
}

#[test]
fn density_matches_per_point_rasterization() {
    let (h, w, sigma) = (64usize, 64usize, 4.0f64);
    let pts = [(10usize, 12usize), (32, 50), (52, 20)];
    let points: Vec<Point> = pts.iter().map(|&(r, c)| Point::new(r, c)).collect();
    let map = density_from_point_list(h, w, &points, sigma).unwrap();

    let mut oracle = vec![0.0f64; h * w];
    for &(pr, pc) in &pts {
        let mut kernel = vec![0.0f64; h * w];
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - pr as f64).powi(2) + (c as f64 - pc as f64).powi(2);
                if d2 <= (4.0 * sigma).powi(2) {
                    kernel[r * w + c] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let mass: f64 = kernel.iter().sum();
        // the kernel peaks at its own point
        let argmax = (0..h * w).max_by(|&a, &b| kernel[a].total_cmp(&kernel[b])).unwrap();
        assert_eq!(argmax, pr * w + pc);
        oracle.iter_mut().zip(&kernel).for_each(|(o, k)| *o += k / mass);
    }
    for (a, b) in map.grid().data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((map.count() - 3.0).abs() < 1e-6);
    for &(pr, pc) in &pts {
        let v = map.grid().get(pr, pc);
        for (dr, dc) in [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)] {
            let n = map.grid().get((pr as isize + dr) as usize, (pc as isize + dc) as usize);
            assert!(v > n);
        }
    }
}

#[test]
fn mask_is_the_kernel_support_disk() {
    let sigma = 4.0;
    let map = density_from_point_list(64, 64, &[Point::new(30, 33)], sigma).unwrap();
    let mask = mask_from_density(&map);
    let radius2 = (4.0 * sigma) * (4.0 * sigma);
    let mut ones = 0;
    for r in 0..64 {
        for c in 0..64 {
            let d2 = (r as f64 - 30.0).powi(2) + (c as f64 - 33.0).powi(2);
            let inside = d2 <= radius2;
            assert_eq!(mask.grid().get(r, c) == 1.0, inside, "({r}, {c})");
            ones += inside as usize;
        }
    }
    assert_eq!(mask.ones(), ones);
}

#[test]
fn count_matches_summation_oracle() {
    let mut r = rng(1);
    let cfg = NetworkConfig::desk_small();
    let d = random_grid(&mut r, 7, 9, 0.0, 3.0);
    let mut total = 0.0;
    for row in 0..7 {
        for col in 0..9 {
            total += d.get(row, col);
        }
    }
    let s = cfg.output_stride as f64;
    let expected = total * s * s / cfg.density_unit;
    assert!((count_from_density(&d, &cfg) - expected).abs() < 1e-12);
}

#[test]
fn entropy_and_soft_mask_examples() {
    let cases = [(0.5, LN_2), (1.0, 0.0), (0.9, 0.3251)];
    for (p0, want) in cases {
        let e = shannon_entropy(&pair_scores(1, 1, 1.0 - p0)).unwrap();
        let tol = if want == 0.3251 { 1e-4 } else { 1e-12 };
        assert!((e.data()[0] - want).abs() < tol, "{p0}: {}", e.data()[0]);
    }
    let exact = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
    let e = shannon_entropy(&pair_scores(1, 1, 0.1)).unwrap();
    assert!((e.data()[0] - exact).abs() < 1e-12);

    let ent = Grid::from_vec(1, 3, vec![0.0, LN_2, 0.3251]).unwrap();
    let u = soft_mask(&ent, 7.0).unwrap();
    assert_eq!(u.data()[0], 7.0);
    assert!(u.data()[1].abs() < 1e-12);
    assert!((u.data()[2] - 3.716).abs() < 1e-3);
}

#[test]
fn hard_mask_fraction_at_ramp_midpoint_matches_pixel_scan() {
    let sched = ThresholdSchedule::new(100);
    let ramp_half = ((-1.25f64).exp() - (-5.0f64).exp()) / (1.0 - (-5.0f64).exp());
    let threshold = 0.75 * LN_2 + 0.25 * LN_2 * ramp_half;
    assert!((sched.threshold(50) - threshold).abs() < 1e-15);
    assert!((sched.threshold(0) - 0.75 * LN_2).abs() < 1e-15);
    assert_eq!(sched.threshold(100), LN_2);
    assert_eq!(sched.threshold(1000), LN_2);

    let mut r = rng(2);
    let ent = random_grid(&mut r, 16, 16, 0.0, LN_2);
    let mask = hard_mask(&ent, sched.threshold(50));
    let mut kept = 0;
    for v in ent.data() {
        if *v < threshold {
            kept += 1;
        }
    }
    assert_eq!(mask.sum() as usize, kept);
    // a pixel at exactly the threshold is discarded
    let edge = Grid::from_vec(1, 2, vec![LN_2, LN_2 - 1e-12]).unwrap();
    assert_eq!(hard_mask(&edge, LN_2).data(), &[0.0, 1.0]);
}

#[test]
fn mc_mean_matches_explicit_loop() {
    let cfg = NetworkConfig::tiny();
    let model = Model::new(cfg, &mut rng(3)).unwrap();
    let image = random_grid(&mut rng(4), 8, 8, 0.0, 1.0);
    let perturb = PerturbationConfig::stochastic(0.05);
    let est = mc_passes(&model, &image, 8, &perturb, &mut rng(5), 1).unwrap();

    let mut stream = rng(5);
    let seeds: Vec<u64> = (0..8).map(|_| stream.random()).collect();
    let mut score = vec![0.0; est.mean_score.data.len()];
    let mut density = vec![0.0; est.mean_density.len()];
    for s in seeds {
        let out = model.forward(&image, &perturb, &mut rng(s)).unwrap();
        for (a, b) in score.iter_mut().zip(&out.class_score.data) {
            *a += b / 8.0;
        }
        for (a, b) in density.iter_mut().zip(out.density.data()) {
            *a += b / 8.0;
        }
    }
    for (a, b) in est.mean_score.data.iter().zip(&score) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in est.mean_density.data().iter().zip(&density) {
        assert!((a - b).abs() < 1e-12);
    }
    let hw = est.mean_score.plane_len();
    for i in 0..hw {
        assert!((est.mean_score.data[i] + est.mean_score.data[hw + i] - 1.0).abs() < 1e-6);
    }
    let threaded = mc_passes(&model, &image, 8, &perturb, &mut rng(5), 3).unwrap();
    assert_eq!(threaded, est);

    let single = mc_passes(&model, &image, 1, &PerturbationConfig::EVAL, &mut rng(6), 1).unwrap();
    let plain = model.forward(&image, &PerturbationConfig::EVAL, &mut rng(7)).unwrap();
    assert_eq!(single.mean_score, plain.class_score);
}

#[test]
fn transform_examples() {
    let k = 6000.0;
    assert_eq!(transform_scalar(0.0, k), 0.0);
    assert!((1.0 - transform_scalar(0.01, k)).abs() < 1e-15);
    assert!((transform_scalar_derivative(0.0, k) - k / 2.0).abs() < 1e-9);
    let e60 = (-60.0f64).exp();
    let d = transform_scalar_derivative(0.01, k);
    assert!((d - 2.0 * k * e60).abs() < 1e-6 * 2.0 * k * e60);
    let knee = 3f64.ln() / k;
    assert!(transform_scalar(knee * 1.0001, k) > 0.5);
    assert!(transform_scalar(knee * 0.9999, k) < 0.5);

    let g = random_grid(&mut rng(8), 5, 5, 0.0, 1e-3);
    let m = approx_segmentation(&g, &TransformConfig::default()).unwrap();
    for (x, y) in g.data().iter().zip(m.data()) {
        let e = (-k * x).exp();
        assert!((y - (1.0 - e) / (1.0 + e)).abs() < 1e-15);
    }
    assert!(approx_segmentation(&Grid::filled(1, 1, -1.0), &TransformConfig::default()).is_err());
}

#[test]
fn supervised_losses_match_scalar_loops() {
    let mut r = rng(9);
    let preds: Vec<Grid> = (0..3).map(|_| random_grid(&mut r, 4, 5, 0.0, 2.0)).collect();
    let gts: Vec<Grid> = (0..3).map(|_| random_grid(&mut r, 4, 5, 0.0, 2.0)).collect();
    let (v, _) = supervised_density_loss(&preds.iter().collect::<Vec<_>>(), &gts.iter().collect::<Vec<_>>()).unwrap();
    let mut acc = 0.0;
    let mut n = 0;
    for (p, g) in preds.iter().zip(&gts) {
        for i in 0..p.len() {
            acc += (p.data()[i] - g.data()[i]).powi(2);
            n += 1;
        }
    }
    assert!((v - acc / n as f64).abs() < 1e-12);

    let shifted: Vec<Grid> = gts.iter().map(|g| g.map(|x| x + 0.3)).collect();
    let (v, _) = supervised_density_loss(&shifted.iter().collect::<Vec<_>>(), &gts.iter().collect::<Vec<_>>()).unwrap();
    assert!((v - 0.09).abs() < 1e-12);

    let scores: Vec<Tensor> = (0..2).map(|_| random_scores(&mut r, 4, 5)).collect();
    let masks: Vec<Grid> = (0..2)
        .map(|_| Grid::from_fn(4, 5, |_, _| r.random_range(0..2) as f64))
        .collect();
    let (v, _) = supervised_seg_loss(&scores.iter().collect::<Vec<_>>(), &masks.iter().collect::<Vec<_>>()).unwrap();
    let mut acc = 0.0;
    for (s, m) in scores.iter().zip(&masks) {
        for i in 0..20 {
            let c = m.data()[i] as usize;
            acc -= s.data[c * 20 + i].ln();
        }
    }
    assert!((v - acc / 40.0).abs() < 1e-12);
    let half = pair_scores(4, 5, 0.5);
    let (v, _) = supervised_seg_loss(&[&half], &[&masks[0]]).unwrap();
    assert!((v - LN_2).abs() < 1e-12);
}

#[test]
fn inherent_loss_matches_scalar_loop() {
    let mut r = rng(10);
    let b: Vec<Grid> = (0..4).map(|_| random_grid(&mut r, 3, 3, 0.0, 1.0)).collect();
    let a: Vec<Grid> = (0..4).map(|_| random_grid(&mut r, 3, 3, 0.0, 1.0)).collect();
    let (v, _) = inherent_consistency_loss(&b.iter().collect::<Vec<_>>(), &a.iter().collect::<Vec<_>>()).unwrap();
    let acc: f64 = b
        .iter()
        .zip(&a)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)))
        .sum();
    assert!((v - acc / 36.0).abs() < 1e-12);
    let (v, _) = inherent_consistency_loss(&[&Grid::filled(2, 2, 1.0)], &[&Grid::zeros(2, 2)]).unwrap();
    assert_eq!(v, 1.0);
}

#[test]
fn masked_consistency_uses_kept_pixels_only() {
    let mut r = rng(11);
    let s = random_scores(&mut r, 4, 4);
    let t = random_scores(&mut r, 4, 4);
    let mask = Grid::from_fn(4, 4, |row, _| if row < 2 { 1.0 } else { 0.0 });
    let (v, g) = consistency_seg_loss(&[&s], &[&t], &[&mask]).unwrap();
    let mut acc = 0.0;
    for i in 0..8 {
        for c in 0..2 {
            acc += (s.data[c * 16 + i] - t.data[c * 16 + i]).powi(2);
        }
    }
    assert!((v - acc / 8.0).abs() < 1e-12);
    for i in 8..16 {
        assert_eq!(g[0].data[i], 0.0);
        assert_eq!(g[0].data[16 + i], 0.0);
    }

    let zeros = Grid::zeros(4, 4);
    let (v, g) = consistency_seg_loss(&[&s], &[&t], &[&zeros]).unwrap();
    assert_eq!(v, 0.0);
    assert!(g[0].data.iter().all(|x| *x == 0.0));
}

#[test]
fn weighted_density_consistency_matches_oracle() {
    let mut r = rng(12);
    let s: Vec<Grid> = (0..2).map(|_| random_grid(&mut r, 3, 4, 0.0, 2.0)).collect();
    let t: Vec<Grid> = (0..2).map(|_| random_grid(&mut r, 3, 4, 0.0, 2.0)).collect();
    let w: Vec<Grid> = (0..2).map(|_| random_grid(&mut r, 3, 4, 0.0, 7.0)).collect();
    let (v, _) = consistency_density_loss(
        &s.iter().collect::<Vec<_>>(),
        &t.iter().collect::<Vec<_>>(),
        &w.iter().collect::<Vec<_>>(),
    )
    .unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..2 {
        for i in 0..12 {
            let wi = w[j].data()[i];
            num += wi * (s[j].data()[i] - t[j].data()[i]).powi(2);
            den += wi;
        }
    }
    assert!((v - num / den).abs() < 1e-12);

    let uniform = Grid::filled(3, 4, 7.0);
    let (v, _) = consistency_density_loss(&[&s[0]], &[&t[0]], &[&uniform]).unwrap();
    let mse: f64 = s[0].data().iter().zip(t[0].data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0;
    assert!((v - mse).abs() < 1e-9);
}

#[test]
fn total_loss_and_ramp_match_arithmetic() {
    let mut r = rng(13);
    let parts = LossParts {
        sd: r.random(),
        sb: r.random(),
        inherent: Some(r.random()),
        cb: Some(r.random()),
        cd: Some(r.random()),
    };
    let rep = total_loss(&parts, 0.1, 1.0);
    let hand = parts.sd
        + 0.1 * parts.sb
        + parts.inherent.unwrap()
        + 1.0 * (0.1 * parts.cb.unwrap() + parts.cd.unwrap());
    assert!((rep.total - hand).abs() < 1e-9);
    let rep0 = total_loss(&parts, 0.1, 0.0);
    assert!((rep0.total - (parts.sd + 0.1 * parts.sb + parts.inherent.unwrap())).abs() < 1e-15);
    assert_eq!(total_loss(&LossParts::default(), 0.1, 1.0).total, 0.0);

    let w = LossWeights {
        alpha: 0.1,
        lambda_max: 2.0,
        ramp_steps: 100,
    };
    assert!((ramp_lambda(0, &w).unwrap() - 2.0 * (-5.0f64).exp()).abs() < 1e-12);
    assert!((ramp_lambda(100, &w).unwrap() - 2.0).abs() < 1e-12);
    assert!((ramp_lambda(500, &w).unwrap() - 2.0).abs() < 1e-12);
    assert!((ramp_lambda(50, &w).unwrap() - 2.0 * (-1.25f64).exp()).abs() < 1e-12);
    assert!((0.00674 - (-5.0f64).exp()).abs() < 1e-5);
}

#[test]
fn eval_metric_examples() {
    let r = EvalResult::from_counts([("a", 3.0, 2.0), ("b", 1.0, 2.0)]);
    assert_eq!((r.mae, r.rmse), (1.0, 1.0));
    let r = EvalResult::from_counts([("a", 2.0, 2.0), ("b", 4.0, 2.0)]);
    assert_eq!(r.mae, 1.0);
    assert!((r.rmse - 2f64.sqrt()).abs() < 1e-15);
    assert!(r.rmse >= r.mae);
}

#[test]
fn hard_uncertainty_rendering_has_two_colours() {
    let cfg = NetworkConfig::desk_small();
    let model = Model::new(cfg, &mut rng(14)).unwrap();
    let img = random_grid(&mut rng(15), 32, 32, 0.0, 1.0);
    let scene = Scene::new("s0", img, vec![Point::new(10, 10), Point::new(20, 25)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = ExportOptions {
        threshold: 0.6,
        ..ExportOptions::default()
    };
    export_maps(&model, None, &scene, dir.path(), &opts).unwrap();
    let png = image::open(dir.path().join("s0_hard_uncertainty.png")).unwrap().to_rgb8();
    let mut colours: Vec<[u8; 3]> = png.pixels().map(|p| p.0).collect();
    colours.sort();
    colours.dedup();
    assert!(!colours.is_empty() && colours.len() <= 2, "{colours:?}");

    let bundle = UncertaintyBundle::from_mean_score(pair_scores(2, 2, 0.5), LN_2, 7.0).unwrap();
    assert_eq!(bundle.hard.sum(), 0.0);
}
