//! Randomised invariants.

use crowdcount::data::{density_from_point_list, mask_from_density, DensityMap, Point};
use crowdcount::grid::{Grid, Tensor};
use crowdcount::losses::consistency_density_loss;
use crowdcount::model::{count_from_density, density_target, NetworkConfig, Params};
use crowdcount::trainer::ema_update;
use crowdcount::transform::{transform_scalar, transform_scalar_derivative};
use crowdcount::uncertainty::{gaussian_rampup, hard_mask, shannon_entropy, soft_mask, ThresholdSchedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::LN_2;

fn scene_points(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<Point>)> {
    (8..max_side, 8..max_side).prop_flat_map(|(h, w)| {
        let pts = prop::collection::vec((0..h, 0..w).prop_map(|(r, c)| Point::new(r, c)), 0..12);
        (Just(h), Just(w), pts)
    })
}

fn score_tensor(h: usize, w: usize, crowd: &[f64]) -> Tensor {
    let mut t = Tensor::zeros(2, h, w);
    for (i, &p) in crowd.iter().enumerate() {
        t.data[i] = 1.0 - p;
        t.data[h * w + i] = p;
    }
    t
}

proptest! {
    #[test]
    fn density_sums_to_point_count((h, w, pts) in scene_points(40), sigma in 0.5f64..6.0) {
        let d = density_from_point_list(h, w, &pts, sigma).unwrap();
        prop_assert!((d.count() - pts.len() as f64).abs() < 1e-9 * (pts.len().max(1) as f64));
        prop_assert!(d.grid().data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mask_commutes_with_crop_and_flip(
        (h, w, pts) in scene_points(40),
        sigma in 0.5f64..4.0,
        fr in 0.0f64..1.0,
        fc in 0.0f64..1.0,
        size in 4usize..8,
    ) {
        let d = density_from_point_list(h, w, &pts, sigma).unwrap();
        let m = mask_from_density(&d);
        let (r, c) = (((h - size) as f64 * fr) as usize, ((w - size) as f64 * fc) as usize);
        let cropped = DensityMap::new(d.grid().crop(r, c, size, size).unwrap()).unwrap();
        prop_assert_eq!(
            mask_from_density(&cropped).into_grid(),
            m.grid().crop(r, c, size, size).unwrap()
        );
        let flipped = DensityMap::new(d.grid().flip_horizontal()).unwrap();
        prop_assert_eq!(mask_from_density(&flipped).into_grid(), m.grid().flip_horizontal());
    }

    #[test]
    fn density_target_preserves_count(cells in 1usize..5, stride_pow in 1u32..4, seed in any::<u64>()) {
        let mut cfg = NetworkConfig::tiny();
        cfg.output_stride = 1 << stride_pow;
        let side = cells * cfg.output_stride;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::from_fn(side, side, |_, _| rand::Rng::random_range(&mut rng, 0.0..0.01));
        let t = density_target(&g, &cfg).unwrap();
        prop_assert!((count_from_density(&t, &cfg) - g.sum()).abs() < 1e-9);
    }

    #[test]
    fn entropy_is_bounded_and_symmetric(crowd in prop::collection::vec(0.0f64..=1.0, 12)) {
        let t = score_tensor(3, 4, &crowd);
        let e = shannon_entropy(&t).unwrap();
        prop_assert!(e.data().iter().all(|v| *v >= 0.0 && *v <= LN_2 + 1e-12));
        let swapped: Vec<f64> = crowd.iter().map(|p| 1.0 - p).collect();
        let e2 = shannon_entropy(&score_tensor(3, 4, &swapped)).unwrap();
        for (a, b) in e.data().iter().zip(e2.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_mask_grows_with_threshold(
        ent in prop::collection::vec(0.0f64..LN_2, 16),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let e = Grid::from_vec(4, 4, ent).unwrap();
        let a = hard_mask(&e, lo);
        let b = hard_mask(&e, hi);
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x <= y));
    }

    #[test]
    fn ramps_are_monotone(ramp in 1u64..500, s1 in 0u64..1000, s2 in 0u64..1000) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(gaussian_rampup(lo, ramp) <= gaussian_rampup(hi, ramp));
        let sched = ThresholdSchedule::new(ramp);
        prop_assert!(sched.threshold(lo) <= sched.threshold(hi));
        prop_assert!(sched.threshold(lo) >= 0.75 * LN_2 - 1e-15);
        prop_assert!(sched.threshold(hi) <= LN_2 + 1e-15);
    }

    #[test]
    fn transform_is_monotone_and_bounded(x1 in 0.0f64..0.01, x2 in 0.0f64..0.01) {
        let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
        let (a, b) = (transform_scalar(lo, 6000.0), transform_scalar(hi, 6000.0));
        prop_assert!(a <= b);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        prop_assert!(transform_scalar_derivative(lo, 6000.0) >= 0.0);
    }

    #[test]
    fn soft_weighted_loss_ignores_weight_scale(
        s in prop::collection::vec(0.0f64..2.0, 9),
        t in prop::collection::vec(0.0f64..2.0, 9),
        ent in prop::collection::vec(0.0f64..0.6, 9),
        m1 in 0.5f64..20.0,
        m2 in 0.5f64..20.0,
    ) {
        let s = Grid::from_vec(3, 3, s).unwrap();
        let t = Grid::from_vec(3, 3, t).unwrap();
        let e = Grid::from_vec(3, 3, ent).unwrap();
        let w1 = soft_mask(&e, m1).unwrap();
        let w2 = soft_mask(&e, m2).unwrap();
        let (l1, _) = consistency_density_loss(&[&s], &[&t], &[&w1]).unwrap();
        let (l2, _) = consistency_density_loss(&[&s], &[&t], &[&w2]).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-9 * l1.abs().max(1.0));
    }

    #[test]
    fn ema_is_a_convex_combination(seed in any::<u64>(), decay in 0.0f64..0.9999) {
        let cfg = NetworkConfig::tiny();
        let student = Params::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let old = Params::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef));
        let mut teacher = old.clone();
        ema_update(&mut teacher, &student, decay).unwrap();
        for ((t, o), s) in teacher.iter_scalars().zip(old.iter_scalars()).zip(student.iter_scalars()) {
            let (lo, hi) = (o.min(s), o.max(s));
            prop_assert!(t >= lo - 1e-15 && t <= hi + 1e-15);
            prop_assert!((t - (decay * o + (1.0 - decay) * s)).abs() < 1e-14);
        }
    }
}
