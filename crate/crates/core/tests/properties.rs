use std::time::Instant;

use bezier_gp::buttress::{Buttress, Permutation};
use bezier_gp::bernstein::PriorScale;
use bezier_gp::data::{metrics, BoxScaler, OodPolicy};
use bezier_gp::model::PredictiveDistribution;
use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn prediction() -> impl Strategy<Value = (PredictiveDistribution, f64)> {
    (-10.0f64..10.0, 0.01f64..5.0, 0.01f64..5.0, -10.0f64..10.0).prop_map(|(mean, f_var, noise, y)| {
        (
            PredictiveDistribution {
                mean,
                f_var,
                y_var: f_var + noise,
            },
            y,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clamped_inputs_stay_in_the_unit_box(
        rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 2), 1..40),
    ) {
        let scaler = BoxScaler::new(vec![(-3.0, 4.0), (10.0, 11.0)]).unwrap();
        let out = scaler.apply(&rows, OodPolicy::Clamp).unwrap();
        prop_assert!(out.rows.len() == rows.len() && out.discarded == 0);
        prop_assert!(out.rows.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn metrics_ignore_order(pairs in prop::collection::vec(prediction(), 1..30), seed in 0u64..100) {
        let (preds, ys): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let a = metrics(&preds, &ys).unwrap();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<_> = idx.iter().map(|&i| preds[i]).collect();
        let y2: Vec<_> = idx.iter().map(|&i| ys[i]).collect();
        let b = metrics(&p2, &y2).unwrap();
        prop_assert!((a.rmse - b.rmse).abs() <= 1e-12 * a.rmse.max(1.0));
        prop_assert!((a.mean_loglik - b.mean_loglik).abs() <= 1e-12 * a.mean_loglik.abs().max(1.0));
    }

    #[test]
    fn prior_is_permutation_neutral(orders in prop::collection::vec(1usize..=6, 1..=4), seed in 0u64..1000) {
        let d = orders.len();
        let prior = PriorScale::new(&orders, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
        let base = Buttress::new(Permutation::identity(d), &orders, &prior).unwrap();
        let other = Buttress::new(Permutation::random(d, &mut rng), &orders, &prior).unwrap();
        prop_assert!((base.kl() - other.kl()).abs() <= 1e-10);
        prop_assert!((base.forward_var(&x) - other.forward_var(&x)).abs() <= 1e-10);
    }
}

/// Fastest of several timings of `calls` mean passes at random points.
fn time_forward_mean(d: usize, order: usize, calls: usize) -> f64 {
    let prior = PriorScale::new(&vec![order; d], 1).unwrap();
    let mut b = Buttress::new(Permutation::identity(d), &vec![order; d], &prior).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
    b.init_random(&mut rng);
    let pts: Vec<Vec<f64>> = (0..calls).map(|_| (0..d).map(|_| rng.gen()).collect()).collect();
    let mut best = f64::INFINITY;
    for _ in 0..7 {
        let t = Instant::now();
        let s: f64 = pts.iter().map(|x| b.forward_mean(x)).sum();
        best = best.min(t.elapsed().as_secs_f64());
        std::hint::black_box(s);
    }
    best
}

#[test]
fn forward_mean_is_linear_in_dimension() {
    for &order in &[5usize, 10] {
        let t8 = time_forward_mean(8, order, 2000);
        let t16 = time_forward_mean(16, order, 2000);
        assert!(t16 / t8 <= 2.0 * 1.5, "order {order}: {t8:e}s at d=8, {t16:e}s at d=16");
    }
}
