//! Self-check suite run by the `verify` command: fast paths against the
//! enumeration oracles, analytic gradients against finite differences, and the
//! ELBO against the exact evidence.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::BoxScaler;
use crate::error::Result;
use crate::model::{BezierGpModel, TrainingSet};
use crate::reference::{brute_kl, brute_mean, brute_var, exact_log_evidence, materialize};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] {}: {}", self.name, self.detail)
    }
}

/// Model with `d ≤ max_dim`, orders in `1..=max_order`, `r ≤ max_r` and
/// random mean weights and log-variances.
pub fn random_small_model(rng: &mut ChaCha8Rng, max_dim: usize, max_order: usize, max_r: usize) -> Result<BezierGpModel> {
    let d = rng.gen_range(1..=max_dim);
    let orders: Vec<usize> = (0..d).map(|_| rng.gen_range(1..=max_order)).collect();
    let r = rng.gen_range(1..=max_r);
    let mut model = BezierGpModel::new(&orders, r, BoxScaler::new(vec![(0.0, 1.0); d])?, rng.gen())?;
    randomize_weights(&mut model, rng);
    Ok(model)
}

/// Mean weights from `U[-1, 1]`, log-variance weights from `U[-0.5, 0.5]`.
pub fn randomize_weights(model: &mut BezierGpModel, rng: &mut ChaCha8Rng) {
    for b in model.buttresses_mut() {
        for m in b.mean_weights_mut() {
            m.as_mut_slice().iter_mut().for_each(|w| *w = rng.gen_range(-1.0..=1.0));
        }
        for v in b.var_logweights_mut() {
            v.as_mut_slice().iter_mut().for_each(|w| *w = rng.gen_range(-0.5..=0.5));
        }
    }
}

pub fn random_unit_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen()).collect()).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Worst relative error of the fast forward passes against enumeration.
pub fn forward_oracle_error(model: &BezierGpModel, points: &[Vec<f64>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in points {
        let (mut bm, mut bv) = (0.0, 0.0);
        for b in model.buttresses() {
            let dense = materialize(b)?;
            bm += brute_mean(&dense, x)?;
            bv += brute_var(&dense, x)?;
        }
        let (m, v) = model.predict_f_unit(x);
        // Mean sums can cancel to near zero; fall back to absolute error there.
        let em = if bm.abs() < 1e-8 { (m - bm).abs() } else { rel_err(m, bm) };
        worst = worst.max(em).max(rel_err(v, bv));
    }
    Ok(worst)
}

/// Worst absolute difference between the buttress KL and the enumerated sum.
pub fn kl_oracle_error(model: &BezierGpModel) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for b in model.buttresses() {
        let brute = brute_kl(&materialize(b)?, model.prior())?;
        worst = worst.max((b.kl() - brute).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub params: usize,
    pub failures: usize,
    pub worst_abs: f64,
    /// Largest `|analytic − numeric|` among entries outside the absolute tolerance,
    /// divided by the larger magnitude.
    pub worst_rel: f64,
}

/// Compares the gradient of `−ELBO` on `data` (treated as the full data set)
/// with central differences of step `h`.
pub fn gradient_check(model: &BezierGpModel, data: &TrainingSet, h: f64, rel_tol: f64, abs_tol: f64) -> Result<GradientCheck> {
    let idx = data.all_indices();
    let n = data.len();
    let (_, grads) = model.neg_elbo_gradients(data, &idx, n)?;
    let mut analytic = Vec::new();
    for g in &grads {
        g.write_flat(&mut analytic);
    }
    let base = model.variational_params();
    let mut probe = model.clone();
    let mut params = base.clone();
    let mut out = GradientCheck {
        params: base.len(),
        failures: 0,
        worst_abs: 0.0,
        worst_rel: 0.0,
    };
    for i in 0..base.len() {
        params[i] = base[i] + h;
        probe.set_variational_params(&params)?;
        let up = -probe.elbo(data, &idx, n);
        params[i] = base[i] - h;
        probe.set_variational_params(&params)?;
        let down = -probe.elbo(data, &idx, n);
        params[i] = base[i];
        let numeric = (up - down) / (2.0 * h);
        let diff = (analytic[i] - numeric).abs();
        out.worst_abs = out.worst_abs.max(diff);
        if diff <= abs_tol {
            continue;
        }
        let rel = diff / analytic[i].abs().max(numeric.abs());
        out.worst_rel = out.worst_rel.max(rel);
        if rel > rel_tol {
            out.failures += 1;
        }
    }
    Ok(out)
}

/// Random data on the unit box: a smooth function plus noise.
pub fn random_regression_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<TrainingSet> {
    let x = random_unit_points(rng, n, d);
    let phase: f64 = rng.gen_range(0.0..6.0);
    let y = x
        .iter()
        .map(|row| (3.0 * row.iter().sum::<f64>() + phase).sin() + 0.1 * rng.gen_range(-1.0..1.0))
        .collect();
    TrainingSet::new(x, y)
}

/// Full-data ELBO and exact log evidence of `model` on `data`.
pub fn elbo_and_evidence(model: &BezierGpModel, data: &TrainingSet) -> Result<(f64, f64)> {
    let elbo = model.elbo_full(data);
    let evidence = exact_log_evidence(&data.x, &data.y, model.orders(), model.noise_var(), model.ensemble_size())?;
    Ok((elbo, evidence))
}

/// Runs the suite; `quick` restricts to `d ≤ 2` and fewer configurations.
pub fn run_checks(seed: u64, quick: bool) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (max_dim, configs) = if quick { (2, 20) } else { (3, 100) };
    let mut out = Vec::new();

    out.push(check("forward passes vs enumeration", || {
        let mut worst: f64 = 0.0;
        for _ in 0..configs {
            let model = random_small_model(&mut rng, max_dim, 3, 2)?;
            let pts = random_unit_points(&mut rng, 5, model.dim());
            worst = worst.max(forward_oracle_error(&model, &pts)?);
        }
        Ok((worst <= 1e-10, format!("{configs} configurations, worst relative error {worst:.2e}")))
    }));

    out.push(check("KL vs enumeration", || {
        let mut worst: f64 = 0.0;
        for _ in 0..configs {
            let model = random_small_model(&mut rng, max_dim, 3, 2)?;
            worst = worst.max(kl_oracle_error(&model)?);
        }
        Ok((worst <= 1e-8, format!("{configs} configurations, worst absolute error {worst:.2e}")))
    }));

    out.push(check("flat prior at grid knots", || {
        let mut worst: f64 = 0.0;
        let dims: &[usize] = if quick { &[1, 2] } else { &[1, 3] };
        for &order in &[5usize, 10, 20] {
            for &d in dims {
                let model = BezierGpModel::new(&vec![order; d], 2, BoxScaler::new(vec![(0.0, 1.0); d])?, seed)?;
                for _ in 0..20 {
                    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0..=order) as f64 / order as f64).collect();
                    worst = worst.max((model.predict_f_unit(&x).1 - 1.0).abs());
                }
            }
        }
        Ok((worst <= 1e-8, format!("worst |Var f - 1| = {worst:.2e}")))
    }));

    out.push(check("gradients vs central differences", || {
        let rounds = if quick { 2 } else { 5 };
        let mut failures = 0;
        let mut params = 0;
        let mut worst: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for _ in 0..rounds {
            let mut model = random_small_model(&mut rng, max_dim, 3, 2)?;
            model.set_noise_var(rng.gen_range(0.05..0.5));
            let data = random_regression_data(&mut rng, 5, model.dim())?;
            let g = gradient_check(&model, &data, 1e-5, 1e-4, 1e-7)?;
            failures += g.failures;
            params += g.params;
            worst = worst.max(g.worst_rel);
            worst_abs = worst_abs.max(g.worst_abs);
        }
        Ok((
            failures == 0,
            format!("{params} parameters, {failures} mismatches, worst absolute {worst_abs:.2e}, worst relative beyond 1e-7 {worst:.2e}"),
        ))
    }));

    out.push(check("ELBO below exact evidence", || {
        let rounds = if quick { 2 } else { 5 };
        let mut worst_gap = f64::INFINITY;
        for _ in 0..rounds {
            let d = rng.gen_range(1..=2);
            let orders: Vec<usize> = (0..d).map(|_| rng.gen_range(1..=3)).collect();
            let data = random_regression_data(&mut rng, 40, d)?;
            let mut model = BezierGpModel::new(&orders, 1, BoxScaler::new(vec![(0.0, 1.0); d])?, rng.gen())?;
            let cfg = TrainConfig {
                batch_size: 40,
                phase1_iters: 300,
                phase2_iters: 100,
                lr1: 0.01,
                seed: rng.gen(),
                ..TrainConfig::default()
            };
            train(&mut model, &data, &cfg)?;
            let (elbo, evidence) = elbo_and_evidence(&model, &data)?;
            worst_gap = worst_gap.min(evidence - elbo);
        }
        Ok((worst_gap >= -1e-6, format!("smallest evidence - ELBO = {worst_gap:.3e}")))
    }));

    out.push(check("model file round trip", || {
        let model = random_small_model(&mut rng, max_dim, 3, 2)?;
        let back = BezierGpModel::from_json(&model.to_json())?;
        let pts = random_unit_points(&mut rng, 10, model.dim());
        let worst = pts
            .iter()
            .map(|x| {
                let (a, b) = (model.predict_y_unit(x), back.predict_y_unit(x));
                (a.mean - b.mean).abs().max((a.y_var - b.y_var).abs())
            })
            .fold(0.0, f64::max);
        Ok((worst <= 1e-12, format!("worst prediction difference {worst:.2e}")))
    }));

    out
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    match f() {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let results = run_checks(0, true);
        for r in &results {
            assert!(r.passed, "{r}");
        }
        assert_eq!(results.len(), 6);
    }
}
