//! Two-phase stochastic optimisation of the ELBO.
//!
//! Phase one fits the variational parameters of every buttress with the noise
//! variance held fixed. Phase two freezes those and fits `log σ²` alone, which
//! only needs the per-point predictive moments computed once up front.

use std::io::Write;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{expected_loglik_from_moments, BezierGpModel, TrainingSet, MIN_NOISE_VAR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Record the mini-batch ELBO every this many iterations.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 500,
            phase1_iters: 10_000,
            phase2_iters: 10_000,
            lr1: 1e-3,
            lr2: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be positive".into()));
        }
        for (name, v) in [("lr1", self.lr1), ("lr2", self.lr2), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Cycles through shuffled epochs. The last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct MiniBatcher {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl MiniBatcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyData);
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(MiniBatcher {
            order,
            batch_size: batch_size.min(n),
            pos: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos = (start + self.batch_size).min(self.order.len());
        &self.order[start..self.pos]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Variational,
    Noise,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Variational => 1,
            Phase::Noise => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub phase: Phase,
    /// Mini-batch ELBO estimate before the step at `iteration`.
    pub elbo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<HistoryEntry>,
    /// Index into `history` of the first phase-two entry.
    pub phase_boundary: usize,
    pub final_noise_var: f64,
    pub final_elbo: f64,
    pub phase1_seconds: f64,
    pub phase2_seconds: f64,
}

impl FitReport {
    pub fn phase1(&self) -> &[HistoryEntry] {
        &self.history[..self.phase_boundary]
    }

    pub fn phase2(&self) -> &[HistoryEntry] {
        &self.history[self.phase_boundary..]
    }

    /// Writes `iteration,phase,elbo` rows.
    pub fn write_history<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "phase", "elbo"])?;
        for h in &self.history {
            w.write_record([h.iteration.to_string(), h.phase.number().to_string(), h.elbo.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<history>", e))?;
        Ok(())
    }
}

/// Runs both phases in place on `model`.
pub fn train(model: &mut BezierGpModel, data: &TrainingSet, config: &TrainConfig) -> Result<FitReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if let Some(x) = data.x.iter().find(|x| x.len() != model.dim()) {
        return Err(Error::ShapeMismatch {
            expected: model.dim(),
            got: x.len(),
        });
    }
    let n = data.len();
    let mut batcher = MiniBatcher::new(n, config.batch_size, config.seed)?;
    let mut history = Vec::new();

    let start = Instant::now();
    let mut params = model.variational_params();
    let mut adam = Adam::new(params.len(), config.lr1, config.beta1, config.beta2, config.eps);
    let mut flat = Vec::with_capacity(params.len());
    for it in 0..config.phase1_iters {
        let batch = batcher.next_batch().to_vec();
        let (elbo, grads) = model.neg_elbo_gradients(data, &batch, n)?;
        flat.clear();
        for g in &grads {
            g.write_flat(&mut flat);
        }
        if !elbo.is_finite() || flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration: Some(it) });
        }
        if it % config.eval_every == 0 {
            info!("phase 1 iteration {it}: elbo {elbo:.6}");
            history.push(HistoryEntry {
                iteration: it,
                phase: Phase::Variational,
                elbo,
            });
        }
        adam.step(&mut params, &flat)?;
        model.set_variational_params(&params)?;
    }
    let phase1_seconds = start.elapsed().as_secs_f64();
    let phase_boundary = history.len();

    let start = Instant::now();
    let (means, vars) = model.forward_batch(&data.points(&data.all_indices()));
    let kl = model.kl();
    let mut log_noise = [model.noise_var().ln()];
    let mut adam = Adam::new(1, config.lr2, config.beta1, config.beta2, config.eps);
    let floor = MIN_NOISE_VAR.ln();
    for it in 0..config.phase2_iters {
        let batch = batcher.next_batch();
        let noise_var = log_noise[0].exp();
        let scale = n as f64 / batch.len() as f64;
        let grad: f64 = scale
            * batch
                .iter()
                .map(|&j| 0.5 * (1.0 - ((data.y[j] - means[j]).powi(2) + vars[j]) / noise_var))
                .sum::<f64>();
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient {
                iteration: Some(config.phase1_iters + it),
            });
        }
        if it % config.eval_every == 0 {
            let m: Vec<f64> = batch.iter().map(|&j| means[j]).collect();
            let v: Vec<f64> = batch.iter().map(|&j| vars[j]).collect();
            let y: Vec<f64> = batch.iter().map(|&j| data.y[j]).collect();
            let elbo = expected_loglik_from_moments(&m, &v, &y, noise_var, n) - kl;
            info!("phase 2 iteration {it}: elbo {elbo:.6}, noise variance {noise_var:.6e}");
            history.push(HistoryEntry {
                iteration: config.phase1_iters + it,
                phase: Phase::Noise,
                elbo,
            });
        }
        adam.step(&mut log_noise, &[grad])?;
        log_noise[0] = log_noise[0].max(floor);
    }
    model.set_noise_var(log_noise[0].exp());
    let phase2_seconds = start.elapsed().as_secs_f64();
    let final_elbo = expected_loglik_from_moments(&means, &vars, &data.y, model.noise_var(), n) - kl;

    Ok(FitReport {
        history,
        phase_boundary,
        final_noise_var: model.noise_var(),
        final_elbo,
        phase1_seconds,
        phase2_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BoxScaler;
    use std::collections::HashSet;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 0.01, 0.9, 0.999, 1e-8);
        let mut p = [1.0, -2.0];
        adam.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
        assert!(matches!(adam.step(&mut p, &[1.0]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(1, 0.1, 0.9, 0.999, 1e-8);
        let mut p = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            adam.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut b = MiniBatcher::new(10, 4, 3).unwrap();
        for _ in 0..3 {
            let mut seen = HashSet::new();
            let sizes: Vec<usize> = (0..3)
                .map(|_| {
                    let batch = b.next_batch();
                    seen.extend(batch.iter().copied());
                    batch.len()
                })
                .collect();
            assert_eq!(sizes, vec![4, 4, 2]);
            assert_eq!(seen.len(), 10);
        }
        let mut b = MiniBatcher::new(3, 100, 0).unwrap();
        assert_eq!(b.next_batch().len(), 3);
        assert!(matches!(MiniBatcher::new(0, 5, 0), Err(Error::EmptyData)));
    }

    fn toy() -> (BezierGpModel, TrainingSet) {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 / 29.0]).collect();
        let y: Vec<f64> = x.iter().map(|x| (4.0 * x[0]).sin()).collect();
        let model = BezierGpModel::new(&[6], 2, BoxScaler::new(vec![(0.0, 1.0)]).unwrap(), 5).unwrap();
        (model, TrainingSet::new(x, y).unwrap())
    }

    #[test]
    fn history_lengths_and_improvement() {
        let (mut model, data) = toy();
        let before = model.elbo_full(&data);
        let cfg = TrainConfig {
            batch_size: 30,
            phase1_iters: 401,
            phase2_iters: 100,
            lr1: 0.02,
            eval_every: 50,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(report.phase1().len(), 9);
        assert_eq!(report.phase2().len(), 2);
        assert!(report.phase2().iter().all(|h| h.phase == Phase::Noise));
        assert!(model.elbo_full(&data) > before);
        assert_eq!(report.final_noise_var, model.noise_var());
        assert!(model.noise_var() >= MIN_NOISE_VAR);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            batch_size: 7,
            phase1_iters: 50,
            phase2_iters: 20,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let (mut a, data) = toy();
        let (mut b, _) = toy();
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(ra.history, rb.history);
    }

    #[test]
    fn phase_two_leaves_variational_params() {
        let (mut model, data) = toy();
        let before = model.variational_params();
        let cfg = TrainConfig {
            phase1_iters: 0,
            phase2_iters: 30,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.variational_params(), before);
    }

    #[test]
    fn bad_config_rejected() {
        let (mut model, data) = toy();
        let cfg = TrainConfig {
            eval_every: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut model, &data, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn history_export() {
        let report = FitReport {
            history: vec![HistoryEntry {
                iteration: 0,
                phase: Phase::Noise,
                elbo: -1.5,
            }],
            phase_boundary: 0,
            final_noise_var: 0.1,
            final_elbo: -1.0,
            phase1_seconds: 0.0,
            phase2_seconds: 0.0,
        };
        let mut buf = Vec::new();
        report.write_history(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,phase,elbo\n0,2,-1.5\n");
    }
}
