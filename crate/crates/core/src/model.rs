//! The Bézier GP: an ensemble of `r` buttresses over permuted input orders with
//! a Gaussian likelihood.
//!
//! The latent function is `f = f_1 + … + f_r`. Each member carries the same
//! per-dimension prior scales multiplied by `r^(-1/d)` per layer, so the
//! independent members add up to a prior with `Var f(x) ≈ 1` across the box.
//! Inputs are mapped into the unit box by the stored domain, and targets are
//! modelled in standardized units; [`BezierGpModel::predict_y`] maps back.

use std::collections::HashSet;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bernstein::PriorScale;
use crate::buttress::{Buttress, ButtressGradients, Permutation};
use crate::data::{BoxScaler, OodPolicy, TargetStats};
use crate::error::{Error, Result, MAX_PRIOR_ORDER};
use crate::matrix::Matrix;

pub const FORMAT_VERSION: u32 = 1;

/// Floor on the likelihood variance.
pub const MIN_NOISE_VAR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Predictive distribution of one target, in target units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub f_var: f64,
    /// `f_var + σ²`
    pub y_var: f64,
}

/// Training inputs in the unit box with standardized targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl TrainingSet {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptyData);
        }
        if x.len() != y.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        Ok(TrainingSet { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn points(&self, idx: &[usize]) -> Vec<&[f64]> {
        idx.iter().map(|&i| self.x[i].as_slice()).collect()
    }
}

/// `(n_total / |batch|) Σ_j −½ [log 2π + log σ² + ((y_j − m_j)² + v_j) / σ²]`
pub fn expected_loglik_from_moments(
    means: &[f64],
    vars: &[f64],
    ys: &[f64],
    noise_var: f64,
    n_total: usize,
) -> f64 {
    let scale = n_total as f64 / ys.len() as f64;
    let log_noise = noise_var.ln();
    let sum: f64 = means
        .iter()
        .zip(vars)
        .zip(ys)
        .map(|((m, v), y)| -0.5 * (LN_2PI + log_noise + ((y - m).powi(2) + v) / noise_var))
        .sum();
    scale * sum
}

fn factorial_at_least(d: usize, r: usize) -> bool {
    let mut f: usize = 1;
    for k in 2..=d {
        f = match f.checked_mul(k) {
            Some(v) => v,
            None => return true,
        };
        if f >= r {
            return true;
        }
    }
    f >= r
}

#[derive(Debug, Clone, PartialEq)]
pub struct BezierGpModel {
    orders: Vec<usize>,
    prior: PriorScale,
    buttresses: Vec<Buttress>,
    noise_var: f64,
    domain: BoxScaler,
    target_stats: TargetStats,
    ood_policy: OodPolicy,
    feature_names: Vec<String>,
    target_name: String,
    seed: u64,
}

impl BezierGpModel {
    /// Fresh model: `r` permutations (identity first), random mean weights,
    /// variational variances equal to the prior and `σ² = 1/τ`.
    pub fn new(orders: &[usize], r: usize, domain: BoxScaler, seed: u64) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::InvalidArgument("at least one input dimension is required".into()));
        }
        if let Some(&o) = orders.iter().find(|&&o| o < 1) {
            return Err(Error::OrderOutOfRange {
                order: o,
                max: MAX_PRIOR_ORDER,
            });
        }
        if domain.dim() != orders.len() {
            return Err(Error::ShapeMismatch {
                expected: orders.len(),
                got: domain.dim(),
            });
        }
        let domain = BoxScaler::new(domain.bounds)?;
        let prior = PriorScale::new(orders, r)?;
        let d = orders.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let distinct = factorial_at_least(d, r);
        if !distinct {
            warn!("ensemble size {r} exceeds {d}! orderings; permutations are sampled with repetition");
        }
        let mut perms = vec![Permutation::identity(d)];
        let mut seen: HashSet<Permutation> = perms.iter().cloned().collect();
        while perms.len() < r {
            let p = Permutation::random(d, &mut rng);
            if distinct && !seen.insert(p.clone()) {
                continue;
            }
            perms.push(p);
        }

        let buttresses = perms
            .into_iter()
            .map(|p| {
                let mut b = Buttress::new(p, orders, &prior)?;
                b.init_random(&mut rng);
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        let tau: f64 = orders.iter().map(|&o| (o + 1) as f64).product();

        Ok(BezierGpModel {
            orders: orders.to_vec(),
            prior,
            buttresses,
            noise_var: (1.0 / tau).max(MIN_NOISE_VAR),
            domain,
            target_stats: TargetStats::IDENTITY,
            ood_policy: OodPolicy::default(),
            feature_names: (0..d).map(|i| format!("x{}", i + 1)).collect(),
            target_name: "y".into(),
            seed,
        })
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn dim(&self) -> usize {
        self.orders.len()
    }

    pub fn ensemble_size(&self) -> usize {
        self.buttresses.len()
    }

    pub fn prior(&self) -> &PriorScale {
        &self.prior
    }

    pub fn buttresses(&self) -> &[Buttress] {
        &self.buttresses
    }

    pub fn buttresses_mut(&mut self) -> &mut [Buttress] {
        &mut self.buttresses
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Control points per ensemble member.
    pub fn num_control_points(&self) -> f64 {
        self.orders.iter().map(|&o| (o + 1) as f64).product()
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Sets `σ²`, floored at [`MIN_NOISE_VAR`].
    pub fn set_noise_var(&mut self, v: f64) {
        self.noise_var = v.max(MIN_NOISE_VAR);
    }

    pub fn domain(&self) -> &BoxScaler {
        &self.domain
    }

    pub fn target_stats(&self) -> TargetStats {
        self.target_stats
    }

    pub fn set_target_stats(&mut self, stats: TargetStats) {
        self.target_stats = stats;
    }

    pub fn ood_policy(&self) -> OodPolicy {
        self.ood_policy
    }

    pub fn set_ood_policy(&mut self, policy: OodPolicy) {
        self.ood_policy = policy;
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn set_feature_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.dim() {
            return Err(Error::SchemaMismatch {
                expected: self.dim(),
                got: names.len(),
            });
        }
        self.feature_names = names;
        Ok(())
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn set_target_name(&mut self, name: impl Into<String>) {
        self.target_name = name.into();
    }

    /// Maps `x` into the unit box, failing if any coordinate lands outside it.
    pub fn to_unit(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::SchemaMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let u = self.domain.to_unit(x);
        if let Some((dim, &value)) = u.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfDomain { dim, value });
        }
        Ok(u)
    }

    /// `(E[f], Var f)` in standardized units for a point already in the unit box.
    pub fn predict_f_unit(&self, u: &[f64]) -> (f64, f64) {
        self.buttresses
            .iter()
            .map(|b| (b.forward_mean(u), b.forward_var(u)))
            .fold((0.0, 0.0), |(m, v), (bm, bv)| (m + bm, v + bv))
    }

    /// `(E[f], Var f)` in standardized units at `x` in original input units.
    pub fn predict_f(&self, x: &[f64]) -> Result<(f64, f64)> {
        Ok(self.predict_f_unit(&self.to_unit(x)?))
    }

    pub fn predict_y_unit(&self, u: &[f64]) -> PredictiveDistribution {
        let (m, v) = self.predict_f_unit(u);
        let s2 = self.target_stats.std * self.target_stats.std;
        PredictiveDistribution {
            mean: self.target_stats.unstandardize(m),
            f_var: v * s2,
            y_var: (v + self.noise_var) * s2,
        }
    }

    /// Predictive distribution of `y` at `x`, in target units.
    pub fn predict_y(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        Ok(self.predict_y_unit(&self.to_unit(x)?))
    }

    /// Summed mean and variance at every point, members evaluated in parallel
    /// and reduced in member order.
    pub fn forward_batch(&self, points: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
        let per_member: Vec<(Vec<f64>, Vec<f64>)> = self
            .buttresses
            .par_iter()
            .map(|b| b.forward_batch(points))
            .collect();
        let mut means = vec![0.0; points.len()];
        let mut vars = vec![0.0; points.len()];
        for (m, v) in &per_member {
            for (acc, x) in means.iter_mut().zip(m) {
                *acc += x;
            }
            for (acc, x) in vars.iter_mut().zip(v) {
                *acc += x;
            }
        }
        (means, vars)
    }

    /// Mini-batch estimate of the expected log-likelihood, scaled to `n_total` points.
    pub fn expected_loglik(&self, data: &TrainingSet, batch: &[usize], n_total: usize) -> f64 {
        let (means, vars) = self.forward_batch(&data.points(batch));
        let ys: Vec<f64> = batch.iter().map(|&i| data.y[i]).collect();
        expected_loglik_from_moments(&means, &vars, &ys, self.noise_var, n_total)
    }

    /// Sum of the per-member KL divergences.
    pub fn kl(&self) -> f64 {
        self.buttresses.iter().map(Buttress::kl).sum()
    }

    pub fn elbo(&self, data: &TrainingSet, batch: &[usize], n_total: usize) -> f64 {
        self.expected_loglik(data, batch, n_total) - self.kl()
    }

    pub fn elbo_full(&self, data: &TrainingSet) -> f64 {
        self.elbo(data, &data.all_indices(), data.len())
    }

    /// Gradients of `−ELBO` (mini-batch estimate) for every member, plus the ELBO value.
    pub fn neg_elbo_gradients(
        &self,
        data: &TrainingSet,
        batch: &[usize],
        n_total: usize,
    ) -> Result<(f64, Vec<ButtressGradients>)> {
        let points = data.points(batch);
        let (means, vars) = self.forward_batch(&points);
        let ys: Vec<f64> = batch.iter().map(|&i| data.y[i]).collect();
        let ell = expected_loglik_from_moments(&means, &vars, &ys, self.noise_var, n_total);
        let scale = n_total as f64 / batch.len() as f64;
        let mean_sens: Vec<f64> = means
            .iter()
            .zip(&ys)
            .map(|(m, y)| -scale * (y - m) / self.noise_var)
            .collect();
        let var_sens = vec![0.5 * scale / self.noise_var; batch.len()];
        let results: Vec<Result<(f64, ButtressGradients)>> = self
            .buttresses
            .par_iter()
            .map(|b| Ok((b.kl(), b.backward(&points, &mean_sens, &var_sens, 1.0)?)))
            .collect();
        let mut kl = 0.0;
        let mut grads = Vec::with_capacity(results.len());
        for r in results {
            let (k, g) = r?;
            kl += k;
            grads.push(g);
        }
        Ok((ell - kl, grads))
    }

    pub fn num_variational_params(&self) -> usize {
        self.buttresses.iter().map(Buttress::num_params).sum()
    }

    pub fn variational_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_variational_params());
        for b in &self.buttresses {
            b.write_params(&mut out);
        }
        out
    }

    pub fn set_variational_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_variational_params() {
            return Err(Error::ShapeMismatch {
                expected: self.num_variational_params(),
                got: params.len(),
            });
        }
        let mut pos = 0;
        for b in &mut self.buttresses {
            pos += b.read_params(&params[pos..]);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            orders: self.orders.clone(),
            r: self.buttresses.len(),
            permutations: self.buttresses.iter().map(|b| b.permutation().clone()).collect(),
            mean_weights: self.buttresses.iter().map(|b| b.mean_weights().to_vec()).collect(),
            var_logweights: self.buttresses.iter().map(|b| b.var_logweights().to_vec()).collect(),
            noise_var: self.noise_var,
            domain: self.domain.bounds.clone(),
            target_stats: self.target_stats,
            seed: self.seed,
            ood_policy: self.ood_policy,
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        file.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// On-disk model document.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    orders: Vec<usize>,
    r: usize,
    permutations: Vec<Permutation>,
    mean_weights: Vec<Vec<Matrix>>,
    var_logweights: Vec<Vec<Matrix>>,
    noise_var: f64,
    domain: Vec<(f64, f64)>,
    target_stats: TargetStats,
    seed: u64,
    #[serde(default)]
    ood_policy: OodPolicy,
    #[serde(default)]
    feature_names: Vec<String>,
    #[serde(default = "default_target_name")]
    target_name: String,
}

fn default_target_name() -> String {
    "y".into()
}

impl ModelFile {
    fn into_model(self) -> Result<BezierGpModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let r = self.r;
        if r == 0
            || self.permutations.len() != r
            || self.mean_weights.len() != r
            || self.var_logweights.len() != r
        {
            return Err(Error::ModelFormat(format!("expected {r} ensemble members")));
        }
        if !(self.noise_var >= MIN_NOISE_VAR) || !self.noise_var.is_finite() {
            return Err(Error::ModelFormat(format!("invalid noise_var {}", self.noise_var)));
        }
        if !(self.target_stats.std > 0.0) {
            return Err(Error::ModelFormat("target std must be positive".into()));
        }
        let d = self.orders.len();
        if self.domain.len() != d {
            return Err(Error::ModelFormat(format!("domain has {} dimensions, expected {d}", self.domain.len())));
        }
        let domain = BoxScaler::new(self.domain)?;
        let prior = PriorScale::new(&self.orders, r)?;
        let buttresses = self
            .permutations
            .into_iter()
            .zip(self.mean_weights)
            .zip(self.var_logweights)
            .map(|((p, m), v)| Buttress::with_weights(p, &self.orders, &prior, m, v))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let feature_names = if self.feature_names.is_empty() {
            (0..d).map(|i| format!("x{}", i + 1)).collect()
        } else if self.feature_names.len() == d {
            self.feature_names
        } else {
            return Err(Error::ModelFormat("feature_names length does not match orders".into()));
        };
        Ok(BezierGpModel {
            orders: self.orders,
            prior,
            buttresses,
            noise_var: self.noise_var,
            domain,
            target_stats: self.target_stats,
            ood_policy: self.ood_policy,
            feature_names,
            target_name: self.target_name,
            seed: self.seed,
        })
    }
}
