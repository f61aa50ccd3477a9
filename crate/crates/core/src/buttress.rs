//! The Bézier buttress.
//!
//! A buttress stores the parameters of all `τ = Π_γ (ν_γ + 1)` control points
//! of one ensemble member as a chain of `d` small matrices. Every source-to-sink
//! path through the chain picks one node per layer and identifies one control
//! point; its mean is the product of the mean weights along the path and its
//! variance the product of the variance weights along the path.
//!
//! Layer `γ` consumes input coordinate `perm[γ]`. Layer 0 has a single source
//! row, so its matrices are `1 × (ν + 1)`; later layers are
//! `(ν_prev + 1) × (ν + 1)`.
//!
//! Variance weights are materialized as `exp(v[i, j]) · ς̃(j)` where `ς̃` is the
//! prior scale of the layer's dimension (including the ensemble factor). The
//! prior variance of a control point is therefore recovered at `v ≡ 0`, and
//! the ratio of posterior to prior variance along a path is `Π exp(v)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bernstein::{BernsteinBasis, PriorScale};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Range of `v` passed to `exp`.
pub const LOG_WEIGHT_CLAMP: f64 = 30.0;

#[inline]
fn clamp_log(v: f64) -> f64 {
    v.clamp(-LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP)
}

#[inline]
fn is_clamped(v: f64) -> bool {
    v.abs() > LOG_WEIGHT_CLAMP
}

/// Order in which input dimensions are visited by the layers of a buttress.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let d = order.len();
        let mut seen = vec![false; d];
        for &k in &order {
            if k >= d || seen[k] {
                return Err(Error::InvalidArgument(format!(
                    "{order:?} is not a permutation of 0..{d}"
                )));
            }
            seen[k] = true;
        }
        Ok(Permutation(order))
    }

    pub fn identity(d: usize) -> Self {
        Permutation((0..d).collect())
    }

    pub fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut p: Vec<usize> = (0..d).collect();
        p.shuffle(rng);
        Permutation(p)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

/// Gradients with the same layout as a buttress's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ButtressGradients {
    pub mean: Vec<Matrix>,
    pub var: Vec<Matrix>,
}

impl ButtressGradients {
    pub fn zeros_like(b: &Buttress) -> Self {
        let zeros = |ms: &[Matrix]| {
            ms.iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect()
        };
        ButtressGradients {
            mean: zeros(&b.mean_weights),
            var: zeros(&b.var_logweights),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(&self.var)
            .all(|m| m.as_slice().iter().all(|x| x.is_finite()))
    }

    /// Mean layers first, then variance layers.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for m in self.mean.iter().chain(&self.var) {
            out.extend_from_slice(m.as_slice());
        }
    }
}

/// The three path sums making up the KL divergence of one buttress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlTerms {
    /// `Σ Σ̂ / Σ`
    pub s1: f64,
    /// `Σ ϑ² / Σ`
    pub s2: f64,
    /// `Σ log(Σ / Σ̂)`
    pub s3: f64,
    pub tau: f64,
    pub kl: f64,
    /// Number of log-weights that were clamped before exponentiation.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buttress {
    perm: Permutation,
    layer_orders: Vec<usize>,
    bases: Vec<BernsteinBasis>,
    mean_weights: Vec<Matrix>,
    var_logweights: Vec<Matrix>,
    prior_scale: Vec<Vec<f64>>,
}

impl Buttress {
    /// Zero mean weights and `v ≡ 0`, i.e. the variational posterior equals the prior.
    ///
    /// `orders` and `prior` are indexed by original input dimension.
    pub fn new(perm: Permutation, orders: &[usize], prior: &PriorScale) -> Result<Self> {
        let d = orders.len();
        if perm.len() != d {
            return Err(Error::ShapeMismatch {
                expected: d,
                got: perm.len(),
            });
        }
        if prior.per_dim.len() != d {
            return Err(Error::ShapeMismatch {
                expected: d,
                got: prior.per_dim.len(),
            });
        }
        let layer_orders: Vec<usize> = perm.as_slice().iter().map(|&k| orders[k]).collect();
        let bases = layer_orders
            .iter()
            .map(|&o| BernsteinBasis::new(o))
            .collect::<Result<Vec<_>>>()?;
        let prior_scale: Vec<Vec<f64>> = perm.as_slice().iter().map(|&k| prior.scaled(k)).collect();
        for (s, &o) in prior_scale.iter().zip(&layer_orders) {
            if s.len() != o + 1 {
                return Err(Error::ShapeMismatch {
                    expected: o + 1,
                    got: s.len(),
                });
            }
        }
        let shapes = layer_shapes(&layer_orders);
        let mean_weights = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let var_logweights = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Ok(Buttress {
            perm,
            layer_orders,
            bases,
            mean_weights,
            var_logweights,
            prior_scale,
        })
    }

    /// Builds a buttress with explicit weights, validating every layer shape.
    pub fn with_weights(
        perm: Permutation,
        orders: &[usize],
        prior: &PriorScale,
        mean_weights: Vec<Matrix>,
        var_logweights: Vec<Matrix>,
    ) -> Result<Self> {
        let mut b = Buttress::new(perm, orders, prior)?;
        b.set_weights(mean_weights, var_logweights)?;
        Ok(b)
    }

    pub fn set_weights(&mut self, mean_weights: Vec<Matrix>, var_logweights: Vec<Matrix>) -> Result<()> {
        let shapes = layer_shapes(&self.layer_orders);
        for ms in [&mean_weights, &var_logweights] {
            if ms.len() != shapes.len() {
                return Err(Error::ShapeMismatch {
                    expected: shapes.len(),
                    got: ms.len(),
                });
            }
            for (m, &(r, c)) in ms.iter().zip(&shapes) {
                if m.shape() != (r, c) {
                    return Err(Error::ShapeMismatch {
                        expected: r * c,
                        got: m.rows() * m.cols(),
                    });
                }
            }
        }
        self.mean_weights = mean_weights;
        self.var_logweights = var_logweights;
        Ok(())
    }

    /// Draws mean weights i.i.d. from `U[-c, c]` with `c = 0.1^(1/d)` and resets `v` to zero.
    pub fn init_random<R: Rng>(&mut self, rng: &mut R) {
        let c = 0.1f64.powf(1.0 / self.depth() as f64);
        for m in &mut self.mean_weights {
            for w in m.as_mut_slice() {
                *w = rng.gen_range(-c..=c);
            }
        }
        for m in &mut self.var_logweights {
            m.as_mut_slice().fill(0.0);
        }
    }

    pub fn depth(&self) -> usize {
        self.layer_orders.len()
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    pub fn layer_orders(&self) -> &[usize] {
        &self.layer_orders
    }

    pub fn mean_weights(&self) -> &[Matrix] {
        &self.mean_weights
    }

    pub fn mean_weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.mean_weights
    }

    pub fn var_logweights(&self) -> &[Matrix] {
        &self.var_logweights
    }

    pub fn var_logweights_mut(&mut self) -> &mut [Matrix] {
        &mut self.var_logweights
    }

    /// Prior scale `ς̃` of layer `layer` (ensemble factor included).
    pub fn layer_prior_scale(&self, layer: usize) -> &[f64] {
        &self.prior_scale[layer]
    }

    /// Number of control points `τ`, as a float since it overflows integers quickly.
    pub fn num_control_points(&self) -> f64 {
        self.layer_orders.iter().map(|&o| (o + 1) as f64).product()
    }

    /// Positive variance weights `exp(v[i, j]) · ς̃(j)` of one layer.
    pub fn variance_weights(&self, layer: usize) -> Matrix {
        let v = &self.var_logweights[layer];
        let s = &self.prior_scale[layer];
        Matrix::from_fn(v.rows(), v.cols(), |i, j| clamp_log(v.get(i, j)).exp() * s[j])
    }

    fn all_variance_weights(&self) -> Vec<Matrix> {
        (0..self.depth()).map(|l| self.variance_weights(l)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.mean_weights
            .iter()
            .chain(&self.var_logweights)
            .map(|m| m.as_slice().len())
            .sum()
    }

    /// Mean layers first, then variance log-weight layers.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for m in self.mean_weights.iter().chain(&self.var_logweights) {
            out.extend_from_slice(m.as_slice());
        }
    }

    /// Inverse of [`Buttress::write_params`]; returns the number of values consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        for m in self.mean_weights.iter_mut().chain(self.var_logweights.iter_mut()) {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&src[pos..pos + n]);
            pos += n;
        }
        pos
    }

    /// `1ᵀ w_1 w_2 ⋯ w_d 1`, the sum of all control-point means.
    pub fn sum_all_means(&self) -> f64 {
        chain_sum(&self.mean_weights)
    }

    /// `E[f(x)]` for `x ∈ [0, 1]^d` given in original dimension order.
    pub fn forward_mean(&self, x: &[f64]) -> f64 {
        let mut scratch = Scratch::new(self);
        self.pass(x, &self.mean_weights, false, &mut scratch)
    }

    /// `Var f(x)` under the variational control-point variances.
    pub fn forward_var(&self, x: &[f64]) -> f64 {
        let w = self.all_variance_weights();
        let mut scratch = Scratch::new(self);
        self.pass(x, &w, true, &mut scratch)
    }

    /// Mean and variance at every point.
    pub fn forward_batch(&self, points: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
        let w = self.all_variance_weights();
        let mut scratch = Scratch::new(self);
        points
            .iter()
            .map(|x| {
                (
                    self.pass(x, &self.mean_weights, false, &mut scratch),
                    self.pass(x, &w, true, &mut scratch),
                )
            })
            .unzip()
    }

    fn pass(&self, x: &[f64], weights: &[Matrix], squared: bool, s: &mut Scratch) -> f64 {
        debug_assert_eq!(x.len(), self.depth());
        s.h[0] = 1.0;
        let mut len = 1;
        for (layer, (w, basis)) in weights.iter().zip(&self.bases).enumerate() {
            let n = basis.len();
            let t = x[self.perm.0[layer]];
            if squared {
                basis.eval_squared_into(t, &mut s.b[..n]);
            } else {
                basis.eval_into(t, &mut s.b[..n]);
            }
            w.left_mul_into(&s.h[..len], &mut s.a[..n]);
            for j in 0..n {
                s.h[j] = s.a[j] * s.b[j];
            }
            len = n;
        }
        s.h[..len].iter().sum()
    }

    /// KL divergence between the variational and prior control points, `S1 − τ + S2 + S3`.
    ///
    /// The per-control-point terms carry no factor ½, so this is twice the
    /// usual Gaussian KL. An ELBO built on it is still a lower bound on the
    /// log evidence, just a looser one that shrinks the mean harder.
    pub fn kl(&self) -> f64 {
        self.kl_terms().kl
    }

    pub fn kl_terms(&self) -> KlTerms {
        let tau = self.num_control_points();
        let widths = self.widths();
        // Every chain is normalized by the layer width so the products stay O(1)
        // even when τ itself is astronomically large.
        let s1n = {
            let e: Vec<Matrix> = self
                .var_logweights
                .iter()
                .zip(&widths)
                .map(|(v, &(_, n))| v.map(|x| clamp_log(x).exp() / n as f64))
                .collect();
            chain_sum(&e)
        };
        let s2n = {
            let m: Vec<Matrix> = self
                .mean_weights
                .iter()
                .zip(&self.prior_scale)
                .zip(&widths)
                .map(|((w, s), &(_, n))| {
                    Matrix::from_fn(w.rows(), w.cols(), |i, j| {
                        w.get(i, j) * w.get(i, j) / (s[j] * n as f64)
                    })
                })
                .collect();
            chain_sum(&m)
        };
        let s3n: f64 = -self
            .var_logweights
            .iter()
            .zip(&widths)
            .map(|(v, &(rows, cols))| v.sum() / (rows * cols) as f64)
            .sum::<f64>();
        let clamped = self
            .var_logweights
            .iter()
            .flat_map(|m| m.as_slice())
            .filter(|&&v| is_clamped(v))
            .count();
        KlTerms {
            s1: tau * s1n,
            s2: tau * s2n,
            s3: tau * s3n,
            tau,
            kl: tau * ((s1n - 1.0) + s2n + s3n),
            clamped,
        }
    }

    fn widths(&self) -> Vec<(usize, usize)> {
        self.mean_weights.iter().map(Matrix::shape).collect()
    }

    /// Reverse-mode gradient of
    /// `Σ_j (mean_sens[j] · E[f(x_j)] + var_sens[j] · Var f(x_j)) + kl_weight · KL`
    /// with respect to the mean weights and the variance log-weights.
    pub fn backward(
        &self,
        points: &[&[f64]],
        mean_sens: &[f64],
        var_sens: &[f64],
        kl_weight: f64,
    ) -> Result<ButtressGradients> {
        if mean_sens.len() != points.len() {
            return Err(Error::ShapeMismatch {
                expected: points.len(),
                got: mean_sens.len(),
            });
        }
        if var_sens.len() != points.len() {
            return Err(Error::ShapeMismatch {
                expected: points.len(),
                got: var_sens.len(),
            });
        }
        let mut grads = ButtressGradients::zeros_like(self);
        let var_w = self.all_variance_weights();
        // Gradient with respect to the materialized variance weights; converted to
        // log-weights at the end since the chain rule factor is shared by all points.
        let mut var_w_grad: Vec<Matrix> = var_w
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        let mut ws = BackwardScratch::new(self);
        for ((x, &ms), &vs) in points.iter().zip(mean_sens).zip(var_sens) {
            if ms != 0.0 {
                self.point_backward(x, &self.mean_weights, false, ms, &mut grads.mean, &mut ws);
            }
            if vs != 0.0 {
                self.point_backward(x, &var_w, true, vs, &mut var_w_grad, &mut ws);
            }
        }
        for (((g, gw), w), v) in grads
            .var
            .iter_mut()
            .zip(&var_w_grad)
            .zip(&var_w)
            .zip(&self.var_logweights)
        {
            for (((g, &gw), &w), &v) in g
                .as_mut_slice()
                .iter_mut()
                .zip(gw.as_slice())
                .zip(w.as_slice())
                .zip(v.as_slice())
            {
                if !is_clamped(v) {
                    *g += gw * w;
                }
            }
        }
        if kl_weight != 0.0 {
            self.kl_backward(kl_weight, &mut grads);
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient { iteration: None });
        }
        Ok(grads)
    }

    /// Accumulates `sens · ∂(pass(x))/∂W` into `out`.
    fn point_backward(
        &self,
        x: &[f64],
        weights: &[Matrix],
        squared: bool,
        sens: f64,
        out: &mut [Matrix],
        ws: &mut BackwardScratch,
    ) {
        let d = self.depth();
        // Forward: ws.inputs[l] is the row vector entering layer l.
        ws.inputs[0][0] = 1.0;
        for l in 0..d {
            let basis = &self.bases[l];
            let t = x[self.perm.0[l]];
            let b = &mut ws.basis[l];
            if squared {
                basis.eval_squared_into(t, b);
            } else {
                basis.eval_into(t, b);
            }
            let (head, tail) = ws.inputs.split_at_mut(l + 1);
            weights[l].left_mul_into(&head[l], &mut tail[0]);
            for (h, &bj) in tail[0].iter_mut().zip(ws.basis[l].iter()) {
                *h *= bj;
            }
        }
        // Backward: suffix starts as the all-ones sink vector.
        ws.suffix[d].fill(1.0);
        for l in (0..d).rev() {
            let (lo, hi) = ws.suffix.split_at_mut(l + 1);
            let bs = &mut ws.tmp[l];
            for ((t, &b), &s) in bs.iter_mut().zip(&ws.basis[l]).zip(&hi[0]) {
                *t = b * s;
            }
            out[l].add_outer(sens, &ws.inputs[l], bs);
            weights[l].right_mul_into(bs, &mut lo[l]);
        }
    }

    fn kl_backward(&self, kl_weight: f64, grads: &mut ButtressGradients) {
        let tau = self.num_control_points();
        let widths = self.widths();
        let scale = kl_weight * tau;

        // S1: chain of exp(v) / width.
        let e: Vec<Matrix> = self
            .var_logweights
            .iter()
            .zip(&widths)
            .map(|(v, &(_, n))| v.map(|x| clamp_log(x).exp() / n as f64))
            .collect();
        chain_grad(&e, |l, i, j, g| {
            // exp() of a clamped log-weight does not depend on it.
            if !is_clamped(self.var_logweights[l].get(i, j)) {
                grads.var[l].add_at(i, j, scale * g * e[l].get(i, j));
            }
        });

        // S2: chain of w² / (ς̃ · width).
        let m: Vec<Matrix> = self
            .mean_weights
            .iter()
            .zip(&self.prior_scale)
            .zip(&widths)
            .map(|((w, s), &(_, n))| {
                Matrix::from_fn(w.rows(), w.cols(), |i, j| {
                    w.get(i, j) * w.get(i, j) / (s[j] * n as f64)
                })
            })
            .collect();
        chain_grad(&m, |l, i, j, g| {
            let w = self.mean_weights[l].get(i, j);
            let s = self.prior_scale[l][j] * widths[l].1 as f64;
            grads.mean[l].add_at(i, j, scale * g * 2.0 * w / s);
        });

        // S3: each log-weight appears on ψ = τ / (rows · cols) paths.
        for (g, &(rows, cols)) in grads.var.iter_mut().zip(&widths) {
            let psi = scale / (rows * cols) as f64;
            for x in g.as_mut_slice() {
                *x -= psi;
            }
        }
    }
}

fn layer_shapes(layer_orders: &[usize]) -> Vec<(usize, usize)> {
    let mut prev = 1;
    layer_orders
        .iter()
        .map(|&o| {
            let shape = (prev, o + 1);
            prev = o + 1;
            shape
        })
        .collect()
}

/// `1ᵀ M_1 ⋯ M_d 1`.
fn chain_sum(ms: &[Matrix]) -> f64 {
    let mut h = vec![1.0];
    for m in ms {
        let mut next = vec![0.0; m.cols()];
        m.left_mul_into(&h, &mut next);
        h = next;
    }
    h.iter().sum()
}

/// Calls `visit(l, i, j, ∂(1ᵀ M_1 ⋯ M_d 1)/∂M_l[i, j])` for every entry.
fn chain_grad(ms: &[Matrix], mut visit: impl FnMut(usize, usize, usize, f64)) {
    let d = ms.len();
    let mut prefix = Vec::with_capacity(d + 1);
    prefix.push(vec![1.0]);
    for m in ms {
        let mut next = vec![0.0; m.cols()];
        m.left_mul_into(prefix.last().unwrap(), &mut next);
        prefix.push(next);
    }
    let mut suffix = vec![1.0; ms.last().map_or(0, Matrix::cols)];
    for l in (0..d).rev() {
        let m = &ms[l];
        for (i, &p) in prefix[l].iter().enumerate() {
            for (j, &s) in suffix.iter().enumerate() {
                visit(l, i, j, p * s);
            }
        }
        let mut prev = vec![0.0; m.rows()];
        m.right_mul_into(&suffix, &mut prev);
        suffix = prev;
    }
}

struct Scratch {
    h: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Scratch {
    fn new(b: &Buttress) -> Self {
        let n = b.layer_orders.iter().map(|o| o + 1).max().unwrap_or(1).max(1);
        Scratch {
            h: vec![0.0; n],
            a: vec![0.0; n],
            b: vec![0.0; n],
        }
    }
}

struct BackwardScratch {
    basis: Vec<Vec<f64>>,
    tmp: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    suffix: Vec<Vec<f64>>,
}

impl BackwardScratch {
    fn new(b: &Buttress) -> Self {
        let widths: Vec<usize> = b.layer_orders.iter().map(|o| o + 1).collect();
        // inputs[l] / suffix[l] have the width entering layer l; index d is the sink side.
        let mut entering = vec![1];
        entering.extend(widths.iter().copied());
        BackwardScratch {
            basis: widths.iter().map(|&n| vec![0.0; n]).collect(),
            tmp: widths.iter().map(|&n| vec![0.0; n]).collect(),
            inputs: entering.iter().map(|&n| vec![0.0; n]).collect(),
            suffix: entering.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{brute_kl, brute_mean, brute_var, materialize};
    use proptest::prelude::{any, prop, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    fn random_buttress(orders: &[usize], perm: Permutation, r: usize, seed: u64) -> Buttress {
        let prior = PriorScale::new(orders, r).unwrap();
        let mut b = Buttress::new(perm, orders, &prior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in b.mean_weights_mut() {
            m.as_mut_slice().iter_mut().for_each(|w| *w = rng.gen_range(-1.5..1.5));
        }
        for m in b.var_logweights_mut() {
            m.as_mut_slice().iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        }
        b
    }

    fn hand_buttress() -> Buttress {
        let prior = PriorScale::new(&[1, 1], 1).unwrap();
        Buttress::with_weights(
            Permutation::identity(2),
            &[1, 1],
            &prior,
            vec![
                Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap(),
                Matrix::from_rows(&[vec![5.0, 7.0], vec![11.0, 13.0]]).unwrap(),
            ],
            vec![Matrix::zeros(1, 2), Matrix::zeros(2, 2)],
        )
        .unwrap()
    }

    #[test]
    fn sum_all_means_examples() {
        let prior = PriorScale::new(&[2, 3, 3], 1).unwrap();
        let mut b = Buttress::new(Permutation::identity(3), &[2, 3, 3], &prior).unwrap();
        assert_eq!(b.sum_all_means(), 0.0);
        for m in b.mean_weights_mut() {
            m.as_mut_slice().fill(1.0);
        }
        assert_eq!(b.sum_all_means(), 48.0);
        assert_eq!(b.num_control_points(), 48.0);
        assert_eq!(hand_buttress().sum_all_means(), 96.0);
    }

    #[test]
    fn forward_mean_examples() {
        let prior = PriorScale::new(&[2, 3, 3], 1).unwrap();
        let mut b = Buttress::new(Permutation::new(vec![2, 0, 1]).unwrap(), &[2, 3, 3], &prior).unwrap();
        for m in b.mean_weights_mut() {
            m.as_mut_slice().fill(1.0);
        }
        for x in [[0.1, 0.7, 0.3], [0.0, 1.0, 0.5]] {
            assert!((b.forward_mean(&x) - 1.0).abs() < 1e-14);
        }
        let h = hand_buttress();
        assert_eq!(h.forward_mean(&[0.0, 0.0]), 10.0);
        let dense = materialize(&h).unwrap();
        assert_eq!(brute_mean(&dense, &[0.0, 0.0]).unwrap(), 10.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..5 {
            let b = random_buttress(&[2, 2, 2], Permutation::random(3, &mut rng), 1, seed);
            let dense = materialize(&b).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
            assert!(rel_err(b.forward_mean(&x), brute_mean(&dense, &x).unwrap()) <= 1e-10);
        }
    }

    #[test]
    fn forward_var_flat_prior() {
        let orders = [3, 2, 4];
        let prior = PriorScale::new(&orders, 1).unwrap();
        let b = Buttress::new(Permutation::new(vec![1, 2, 0]).unwrap(), &orders, &prior).unwrap();
        for i in 0..=3 {
            for j in 0..=2 {
                for k in 0..=4 {
                    let x = [i as f64 / 3.0, j as f64 / 2.0, k as f64 / 4.0];
                    assert!((b.forward_var(&x) - 1.0).abs() <= 1e-8);
                }
            }
        }

        let prior = PriorScale::new(&[20], 1).unwrap();
        let b = Buttress::new(Permutation::identity(1), &[20], &prior).unwrap();
        let dense = materialize(&b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.gen_range(0.05..=0.95)];
            let v = b.forward_var(&x);
            assert!((0.9..=1.1).contains(&v), "{x:?}: {v}");
            assert!(rel_err(v, brute_var(&dense, &x).unwrap()) <= 1e-10);
        }
    }

    #[test]
    fn forward_var_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..10 {
            let b = random_buttress(&[2, 2], Permutation::random(2, &mut rng), 1, seed);
            let dense = materialize(&b).unwrap();
            let x: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
            let v = b.forward_var(&x);
            assert!(v > 0.0);
            assert!(rel_err(v, brute_var(&dense, &x).unwrap()) <= 1e-10);
        }
    }

    #[test]
    fn kl_examples() {
        let orders = [1, 2];
        let prior = PriorScale::new(&orders, 1).unwrap();
        let b = Buttress::new(Permutation::identity(2), &orders, &prior).unwrap();
        assert_eq!(b.kl(), 0.0);

        let mut b = random_buttress(&orders, Permutation::identity(2), 1, 1);
        for m in b.var_logweights_mut() {
            m.as_mut_slice().fill(0.0);
        }
        let t = b.kl_terms();
        assert!((t.s1 - t.tau).abs() < 1e-12);
        assert_eq!(t.s3, 0.0);
        assert!((t.kl - t.s2).abs() < 1e-12);

        for seed in 0..10 {
            let b = random_buttress(&orders, Permutation::new(vec![1, 0]).unwrap(), 1, seed);
            let dense = materialize(&b).unwrap();
            let kl = b.kl();
            assert!(kl >= -1e-9);
            assert!((kl - brute_kl(&dense, &prior).unwrap()).abs() <= 1e-8);
        }
    }

    #[test]
    fn clamped_log_weights_are_reported() {
        let prior = PriorScale::new(&[2], 1).unwrap();
        let mut b = Buttress::new(Permutation::identity(1), &[2], &prior).unwrap();
        b.var_logweights_mut()[0].set(0, 1, 45.0);
        let t = b.kl_terms();
        assert_eq!(t.clamped, 1);
        assert!(t.kl.is_finite());
        let g = b.backward(&[&[0.5]], &[0.0], &[1.0], 1.0).unwrap();
        // Only the linear log-term still depends on a clamped entry.
        assert_eq!(g.var[0].get(0, 1), -1.0);
    }

    #[test]
    fn permutation_neutral_prior() {
        let orders = [2, 3, 1];
        let prior = PriorScale::new(&orders, 3).unwrap();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let x = [0.23, 0.71, 0.4];
        let reference = Buttress::new(Permutation::identity(3), &orders, &prior).unwrap();
        for p in perms {
            let b = Buttress::new(Permutation::new(p.to_vec()).unwrap(), &orders, &prior).unwrap();
            assert!(b.kl().abs() <= 1e-10);
            assert!((b.forward_var(&x) - reference.forward_var(&x)).abs() <= 1e-10);
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let b = random_buttress(&[2, 3], Permutation::identity(2), 1, 2);
        let pts: Vec<&[f64]> = vec![&[0.2, 0.4], &[0.9, 0.1]];
        let g = b.backward(&pts, &[0.0, 0.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(g, ButtressGradients::zeros_like(&b));

        let b = random_buttress(&[4], Permutation::identity(1), 1, 3);
        let g = b.backward(&[&[0.35]], &[1.0], &[0.0], 0.0).unwrap();
        let expected = BernsteinBasis::new(4).unwrap().eval(0.35);
        for (a, e) in g.mean[0].as_slice().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_mismatched_sensitivities() {
        let b = random_buttress(&[2], Permutation::identity(1), 1, 2);
        assert!(matches!(
            b.backward(&[&[0.2]], &[1.0, 2.0], &[0.0], 0.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn objective(b: &Buttress, pts: &[&[f64]], ms: &[f64], vs: &[f64], klw: f64) -> f64 {
        let (m, v) = b.forward_batch(pts);
        m.iter().zip(ms).map(|(a, s)| a * s).sum::<f64>()
            + v.iter().zip(vs).map(|(a, s)| a * s).sum::<f64>()
            + klw * b.kl()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let orders = [2, 3, 1];
        let b = random_buttress(&orders, Permutation::new(vec![2, 0, 1]).unwrap(), 2, 4);
        let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
        let pts: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let ms: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let vs: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let klw = 0.7;
        let g = b.backward(&pts, &ms, &vs, klw).unwrap();
        let mut flat_g = Vec::new();
        g.write_flat(&mut flat_g);
        let mut params = Vec::new();
        b.write_params(&mut params);
        let h = 1e-5;
        for _ in 0..20 {
            let k = rng.gen_range(0..params.len());
            let mut probe = b.clone();
            let mut p = params.clone();
            p[k] += h;
            probe.read_params(&p);
            let up = objective(&probe, &pts, &ms, &vs, klw);
            p[k] -= 2.0 * h;
            probe.read_params(&p);
            let down = objective(&probe, &pts, &ms, &vs, klw);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - flat_g[k]).abs();
            assert!(err <= 1e-4 * fd.abs().max(flat_g[k].abs()) || err <= 1e-7, "param {k}: fd {fd} vs {}", flat_g[k]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn path_products_reproduce_passes(
            orders in prop::collection::vec(1usize..=4, 1..=3),
            seed in any::<u64>(),
            x in prop::collection::vec(0.0f64..=1.0, 3),
        ) {
            let d = orders.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_buttress(&orders, Permutation::random(d, &mut rng), 1, seed);
            let dense = materialize(&b).unwrap();
            prop_assert!(dense.len() <= 200);
            let sum: f64 = dense.theta.iter().sum();
            prop_assert!((b.sum_all_means() - sum).abs() <= 1e-10 * sum.abs().max(1.0));
            let x = &x[..d];
            let m = b.forward_mean(x);
            prop_assert!((m - brute_mean(&dense, x).unwrap()).abs() <= 1e-10 * m.abs().max(1e-3));
            let v = b.forward_var(x);
            prop_assert!(v > 0.0);
            prop_assert!(rel_err(v, brute_var(&dense, x).unwrap()) <= 1e-10);
            prop_assert!(b.kl() >= -1e-9);
        }
    }
}
