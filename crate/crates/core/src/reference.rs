//! Brute-force oracles.
//!
//! Everything here enumerates the full control-point grid explicitly, so it is
//! exponential in the input dimension and only usable on small instances. The
//! fast chain-of-matrices passes in [`crate::buttress`] are checked against it.

use nalgebra::{DMatrix, DVector};

use crate::bernstein::{BernsteinBasis, PriorScale};
use crate::buttress::Buttress;
use crate::error::{Error, Result};

/// Upper bound on the number of enumerated control points.
pub const MAX_CONTROL_POINTS: usize = 1_000_000;

const EXACT_GP_MAX_POINTS: usize = 500;
const JITTER: f64 = 1e-10;

/// Explicit control-point means and variances of one buttress.
///
/// Indexed by multi-index `(i_1, …, i_d)` in original input-dimension order,
/// row-major with the last dimension varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseControlPoints {
    pub orders: Vec<usize>,
    pub theta: Vec<f64>,
    pub sigma_hat: Vec<f64>,
}

impl DenseControlPoints {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

fn grid_size(orders: &[usize]) -> Result<usize> {
    let mut count: usize = 1;
    for &o in orders {
        count = count
            .checked_mul(o + 1)
            .filter(|&c| c <= MAX_CONTROL_POINTS)
            .ok_or(Error::TooLarge {
                count: usize::MAX,
                limit: MAX_CONTROL_POINTS,
            })?;
    }
    Ok(count)
}

/// Calls `visit(flat_index, multi_index)` for every grid point.
fn for_each_index(orders: &[usize], mut visit: impl FnMut(usize, &[usize])) {
    let d = orders.len();
    let mut idx = vec![0usize; d];
    let mut flat = 0;
    loop {
        visit(flat, &idx);
        flat += 1;
        let mut k = d;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] <= orders[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Materializes every control point by multiplying weights along its path.
pub fn materialize(b: &Buttress) -> Result<DenseControlPoints> {
    let perm = b.permutation().as_slice();
    let d = perm.len();
    let mut orders = vec![0; d];
    for (layer, &dim) in perm.iter().enumerate() {
        orders[dim] = b.layer_orders()[layer];
    }
    let count = grid_size(&orders)?;
    let mut theta = vec![0.0; count];
    let mut sigma_hat = vec![0.0; count];
    for_each_index(&orders, |flat, idx| {
        let mut mean = 1.0;
        let mut var = 1.0;
        let mut prev = 0;
        for (layer, &dim) in perm.iter().enumerate() {
            let node = idx[dim];
            mean *= b.mean_weights()[layer].get(prev, node);
            var *= b.var_logweights()[layer].get(prev, node).exp() * b.layer_prior_scale(layer)[node];
            prev = node;
        }
        theta[flat] = mean;
        sigma_hat[flat] = var;
    });
    Ok(DenseControlPoints {
        orders,
        theta,
        sigma_hat,
    })
}

fn basis_table(orders: &[usize], x: &[f64], squared: bool) -> Result<Vec<Vec<f64>>> {
    if x.len() != orders.len() {
        return Err(Error::ShapeMismatch {
            expected: orders.len(),
            got: x.len(),
        });
    }
    orders
        .iter()
        .zip(x)
        .map(|(&o, &t)| {
            let mut v = BernsteinBasis::new(o)?.eval(t);
            if squared {
                v.iter_mut().for_each(|b| *b *= *b);
            }
            Ok(v)
        })
        .collect()
}

fn weighted_grid_sum(orders: &[usize], table: &[Vec<f64>], values: &[f64]) -> f64 {
    let mut total = 0.0;
    for_each_index(orders, |flat, idx| {
        let w: f64 = idx.iter().enumerate().map(|(k, &i)| table[k][i]).product();
        total += w * values[flat];
    });
    total
}

/// `Σ_i Π_γ B_{i_γ}(x_γ) ϑ_i`.
pub fn brute_mean(dense: &DenseControlPoints, x: &[f64]) -> Result<f64> {
    grid_size(&dense.orders)?;
    let table = basis_table(&dense.orders, x, false)?;
    Ok(weighted_grid_sum(&dense.orders, &table, &dense.theta))
}

/// `Σ_i Π_γ B_{i_γ}(x_γ)² Σ̂_i`.
pub fn brute_var(dense: &DenseControlPoints, x: &[f64]) -> Result<f64> {
    grid_size(&dense.orders)?;
    let table = basis_table(&dense.orders, x, true)?;
    Ok(weighted_grid_sum(&dense.orders, &table, &dense.sigma_hat))
}

/// Prior variance `Σ_i = Π_γ ensemble_factor · ς_γ(i_γ)` of every control point.
pub fn prior_variances(orders: &[usize], prior: &PriorScale) -> Result<Vec<f64>> {
    let count = grid_size(orders)?;
    let mut out = vec![0.0; count];
    for_each_index(orders, |flat, idx| {
        out[flat] = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| prior.per_dim[k][i] * prior.ensemble_factor)
            .product();
    });
    Ok(out)
}

/// Per-control-point KL sum `Σ [Σ̂/Σ − 1 + ϑ²/Σ + log(Σ/Σ̂)]`.
pub fn brute_kl(dense: &DenseControlPoints, prior: &PriorScale) -> Result<f64> {
    let sigma = prior_variances(&dense.orders, prior)?;
    Ok(sigma
        .iter()
        .zip(&dense.theta)
        .zip(&dense.sigma_hat)
        .map(|((&s, &m), &v)| v / s - 1.0 + m * m / s + (s / v).ln())
        .sum())
}

/// Prior covariance `k(x_a, x_b)` of an `r`-member ensemble, by grid enumeration.
pub fn prior_kernel_matrix(x: &[Vec<f64>], orders: &[usize], ensemble_size: usize) -> Result<DMatrix<f64>> {
    let prior = PriorScale::new(orders, ensemble_size)?;
    let sigma = prior_variances(orders, &prior)?;
    let n = x.len();
    if n.saturating_mul(sigma.len()) > 50 * MAX_CONTROL_POINTS {
        return Err(Error::TooLarge {
            count: n.saturating_mul(sigma.len()),
            limit: 50 * MAX_CONTROL_POINTS,
        });
    }
    // features[a][i] = Π_γ B_{i_γ}(x_aγ)
    let features: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            let table = basis_table(orders, row, false)?;
            let mut phi = vec![0.0; sigma.len()];
            for_each_index(orders, |flat, idx| {
                phi[flat] = idx.iter().enumerate().map(|(k, &i)| table[k][i]).product();
            });
            Ok(phi)
        })
        .collect::<Result<_>>()?;
    let members = ensemble_size as f64;
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..=a {
            let v: f64 = features[a]
                .iter()
                .zip(&features[b])
                .zip(&sigma)
                .map(|((p, q), s)| p * q * s)
                .sum::<f64>()
                * members;
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    Ok(k)
}

/// Exact `log N(y; 0, K + σ² I)` under the adjusted prior.
pub fn exact_log_evidence(
    x: &[Vec<f64>],
    y: &[f64],
    orders: &[usize],
    noise_var: f64,
    ensemble_size: usize,
) -> Result<f64> {
    let n = x.len();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    if n > EXACT_GP_MAX_POINTS {
        return Err(Error::TooLarge {
            count: n,
            limit: EXACT_GP_MAX_POINTS,
        });
    }
    let mut cov = prior_kernel_matrix(x, orders, ensemble_size)?;
    for i in 0..n {
        cov[(i, i)] += noise_var;
    }
    let chol = match cov.clone().cholesky() {
        Some(c) => c,
        None => {
            for i in 0..n {
                cov[(i, i)] += JITTER;
            }
            cov.cholesky().ok_or(Error::NotPositiveDefinite)?
        }
    };
    let y = DVector::from_column_slice(y);
    let alpha = chol.solve(&y);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (y.dot(&alpha) + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}
