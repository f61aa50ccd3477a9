//! Bernstein polynomial bases and the variance-flattening prior adjustment.
//!
//! The order-`ν` basis on `[0, 1]` consists of the `ν + 1` polynomials
//! `B_i(t) = C(ν, i) t^i (1 - t)^(ν - i)`. They are non-negative on the unit
//! interval and sum to one there.
//!
//! Giving every control point unit prior variance makes `Var f(x)` sag in the
//! middle of the domain, since `Σ_i B_i(t)^2 < 1` away from the endpoints. The
//! adjusted prior instead solves, per dimension, for the scale vector `ς` with
//! `Σ_j B_j(i/ν)^2 ς_j = 1` at every knot `i/ν`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, MAX_BASIS_ORDER, MAX_PRIOR_ORDER};

const PIVOT_TOLERANCE: f64 = 1e-12;

/// Bernstein basis of a fixed order with cached binomial coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BernsteinBasis {
    order: usize,
    binomials: Vec<f64>,
}

impl BernsteinBasis {
    pub fn new(order: usize) -> Result<Self> {
        if !(1..=MAX_BASIS_ORDER).contains(&order) {
            return Err(Error::OrderOutOfRange {
                order,
                max: MAX_BASIS_ORDER,
            });
        }
        // Multiplicative recurrence over the first half, mirrored so that
        // C(ν, i) == C(ν, ν - i) holds bit for bit.
        let mut binomials = vec![1.0; order + 1];
        let mut c = 1.0f64;
        for i in 1..=order / 2 {
            c = c * (order + 1 - i) as f64 / i as f64;
            if c < 9.0e15 {
                c = c.round();
            }
            binomials[i] = c;
            binomials[order - i] = c;
        }
        Ok(BernsteinBasis { order, binomials })
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.order + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes the `ν + 1` basis values at `t` into `out`.
    ///
    /// Defined for every real `t`; domain checks are the caller's business.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        let s = 1.0 - t;
        // out[i] <- t^i, then multiply in (1-t)^(ν-i) from the right end.
        let mut p = 1.0;
        for o in out.iter_mut() {
            *o = p;
            p *= t;
        }
        let mut q = 1.0;
        for (o, c) in out.iter_mut().zip(&self.binomials).rev() {
            *o *= q * c;
            q *= s;
        }
    }

    pub fn eval_squared_into(&self, t: f64, out: &mut [f64]) {
        self.eval_into(t, out);
        for o in out.iter_mut() {
            *o *= *o;
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, &mut out);
        out
    }
}

fn check_unit(t: f64, allow_outside: bool) -> Result<()> {
    if !allow_outside && !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfDomain { dim: 0, value: t });
    }
    Ok(())
}

/// Evaluates the order-`order` basis at `t ∈ [0, 1]`.
pub fn eval_basis(order: usize, t: f64) -> Result<Vec<f64>> {
    eval_basis_ext(order, t, false)
}

/// As [`eval_basis`], with `allow_outside` opting into evaluation off the unit interval.
pub fn eval_basis_ext(order: usize, t: f64, allow_outside: bool) -> Result<Vec<f64>> {
    let basis = BernsteinBasis::new(order)?;
    check_unit(t, allow_outside)?;
    Ok(basis.eval(t))
}

/// Element-wise square of [`eval_basis`].
pub fn eval_basis_squared(order: usize, t: f64) -> Result<Vec<f64>> {
    let mut v = eval_basis(order, t)?;
    v.iter_mut().for_each(|x| *x *= *x);
    Ok(v)
}

/// Solves `A x = b` in place by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        let pivot = a[pivot_row][col];
        if pivot.abs() < PIVOT_TOLERANCE {
            return Err(Error::SingularSystem { column: col, pivot });
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

/// The knot system `A_{ij} = B_j(i/ν)^2`.
pub fn knot_system(order: usize) -> Result<Vec<Vec<f64>>> {
    let basis = BernsteinBasis::new(order)?;
    Ok((0..=order)
        .map(|i| {
            let mut row = vec![0.0; order + 1];
            basis.eval_squared_into(i as f64 / order as f64, &mut row);
            row
        })
        .collect())
}

/// Per-dimension variance scale `ς` solving `A ς = 1` on the knots.
pub fn solve_prior_scale(order: usize) -> Result<Vec<f64>> {
    let a = knot_system(order)?;
    let scale = solve_dense(a, vec![1.0; order + 1])?;
    let min_entry = scale.iter().copied().fold(f64::INFINITY, f64::min);
    // Positivity is not monotone in the order beyond the cap, so the cap is
    // enforced even when a particular solve happens to come out positive.
    if min_entry <= 0.0 || order > MAX_PRIOR_ORDER {
        return Err(Error::NonPositiveScale { order, min_entry });
    }
    Ok(scale)
}

/// Prior variance scales for every input dimension plus the ensemble factor.
///
/// The prior variance of control point `(i_1, …, i_d)` in one ensemble member
/// is `Π_γ ensemble_factor · ς_γ(i_γ)`, so the `r` independent members sum to
/// the single-member prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorScale {
    pub per_dim: Vec<Vec<f64>>,
    pub ensemble_factor: f64,
}

impl PriorScale {
    pub fn new(orders: &[usize], ensemble_size: usize) -> Result<Self> {
        if ensemble_size == 0 {
            return Err(Error::InvalidArgument("ensemble size must be >= 1".into()));
        }
        if orders.is_empty() {
            return Err(Error::InvalidArgument("at least one input dimension is required".into()));
        }
        let per_dim = orders
            .iter()
            .map(|&o| solve_prior_scale(o))
            .collect::<Result<Vec<_>>>()?;
        let ensemble_factor = (ensemble_size as f64).powf(-1.0 / orders.len() as f64);
        Ok(PriorScale {
            per_dim,
            ensemble_factor,
        })
    }

    /// `ς_γ` multiplied by the ensemble factor.
    pub fn scaled(&self, dim: usize) -> Vec<f64> {
        self.per_dim[dim]
            .iter()
            .map(|s| s * self.ensemble_factor)
            .collect()
    }
}
