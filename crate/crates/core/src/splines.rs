//! Cubic B-spline bases with first-order difference penalties (Bayesian P-splines).
//!
//! Knots are equally spaced: `M = C - 4` interior knots between the observed
//! minimum and maximum, extended by three equally spaced knots on each side so
//! that the `C` cubic basis functions form a partition of unity on the data
//! range. Columns are centered by their means over the construction points, so
//! a fitted smooth has zero empirical mean and constant coefficient vectors
//! contribute nothing.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

pub const DEGREE: usize = 3;
pub const MIN_DF: usize = DEGREE + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: serde::de::DeserializeOwned"))]
pub struct SplineBasis<T> {
    /// Boundary and interior knots `kappa_0 < ... < kappa_{M+1}`.
    knots: Vec<T>,
    /// Full knot sequence including the three extension knots at each end.
    full_knots: Vec<T>,
    n_basis: usize,
    /// Column means of the raw basis over the construction points.
    centers: Vec<T>,
    /// Centered basis evaluated at the construction points.
    #[serde(skip)]
    basis: Option<Array2<T>>,
}

impl<T: Real> SplineBasis<T> {
    /// Builds a `df`-column cubic basis over the range of `x` and evaluates it at `x`.
    pub fn build(x: &[T], df: usize) -> Result<Self> {
        if df < MIN_DF {
            return Err(Error::Spec(format!("spline degrees of freedom must be >= {MIN_DF}, got {df}")));
        }
        let lo = x.iter().copied().fold(T::infinity(), T::min);
        let hi = x.iter().copied().fold(T::neg_infinity(), T::max);
        if x.len() < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Degenerate("degenerate covariate range for spline basis".into()));
        }
        let n_interior = df - MIN_DF;
        let step = (hi - lo) / T::count(n_interior + 1);
        let knots: Vec<T> = (0..n_interior + 2)
            .map(|i| if i == n_interior + 1 { hi } else { lo + step * T::count(i) })
            .collect();
        let full_knots: Vec<T> = (0..df + DEGREE + 1)
            .map(|i| {
                let offset = i as i64 - DEGREE as i64;
                if offset == (n_interior + 1) as i64 {
                    hi
                } else {
                    lo + step * T::lit(offset as f64)
                }
            })
            .collect();
        let mut basis = Self { knots, full_knots, n_basis: df, centers: vec![T::zero(); df], basis: None };
        let raw = basis.raw_matrix(x);
        let n = T::count(x.len());
        let centers: Vec<T> = (0..df).map(|c| raw.column(c).iter().copied().sum::<T>() / n).collect();
        basis.centers = centers;
        basis.basis = Some(basis.center(raw));
        Ok(basis)
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn full_knots(&self) -> &[T] {
        &self.full_knots
    }

    pub fn centers(&self) -> &[T] {
        &self.centers
    }

    pub fn lower(&self) -> T {
        self.knots[0]
    }

    pub fn upper(&self) -> T {
        self.knots[self.knots.len() - 1]
    }

    /// Centered basis at the construction points; `None` after deserialization.
    pub fn matrix(&self) -> Option<&Array2<T>> {
        self.basis.as_ref()
    }

    /// Raw (uncentered) basis values at `x`, clamped to the knot range.
    pub fn raw_row(&self, x: T) -> Vec<T> {
        let mut row = vec![T::zero(); self.n_basis];
        let x = self.clamp(x);
        let span = self.find_span(x);
        let values = self.basis_funs(span, x);
        for (r, v) in values.iter().enumerate() {
            row[span - DEGREE + r] = *v;
        }
        row
    }

    /// Centered basis values at `x`.
    pub fn row(&self, x: T) -> Vec<T> {
        let mut row = self.raw_row(x);
        for (v, c) in row.iter_mut().zip(&self.centers) {
            *v = *v - *c;
        }
        row
    }

    pub fn raw_matrix(&self, xs: &[T]) -> Array2<T> {
        let mut out = Array2::zeros((xs.len(), self.n_basis));
        for (i, &x) in xs.iter().enumerate() {
            for (c, v) in self.raw_row(x).into_iter().enumerate() {
                out[[i, c]] = v;
            }
        }
        out
    }

    /// Centered basis at new points using the stored knots and centering constants.
    pub fn evaluate(&self, xs: &[T]) -> Array2<T> {
        let out = self.raw_matrix(xs);
        self.center(out)
    }

    fn center(&self, mut raw: Array2<T>) -> Array2<T> {
        for mut row in raw.rows_mut() {
            for (v, c) in row.iter_mut().zip(&self.centers) {
                *v = *v - *c;
            }
        }
        raw
    }

    fn clamp(&self, x: T) -> T {
        let (lo, hi) = (self.lower(), self.upper());
        if x < lo || x > hi {
            log::warn!(
                "spline evaluation point {x} outside fitted range [{lo}, {hi}]; clamping to boundary"
            );
            x.max(lo).min(hi)
        } else {
            x
        }
    }

    /// Knot span index `s` with `t_s <= x < t_{s+1}`, restricted to the data range.
    fn find_span(&self, x: T) -> usize {
        let last = self.n_basis - 1;
        if x >= self.full_knots[last + 1] {
            return last;
        }
        let mut lo = DEGREE;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.full_knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Cox-de Boor recurrence in triangular form; returns the `DEGREE + 1` nonzero values.
    fn basis_funs(&self, span: usize, x: T) -> [T; DEGREE + 1] {
        let t = &self.full_knots;
        let mut n = [T::zero(); DEGREE + 1];
        let mut left = [T::zero(); DEGREE + 1];
        let mut right = [T::zero(); DEGREE + 1];
        n[0] = T::one();
        for j in 1..=DEGREE {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = T::zero();
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }
}

/// First-order difference matrix `D` ((C-1) x C) and penalty `K = D^T D`.
pub fn difference_penalty<T: Real>(n_basis: usize) -> Result<(Array2<T>, Array2<T>)> {
    if n_basis < 2 {
        return Err(Error::Spec(format!("difference penalty needs at least 2 coefficients, got {n_basis}")));
    }
    let mut diff = Array2::zeros((n_basis - 1, n_basis));
    for r in 0..n_basis - 1 {
        diff[[r, r]] = -T::one();
        diff[[r, r + 1]] = T::one();
    }
    let penalty = diff.t().dot(&diff);
    Ok((diff, penalty))
}

/// `beta^T K beta` for the first-difference penalty, computed as a sum of squared differences.
pub fn penalty_quadratic<T: Real>(beta: &[T]) -> T {
    beta.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum()
}

/// Additive predictor `sum_j B_j beta_j + X_lin gamma` for every row.
///
/// `spline_bases[j]` holds the (already centered) basis rows for term `j`.
pub fn evaluate_additive<T: Real>(
    spline_bases: &[ArrayView2<T>],
    linear: ArrayView2<T>,
    spline_coefs: &[&[T]],
    linear_coefs: &[T],
) -> Result<Vec<T>> {
    if spline_bases.len() != spline_coefs.len() {
        return Err(Error::Dimension(format!(
            "{} spline terms but {} coefficient blocks",
            spline_bases.len(),
            spline_coefs.len()
        )));
    }
    if linear.ncols() != linear_coefs.len() {
        return Err(Error::Dimension(format!(
            "{} linear columns but {} linear coefficients",
            linear.ncols(),
            linear_coefs.len()
        )));
    }
    let n = linear.nrows();
    let mut out = vec![T::zero(); n];
    for (basis, coefs) in spline_bases.iter().zip(spline_coefs) {
        if basis.ncols() != coefs.len() || basis.nrows() != n {
            return Err(Error::Dimension(format!(
                "spline basis is {}x{} but expected {}x{}",
                basis.nrows(),
                basis.ncols(),
                n,
                coefs.len()
            )));
        }
        for (o, row) in out.iter_mut().zip(basis.rows()) {
            *o = *o + row.iter().zip(coefs.iter()).map(|(b, c)| *b * *c).sum::<T>();
        }
    }
    for (o, row) in out.iter_mut().zip(linear.rows()) {
        *o = *o + row.iter().zip(linear_coefs).map(|(x, g)| *x * *g).sum::<T>();
    }
    Ok(out)
}
