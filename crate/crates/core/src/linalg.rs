//! Dense kernels for the small matrices used throughout: matrix exponential,
//! controllability matrices and singular values.
//!
//! The exponential uses a fixed-order Taylor polynomial combined with scaling
//! and squaring. After scaling, `||A t|| / 2^s <= 1/2`, so the truncation error
//! of the order-18 polynomial is bounded by `0.5^19 / 19! * e^0.5 < 1e-22`
//! relative; squaring amplifies this by at most `2^s` in the worst case, which
//! stays well below `1e-12` for the norms admitted by [`MAX_EXPONENT_NORM`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest admissible `|t| * ||A||` for [`expm`].
pub const MAX_EXPONENT_NORM: f64 = 1e4;

/// Relative singular value threshold used for numerical rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

const TAYLOR_ORDER: usize = 18;
const SCALED_NORM_TARGET: f64 = 0.5;

/// `e^{A t}` by scaling and squaring with a truncated Taylor series.
pub fn expm(a: &Matrix, t: f64) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "expm needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !t.is_finite() || a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("expm input".into()));
    }
    let n = a.nrows();
    let norm = a.norm() * t.abs();
    if norm > MAX_EXPONENT_NORM {
        return Err(Error::ExpOverflow(norm));
    }
    if norm == 0.0 {
        return Ok(Matrix::identity(n, n));
    }
    let squarings = if norm > SCALED_NORM_TARGET {
        (norm / SCALED_NORM_TARGET).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a * (t / f64::from(2u32).powi(squarings as i32));

    // Horner: I + X(I + X/2(I + X/3(...)))
    let id = Matrix::identity(n, n);
    let mut acc = id.clone();
    for k in (1..=TAYLOR_ORDER).rev() {
        acc = &id + (&scaled * acc) / k as f64;
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::ExpOverflow(norm));
    }
    Ok(acc)
}

/// `e^{A t} v` without forming the exponential.
///
/// Splits `t` into substeps with `||A|| dt <= 1/2` and sums the Taylor series
/// of each substep until the terms drop below machine precision. Intended for
/// short steps where only a handful of terms are needed.
pub fn expm_apply(a: &Matrix, t: f64, v: &Vector) -> Vector {
    let norm = a.norm() * t.abs();
    let steps = if norm > SCALED_NORM_TARGET {
        (norm / SCALED_NORM_TARGET).ceil() as usize
    } else {
        1
    };
    let dt = t / steps as f64;
    let mut out = v.clone();
    for _ in 0..steps {
        let mut term = out.clone();
        let mut sum = out.clone();
        for k in 1..=40 {
            term = (a * term) * (dt / k as f64);
            sum += &term;
            if term.amax() <= f64::EPSILON * sum.amax() {
                break;
            }
        }
        out = sum;
    }
    out
}

/// `K = [b, A b, ..., A^{n-1} b]`.
pub fn controllability_matrix(a: &Matrix, b: &Vector) -> Result<Matrix> {
    let n = a.nrows();
    if !a.is_square() || b.len() != n {
        return Err(Error::Dimension(format!(
            "controllability matrix needs A n×n and b of length n (A {}x{}, b {})",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let mut k = Matrix::zeros(n, n);
    let mut col = b.clone();
    for j in 0..n {
        k.set_column(j, &col);
        col = a * col;
    }
    Ok(k)
}

/// Singular values sorted in decreasing order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Smallest singular value of a square matrix.
pub fn min_singular_value(m: &Matrix) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Operator 2-norm.
pub fn op_norm(m: &Matrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Numerical rank: singular values above `RANK_RTOL * sigma_max`.
pub fn numerical_rank(m: &Matrix) -> usize {
    let sv = singular_values(m);
    let Some(&top) = sv.first() else { return 0 };
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * top).count()
}
