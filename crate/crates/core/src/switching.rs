//! Switching functions `g(s) = <e^{As} b, ζ>` of linear systems: evaluation,
//! zeros, the derivative-based interval decomposition of `[0, T]` and the
//! explicit bounds on the number of intervals and switchings.
//!
//! All functions of one `(A, b, T)` share a [`SwitchingBasis`]: the vectors
//! `e^{A s_k} A^i b` and `∫_0^{s_k} e^{Ar} b dr` on a uniform grid of
//! [`GRID_CELLS`] cells. Values at grid points cost one dot product per
//! covector; off-grid values are propagated from the nearest grid point.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Number of uniform sampling cells on `[0, T]`.
pub const GRID_CELLS: usize = 4096;
/// Grid points between exact exponential anchors. Also the width of the
/// coarse cells used to skip zero-free stretches.
pub const ANCHOR_EVERY: usize = 64;
/// Time accuracy of zeros and interval endpoints.
pub const TIME_TOL: f64 = 1e-10;
/// Intervals shorter than this are dropped from the decomposition.
pub const MERGE_LEN: f64 = 1e-9;
/// Slack of the pointwise lower bound checks.
pub const BOUND_SLACK: f64 = 1e-9;
/// Relative magnitude below which a sampled value carries no sign.
const SIGN_FLOOR: f64 = 1e-13;

/// Grid cache of `e^{A s} A^i b` (`i = 0..=n`) and `∫_0^s e^{Ar} b dr`.
#[derive(Debug, Clone)]
pub struct SwitchingBasis {
    n: usize,
    column: usize,
    horizon: f64,
    h: f64,
    a: Matrix,
    at: Matrix,
    aug: Matrix,
    a_norm: f64,
    l_const: f64,
    rank: usize,
    powers: Vec<Vector>,
    /// Per grid point: `n + 2` columns of length `n`.
    data: Vec<f64>,
    stride: usize,
    /// Bound on `max ||e^{As} A b||` over each coarse cell.
    cell_slope: Vec<f64>,
}

impl SwitchingBasis {
    /// Basis for `(A, b)` on `[0, horizon]`.
    pub fn new(a: &Matrix, b: &Vector, horizon: f64) -> Result<Self> {
        Self::for_column(a, b, horizon, 0)
    }

    /// As [`SwitchingBasis::new`], recording the input column for diagnostics.
    pub fn for_column(a: &Matrix, b: &Vector, horizon: f64, column: usize) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || b.len() != n {
            return Err(Error::Dimension("switching basis needs A n×n and b of length n".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        let k = linalg::controllability_matrix(a, b)?;
        let rank = linalg::numerical_rank(&k);
        let l_const = linalg::min_singular_value(&k);
        let a_norm = linalg::op_norm(a);

        let mut powers = Vec::with_capacity(n + 1);
        let mut p = b.clone();
        for _ in 0..=n {
            powers.push(p.clone());
            p = a * p;
        }
        let mut aug = Matrix::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(a);
        aug.view_mut((0, n), (n, 1)).copy_from(b);

        let cols = n + 2;
        let stride = cols * n;
        let h = horizon / GRID_CELLS as f64;
        let mut data = vec![0.0; (GRID_CELLS + 1) * stride];
        let mut block = Matrix::zeros(n, n + 1);
        for (i, pw) in powers.iter().enumerate() {
            block.set_column(i, pw);
        }
        let e_h = linalg::expm(a, h)?;
        let phi_h = linalg::expm(&aug, h)?.view((0, n), (n, 1)).into_owned();
        let mut cur = block.clone();
        let mut phi = Vector::zeros(n);
        for k in 0..=GRID_CELLS {
            if k % ANCHOR_EVERY == 0 && k > 0 {
                let s = k as f64 * h;
                cur = linalg::expm(a, s)? * &block;
                phi = linalg::expm(&aug, s)?.view((0, n), (n, 1)).column(0).into_owned();
            }
            let base = k * stride;
            data[base..base + n * (n + 1)].copy_from_slice(cur.as_slice());
            data[base + n * (n + 1)..base + stride].copy_from_slice(phi.as_slice());
            if k < GRID_CELLS {
                cur = &e_h * &cur;
                phi = phi_h.column(0) + &e_h * &phi;
            }
        }

        let growth = (a_norm * h).exp();
        let cell_slope = (0..GRID_CELLS / ANCHOR_EVERY)
            .map(|c| {
                (c * ANCHOR_EVERY..(c + 1) * ANCHOR_EVERY)
                    .map(|k| {
                        let base = k * stride + n;
                        data[base..base + n].iter().map(|v| v * v).sum::<f64>().sqrt()
                    })
                    .fold(0.0, f64::max)
                    * growth
            })
            .collect();

        Ok(Self {
            n,
            column,
            horizon,
            h,
            a: a.clone(),
            at: a.transpose(),
            aug,
            a_norm,
            l_const,
            rank,
            powers,
            data,
            stride,
            cell_slope,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Lower constant of the derivative-sum bound: smallest singular value of `K`.
    pub fn l_const(&self) -> f64 {
        self.l_const
    }

    /// Operator 2-norm of `A`.
    pub fn a_norm(&self) -> f64 {
        self.a_norm
    }

    pub fn is_normal(&self) -> bool {
        self.rank == self.n
    }

    pub fn require_normal(&self) -> Result<()> {
        if self.is_normal() {
            Ok(())
        } else {
            Err(Error::NotNormal { column: self.column, rank: self.rank, n: self.n })
        }
    }

    /// `A^i b` for `i = 0..=n`.
    pub fn powers(&self) -> &[Vector] {
        &self.powers
    }

    pub fn grid_time(&self, k: usize) -> f64 {
        if k == GRID_CELLS {
            self.horizon
        } else {
            k as f64 * self.h
        }
    }

    fn grid_column(&self, k: usize, i: usize) -> &[f64] {
        let base = k * self.stride + i * self.n;
        &self.data[base..base + self.n]
    }

    fn nearest_index(&self, s: f64) -> usize {
        ((s / self.h).round().max(0.0) as usize).min(GRID_CELLS)
    }

    /// `∫_0^s e^{Ar} b dr`.
    pub fn integral(&self, s: f64) -> Vector {
        let k = self.nearest_index(s);
        let delta = s - self.grid_time(k);
        let phi = Vector::from_column_slice(self.grid_column(k, self.n + 1));
        if delta == 0.0 {
            return phi;
        }
        let mut z = Vector::zeros(self.n + 1);
        z.rows_mut(0, self.n).copy_from(&phi);
        z[self.n] = 1.0;
        linalg::expm_apply(&self.aug, delta, &z).rows(0, self.n).into_owned()
    }

    /// `e^{As} b`.
    pub fn flow(&self, s: f64) -> Vector {
        let k = self.nearest_index(s);
        let delta = s - self.grid_time(k);
        let v = Vector::from_column_slice(self.grid_column(k, 0));
        if delta == 0.0 {
            v
        } else {
            linalg::expm_apply(&self.a, delta, &v)
        }
    }

    fn dot_grid(&self, zeta: &[f64], k: usize, i: usize) -> f64 {
        self.grid_column(k, i).iter().zip(zeta).map(|(x, y)| x * y).sum()
    }

    /// `g^{(i)}(s)` for `i = 0..=n`.
    fn eval_all(&self, zeta: &Vector, s: f64) -> Vec<f64> {
        let k = self.nearest_index(s);
        let delta = s - self.grid_time(k);
        let w = if delta == 0.0 { zeta.clone() } else { linalg::expm_apply(&self.at, delta, zeta) };
        (0..=self.n).map(|i| self.dot_grid(w.as_slice(), k, i)).collect()
    }

    fn eval_order(&self, zeta: &Vector, i: usize, s: f64) -> f64 {
        let k = self.nearest_index(s);
        let delta = s - self.grid_time(k);
        if delta == 0.0 {
            return self.dot_grid(zeta.as_slice(), k, i);
        }
        let w = linalg::expm_apply(&self.at, delta, zeta);
        self.dot_grid(w.as_slice(), k, i)
    }

    /// Threshold `c(s) = L e^{-||A|| s} / n` of the interval decomposition.
    pub fn threshold(&self, s: f64) -> f64 {
        self.l_const * (-self.a_norm * s).exp() / self.n as f64
    }
}

/// A zero of the switching function with its sign change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zero {
    pub time: f64,
    pub sign_before: i8,
    pub sign_after: i8,
}

/// Result of the pointwise derivative-sum lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// Closed interval `[start, end]`.
pub type Interval = (f64, f64);

/// Interval decomposition of `[0, T]` for one covector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingProfile {
    pub horizon: f64,
    pub zeros: Vec<Zero>,
    /// `intervals[i]` is the set `I_i` on which `|g^{(i)}| >= c(s)`.
    pub intervals: Vec<Vec<Interval>>,
    /// Interval-count bounds `N_0..N_{n-2}`.
    pub counts: Vec<f64>,
    pub l_const: f64,
    pub a_norm: f64,
    pub n: usize,
}

impl SwitchingProfile {
    /// `c(s) = L e^{-||A|| s} / n`.
    pub fn threshold(&self, s: f64) -> f64 {
        self.l_const * (-self.a_norm * s).exp() / self.n as f64
    }
}

/// `g(s) = <e^{As} b, ζ>` with unit `ζ` on the horizon of its basis.
#[derive(Debug, Clone)]
pub struct SwitchingFunction {
    basis: Arc<SwitchingBasis>,
    zeta: Vector,
}

impl SwitchingFunction {
    /// Builds a private basis; prefer [`SwitchingFunction::with_basis`] when
    /// many covectors share `(A, b, T)`.
    pub fn new(a: &Matrix, b: &Vector, zeta: &Vector, horizon: f64) -> Result<Self> {
        Self::with_basis(Arc::new(SwitchingBasis::new(a, b, horizon)?), zeta)
    }

    /// `ζ` is normalized; the zero covector is rejected.
    pub fn with_basis(basis: Arc<SwitchingBasis>, zeta: &Vector) -> Result<Self> {
        if zeta.len() != basis.n {
            return Err(Error::Dimension(format!("covector has length {}, expected {}", zeta.len(), basis.n)));
        }
        let norm = zeta.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Degenerate("covector must be nonzero and finite".into()));
        }
        Ok(Self { basis, zeta: zeta / norm })
    }

    pub fn basis(&self) -> &SwitchingBasis {
        &self.basis
    }

    pub fn zeta(&self) -> &Vector {
        &self.zeta
    }

    pub fn horizon(&self) -> f64 {
        self.basis.horizon
    }

    /// `g^{(i)}(s) = <e^{As} A^i b, ζ>` for `0 <= i <= n-1`, `0 <= s <= T + 1`.
    pub fn eval_g(&self, i: usize, s: f64) -> Result<f64> {
        let n = self.basis.n;
        if i >= n {
            return Err(Error::OrderOutOfRange { order: i, n });
        }
        if !(s.is_finite() && (0.0..=self.horizon() + 1.0).contains(&s)) {
            return Err(Error::InvalidArgument(format!("time {s} outside [0, T+1]")));
        }
        Ok(self.basis.eval_order(&self.zeta, i, s))
    }

    /// `g^{(i)}(s)` for every order `0..=n`, without range checks.
    pub fn derivatives(&self, s: f64) -> Vec<f64> {
        self.basis.eval_all(&self.zeta, s)
    }

    fn g(&self, s: f64) -> f64 {
        self.basis.eval_order(&self.zeta, 0, s)
    }

    /// `Σ_{i<n} |g^{(i)}(s)| >= L e^{-||A|| s}`.
    pub fn sum_derivative_lower_bound(&self, s: f64) -> Result<LowerBoundCheck> {
        self.basis.require_normal()?;
        let d = self.derivatives(s);
        let lhs: f64 = d[..self.basis.n].iter().map(|v| v.abs()).sum();
        let rhs = self.basis.l_const * (-self.basis.a_norm * s).exp();
        Ok(LowerBoundCheck { lhs, rhs, ok: lhs >= rhs - BOUND_SLACK })
    }

    /// Sign-changing zeros of `g` in `(0, T)`, sorted.
    ///
    /// Coarse cells where `|g(left)| + |g(right)|` exceeds the slope bound times
    /// the cell width cannot contain a zero and are skipped; the remaining cells
    /// are sampled at the full grid density and sign changes are refined.
    pub fn find_zeros(&self) -> Result<Vec<Zero>> {
        self.basis.require_normal()?;
        Ok(self.sign_changes())
    }

    /// As [`SwitchingFunction::find_zeros`] without the normality gate.
    pub fn sign_changes(&self) -> Vec<Zero> {
        let basis = &*self.basis;
        let z = self.zeta.as_slice();
        let floor = SIGN_FLOOR * self.scale();
        let sign_of = |v: f64| -> i8 {
            if v > floor {
                1
            } else if v < -floor {
                -1
            } else {
                0
            }
        };

        let mut zeros = Vec::new();
        let mut last: Option<(f64, f64, i8)> = None;
        let mut visit = |s: f64, v: f64, zeros: &mut Vec<Zero>| {
            let sg = sign_of(v);
            if sg == 0 {
                return;
            }
            if let Some((sl, vl, sgl)) = last {
                if sgl != sg {
                    let t = refine_root(|x| self.g(x), sl, vl, s, v);
                    if t > TIME_TOL && t < basis.horizon - TIME_TOL {
                        zeros.push(Zero { time: t, sign_before: sgl, sign_after: sg });
                    }
                }
            }
            last = Some((s, v, sg));
        };

        let coarse = GRID_CELLS / ANCHOR_EVERY;
        for c in 0..coarse {
            let k0 = c * ANCHOR_EVERY;
            let k1 = k0 + ANCHOR_EVERY;
            let gl = basis.dot_grid(z, k0, 0);
            let gr = basis.dot_grid(z, k1, 0);
            let width = basis.grid_time(k1) - basis.grid_time(k0);
            if c == 0 {
                visit(basis.grid_time(k0), gl, &mut zeros);
            }
            if gl.abs() + gr.abs() > basis.cell_slope[c] * width * (1.0 + 1e-12) + floor {
                visit(basis.grid_time(k1), gr, &mut zeros);
                continue;
            }
            for k in k0 + 1..=k1 {
                visit(basis.grid_time(k), basis.dot_grid(z, k, 0), &mut zeros);
            }
        }
        zeros
    }

    /// Sign of `g` on `(last zero, T)`; `0` only if `g` vanishes there.
    pub fn terminal_sign(&self, zeros: &[Zero]) -> i8 {
        if let Some(last) = zeros.last() {
            return last.sign_after;
        }
        // No sign change in (0, T): any point with a definite sign decides.
        let floor = SIGN_FLOOR * self.scale();
        let z = self.zeta.as_slice();
        for k in (0..=GRID_CELLS).rev() {
            let v = self.basis.dot_grid(z, k, 0);
            if v.abs() > floor {
                return if v > 0.0 { 1 } else { -1 };
            }
        }
        0
    }

    fn scale(&self) -> f64 {
        let n = self.basis.n;
        (0..=GRID_CELLS)
            .step_by(ANCHOR_EVERY)
            .map(|k| self.basis.grid_column(k, 0).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE)
            * (n as f64).sqrt().max(1.0)
    }

    /// Decomposition `[0, T] = I_0 ∪ ... ∪ I_{n-1}`: `I_0` where `|g| >= c`,
    /// each later `I_i` carved from the remainder by `|g^{(i)}| >= c`, and
    /// `I_{n-1}` whatever is left.
    pub fn decompose_intervals(&self) -> Result<SwitchingProfile> {
        let basis = &*self.basis;
        basis.require_normal()?;
        let n = basis.n;
        let horizon = basis.horizon;
        let mut intervals = Vec::with_capacity(n);
        let mut rest: Vec<Interval> = vec![(0.0, horizon)];
        for i in 0..n - 1 {
            let strong = self.superlevel_set(i);
            let taken = drop_short(intersect(&rest, &strong));
            rest = drop_short(subtract(&rest, &strong));
            intervals.push(taken);
        }
        intervals.push(rest);
        let bounds = interval_count_bounds(basis);
        Ok(SwitchingProfile {
            horizon,
            zeros: self.find_zeros()?,
            intervals,
            counts: bounds,
            l_const: basis.l_const,
            a_norm: basis.a_norm,
            n,
        })
    }

    /// `{s ∈ [0,T] : |g^{(i)}(s)| >= c(s)}` from dense samples with refined
    /// endpoints. Endpoints are taken on the inside of the final bracket.
    fn superlevel_set(&self, i: usize) -> Vec<Interval> {
        let basis = &*self.basis;
        let z = self.zeta.as_slice();
        let phi = |s: f64| basis.eval_order(&self.zeta, i, s).abs() - basis.threshold(s);
        let mut out = Vec::new();
        let mut start: Option<f64> = None;
        let mut prev = (0.0, f64::NAN);
        for k in 0..=GRID_CELLS {
            let s = basis.grid_time(k);
            let v = basis.dot_grid(z, k, i).abs() - basis.threshold(s);
            let inside = v >= 0.0;
            if k == 0 {
                if inside {
                    start = Some(0.0);
                }
            } else {
                let was_inside = prev.1 >= 0.0;
                if inside && !was_inside {
                    start = Some(bisect_boundary(&phi, prev.0, s, false));
                } else if !inside && was_inside {
                    let end = bisect_boundary(&phi, prev.0, s, true);
                    out.push((start.take().unwrap_or(prev.0), end));
                }
            }
            prev = (s, v);
        }
        if let Some(s0) = start {
            out.push((s0, basis.horizon));
        }
        out
    }
}

/// Boundary of `{phi >= 0}` inside `[lo, hi]` where exactly one end is inside.
/// Returns the inside end of the final bracket.
fn bisect_boundary(phi: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, lo_inside: bool) -> f64 {
    while hi - lo > TIME_TOL {
        let mid = 0.5 * (lo + hi);
        if (phi(mid) >= 0.0) == lo_inside {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo_inside {
        lo
    } else {
        hi
    }
}

/// Illinois iteration on a sign-changing bracket, falling back to bisection
/// when the bracket stalls.
pub(crate) fn refine_root(f: impl Fn(f64) -> f64, mut a: f64, mut fa: f64, mut b: f64, mut fb: f64) -> f64 {
    let mut side = 0i8;
    for _ in 0..200 {
        if (b - a).abs() <= TIME_TOL {
            break;
        }
        let width = b - a;
        let mut c = (a * fb - b * fa) / (fb - fa);
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let fc = f(c);
        if fc == 0.0 {
            return c;
        }
        if (fc > 0.0) == (fb > 0.0) {
            b = c;
            fb = fc;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        } else {
            a = c;
            fa = fc;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        }
        if b - a > 0.5 * width {
            let m = 0.5 * (a + b);
            let fm = f(m);
            if fm == 0.0 {
                return m;
            }
            if (fm > 0.0) == (fb > 0.0) {
                b = m;
                fb = fm;
            } else {
                a = m;
                fa = fm;
            }
            side = 0;
        }
    }
    if fa.abs() < fb.abs() {
        a
    } else {
        b
    }
}

fn intersect(x: &[Interval], y: &[Interval]) -> Vec<Interval> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < x.len() && j < y.len() {
        let lo = x[i].0.max(y[j].0);
        let hi = x[i].1.min(y[j].1);
        if lo < hi {
            out.push((lo, hi));
        }
        if x[i].1 < y[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn subtract(x: &[Interval], y: &[Interval]) -> Vec<Interval> {
    let mut out = Vec::new();
    for &(mut lo, hi) in x {
        for &(a, b) in y {
            if b <= lo || a >= hi {
                continue;
            }
            if a > lo {
                out.push((lo, a));
            }
            lo = lo.max(b);
            if lo >= hi {
                break;
            }
        }
        if lo < hi {
            out.push((lo, hi));
        }
    }
    out
}

fn drop_short(v: Vec<Interval>) -> Vec<Interval> {
    v.into_iter().filter(|(a, b)| b - a >= MERGE_LEN).collect()
}

/// Bounds `N_0..N_{n-2}` on the number of intervals of the remainders.
fn interval_count_bounds(basis: &SwitchingBasis) -> Vec<f64> {
    count_bounds(basis.horizon, basis.l_const, basis.a_norm, &basis.powers)
}

/// `N_0 = n²/(n-1) T/L e^{2||A||T} Σ_{i=1}^{n-1} ||A^{i+1} b|| + n - 1` and
/// `N_i = n(n-i)/(n-i-1) T/L e^{2||A||T} Σ_{m=i+1}^{n-1} ||A^{m+1} b|| + N_{i-1}(n-i-1)`.
fn count_bounds(horizon: f64, l_const: f64, a_norm: f64, powers: &[Vector]) -> Vec<f64> {
    let n = powers.len() - 1;
    let nf = n as f64;
    let growth = horizon / l_const * (2.0 * a_norm * horizon).exp();
    let tail = |from: usize| -> f64 { (from..n).map(|m| powers[m + 1].norm()).sum() };
    let mut counts: Vec<f64> = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let fi = i as f64;
        let value = if i == 0 {
            nf * nf / (nf - 1.0) * growth * tail(1) + nf - 1.0
        } else {
            nf * (nf - fi) / (nf - fi - 1.0) * growth * tail(i + 1) + counts[i - 1] * (nf - fi - 1.0)
        };
        counts.push(value);
    }
    counts
}

/// Interval-count and zero-count bounds for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchBound {
    /// `N_0..N_{n-2}`.
    pub counts: Vec<f64>,
    /// Upper bound on the number of intervals of each `I_i`.
    pub interval_caps: Vec<u64>,
    /// Upper bound on the number of zeros of `g` in `(0, T)`, any unit `ζ`.
    pub zero_bound: u64,
}

fn floor_to_u64(x: f64) -> u64 {
    if !x.is_finite() || x >= u64::MAX as f64 {
        u64::MAX
    } else {
        x.max(0.0).floor() as u64
    }
}

/// Detailed bounds: `I_0` has at most `N_0 + 1` intervals, `I_i` at most
/// `N_i + N_{i-1}`, `I_{n-1}` at most `N_{n-2}`; `g` has no zeros on `I_0` and
/// at most `i` zeros on each interval of `I_i`.
pub fn switch_count_bounds(a: &Matrix, b: &Vector, horizon: f64) -> Result<SwitchBound> {
    let n = a.nrows();
    if !a.is_square() || b.len() != n {
        return Err(Error::Dimension("A n×n and b of length n required".into()));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let k = linalg::controllability_matrix(a, b)?;
    let rank = linalg::numerical_rank(&k);
    if rank < n {
        return Err(Error::NotNormal { column: 0, rank, n });
    }
    let mut powers = Vec::with_capacity(n + 1);
    let mut p = b.clone();
    for _ in 0..=n {
        powers.push(p.clone());
        p = a * p;
    }
    let counts = count_bounds(horizon, linalg::min_singular_value(&k), linalg::op_norm(a), &powers);
    let floors: Vec<u64> = counts.iter().map(|&c| floor_to_u64(c)).collect();
    let mut caps = Vec::with_capacity(n);
    for i in 0..n {
        let cap = if i == 0 {
            floors[0].saturating_add(1)
        } else if i == n - 1 {
            floors[n - 2]
        } else {
            floors[i].saturating_add(floors[i - 1])
        };
        caps.push(cap);
    }
    let zero_bound = caps
        .iter()
        .enumerate()
        .skip(1)
        .fold(0u64, |acc, (i, &c)| acc.saturating_add(c.saturating_mul(i as u64)));
    Ok(SwitchBound { counts, interval_caps: caps, zero_bound })
}

/// Upper bound on the number of zeros of `g` in `(0, T)` valid for every
/// unit covector.
pub fn switch_count_bound(a: &Matrix, b: &Vector, horizon: f64) -> Result<u64> {
    Ok(switch_count_bounds(a, b, horizon)?.zero_bound)
}

/// Pointwise check `Σ_{i<n} |<e^{As} A^i b, ζ>| >= L e^{-||A|| s}` with a
/// direct exponential, for sweeps that do not need a grid.
pub fn sum_derivative_lower_bound(a: &Matrix, b: &Vector, zeta: &Vector, s: f64) -> Result<LowerBoundCheck> {
    let n = a.nrows();
    let k = linalg::controllability_matrix(a, b)?;
    let rank = linalg::numerical_rank(&k);
    if rank < n {
        return Err(Error::NotNormal { column: 0, rank, n });
    }
    let norm = zeta.norm();
    if !(norm > 0.0) {
        return Err(Error::Degenerate("covector must be nonzero".into()));
    }
    let w = linalg::expm(&a.transpose(), s)? * (zeta / norm);
    let lhs: f64 = (k.transpose() * w).iter().map(|v| v.abs()).sum();
    let rhs = linalg::min_singular_value(&k) * (-linalg::op_norm(a) * s).exp();
    Ok(LowerBoundCheck { lhs, rhs, ok: lhs >= rhs - BOUND_SLACK })
}

/// Outcome of [`appendix_bounds_selftest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixReport {
    pub trials: usize,
    pub integral_checks: usize,
    pub integral_violations: usize,
    pub growth_checks: usize,
    pub growth_violations: usize,
    /// Smallest relative slack observed over all checks (negative on violation).
    pub worst_slack: f64,
}

impl AppendixReport {
    pub fn violations(&self) -> usize {
        self.integral_violations + self.growth_violations
    }
}

const GROWTH_GRID: usize = 400;

/// Randomized checks of two integral inequalities:
///
/// * for `K: (a,b) -> [0,1]` piecewise constant and `k >= 0`,
///   `∫ (t-a)^k K >= (∫ K)^{k+1} / (k+1)` and the same with `(b-t)^k`;
/// * for monotone `f` with `|f'(s)| >= C (s-a)^k`, `|f(s)| >= C/(k+1) |c-s|^{k+1}`
///   around a zero `c`, or the one-sided bounds when there is none.
///
/// Integrals of piecewise-constant `K` against powers are evaluated in closed
/// form.
pub fn appendix_bounds_selftest(trials: usize, seed: u64) -> AppendixReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AppendixReport {
        trials,
        integral_checks: 0,
        integral_violations: 0,
        growth_checks: 0,
        growth_violations: 0,
        worst_slack: f64::INFINITY,
    };
    for _ in 0..trials {
        let k = rng.gen_range(0..=3u32);
        let a = rng.gen_range(-2.0..2.0);
        let b = a + rng.gen_range(0.05..3.0);
        let pieces = rng.gen_range(1..=20usize);
        let mut cuts: Vec<f64> = (0..pieces - 1).map(|_| rng.gen_range(a..b)).collect();
        cuts.push(a);
        cuts.push(b);
        cuts.sort_by(f64::total_cmp);
        let values: Vec<f64> = (0..pieces)
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen_range(0.0..=1.0),
            })
            .collect();
        let (left, right, mass) = weighted_integrals(&cuts, &values, k);
        let rhs = mass.powi(k as i32 + 1) / f64::from(k + 1);
        for lhs in [left, right] {
            report.integral_checks += 1;
            let slack = lhs - rhs;
            let tol = 1e-12 * (1.0 + rhs.abs());
            report.worst_slack = report.worst_slack.min(slack / (1.0 + rhs.abs()));
            if slack < -tol {
                report.integral_violations += 1;
            }
        }

        let (checks, violations, worst) = growth_trial(&mut rng, k);
        report.growth_checks += checks;
        report.growth_violations += violations;
        report.worst_slack = report.worst_slack.min(worst);
    }
    report
}

/// `(∫ (t-a)^k K, ∫ (b-t)^k K, ∫ K)` for piecewise-constant `K`.
fn weighted_integrals(cuts: &[f64], values: &[f64], k: u32) -> (f64, f64, f64) {
    let a = cuts[0];
    let b = *cuts.last().unwrap();
    let p = k as i32 + 1;
    let kp = f64::from(k + 1);
    let mut left = 0.0;
    let mut right = 0.0;
    let mut mass = 0.0;
    for (w, &v) in cuts.windows(2).zip(values) {
        let (lo, hi) = (w[0], w[1]);
        left += v * ((hi - a).powi(p) - (lo - a).powi(p)) / kp;
        right += v * ((b - lo).powi(p) - (b - hi).powi(p)) / kp;
        mass += v * (hi - lo);
    }
    (left, right, mass)
}

/// One random monotone polynomial `f` on `[a, b]` with `f' = ±(C w(s)^k + q(s))`,
/// `q >= 0`, and `w` either `s - a` or `b - s`.
fn growth_trial(rng: &mut ChaCha8Rng, k: u32) -> (usize, usize, f64) {
    let a = rng.gen_range(-1.0..1.0);
    let b = a + rng.gen_range(0.1..2.0);
    let c_const = rng.gen_range(0.1..3.0);
    let from_left = rng.gen_bool(0.5);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    // q(s) = γ (α + β (s - a))^2, integrated in closed form below.
    let (alpha, beta, gamma) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0));
    let kp = f64::from(k + 1);
    let primitive = |s: f64| -> f64 {
        let u = s - a;
        let main = if from_left {
            c_const * u.powi(k as i32 + 1) / kp
        } else {
            -c_const * (b - s).powi(k as i32 + 1) / kp
        };
        let q = gamma * (alpha * alpha * u + alpha * beta * u * u + beta * beta * u.powi(3) / 3.0);
        main + q
    };
    // Offset chosen so that a zero lies inside about two thirds of the time.
    let lo = primitive(a);
    let hi = primitive(b);
    let offset = -(lo + (hi - lo) * rng.gen_range(-0.25..1.25));
    let f = |s: f64| sign * (primitive(s) + offset);

    let (fa, fb) = (f(a), f(b));
    let zero = if fa == 0.0 {
        Some(a)
    } else if fb == 0.0 {
        Some(b)
    } else if (fa > 0.0) != (fb > 0.0) {
        let (mut l, mut r) = (a, b);
        for _ in 0..200 {
            let m = 0.5 * (l + r);
            if (f(m) > 0.0) == (fa > 0.0) {
                l = m;
            } else {
                r = m;
            }
        }
        Some(0.5 * (l + r))
    } else {
        None
    };

    let mut checks = 0;
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for j in 0..=GROWTH_GRID {
        let s = a + (b - a) * j as f64 / GROWTH_GRID as f64;
        let fs = f(s).abs();
        let bound = match zero {
            Some(c) => c_const / kp * (c - s).abs().powi(k as i32 + 1),
            None if j == 0 || j == GROWTH_GRID => continue,
            None => {
                let l = c_const / kp * (s - a).powi(k as i32 + 1);
                let r = c_const / kp * (b - s).powi(k as i32 + 1);
                // Either alternative suffices.
                if fs >= l { l } else { r }
            }
        };
        checks += 1;
        let tol = 1e-10 * (1.0 + bound + (hi - lo).abs());
        worst = worst.min((fs - bound) / (1.0 + bound));
        if fs < bound - tol {
            violations += 1;
        }
    }
    (checks, violations, worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn double_integrator() -> (Matrix, Vector) {
        (Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), Vector::from_vec(vec![0.0, 1.0]))
    }

    fn rotation() -> (Matrix, Vector) {
        (Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), Vector::from_vec(vec![0.0, 1.0]))
    }

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    /// Root of `s e^s = 1/2` by Newton's method.
    fn lambert_half() -> f64 {
        let mut s: f64 = 0.5;
        for _ in 0..50 {
            let f = s * s.exp() - 0.5;
            s -= f / ((1.0 + s) * s.exp());
        }
        s
    }

    #[test]
    fn eval_examples() {
        let (a, b) = double_integrator();
        let sf = SwitchingFunction::new(&a, &b, &v(&[1.0, 0.0]), 1.0).unwrap();
        for &s in &[0.0, 0.1234, 0.5, 0.999, 1.0, 1.7] {
            assert_abs_diff_eq!(sf.eval_g(0, s).unwrap(), s, epsilon = 1e-14);
            assert_abs_diff_eq!(sf.eval_g(1, s).unwrap(), 1.0, epsilon = 1e-14);
        }
        let sf = SwitchingFunction::new(&a, &b, &v(&[0.0, 1.0]), 1.0).unwrap();
        assert_abs_diff_eq!(sf.eval_g(0, 0.37).unwrap(), 1.0, epsilon = 1e-14);
        let (a, b) = rotation();
        let sf = SwitchingFunction::new(&a, &b, &v(&[1.0, 0.0]), 10.0).unwrap();
        for &s in &[0.0, 0.3, 2.0, 7.777, 10.5] {
            assert_abs_diff_eq!(sf.eval_g(0, s).unwrap(), s.sin(), epsilon = 1e-12);
            assert_abs_diff_eq!(sf.eval_g(1, s).unwrap(), s.cos(), epsilon = 1e-12);
        }
        assert!(matches!(sf.eval_g(2, 0.0), Err(Error::OrderOutOfRange { order: 2, n: 2 })));
    }

    #[test]
    fn lower_bound_examples() {
        let (a, b) = double_integrator();
        for zeta in [[1.0, 0.0], [0.0, 1.0]] {
            let sf = SwitchingFunction::new(&a, &b, &v(&zeta), 1.0).unwrap();
            let c = sf.sum_derivative_lower_bound(0.0).unwrap();
            assert_abs_diff_eq!(c.lhs, 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(c.rhs, 1.0, epsilon = 1e-14);
            assert!(c.ok);
        }
        let z = Matrix::zeros(2, 2);
        assert!(matches!(
            sum_derivative_lower_bound(&z, &v(&[1.0, 0.0]), &v(&[1.0, 0.0]), 0.1),
            Err(Error::NotNormal { .. })
        ));
    }

    #[test]
    fn zeros_examples() {
        let (a, b) = double_integrator();
        let sf = SwitchingFunction::new(&a, &b, &v(&[0.0, 1.0]), 1.0).unwrap();
        assert!(sf.find_zeros().unwrap().is_empty());

        let sf = SwitchingFunction::new(&a, &b, &v(&[1.0, -0.5]), 1.0).unwrap();
        let z = sf.find_zeros().unwrap();
        assert_eq!(z.len(), 1);
        assert_abs_diff_eq!(z[0].time, 0.5, epsilon = 1e-10);
        assert_eq!((z[0].sign_before, z[0].sign_after), (-1, 1));

        let (a, b) = rotation();
        let sf = SwitchingFunction::new(&a, &b, &v(&[1.0, 0.0]), 10.0).unwrap();
        let z = sf.find_zeros().unwrap();
        assert_eq!(z.len(), 3);
        for (zero, k) in z.iter().zip(1..) {
            assert_abs_diff_eq!(zero.time, k as f64 * std::f64::consts::PI, epsilon = 1e-10);
        }
        // Zeros at both ends of (0, π) are not interior.
        let sf = SwitchingFunction::new(&a, &b, &v(&[1.0, 0.0]), std::f64::consts::PI).unwrap();
        assert!(sf.find_zeros().unwrap().is_empty());
    }

    #[test]
    fn decomposition_of_linear_switching_function() {
        let (a, b) = double_integrator();
        let sf = SwitchingFunction::new(&a, &b, &v(&[0.0, 1.0]), 1.0).unwrap();
        let p = sf.decompose_intervals().unwrap();
        assert_eq!(p.intervals[0], vec![(0.0, 1.0)]);
        assert!(p.intervals[1].is_empty());

        let sf = SwitchingFunction::new(&a, &b, &v(&[1.0, 0.0]), 1.0).unwrap();
        let p = sf.decompose_intervals().unwrap();
        let s_star = lambert_half();
        assert_abs_diff_eq!(s_star, 0.351_733_711_249_196, epsilon = 1e-12);
        assert_eq!(p.intervals[0].len(), 1);
        assert_eq!(p.intervals[1].len(), 1);
        assert_abs_diff_eq!(p.intervals[0][0].0, s_star, epsilon = 1e-9);
        assert_abs_diff_eq!(p.intervals[0][0].1, 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(p.intervals[1][0].0, 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(p.intervals[1][0].1, s_star, epsilon = 1e-9);
    }

    #[test]
    fn rotation_decomposition_patches_zeros() {
        let (a, b) = rotation();
        let pi = std::f64::consts::PI;
        let sf = SwitchingFunction::new(&a, &b, &v(&[1.0, 0.0]), pi).unwrap();
        let p = sf.decompose_intervals().unwrap();
        // Dense-sampling oracle for |sin s| >= e^{-s}/2.
        let m = 200_000;
        let mut oracle_runs = 0;
        let mut inside = false;
        for j in 0..=m {
            let s = pi * j as f64 / m as f64;
            let now = s.sin().abs() >= (-s).exp() / 2.0;
            if now && !inside {
                oracle_runs += 1;
            }
            inside = now;
        }
        assert_eq!(p.intervals[0].len(), oracle_runs);
        // I_1 covers a patch at each end.
        assert_eq!(p.intervals[1].len(), 2);
        assert_eq!(p.intervals[1][0].0, 0.0);
        assert_eq!(p.intervals[1][1].1, pi);
        for (i, ivs) in p.intervals.iter().enumerate() {
            for &(lo, hi) in ivs {
                for j in 0..=100 {
                    let s = lo + (hi - lo) * j as f64 / 100.0;
                    let gi = sf.eval_g(i, s).unwrap().abs();
                    assert!(gi >= p.threshold(s) - BOUND_SLACK, "order {i} at {s}");
                }
            }
        }
    }

    #[test]
    fn bound_examples() {
        let (a, b) = double_integrator();
        let sb = switch_count_bounds(&a, &b, 1.0).unwrap();
        assert_abs_diff_eq!(sb.counts[0], 1.0, epsilon = 0.0);
        assert_eq!(sb.zero_bound, 1);

        let (a, b) = rotation();
        let sb = switch_count_bounds(&a, &b, 1.0).unwrap();
        let expected = 4.0 * std::f64::consts::E.powi(2) + 1.0;
        assert_abs_diff_eq!(sb.counts[0], expected, epsilon = 1e-12);
        assert_eq!(sb.zero_bound, 30);
        // Vanishing horizon leaves only the additive term.
        let sb = switch_count_bounds(&a, &b, 1e-12).unwrap();
        assert_eq!(sb.zero_bound, 1);
        assert!(switch_count_bound(&a, &b, 10.0).unwrap() >= 3);
        assert!(switch_count_bound(&Matrix::zeros(2, 2), &v(&[1.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn integral_and_flow_match_closed_forms() {
        let (a, b) = double_integrator();
        let basis = SwitchingBasis::new(&a, &b, 2.0).unwrap();
        for &s in &[0.0, 0.3, 1.0, 1.99, 2.0, 2.5] {
            let phi = basis.integral(s);
            assert_abs_diff_eq!(phi[0], s * s / 2.0, epsilon = 1e-13);
            assert_abs_diff_eq!(phi[1], s, epsilon = 1e-13);
            let f = basis.flow(s);
            assert_abs_diff_eq!(f[0], s, epsilon = 1e-13);
        }
    }

    #[test]
    fn selftest_equality_cases() {
        let (l, r, m) = weighted_integrals(&[0.0, 1.0], &[1.0], 1);
        assert_abs_diff_eq!(l, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.powi(2) / 2.0, 0.5, epsilon = 1e-15);
        let (l, _, m) = weighted_integrals(&[0.0, 1.0], &[0.0], 2);
        assert_eq!((l, m), (0.0, 0.0));
        let report = appendix_bounds_selftest(200, 7);
        assert_eq!(report.violations(), 0, "{report:?}");
        assert!(report.integral_checks == 400 && report.growth_checks > 0);
    }

    #[test]
    fn closed_form_integrals_match_quadrature() {
        let cuts = [0.2, 0.5, 0.9, 1.7];
        let vals = [0.3, 1.0, 0.0];
        let (l, r, m) = weighted_integrals(&cuts, &vals, 3);
        let step = 1e-5;
        let (mut ql, mut qr, mut qm) = (0.0, 0.0, 0.0);
        let mut t = cuts[0] + step / 2.0;
        while t < cuts[3] {
            let k = cuts.windows(2).position(|w| t >= w[0] && t < w[1]).map_or(0.0, |p| vals[p]);
            ql += (t - cuts[0]).powi(3) * k * step;
            qr += (cuts[3] - t).powi(3) * k * step;
            qm += k * step;
            t += step;
        }
        assert_abs_diff_eq!(l, ql, epsilon = 1e-6);
        assert_abs_diff_eq!(r, qr, epsilon = 1e-6);
        assert_abs_diff_eq!(m, qm, epsilon = 1e-6);
    }
}
