//! Bang-bang extremals of linear systems: `u_i(t) = sign <ζ, e^{A(T-t)} b_i>`.
//!
//! Endpoints are integrated exactly segment by segment, the support function
//! `h(ζ) = ∫_0^T Σ_i |g_i(s)| ds` is evaluated by adaptive Gauss-Legendre
//! quadrature split at the zeros of each `g_i`, and membership in the reachable
//! set is decided by maximizing `<ζ, x> - h(ζ)` over unit covectors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::switching::{SwitchingBasis, SwitchingFunction, Zero};
use crate::sysdef::LinearSystem;

/// Extremality tolerance `|<ζ, x> - h(ζ)|` of boundary samples.
pub const EXTREMALITY_TOL: f64 = 1e-7;
/// Absolute target of the support-function quadrature.
pub const QUADRATURE_TOL: f64 = 1e-12;
/// Relative factor of the boundary band in [`membership`].
pub const MEMBERSHIP_RTOL: f64 = 1e-7;
/// Sweep sizes for [`membership`].
pub const PLANAR_DIRECTIONS: usize = 720;
pub const ICOSPHERE_LEVEL: usize = 4;
pub const RANDOM_DIRECTIONS: usize = 4000;

/// Switching schedule of one input channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    pub initial_sign: i8,
    pub switch_times: Vec<f64>,
}

/// Piecewise-constant control with values in `{-1, 1}^m` on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BangBangControl {
    pub horizon: f64,
    pub channels: Vec<ChannelSchedule>,
}

impl BangBangControl {
    pub fn new(horizon: f64, channels: Vec<ChannelSchedule>) -> Result<Self> {
        if !(horizon.is_finite() && horizon >= 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be nonnegative, got {horizon}")));
        }
        for (i, ch) in channels.iter().enumerate() {
            if ch.initial_sign != 1 && ch.initial_sign != -1 {
                return Err(Error::InvalidArgument(format!("channel {i}: initial sign must be ±1")));
            }
            let increasing = ch.switch_times.windows(2).all(|w| w[0] < w[1]);
            let inside = ch.switch_times.iter().all(|&t| t > 0.0 && t < horizon);
            if !increasing || !inside {
                return Err(Error::InvalidArgument(format!(
                    "channel {i}: switch times must increase strictly inside (0, T)"
                )));
            }
        }
        Ok(Self { horizon, channels })
    }

    /// Constant control `u ≡ signs`.
    pub fn constant(horizon: f64, signs: &[i8]) -> Result<Self> {
        Self::new(
            horizon,
            signs.iter().map(|&s| ChannelSchedule { initial_sign: s, switch_times: Vec::new() }).collect(),
        )
    }

    pub fn control_dim(&self) -> usize {
        self.channels.len()
    }

    /// `initial_sign · (-1)^{#switches <= t}`.
    pub fn value(&self, channel: usize, t: f64) -> f64 {
        let ch = &self.channels[channel];
        let flips = ch.switch_times.partition_point(|&s| s <= t);
        f64::from(ch.initial_sign) * if flips % 2 == 0 { 1.0 } else { -1.0 }
    }

    pub fn values_at(&self, t: f64) -> Vec<f64> {
        (0..self.channels.len()).map(|i| self.value(i, t)).collect()
    }

    pub fn n_switches(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c.switch_times.len()).collect()
    }

    /// Sorted union of `0`, all switch times and `T`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self.channels.iter().flat_map(|c| c.switch_times.iter().copied()).collect();
        pts.push(0.0);
        pts.push(self.horizon);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }

    /// `t ↦ u(T - t)`.
    pub fn time_reversed(&self) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                let k = c.switch_times.len();
                ChannelSchedule {
                    initial_sign: if k % 2 == 0 { c.initial_sign } else { -c.initial_sign },
                    switch_times: c.switch_times.iter().rev().map(|&t| self.horizon - t).collect(),
                }
            })
            .collect();
        Self { horizon: self.horizon, channels }
    }
}

/// Boundary sample of the reachable set with its extremality residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub zeta: Vec<f64>,
    pub x: Vec<f64>,
    pub control: BangBangControl,
    pub horizon: f64,
    /// `h(ζ)` by quadrature.
    pub support: f64,
    /// `|<ζ, x> - h(ζ)|`.
    pub residual: f64,
}

impl BoundaryPoint {
    pub fn is_extremal(&self) -> bool {
        self.residual <= EXTREMALITY_TOL
    }
}

/// Status of a point relative to the reachable set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Inside,
    Boundary,
    Outside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub status: Status,
    /// `max_ζ <ζ, x> - h(ζ)` over unit covectors.
    pub margin: f64,
    /// Maximizing unit covector.
    pub zeta: Vec<f64>,
}

/// Per-channel switching bases of a system on a fixed horizon, shared by all
/// covectors.
#[derive(Debug, Clone)]
pub struct ReachableSet {
    sys: LinearSystem,
    horizon: f64,
    bases: Vec<Arc<SwitchingBasis>>,
}

impl ReachableSet {
    pub fn new(sys: &LinearSystem, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        let bases = (0..sys.control_dim())
            .map(|i| SwitchingBasis::for_column(sys.a(), &sys.column(i), horizon, i).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sys: sys.clone(), horizon, bases })
    }

    pub fn system(&self) -> &LinearSystem {
        &self.sys
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn switching(&self, zeta: &Vector) -> Result<Vec<SwitchingFunction>> {
        self.bases.iter().map(|b| SwitchingFunction::with_basis(b.clone(), zeta)).collect()
    }

    /// Zeros and terminal sign per channel.
    fn channel_zeros(&self, zeta: &Vector) -> Result<Vec<(Vec<Zero>, i8)>> {
        let mut out = Vec::with_capacity(self.bases.len());
        for (i, sf) in self.switching(zeta)?.into_iter().enumerate() {
            let zeros = sf.find_zeros()?;
            let sign = sf.terminal_sign(&zeros);
            if sign == 0 {
                return Err(Error::Inconsistent(format!("switching function of channel {i} vanishes")));
            }
            out.push((zeros, sign));
        }
        Ok(out)
    }

    /// `u_i(t) = sign g_i(T - t)`.
    pub fn control(&self, zeta: &Vector) -> Result<BangBangControl> {
        let channels = self
            .channel_zeros(zeta)?
            .into_iter()
            .map(|(zeros, sign)| ChannelSchedule {
                initial_sign: sign,
                switch_times: zeros.iter().rev().map(|z| self.horizon - z.time).collect(),
            })
            .collect();
        BangBangControl::new(self.horizon, channels)
    }

    /// Extremal endpoint `x(ζ) = Σ_i ∫_0^T e^{As} b_i sign g_i(s) ds`, summed from
    /// the cached primitives between consecutive zeros.
    pub fn endpoint(&self, zeta: &Vector) -> Result<Vector> {
        let n = self.sys.state_dim();
        let mut x = Vector::zeros(n);
        for (basis, (zeros, terminal)) in self.bases.iter().zip(self.channel_zeros(zeta)?) {
            let mut sign = if zeros.len() % 2 == 0 { terminal } else { -terminal };
            let mut prev = Vector::zeros(n);
            for z in &zeros {
                let cur = basis.integral(z.time);
                x += (&cur - &prev) * f64::from(sign);
                prev = cur;
                sign = -sign;
            }
            x += (basis.integral(self.horizon) - prev) * f64::from(sign);
        }
        Ok(x)
    }

    /// `h(ζ) = <ζ, x(ζ)>` from the extremal endpoint.
    pub fn support_via_endpoint(&self, zeta: &Vector) -> Result<f64> {
        let norm = zeta.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let unit = zeta / norm;
        Ok(norm * unit.dot(&self.endpoint(&unit)?))
    }

    /// `h(ζ)` by quadrature of `Σ_i |g_i|` split at sign changes.
    pub fn support(&self, zeta: &Vector) -> Result<f64> {
        let norm = zeta.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for sf in self.switching(zeta)? {
            let zeros = sf.sign_changes();
            let mut cuts = vec![0.0];
            cuts.extend(zeros.iter().map(|z| z.time));
            cuts.push(self.horizon);
            let g = |s: f64| sf.derivatives(s)[0].abs();
            for w in cuts.windows(2) {
                total += adaptive_gauss(&g, w[0], w[1], QUADRATURE_TOL, 30);
            }
        }
        Ok(norm * total)
    }

    /// Boundary sample for covector `ζ`.
    pub fn boundary_point(&self, zeta: &Vector) -> Result<BoundaryPoint> {
        let norm = zeta.norm();
        if !(norm > 0.0) {
            return Err(Error::Degenerate("covector must be nonzero".into()));
        }
        let unit = zeta / norm;
        let control = self.control(&unit)?;
        let x = integrate_linear(&self.sys, &control);
        let support = self.support(&unit)?;
        let residual = (unit.dot(&x) - support).abs();
        Ok(BoundaryPoint {
            zeta: unit.iter().copied().collect(),
            x: x.iter().copied().collect(),
            control,
            horizon: self.horizon,
            support,
            residual,
        })
    }

    /// `max_ζ <ζ, x> - h(ζ)`: direction sweep followed by local refinement.
    pub fn membership(&self, x: &Vector) -> Result<Membership> {
        let n = self.sys.state_dim();
        if x.len() != n {
            return Err(Error::Dimension(format!("point has length {}, expected {n}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query point".into()));
        }
        for b in &self.bases {
            b.require_normal()?;
        }
        let score = |z: &Vector| -> Result<f64> { Ok(z.dot(x) - self.support_via_endpoint(z)?) };
        let (margin, zeta) = if n == 2 {
            self.maximize_planar(&score)?
        } else {
            let dirs = if n == 3 {
                icosphere(ICOSPHERE_LEVEL)
            } else {
                random_directions(n, RANDOM_DIRECTIONS, 0x5eed)
            };
            let spacing = if n == 3 { 0.05 } else { 0.3 };
            maximize_sphere(&score, &dirs, spacing)?
        };
        let tol = MEMBERSHIP_RTOL * (1.0 + x.norm());
        let status = if margin < -tol {
            Status::Inside
        } else if margin <= tol {
            Status::Boundary
        } else {
            Status::Outside
        };
        Ok(Membership { status, margin, zeta: zeta.iter().copied().collect() })
    }

    fn maximize_planar(&self, score: &impl Fn(&Vector) -> Result<f64>) -> Result<(f64, Vector)> {
        let dir = |theta: f64| Vector::from_vec(vec![theta.cos(), theta.sin()]);
        let step = std::f64::consts::TAU / PLANAR_DIRECTIONS as f64;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for j in 0..PLANAR_DIRECTIONS {
            let v = score(&dir(j as f64 * step))?;
            if v > best.0 {
                best = (v, j);
            }
        }
        // Golden-section search on the bracketing arc.
        let center = best.1 as f64 * step;
        let (mut lo, mut hi) = (center - step, center + step);
        let r = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = hi - r * (hi - lo);
        let mut d = lo + r * (hi - lo);
        let mut fc = score(&dir(c))?;
        let mut fd = score(&dir(d))?;
        while hi - lo > 1e-10 {
            if fc > fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - r * (hi - lo);
                fc = score(&dir(c))?;
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + r * (hi - lo);
                fd = score(&dir(d))?;
            }
        }
        let (f, t) = if fc > fd { (fc, c) } else { (fd, d) };
        Ok(if f >= best.0 { (f, dir(t)) } else { (best.0, dir(center)) })
    }
}

/// Pattern search on the sphere from the best swept direction.
pub(crate) fn maximize_sphere(
    score: &impl Fn(&Vector) -> Result<f64>,
    dirs: &[Vector],
    spacing: f64,
) -> Result<(f64, Vector)> {
    let mut best_v = f64::NEG_INFINITY;
    let mut best = dirs[0].clone();
    for d in dirs {
        let v = score(d)?;
        if v > best_v {
            best_v = v;
            best = d.clone();
        }
    }
    let n = best.len();
    let mut step = spacing;
    while step > 1e-9 {
        let mut improved = false;
        for t in tangent_basis(&best) {
            for sgn in [1.0, -1.0] {
                let cand = &best + &t * (sgn * step);
                let cand = &cand / cand.norm();
                let v = score(&cand)?;
                if v > best_v {
                    best_v = v;
                    best = cand;
                    improved = true;
                    break;
                }
            }
            if improved {
                break;
            }
        }
        if !improved {
            step *= 0.5;
        }
        debug_assert_eq!(best.len(), n);
    }
    Ok((best_v, best))
}

/// Orthonormal basis of the tangent space at a unit vector.
fn tangent_basis(z: &Vector) -> Vec<Vector> {
    let n = z.len();
    let mut out: Vec<Vector> = Vec::with_capacity(n - 1);
    for k in 0..n {
        let mut e = Vector::zeros(n);
        e[k] = 1.0;
        e -= z * z.dot(&e);
        for q in &out {
            e -= q * q.dot(&e);
        }
        let norm = e.norm();
        if norm > 1e-6 {
            out.push(e / norm);
        }
        if out.len() == n - 1 {
            break;
        }
    }
    out
}

/// Five-point Gauss-Legendre rule on `[a, b]`.
fn gauss5(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    const X: [f64; 5] = [0.0, 0.538_469_310_105_683_1, -0.538_469_310_105_683_1, 0.906_179_845_938_664, -0.906_179_845_938_664];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    r * X.iter().zip(W).map(|(x, w)| w * f(c + r * x)).sum::<f64>()
}

/// Adaptive bisection of the five-point rule until two levels agree.
pub(crate) fn adaptive_gauss(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = gauss5(f, a, m);
        let right = gauss5(f, m, b);
        let halves = left + right;
        if depth == 0 || (halves - whole).abs() <= tol {
            return halves;
        }
        rec(f, a, m, left, tol / 2.0, depth - 1) + rec(f, m, b, right, tol / 2.0, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    rec(f, a, b, gauss5(f, a, b), tol, depth)
}

/// `u_i(t) = sign <ζ, e^{A(T-t)} b_i>` with switch times `T - (zeros of g_i)`.
pub fn synthesize_control(sys: &LinearSystem, zeta: &Vector, horizon: f64) -> Result<BangBangControl> {
    sys.require_normal()?;
    ReachableSet::new(sys, horizon)?.control(zeta)
}

/// Endpoint from the origin under `u`.
pub fn integrate_linear(sys: &LinearSystem, u: &BangBangControl) -> Vector {
    integrate_linear_from(sys, &Vector::zeros(sys.state_dim()), u, u.horizon)
}

/// State at time `t_end` from `x0` under `u`, one augmented exponential
/// `exp([[A, B u], [0, 0]] dt)` per constant segment.
pub fn integrate_linear_from(sys: &LinearSystem, x0: &Vector, u: &BangBangControl, t_end: f64) -> Vector {
    let n = sys.state_dim();
    let mut z = Vector::zeros(n + 1);
    z.rows_mut(0, n).copy_from(x0);
    z[n] = 1.0;
    let mut aug = Matrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(sys.a());
    let pts = u.breakpoints();
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1].min(t_end));
        if b <= a {
            break;
        }
        let uv = Vector::from_vec(u.values_at(0.5 * (a + b)));
        let drive = sys.b() * uv;
        aug.view_mut((0, n), (n, 1)).copy_from(&drive);
        z = linalg::expm(&aug, b - a).expect("bounded segment exponential") * z;
    }
    z.rows(0, n).into_owned()
}

/// `h(ζ) = ∫_0^T Σ_i |<ζ, e^{As} b_i>| ds`.
pub fn support_function(sys: &LinearSystem, zeta: &Vector, horizon: f64) -> Result<f64> {
    if zeta.norm() == 0.0 {
        return Ok(0.0);
    }
    ReachableSet::new(sys, horizon)?.support(zeta)
}

/// Position of `x` relative to the reachable set at time `T`.
pub fn membership(sys: &LinearSystem, x: &Vector, horizon: f64) -> Result<Membership> {
    ReachableSet::new(sys, horizon)?.membership(x)
}

/// Boundary samples for `n_dirs` quasi-uniform covectors.
pub fn sample_boundary(sys: &LinearSystem, horizon: f64, n_dirs: usize) -> Result<Vec<BoundaryPoint>> {
    if n_dirs < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 directions, got {n_dirs}")));
    }
    sys.require_normal()?;
    let set = ReachableSet::new(sys, horizon)?;
    quasi_uniform_directions(sys.state_dim(), n_dirs)
        .iter()
        .map(|z| set.boundary_point(z))
        .collect()
}

/// Boundary samples of a single-input system indexed by the zeros of the
/// switching function instead of by covector.
///
/// Every nondecreasing tuple of `n - 1` times on the grid `{0, T/m, ..., T}`
/// fixes `ζ` up to sign through `<ζ, e^{As} A^j b> = 0`, `j` below the
/// multiplicity of `s` in the tuple. Repeated times give the normals at the
/// corners of the set (the `u ≡ ±1` endpoints), which quasi-uniform
/// covectors resolve poorly. Returns both signs of every tuple.
pub fn sample_boundary_by_zeros(sys: &LinearSystem, horizon: f64, m: usize) -> Result<Vec<BoundaryPoint>> {
    if sys.control_dim() != 1 {
        return Err(Error::InvalidArgument("zero-indexed sampling needs a single input".into()));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 grid cells, got {m}")));
    }
    sys.require_normal()?;
    let set = ReachableSet::new(sys, horizon)?;
    let n = sys.state_dim();
    let b = sys.column(0);
    let flows: Vec<Vector> =
        (0..=m).map(|k| linalg::expm_apply(sys.a(), horizon * k as f64 / m as f64, &b)).collect();
    let mut tuples: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 1..n {
        tuples = tuples
            .into_iter()
            .flat_map(|t| {
                let from = t.last().copied().unwrap_or(0);
                (from..=m).map(move |k| {
                    let mut next = t.clone();
                    next.push(k);
                    next
                })
            })
            .collect();
    }
    let mut out = Vec::with_capacity(2 * tuples.len());
    for t in &tuples {
        let mut c = Matrix::zeros(n, n);
        for (pos, &k) in t.iter().enumerate() {
            let mult = t[..pos].iter().filter(|&&j| j == k).count();
            let mut v = flows[k].clone();
            for _ in 0..mult {
                v = sys.a() * v;
            }
            c.set_row(pos, &v.transpose());
        }
        let svd = c.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Inconsistent("SVD without V".into()))?;
        let (idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        let zeta: Vector = vt.row(idx).transpose();
        for sign in [1.0, -1.0] {
            out.push(set.boundary_point(&(&zeta * sign))?);
        }
    }
    Ok(out)
}

/// Uniform angles in the plane, a Fibonacci lattice on `S^2`, seeded Gaussian
/// directions above.
pub fn quasi_uniform_directions(n: usize, count: usize) -> Vec<Vector> {
    match n {
        2 => (0..count)
            .map(|j| {
                let t = std::f64::consts::TAU * j as f64 / count as f64;
                Vector::from_vec(vec![t.cos(), t.sin()])
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|j| {
                    let z = 1.0 - 2.0 * (j as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * j as f64;
                    Vector::from_vec(vec![r * t.cos(), r * t.sin(), z])
                })
                .collect()
        }
        _ => random_directions(n, count, 0),
    }
}

/// Seeded Gaussian directions normalized to the unit sphere.
pub fn random_directions(n: usize, count: usize, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let v = Vector::from_fn(n, |_, _| gaussian(&mut rng));
            let norm = v.norm();
            if norm > 1e-12 {
                break v / norm;
            }
        })
        .collect()
}

/// Standard normal sample by Box-Muller.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Vertices of the subdivided icosahedron (`10·4^level + 2` points).
pub fn icosphere(level: usize) -> Vec<Vector> {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, p, 0.0],
        [1.0, p, 0.0],
        [-1.0, -p, 0.0],
        [1.0, -p, 0.0],
        [0.0, -1.0, p],
        [0.0, 1.0, p],
        [0.0, -1.0, -p],
        [0.0, 1.0, -p],
        [p, 0.0, -1.0],
        [p, 0.0, 1.0],
        [-p, 0.0, -1.0],
        [-p, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    let normalize = |v: [f64; 3]| {
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / r, v[1] / r, v[2] / r]
    };
    for v in verts.iter_mut() {
        *v = normalize(*v);
    }
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |i: usize, j: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            let key = (i.min(j), i.max(j));
            *cache.entry(key).or_insert_with(|| {
                let (a, b) = (verts[i], verts[j]);
                verts.push(normalize([a[0] + b[0], a[1] + b[1], a[2] + b[2]]));
                verts.len() - 1
            })
        };
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut verts);
            let bc = midpoint(f[1], f[2], &mut verts);
            let ca = midpoint(f[2], f[0], &mut verts);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    verts.into_iter().map(|v| Vector::from_vec(v.to_vec())).collect()
}

/// CSV rows `zeta_1..zeta_n, x_1..x_n, n_switches_1..n_switches_m, T`.
pub fn boundary_csv(points: &[BoundaryPoint]) -> String {
    let mut out = String::new();
    let Some(first) = points.first() else { return out };
    let n = first.x.len();
    let m = first.control.control_dim();
    let mut header: Vec<String> = (1..=n).map(|i| format!("zeta_{i}")).collect();
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|i| format!("n_switches_{i}")));
    header.push("T".into());
    out.push_str(&header.join(","));
    out.push('\n');
    for p in points {
        let mut row: Vec<String> = p.zeta.iter().chain(&p.x).map(|v| format!("{v:e}")).collect();
        row.extend(p.control.n_switches().iter().map(|k| k.to_string()));
        row.push(format!("{:e}", p.horizon));
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}
