//! Extremals of planar control-affine systems.
//!
//! An extremal is generated from an initial covector `λ(0)`: the state `y` and
//! the adjoint `λ` are integrated together with `u_i = sign <λ, G_i(y)>`, the
//! adjoint obeying `λ' = -λ (DF(y) + Σ u_i DG_i(y))`. Sweeping `λ(0)` over the
//! circle traces the boundary of the reachable set for small horizons, with
//! `λ(τ)` the outward normal at the endpoint.
//!
//! Alongside `(y, λ)` the integrator carries the adjoint propagator `P`
//! (`λ(t) = λ(0) P(t)`) and its counterpart `P0(t) = e^{-DF(0) t}` for the
//! linearization, which [`switching_comparison`] uses.

use std::fmt::Write as _;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bangbang::{BangBangControl, ChannelSchedule};
use crate::error::{Error, Result};
use crate::geometry::{relative_change, NormalSample};
use crate::linalg::Vector;
use crate::sysdef::{NonlinearSystem2D, PolyVectorField};

/// Default small-time cap on the horizon.
pub const SMALL_TIME_CAP: f64 = 1.0;
/// Fewest integrator steps per horizon.
pub const MIN_STEPS: usize = 256;
/// Width of the final bracket around a switching event.
pub const EVENT_TOL: f64 = 1e-10;
/// Event functions below this over a full step flag a singular arc.
pub const FLAT_EVENT: f64 = 1e-12;
pub const ADJOINT_FLOOR: f64 = 1e-8;
/// Threshold of the extension case rule.
pub const CASE_TOL: f64 = 1e-9;
/// Consecutive switches of one channel closer than this fraction of a step
/// are treated as chattering.
pub const CHATTER_FRACTION: f64 = 1e-3;
/// Probes closer than this many steps to `t = 0` are skipped by
/// [`switching_comparison`].
pub const COMPARISON_GUARD_STEPS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Requires every hypothesis flag.
    Certified,
    Exploratory,
}

/// State, adjoint and both propagators packed for RK4.
#[derive(Debug, Clone, Copy)]
struct Phase([f64; 12]);

impl Phase {
    fn start(lambda0: Vector2<f64>) -> Self {
        let mut s = [0.0; 12];
        s[2] = lambda0[0];
        s[3] = lambda0[1];
        s[4] = 1.0;
        s[7] = 1.0;
        s[8] = 1.0;
        s[11] = 1.0;
        Phase(s)
    }

    fn y(&self) -> Vector2<f64> {
        Vector2::new(self.0[0], self.0[1])
    }

    fn lambda(&self) -> Vector2<f64> {
        Vector2::new(self.0[2], self.0[3])
    }

    fn propagator(&self) -> Matrix2<f64> {
        Matrix2::new(self.0[4], self.0[5], self.0[6], self.0[7])
    }

    fn linear_propagator(&self) -> Matrix2<f64> {
        Matrix2::new(self.0[8], self.0[9], self.0[10], self.0[11])
    }

    fn axpy(&self, h: f64, k: &Phase) -> Phase {
        let mut out = self.0;
        for (o, d) in out.iter_mut().zip(k.0.iter()) {
            *o += h * d;
        }
        Phase(out)
    }
}

/// Jacobian of the closed-loop field with frozen control.
fn closed_loop_jacobian(sys: &NonlinearSystem2D, y: &Vector2<f64>, u: &[f64]) -> Matrix2<f64> {
    let mut a = sys.drift().jacobian(y);
    for (col, &ui) in sys.control_columns().iter().zip(u) {
        a += col.jacobian(y) * ui;
    }
    a
}

fn rhs(sys: &NonlinearSystem2D, a0: &Matrix2<f64>, s: &Phase, u: &[f64]) -> Phase {
    let y = s.y();
    let lam = s.lambda();
    let a = closed_loop_jacobian(sys, &y, u);
    let dy = sys.velocity(&y, u);
    let dlam = -(a.transpose() * lam);
    let dp = -(s.propagator() * a);
    let dp0 = -(s.linear_propagator() * a0);
    Phase([
        dy[0], dy[1], dlam[0], dlam[1], dp[(0, 0)], dp[(0, 1)], dp[(1, 0)], dp[(1, 1)], dp0[(0, 0)], dp0[(0, 1)],
        dp0[(1, 0)], dp0[(1, 1)],
    ])
}

fn rk4(sys: &NonlinearSystem2D, a0: &Matrix2<f64>, s: &Phase, u: &[f64], h: f64) -> Phase {
    let k1 = rhs(sys, a0, s, u);
    let k2 = rhs(sys, a0, &s.axpy(0.5 * h, &k1), u);
    let k3 = rhs(sys, a0, &s.axpy(0.5 * h, &k2), u);
    let k4 = rhs(sys, a0, &s.axpy(h, &k3), u);
    let mut out = s.0;
    for (i, o) in out.iter_mut().enumerate() {
        *o += h / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
    }
    Phase(out)
}

fn event(sys: &NonlinearSystem2D, s: &Phase, channel: usize) -> f64 {
    s.lambda().dot(&sys.control_columns()[channel].eval(&s.y()))
}

/// `[X, Y](x) = DY(x) X(x) - DX(x) Y(x)`.
fn lie_bracket(x_field: &PolyVectorField, y_field: &PolyVectorField, x: &Vector2<f64>) -> Vector2<f64> {
    y_field.jacobian(x) * x_field.eval(x) - x_field.jacobian(x) * y_field.eval(x)
}

/// `d/dt <λ, G_i(y)>` along an extremal.
fn event_derivative(sys: &NonlinearSystem2D, y: &Vector2<f64>, lam: &Vector2<f64>, u: &[f64], channel: usize) -> f64 {
    let cols = sys.control_columns();
    let gi = &cols[channel];
    let mut v = lie_bracket(sys.drift(), gi, y);
    for (j, col) in cols.iter().enumerate() {
        if j != channel {
            v += lie_bracket(col, gi, y) * u[j];
        }
    }
    lam.dot(&v)
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `H(x, λ) = <λ, F(x)> + Σ |<λ, G_i(x)>|`.
pub fn maximized_hamiltonian(sys: &NonlinearSystem2D, x: &Vector2<f64>, lam: &Vector2<f64>) -> f64 {
    lam.dot(&sys.drift().eval(x)) + sys.control_columns().iter().map(|g| lam.dot(&g.eval(x)).abs()).sum::<f64>()
}

/// `h(x, ζ) = <ζ, F(x)> - Σ |<ζ, G_i(x)>|`.
pub fn minimized_hamiltonian(sys: &NonlinearSystem2D, x: &Vector2<f64>, zeta: &Vector2<f64>) -> f64 {
    zeta.dot(&sys.drift().eval(x)) - sys.control_columns().iter().map(|g| zeta.dot(&g.eval(x)).abs()).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct ExtremalTrajectory {
    pub system: NonlinearSystem2D,
    pub mode: Mode,
    pub lambda0: Vector2<f64>,
    pub tau: f64,
    /// Nominal step; events insert extra samples.
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vector2<f64>>,
    pub adjoints: Vec<Vector2<f64>>,
    pub control: BangBangControl,
    pub hamiltonians: Vec<f64>,
    /// `P(t)` with `λ(t) = λ(0) P(t)`.
    pub propagators: Vec<Matrix2<f64>>,
    /// `e^{-DF(0) t}`.
    pub linear_propagators: Vec<Matrix2<f64>>,
    /// Some event function stayed below [`FLAT_EVENT`] over a full step.
    pub singular: bool,
}

impl ExtremalTrajectory {
    pub fn endpoint(&self) -> Vector2<f64> {
        *self.states.last().expect("trajectory has samples")
    }

    pub fn terminal_covector(&self) -> Vector2<f64> {
        *self.adjoints.last().expect("trajectory has samples")
    }

    pub fn certified(&self) -> bool {
        self.mode == Mode::Certified && !self.singular
    }

    /// Total over channels.
    pub fn n_switches(&self) -> usize {
        self.control.n_switches().iter().sum()
    }

    /// `t,y1,y2,l1,l2,u_1..u_M,H` rows.
    pub fn to_csv(&self) -> String {
        let m = self.control.control_dim();
        let mut out = String::from("t,y1,y2,l1,l2");
        for i in 1..=m {
            let _ = write!(out, ",u_{i}");
        }
        out.push_str(",H\n");
        for k in 0..self.times.len() {
            let (y, l) = (self.states[k], self.adjoints[k]);
            let _ = write!(out, "{:e},{:e},{:e},{:e},{:e}", self.times[k], y[0], y[1], l[0], l[1]);
            for i in 0..m {
                let _ = write!(out, ",{}", self.control.value(i, self.times[k]));
            }
            let _ = writeln!(out, ",{:e}", self.hamiltonians[k]);
        }
        out
    }
}

struct Recorder {
    times: Vec<f64>,
    states: Vec<Vector2<f64>>,
    adjoints: Vec<Vector2<f64>>,
    hamiltonians: Vec<f64>,
    propagators: Vec<Matrix2<f64>>,
    linear_propagators: Vec<Matrix2<f64>>,
}

impl Recorder {
    fn new() -> Self {
        Self {
            times: Vec::new(),
            states: Vec::new(),
            adjoints: Vec::new(),
            hamiltonians: Vec::new(),
            propagators: Vec::new(),
            linear_propagators: Vec::new(),
        }
    }

    fn push(&mut self, sys: &NonlinearSystem2D, t: f64, s: &Phase) -> Result<()> {
        let lam = s.lambda();
        if !(lam.norm() >= ADJOINT_FLOOR) {
            return Err(Error::Degenerate(format!("adjoint vanished at t = {t:e}")));
        }
        if s.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("extremal state at t = {t:e}")));
        }
        self.times.push(t);
        self.states.push(s.y());
        self.adjoints.push(lam);
        self.hamiltonians.push(maximized_hamiltonian(sys, &s.y(), &lam));
        self.propagators.push(s.propagator());
        self.linear_propagators.push(s.linear_propagator());
        Ok(())
    }
}

struct SegmentOutcome {
    switches: Vec<Vec<f64>>,
    singular: bool,
    /// With events off: some event function opposed the held control.
    sign_violation: bool,
}

/// Integrates `[t0, t0 + duration]` in uniform steps no longer than `dt`.
/// With `follow_events` the control flips at refined sign changes of the
/// event functions; otherwise it is held and opposition is reported.
#[allow(clippy::too_many_arguments)]
fn integrate_segment(
    sys: &NonlinearSystem2D,
    a0: &Matrix2<f64>,
    start: Phase,
    t0: f64,
    duration: f64,
    dt: f64,
    u: &mut [f64],
    follow_events: bool,
    rec: &mut Recorder,
) -> Result<SegmentOutcome> {
    let m = u.len();
    let steps = (duration / dt).ceil().max(1.0) as usize;
    let h = duration / steps as f64;
    let t_end = t0 + duration;
    let mut s = start;
    let mut t = t0;
    let mut switches = vec![Vec::new(); m];
    let mut singular = false;
    let mut sign_violation = false;
    let mut last_switch = vec![f64::NEG_INFINITY; m];
    let mut frozen = vec![false; m];
    for k in 0..steps {
        let t_next = if k + 1 == steps { t_end } else { t0 + (k + 1) as f64 * h };
        while t < t_next {
            let step = t_next - t;
            let s1 = rk4(sys, a0, &s, u, step);
            let mut earliest: Option<(f64, Vec<usize>)> = None;
            for i in 0..m {
                let e0 = event(sys, &s, i);
                let e1 = event(sys, &s1, i);
                if step >= 0.5 * h && e0.abs() < FLAT_EVENT && e1.abs() < FLAT_EVENT {
                    let mid = rk4(sys, a0, &s, u, 0.5 * step);
                    if event(sys, &mid, i).abs() < FLAT_EVENT {
                        singular = true;
                    }
                }
                if u[i] * e1 >= 0.0 {
                    frozen[i] = false;
                    continue;
                }
                if frozen[i] {
                    continue;
                }
                if !follow_events {
                    if u[i] * e1 < -FLAT_EVENT {
                        sign_violation = true;
                    }
                    continue;
                }
                // Bracket [lo, hi] with the held sign still valid at lo.
                let (mut lo, mut hi) = (0.0, step);
                while hi - lo > EVENT_TOL {
                    let mid = 0.5 * (lo + hi);
                    if u[i] * event(sys, &rk4(sys, a0, &s, u, mid), i) >= 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let root = 0.5 * (lo + hi);
                if t_end - (t + root) <= EVENT_TOL {
                    continue;
                }
                match &mut earliest {
                    Some((r, chans)) if (root - *r).abs() <= EVENT_TOL => chans.push(i),
                    Some((r, _)) if root > *r => {}
                    _ => earliest = Some((root, vec![i])),
                }
            }
            match earliest {
                None => {
                    s = s1;
                    t = t_next;
                }
                Some((root, chans)) => {
                    s = rk4(sys, a0, &s, u, root);
                    t += root;
                    for i in chans {
                        // Switching back within a sliver of a step is chattering
                        // on a singular arc: hold the control instead.
                        if t - last_switch[i] < CHATTER_FRACTION * h {
                            singular = true;
                            frozen[i] = true;
                            continue;
                        }
                        u[i] = -u[i];
                        switches[i].push(t);
                        last_switch[i] = t;
                    }
                    rec.push(sys, t, &s)?;
                }
            }
        }
        t = t_next;
        rec.push(sys, t, &s)?;
    }
    Ok(SegmentOutcome { switches, singular, sign_violation })
}

/// Sign of `<λ, G_i(0)>`, falling back to its first derivative when it
/// vanishes.
fn initial_controls(sys: &NonlinearSystem2D, lambda0: &Vector2<f64>) -> Vec<f64> {
    let origin = Vector2::zeros();
    let m = sys.control_dim();
    let raw: Vec<f64> = (0..m).map(|i| lambda0.dot(&sys.control_columns()[i].eval(&origin))).collect();
    let provisional: Vec<f64> = raw.iter().map(|&g| sign(g)).collect();
    (0..m)
        .map(|i| {
            if raw[i].abs() > FLAT_EVENT {
                provisional[i]
            } else {
                sign(event_derivative(sys, &origin, lambda0, &provisional, i))
            }
        })
        .collect()
}

fn build_control(horizon: f64, initial: &[f64], switches: Vec<Vec<f64>>) -> Result<BangBangControl> {
    BangBangControl::new(
        horizon,
        initial
            .iter()
            .zip(switches)
            .map(|(&s, times)| ChannelSchedule { initial_sign: if s > 0.0 { 1 } else { -1 }, switch_times: times })
            .collect(),
    )
}

fn check_horizon(tau: f64, dt: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= SMALL_TIME_CAP) {
        return Err(Error::InvalidArgument(format!("horizon {tau} outside (0, {SMALL_TIME_CAP}]")));
    }
    if !(dt > 0.0 && dt <= tau / MIN_STEPS as f64 * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!("step {dt} must lie in (0, tau/{MIN_STEPS}]")));
    }
    Ok(())
}

/// RK4 extremal from `y(0) = 0`, `λ(0) = lambda0`.
pub fn integrate_extremal(
    sys: &NonlinearSystem2D,
    lambda0: Vector2<f64>,
    tau: f64,
    dt: f64,
    mode: Mode,
) -> Result<ExtremalTrajectory> {
    if mode == Mode::Certified {
        sys.require_certified()?;
    }
    check_horizon(tau, dt)?;
    let norm = lambda0.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidArgument("initial covector must be nonzero".into()));
    }
    let lambda0 = lambda0 / norm;
    let a0 = sys.drift().jacobian(&Vector2::zeros());
    let initial = initial_controls(sys, &lambda0);
    let mut u = initial.clone();
    let mut rec = Recorder::new();
    let start = Phase::start(lambda0);
    rec.push(sys, 0.0, &start)?;
    let out = integrate_segment(sys, &a0, start, 0.0, tau, dt, &mut u, true, &mut rec)?;
    let control = build_control(tau, &initial, out.switches)?;
    Ok(ExtremalTrajectory {
        system: sys.clone(),
        mode,
        lambda0,
        tau,
        dt,
        times: rec.times,
        states: rec.states,
        adjoints: rec.adjoints,
        control,
        hamiltonians: rec.hamiltonians,
        propagators: rec.propagators,
        linear_propagators: rec.linear_propagators,
        singular: out.singular,
    })
}

/// Default step for boundary sweeps.
pub fn default_step(tau: f64) -> f64 {
    tau / (2 * MIN_STEPS) as f64
}

#[derive(Debug, Clone)]
pub struct NonlinearBoundarySample {
    /// Angle of `λ(0)`.
    pub angle: f64,
    pub endpoint: Vector2<f64>,
    /// Unit `λ(τ)`.
    pub zeta: Vector2<f64>,
    pub n_switches: usize,
    pub trajectory: ExtremalTrajectory,
}

#[derive(Debug, Clone)]
pub struct NonlinearBoundary {
    pub tau: f64,
    pub samples: Vec<NonlinearBoundarySample>,
    /// Trajectories flagged singular, kept out of `samples`.
    pub uncertified: Vec<NonlinearBoundarySample>,
    pub closed: bool,
    pub simple: bool,
}

impl NonlinearBoundary {
    pub fn closed_simple(&self) -> bool {
        self.closed && self.simple
    }

    pub fn normal_samples(&self) -> Vec<NormalSample> {
        self.samples
            .iter()
            .map(|s| {
                NormalSample::new(
                    Vector::from_vec(vec![s.endpoint[0], s.endpoint[1]]),
                    Vector::from_vec(vec![s.zeta[0], s.zeta[1]]),
                )
            })
            .collect()
    }

    pub fn endpoints(&self) -> Vec<Vector> {
        self.samples.iter().map(|s| Vector::from_vec(vec![s.endpoint[0], s.endpoint[1]])).collect()
    }

    /// `angle,x1,x2,n_switches` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle,x1,x2,n_switches\n");
        for s in &self.samples {
            let _ = writeln!(out, "{:e},{:e},{:e},{}", s.angle, s.endpoint[0], s.endpoint[1], s.n_switches);
        }
        out
    }
}

/// Endpoints of extremals over `n_dirs` equally spaced initial covectors.
pub fn sample_nonlinear_boundary(
    sys: &NonlinearSystem2D,
    tau: f64,
    n_dirs: usize,
    dt: f64,
    mode: Mode,
) -> Result<NonlinearBoundary> {
    if n_dirs < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 directions, got {n_dirs}")));
    }
    if mode == Mode::Certified {
        sys.require_certified()?;
    }
    check_horizon(tau, dt)?;
    let all = (0..n_dirs)
        .into_par_iter()
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n_dirs as f64;
            let traj = integrate_extremal(sys, Vector2::new(angle.cos(), angle.sin()), tau, dt, mode)?;
            Ok(NonlinearBoundarySample {
                angle,
                endpoint: traj.endpoint(),
                zeta: traj.terminal_covector().normalize(),
                n_switches: traj.n_switches(),
                trajectory: traj,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (samples, uncertified): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| !s.trajectory.singular);
    let points: Vec<Vector2<f64>> = samples.iter().map(|s| s.endpoint).collect();
    let (closed, simple) = curve_flags(&points);
    Ok(NonlinearBoundary { tau, samples, uncertified, closed, simple })
}

/// Drops consecutive points closer than `tol`, including across the wrap.
pub fn dedup_closed(points: &[Vector2<f64>], tol: f64) -> Vec<Vector2<f64>> {
    let mut out: Vec<Vector2<f64>> = Vec::with_capacity(points.len());
    for p in points {
        if out.last().is_none_or(|q| (p - q).norm() > tol) {
            out.push(*p);
        }
    }
    while out.len() > 1 && (out[0] - out[out.len() - 1]).norm() <= tol {
        out.pop();
    }
    out
}

fn orient(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_cross(p1: &Vector2<f64>, p2: &Vector2<f64>, q1: &Vector2<f64>, q2: &Vector2<f64>) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Winding number of the closed polygon about the origin.
pub fn winding_number(points: &[Vector2<f64>]) -> i64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let (p, q) = (points[i], points[(i + 1) % n]);
        total += (p[0] * q[1] - p[1] * q[0]).atan2(p.dot(&q));
    }
    (total / (2.0 * std::f64::consts::PI)).round() as i64
}

/// `(closed, simple)` for a cyclically ordered point list. Closed means the
/// polygon winds exactly once around the origin; simple means no two
/// non-adjacent edges cross.
pub fn curve_flags(points: &[Vector2<f64>]) -> (bool, bool) {
    let scale = points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let pts = dedup_closed(points, 1e-9 * (1.0 + scale));
    let n = pts.len();
    if n < 3 {
        return (false, false);
    }
    let closed = winding_number(&pts).abs() == 1;
    let mut simple = true;
    'outer: for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(&pts[i], &pts[(i + 1) % n], &pts[j], &pts[(j + 1) % n]) {
                simple = false;
                break 'outer;
            }
        }
    }
    (closed, simple)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianDeviation {
    pub max_dev: f64,
    /// Median sampled value.
    pub c: f64,
}

pub fn hamiltonian_constancy(traj: &ExtremalTrajectory) -> HamiltonianDeviation {
    let mut sorted = traj.hamiltonians.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let c = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let max_dev = traj.hamiltonians.iter().map(|h| (h - c).abs()).fold(0.0, f64::max);
    HamiltonianDeviation { max_dev, c }
}

/// Residuals of the extremality conditions at interior probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmpResiduals {
    /// `max ||λ' + λ (DF + DG u)||` with `λ'` from a five-point difference.
    pub adjoint: f64,
    /// `max ||y' - F - G u||`.
    pub state: f64,
    /// `max |<λ, y'> - H|`.
    pub hamiltonian_sign: f64,
    /// Samples away from switches whose control disagrees with the sign rule.
    pub control_mismatches: usize,
    pub min_adjoint_norm: f64,
    pub probes: usize,
}

fn near_switch(control: &BangBangControl, t: f64, margin: f64) -> bool {
    control.channels.iter().any(|ch| ch.switch_times.iter().any(|&s| (s - t).abs() <= margin))
}

pub fn pmp_residuals(traj: &ExtremalTrajectory) -> PmpResiduals {
    let sys = &traj.system;
    let n = traj.times.len();
    let h_nom = traj.tau / (traj.tau / traj.dt).ceil();
    let mut out = PmpResiduals {
        adjoint: 0.0,
        state: 0.0,
        hamiltonian_sign: 0.0,
        control_mismatches: 0,
        min_adjoint_norm: traj.adjoints.iter().map(|l| l.norm()).fold(f64::INFINITY, f64::min),
        probes: 0,
    };
    for k in 2..n.saturating_sub(2) {
        let t = traj.times[k];
        let uniform = (k - 2..k + 2).all(|j| (traj.times[j + 1] - traj.times[j] - h_nom).abs() < 1e-9 * h_nom);
        if !uniform || near_switch(&traj.control, t, 2.0 * h_nom + EVENT_TOL) {
            continue;
        }
        let d = |v: &[Vector2<f64>]| (v[k - 2] - v[k - 1] * 8.0 + v[k + 1] * 8.0 - v[k + 2]) / (12.0 * h_nom);
        let dy = d(&traj.states);
        let dlam = d(&traj.adjoints);
        let (y, lam) = (traj.states[k], traj.adjoints[k]);
        let u = traj.control.values_at(t);
        let a = closed_loop_jacobian(sys, &y, &u);
        out.adjoint = out.adjoint.max((dlam + a.transpose() * lam).norm());
        out.state = out.state.max((dy - sys.velocity(&y, &u)).norm());
        out.hamiltonian_sign = out.hamiltonian_sign.max((lam.dot(&dy) - traj.hamiltonians[k]).abs());
        out.probes += 1;
    }
    for k in 0..n {
        let t = traj.times[k];
        if near_switch(&traj.control, t, 2.0 * traj.dt) {
            continue;
        }
        let u = traj.control.values_at(t);
        for (i, col) in sys.control_columns().iter().enumerate() {
            let e = traj.adjoints[k].dot(&col.eval(&traj.states[k]));
            if e.abs() > FLAT_EVENT && sign(e) != u[i] {
                out.control_mismatches += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingComparison {
    /// `max |g - g0| / t`.
    pub k_order0: f64,
    /// `max |g' - g0'| / t`.
    pub k_order1: f64,
    pub k_hat: f64,
    /// `k_hat` recomputed at half the step.
    pub k_refined: f64,
    pub ok: bool,
}

fn comparison_constants(traj: &ExtremalTrajectory) -> (f64, f64) {
    let sys = &traj.system;
    let origin = Vector2::zeros();
    let a0 = sys.drift().jacobian(&origin);
    let guard = COMPARISON_GUARD_STEPS * traj.dt;
    let (mut k0, mut k1): (f64, f64) = (0.0, 0.0);
    for k in 0..traj.times.len() {
        let t = traj.times[k];
        if t < guard {
            continue;
        }
        let y = traj.states[k];
        let lam = traj.lambda0.transpose() * traj.propagators[k];
        let lam0 = traj.lambda0.transpose() * traj.linear_propagators[k];
        let u = traj.control.values_at(t);
        for (i, col) in sys.control_columns().iter().enumerate() {
            let b0 = col.eval(&origin);
            let g = (lam * col.eval(&y))[0];
            let g0 = (lam0 * b0)[0];
            let dg = event_derivative(sys, &y, &lam.transpose(), &u, i);
            let dg0 = -(lam0 * a0 * b0)[0];
            k0 = k0.max((g - g0).abs() / t);
            k1 = k1.max((dg - dg0).abs() / t);
        }
    }
    (k0, k1)
}

/// Distance of the switching function and its derivative from their
/// linearized counterparts, per unit time.
pub fn switching_comparison(traj: &ExtremalTrajectory) -> Result<SwitchingComparison> {
    let (k_order0, k_order1) = comparison_constants(traj);
    let k_hat = k_order0.max(k_order1);
    let refined = integrate_extremal(&traj.system, traj.lambda0, traj.tau, 0.5 * traj.dt, traj.mode)?;
    let (r0, r1) = comparison_constants(&refined);
    let k_refined = r0.max(r1);
    let ok = k_hat.is_finite() && (k_hat.max(k_refined) <= 1e-6 || relative_change(k_hat, k_refined) <= 0.1);
    Ok(SwitchingComparison { k_order0, k_order1, k_hat, k_refined, ok })
}

/// Continues an extremal past its horizon with the control chosen from the
/// sign of the switching function at `τ` (or of its derivative when the
/// function vanishes there). The extension is halved until the chosen control
/// stays consistent with the sign rule.
pub fn extend_optimal(traj: &ExtremalTrajectory, delta: f64) -> Result<ExtremalTrajectory> {
    if !traj.certified() {
        return Err(Error::InvalidArgument("extension needs a certified trajectory".into()));
    }
    if !(delta > 0.0 && delta <= 0.25 * traj.tau) {
        return Err(Error::InvalidArgument(format!("extension {delta} outside (0, tau/4]")));
    }
    let sys = &traj.system;
    let y = traj.endpoint();
    let lam = traj.terminal_covector();
    let before = traj.control.values_at(traj.tau);
    let mut after = Vec::with_capacity(before.len());
    for (i, col) in sys.control_columns().iter().enumerate() {
        let g = lam.dot(&col.eval(&y));
        if g > CASE_TOL {
            after.push(1.0);
        } else if g < -CASE_TOL {
            after.push(-1.0);
        } else {
            let dg = event_derivative(sys, &y, &lam, &before, i);
            if dg.abs() < CASE_TOL {
                return Err(Error::ExtensionRefused(format!(
                    "channel {i}: switching function and its derivative vanish at the horizon"
                )));
            }
            after.push(sign(dg));
        }
    }

    let a0 = sys.drift().jacobian(&Vector2::zeros());
    let k_end = traj.times.len() - 1;
    let mut end = Phase::start(traj.lambda0);
    end.0[0] = y[0];
    end.0[1] = y[1];
    end.0[2] = lam[0];
    end.0[3] = lam[1];
    let p = traj.propagators[k_end];
    let p0 = traj.linear_propagators[k_end];
    end.0[4..8].copy_from_slice(&[p[(0, 0)], p[(0, 1)], p[(1, 0)], p[(1, 1)]]);
    end.0[8..12].copy_from_slice(&[p0[(0, 0)], p0[(0, 1)], p0[(1, 0)], p0[(1, 1)]]);

    let mut d = delta;
    for _ in 0..40 {
        let mut rec = Recorder::new();
        let mut u = after.clone();
        let out = integrate_segment(sys, &a0, end, traj.tau, d, traj.dt, &mut u, false, &mut rec)?;
        if out.sign_violation {
            d *= 0.5;
            continue;
        }
        let horizon = traj.tau + d;
        let mut channels = traj.control.channels.clone();
        for (i, ch) in channels.iter_mut().enumerate() {
            if after[i] != before[i] {
                ch.switch_times.push(traj.tau);
            }
        }
        let control = BangBangControl::new(horizon, channels)?;
        let mut ext = traj.clone();
        ext.tau = horizon;
        ext.control = control;
        ext.singular |= out.singular;
        ext.times.extend(rec.times);
        ext.states.extend(rec.states);
        ext.adjoints.extend(rec.adjoints);
        ext.hamiltonians.extend(rec.hamiltonians);
        ext.propagators.extend(rec.propagators);
        ext.linear_propagators.extend(rec.linear_propagators);
        return Ok(ext);
    }
    Err(Error::ExtensionRefused("switching function changes sign arbitrarily close to the horizon".into()))
}

/// RK4 endpoint from the origin under a given bang-bang control, with steps
/// aligned to its switch times.
pub fn integrate_control(sys: &NonlinearSystem2D, control: &BangBangControl, dt: f64) -> Result<Vector2<f64>> {
    if control.control_dim() != sys.control_dim() {
        return Err(Error::Dimension(format!(
            "control has {} channels, system has {}",
            control.control_dim(),
            sys.control_dim()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {dt}")));
    }
    let f = |x: &Vector2<f64>, u: &[f64]| sys.velocity(x, u);
    let mut x = Vector2::zeros();
    for w in control.breakpoints().windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let u = control.values_at(0.5 * (a + b));
        let steps = ((b - a) / dt).ceil().max(1.0) as usize;
        let h = (b - a) / steps as f64;
        for _ in 0..steps {
            let k1 = f(&x, &u);
            let k2 = f(&(x + k1 * (0.5 * h)), &u);
            let k3 = f(&(x + k2 * (0.5 * h)), &u);
            let k4 = f(&(x + k3 * h), &u);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleRow {
    pub s: f64,
    pub endpoint: [f64; 2],
    pub expected: [f64; 2],
    pub endpoint_error: f64,
    /// `<ζ, γ(s) - γ(1/2)>` from the integrated endpoints.
    pub inner_product: f64,
    pub closed_form: f64,
    pub inner_error: f64,
    /// `<ζ, γ(s) - γ(1/2)> / ||γ(s) - γ(1/2)||^2`; zero at `s = 1/2`.
    pub reach_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleTable {
    pub tau: f64,
    pub zeta: [f64; 2],
    pub rows: Vec<CounterexampleRow>,
    pub reach_ratio_max: f64,
    /// `8 / ((16 + τ^4) sqrt(4 + τ^2))`.
    pub reach_bound: f64,
}

/// `x1' = x2 (1 + u)`, `x2' = u`.
pub fn counterexample_system() -> NonlinearSystem2D {
    use crate::sysdef::{Monomial, Polynomial};
    let f = PolyVectorField::new(Polynomial::new(vec![Monomial::new(0, 1, 1.0)]), Polynomial::zero());
    let g = PolyVectorField::new(Polynomial::new(vec![Monomial::new(0, 1, 1.0)]), Polynomial::constant(1.0));
    NonlinearSystem2D::new(f, vec![g]).expect("fixed coefficients are valid")
}

/// Endpoints of the one-switch controls `u = +1` on `(0, sτ)`, `-1` after,
/// against `(s²τ², τ(2s - 1))`, and their position relative to the supporting
/// line at `s = 1/2`.
pub fn reproduce_counterexample(tau: f64, s_grid: &[f64]) -> Result<CounterexampleTable> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {tau}")));
    }
    if let Some(s) = s_grid.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(Error::InvalidArgument(format!("s = {s} outside (0, 1)")));
    }
    let sys = counterexample_system();
    let dt = tau / 1024.0;
    let endpoint = |s: f64| -> Result<Vector2<f64>> {
        let control = BangBangControl::new(tau, vec![ChannelSchedule { initial_sign: 1, switch_times: vec![s * tau] }])?;
        integrate_control(&sys, &control, dt)
    };
    let norm = (4.0 + tau * tau).sqrt();
    let zeta = Vector2::new(2.0, -tau) / norm;
    let mid = endpoint(0.5)?;
    let mut rows = Vec::with_capacity(s_grid.len());
    let mut reach_ratio_max: f64 = 0.0;
    for &s in s_grid {
        let x = endpoint(s)?;
        let expected = Vector2::new(s * s * tau * tau, tau * (2.0 * s - 1.0));
        let d = x - mid;
        let inner_product = zeta.dot(&d);
        let closed_form = 2.0 * tau * tau * (s - 0.5).powi(2) / norm;
        let dist2 = d.norm_squared();
        let reach_ratio = if dist2 > 1e-18 { inner_product / dist2 } else { 0.0 };
        reach_ratio_max = reach_ratio_max.max(reach_ratio);
        rows.push(CounterexampleRow {
            s,
            endpoint: [x[0], x[1]],
            expected: [expected[0], expected[1]],
            endpoint_error: (x - expected).norm(),
            inner_product,
            closed_form,
            inner_error: (inner_product - closed_form).abs(),
            reach_ratio,
        });
    }
    Ok(CounterexampleTable {
        tau,
        zeta: [zeta[0], zeta[1]],
        rows,
        reach_ratio_max,
        reach_bound: 8.0 / ((16.0 + tau.powi(4)) * norm),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysdef::{Monomial, Polynomial};
    use approx::assert_abs_diff_eq;

    fn pure_integrator() -> NonlinearSystem2D {
        NonlinearSystem2D::new(
            PolyVectorField::new(Polynomial::zero(), Polynomial::zero()),
            vec![PolyVectorField::new(Polynomial::zero(), Polynomial::constant(1.0))],
        )
        .unwrap()
    }

    fn double_integrator() -> NonlinearSystem2D {
        NonlinearSystem2D::new(
            PolyVectorField::new(Polynomial::new(vec![Monomial::new(0, 1, 1.0)]), Polynomial::zero()),
            vec![PolyVectorField::new(Polynomial::zero(), Polynomial::constant(1.0))],
        )
        .unwrap()
    }

    #[test]
    fn pure_integrator_extremal() {
        let traj = integrate_extremal(&pure_integrator(), Vector2::new(0.0, 1.0), 0.5, 0.5 / 256.0, Mode::Exploratory)
            .unwrap();
        assert_eq!(traj.n_switches(), 0);
        assert_eq!(traj.control.value(0, 0.3), 1.0);
        assert_abs_diff_eq!(traj.endpoint(), Vector2::new(0.0, 0.5), epsilon = 1e-14);
        let hd = hamiltonian_constancy(&traj);
        assert_eq!(hd.c, 1.0);
        assert_eq!(hd.max_dev, 0.0);
    }

    #[test]
    fn flat_event_is_flagged_singular() {
        let traj = integrate_extremal(&pure_integrator(), Vector2::new(1.0, 0.0), 0.5, 0.5 / 256.0, Mode::Exploratory)
            .unwrap();
        assert!(traj.singular);
        assert!(!traj.certified());
    }

    #[test]
    fn double_integrator_switch_matches_closed_form() {
        // λ(t) = (λ1, λ2 - λ1 t), so the switch sits at λ2/λ1.
        let l0 = Vector2::new(1.0, 0.3);
        let traj = integrate_extremal(&double_integrator(), l0, 1.0, 1.0 / 512.0, Mode::Certified).unwrap();
        assert_eq!(traj.n_switches(), 1);
        assert_abs_diff_eq!(traj.control.channels[0].switch_times[0], 0.3, epsilon = 1e-9);
        let r = pmp_residuals(&traj);
        assert!(r.adjoint < 1e-8 && r.state < 1e-8 && r.hamiltonian_sign < 1e-8, "{r:?}");
        assert_eq!(r.control_mismatches, 0);
        // u = +1 on (0, 0.3), -1 after.
        let (s, t) = (0.3, 1.0);
        let x2 = s - (t - s);
        let x1 = s * s / 2.0 + s * (t - s) - (t - s) * (t - s) / 2.0;
        assert_abs_diff_eq!(traj.endpoint(), Vector2::new(x1, x2), epsilon = 1e-9);
        let cmp = switching_comparison(&traj).unwrap();
        assert!(cmp.k_hat < 1e-6 && cmp.ok, "{cmp:?}");
    }

    #[test]
    fn counterexample_extremal_switches_at_most_once() {
        let sys = counterexample_system();
        for k in 0..24 {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 24.0;
            let traj = integrate_extremal(&sys, Vector2::new(a.cos(), a.sin()), 1.0, 1.0 / 512.0, Mode::Exploratory)
                .unwrap();
            assert!(traj.n_switches() <= 1, "angle {a}: {}", traj.n_switches());
        }
        assert!(integrate_extremal(&sys, Vector2::new(1.0, 0.0), 1.0, 1.0 / 512.0, Mode::Certified).is_err());
    }

    #[test]
    fn minimized_hamiltonian_examples() {
        let sys = double_integrator();
        let z = Vector2::new(0.6, -0.8);
        assert_abs_diff_eq!(minimized_hamiltonian(&sys, &Vector2::zeros(), &z), -0.8, epsilon = 1e-15);
        // ζ orthogonal to both F(x) = (x2, 0) and G = (0, 1) at x2 = 0.
        assert_eq!(minimized_hamiltonian(&sys, &Vector2::new(0.4, 0.0), &Vector2::new(1.0, 0.0)), 0.0);
    }

    #[test]
    fn extension_case_rules() {
        let sys = double_integrator();
        // g(τ) > 0: u stays +1.
        let traj = integrate_extremal(&sys, Vector2::new(0.1, 1.0), 0.4, 0.4 / 256.0, Mode::Certified).unwrap();
        let ext = extend_optimal(&traj, 0.1).unwrap();
        assert_eq!(ext.n_switches(), 0);
        assert_eq!(ext.control.value(0, 0.45), 1.0);
        assert_abs_diff_eq!(ext.tau, 0.5, epsilon = 1e-15);
        // Zero of g exactly at τ with g' < 0: u = -1 afterwards.
        let traj = integrate_extremal(&sys, Vector2::new(1.0, 0.5), 0.5, 0.5 / 256.0, Mode::Certified).unwrap();
        assert_eq!(traj.n_switches(), 0);
        let ext = extend_optimal(&traj, 0.1).unwrap();
        assert_eq!(ext.control.value(0, 0.55), -1.0);
        assert_eq!(ext.n_switches(), 1);
        let r = pmp_residuals(&ext);
        assert_eq!(r.control_mismatches, 0);
        assert!(extend_optimal(&traj, 0.2).is_err());
    }

    #[test]
    fn extension_refused_on_degenerate_horizon() {
        let sys = pure_integrator();
        let mut traj =
            integrate_extremal(&sys, Vector2::new(0.0, 1.0), 0.5, 0.5 / 256.0, Mode::Exploratory).unwrap();
        traj.mode = Mode::Certified;
        let k = traj.adjoints.len() - 1;
        traj.adjoints[k] = Vector2::new(1.0, 0.0);
        assert!(matches!(extend_optimal(&traj, 0.1), Err(Error::ExtensionRefused(_))));
    }

    #[test]
    fn counterexample_closed_forms() {
        let table = reproduce_counterexample(1.0, &[0.5, 0.6]).unwrap();
        assert_abs_diff_eq!(table.rows[0].endpoint[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(table.rows[0].inner_product, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(table.rows[1].inner_product, 2.0 * 0.01 / 5f64.sqrt(), epsilon = 1e-12);
        assert!(table.rows[1].inner_product > 0.0);
        assert_abs_diff_eq!(table.reach_bound, 8.0 / (17.0 * 5f64.sqrt()), epsilon = 1e-15);
        assert!(table.reach_ratio_max <= table.reach_bound + 1e-6);
        assert!(reproduce_counterexample(1.0, &[1.0]).is_err());
    }

    #[test]
    fn curve_flags_detect_crossings() {
        let circle: Vec<Vector2<f64>> =
            (0..16).map(|k| k as f64 * std::f64::consts::PI / 8.0).map(|a| Vector2::new(a.cos(), a.sin())).collect();
        assert_eq!(curve_flags(&circle), (true, true));
        let shifted: Vec<Vector2<f64>> = circle.iter().map(|p| p + Vector2::new(3.0, 0.0)).collect();
        assert!(!curve_flags(&shifted).0, "origin outside");
        let twice: Vec<Vector2<f64>> = circle.iter().chain(circle.iter()).copied().collect();
        assert_eq!(winding_number(&twice), 2);
        let square: Vec<Vector2<f64>> =
            [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].iter().map(|&(a, b)| Vector2::new(a, b)).collect();
        let bow: Vec<Vector2<f64>> =
            [(1.0, 1.0), (-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0)].iter().map(|&(a, b)| Vector2::new(a, b)).collect();
        assert!(!curve_flags(&bow).1);
        let mut dup = square.clone();
        dup.insert(1, square[0]);
        dup.push(square[0]);
        assert_eq!(dedup_closed(&dup, 1e-12).len(), 4);
    }

    #[test]
    fn argument_checks() {
        let sys = double_integrator();
        assert!(integrate_extremal(&sys, Vector2::zeros(), 0.5, 1e-3, Mode::Certified).is_err());
        assert!(integrate_extremal(&sys, Vector2::new(1.0, 0.0), 2.0, 1e-3, Mode::Certified).is_err());
        assert!(integrate_extremal(&sys, Vector2::new(1.0, 0.0), 0.5, 0.01, Mode::Certified).is_err());
        assert!(sample_nonlinear_boundary(&sys, 0.5, 4, 1e-3, Mode::Certified).is_err());
    }
}
