//! Minimum time to the origin.
//!
//! `T(x)` is the least time in which the system can steer `x` to `0`. Its
//! sublevel sets are the reachable sets of the reversed system `(-F, -G)`, so
//! [`min_time_linear`] bisects on membership in those sets.
//!
//! [`grid_value_iteration`] is an independent planar oracle. Its update
//! `T(x) = min_u dt + T(x + dt (-F(x) - G(x) u))` yields the time in which the
//! given system reaches `x` from the origin; feeding it the reversed system
//! yields `T`. [`compare_oracle`] performs that flip.

use std::fmt::Write as _;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bangbang::{BangBangControl, ReachableSet, Status};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::sysdef::{LinearSystem, NonlinearSystem2D};

/// Default cap on the bisection horizon, seconds.
pub const HORIZON_CAP: f64 = 1e3;
/// Smallest admitted bisection tolerance.
pub const MIN_TOL: f64 = 1e-9;
/// Fixed-point threshold of the value iteration.
pub const GRID_FIXED_POINT: f64 = 1e-9;
/// Fraction of a cell travelled per value-iteration step.
pub const CFL_FRACTION: f64 = 0.4;
pub const MIN_RESOLUTION: usize = 64;
const MAX_SWEEPS: usize = 1_000_000;
// Stand-in for +∞ during the sweeps so interpolation next to unreached nodes
// stays finite. Nodes above HORIZON_CAP at the fixed point still carry a share
// of it and are reported as +∞, like the bisection beyond its cap.
const UNREACHED: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinTimeResult {
    /// `+∞` when the horizon cap is exceeded.
    pub time: f64,
    /// Control steering `x` to the origin in `time` (forward dynamics).
    pub control: Option<BangBangControl>,
    pub iterations: usize,
    pub tol: f64,
}

impl MinTimeResult {
    pub fn is_finite(&self) -> bool {
        self.time.is_finite()
    }
}

/// Bisection on `τ ↦ x ∈ reachable set of the reversed system at τ`.
pub fn min_time_linear(sys: &LinearSystem, x: &Vector, tol: f64) -> Result<MinTimeResult> {
    min_time_linear_capped(sys, x, tol, HORIZON_CAP)
}

pub fn min_time_linear_capped(sys: &LinearSystem, x: &Vector, tol: f64, cap: f64) -> Result<MinTimeResult> {
    sys.require_normal()?;
    if !(tol >= MIN_TOL) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} below {MIN_TOL}")));
    }
    if x.len() != sys.state_dim() {
        return Err(Error::Dimension(format!("point has length {}, expected {}", x.len(), sys.state_dim())));
    }
    if x.iter().all(|v| *v == 0.0) {
        return Ok(MinTimeResult { time: 0.0, control: None, iterations: 0, tol });
    }
    let rev = sys.reversed();
    let reached = |tau: f64| -> Result<(bool, Vec<f64>)> {
        let m = ReachableSet::new(&rev, tau)?.membership(x)?;
        Ok((m.status != Status::Outside, m.zeta))
    };

    let mut iterations = 0;
    let mut lo = 0.0;
    let mut hi = tol;
    let mut zeta;
    loop {
        iterations += 1;
        let (inside, z) = reached(hi)?;
        zeta = z;
        if inside {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > cap {
            return Ok(MinTimeResult { time: f64::INFINITY, control: None, iterations, tol });
        }
    }
    while hi - lo > tol {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let (inside, z) = reached(mid)?;
        if inside {
            hi = mid;
            zeta = z;
        } else {
            lo = mid;
        }
    }
    let control = ReachableSet::new(&rev, hi)?
        .control(&Vector::from_vec(zeta))?
        .time_reversed();
    Ok(MinTimeResult { time: 0.5 * (lo + hi), control: Some(control), iterations, tol })
}

/// Planar dynamics accepted by the grid oracle.
#[derive(Debug, Clone, Copy)]
pub enum PlanarDynamics<'a> {
    Linear(&'a LinearSystem),
    Nonlinear(&'a NonlinearSystem2D),
}

impl PlanarDynamics<'_> {
    fn check(&self) -> Result<()> {
        match self {
            PlanarDynamics::Linear(s) if s.state_dim() != 2 => {
                Err(Error::Dimension(format!("grid oracle is planar, system has dimension {}", s.state_dim())))
            }
            _ => Ok(()),
        }
    }

    fn control_dim(&self) -> usize {
        match self {
            PlanarDynamics::Linear(s) => s.control_dim(),
            PlanarDynamics::Nonlinear(s) => s.control_dim(),
        }
    }

    fn velocity(&self, x: &Vector2<f64>, u: &[f64]) -> Vector2<f64> {
        match self {
            PlanarDynamics::Linear(s) => {
                let a = s.a();
                let b = s.b();
                let mut v = Vector2::new(a[(0, 0)] * x[0] + a[(0, 1)] * x[1], a[(1, 0)] * x[0] + a[(1, 1)] * x[1]);
                for (j, &uj) in u.iter().enumerate() {
                    v[0] += b[(0, j)] * uj;
                    v[1] += b[(1, j)] * uj;
                }
                v
            }
            PlanarDynamics::Nonlinear(s) => s.velocity(x, u),
        }
    }
}

/// Axis-aligned box and resolution of the value iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    /// Cells per axis.
    pub resolution: usize,
    /// Overrides the CFL step when set.
    pub dt: Option<f64>,
}

impl GridSpec {
    pub fn square(half_width: f64, resolution: usize) -> Self {
        Self { lo: [-half_width; 2], hi: [half_width; 2], resolution, dt: None }
    }
}

/// Node values of the minimum-time oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub resolution: usize,
    pub dt: f64,
    pub iterations: usize,
    /// Row-major node values, `(resolution + 1)^2`, `+∞` where unreached.
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl TimeGrid {
    fn nodes(&self) -> usize {
        self.resolution + 1
    }

    fn cell(&self) -> [f64; 2] {
        let r = self.resolution as f64;
        [(self.hi[0] - self.lo[0]) / r, (self.hi[1] - self.lo[1]) / r]
    }

    pub fn node(&self, i: usize, j: usize) -> Vector2<f64> {
        let c = self.cell();
        Vector2::new(self.lo[0] + i as f64 * c[0], self.lo[1] + j as f64 * c[1])
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nodes() + i]
    }

    /// Bilinear interpolation; `+∞` outside the box or next to unreached nodes.
    pub fn interpolate(&self, x: &Vector2<f64>) -> f64 {
        interpolate(&self.values, self.lo, self.cell(), self.resolution, x)
    }

    /// Half-widths of the agreement band: two cell-crossing times and five
    /// steps.
    pub fn tolerance(&self, max_speed: f64) -> f64 {
        let c = self.cell();
        (2.0 * c[0].max(c[1]) / max_speed).max(5.0 * self.dt)
    }

    /// `x1,x2,T` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,x2,T\n");
        for j in 0..self.nodes() {
            for i in 0..self.nodes() {
                let p = self.node(i, j);
                let _ = writeln!(out, "{:e},{:e},{}", p[0], p[1], fmt_time(self.value(i, j)));
            }
        }
        out
    }

    pub fn header_json(&self) -> serde_json::Value {
        serde_json::json!({
            "bounds": [self.lo, self.hi],
            "resolution": self.resolution,
            "dt": self.dt,
            "iterations": self.iterations,
        })
    }
}

fn fmt_time(t: f64) -> String {
    if t.is_finite() {
        format!("{t:e}")
    } else {
        "inf".into()
    }
}

fn interpolate(values: &[f64], lo: [f64; 2], cell: [f64; 2], res: usize, x: &Vector2<f64>) -> f64 {
    let fx = (x[0] - lo[0]) / cell[0];
    let fy = (x[1] - lo[1]) / cell[1];
    let r = res as f64;
    if !(fx >= 0.0 && fy >= 0.0 && fx <= r && fy <= r) {
        return f64::INFINITY;
    }
    let i = (fx.floor() as usize).min(res - 1);
    let j = (fy.floor() as usize).min(res - 1);
    let (tx, ty) = (fx - i as f64, fy - j as f64);
    let n = res + 1;
    let w = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
    let v = [values[j * n + i], values[j * n + i + 1], values[(j + 1) * n + i], values[(j + 1) * n + i + 1]];
    let mut acc = 0.0;
    for k in 0..4 {
        if w[k] > 0.0 {
            if !v[k].is_finite() {
                return f64::INFINITY;
            }
            acc += w[k] * v[k];
        }
    }
    acc
}

/// Largest change of a reached node produced by one more sweep over a
/// finished grid.
pub fn extra_sweep_change(dynamics: PlanarDynamics<'_>, grid: &TimeGrid) -> Result<f64> {
    dynamics.check()?;
    let sweeper = Sweeper::new(dynamics, grid.lo, grid.cell(), grid.resolution, grid.dt);
    let cur: Vec<f64> = grid.values.iter().map(|v| v.min(UNREACHED)).collect();
    let mut next = cur.clone();
    sweeper.sweep(&cur, &mut next);
    Ok(cur
        .iter()
        .zip(&next)
        .filter(|(a, b)| a.max(**b) < HORIZON_CAP)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

struct Sweeper {
    n: usize,
    controls: usize,
    dt: f64,
    // Foot points x + dt·(-F - G u) never move, so their bilinear stencils are
    // computed once. `None` marks a foot outside the box.
    stencils: Vec<Option<Stencil>>,
    target: Vec<bool>,
}

impl Sweeper {
    fn new(dynamics: PlanarDynamics<'_>, lo: [f64; 2], cell: [f64; 2], res: usize, dt: f64) -> Self {
        let n = res + 1;
        let controls = vertex_controls(dynamics.control_dim());
        let mut stencils = Vec::with_capacity(n * n * controls.len());
        for j in 0..n {
            for i in 0..n {
                let x = Vector2::new(lo[0] + i as f64 * cell[0], lo[1] + j as f64 * cell[1]);
                for u in &controls {
                    stencils.push(Stencil::at(lo, cell, res, &(x - dynamics.velocity(&x, u) * dt)));
                }
            }
        }
        let mut target = vec![false; n * n];
        for k in origin_cell_nodes(lo, cell, res) {
            target[k] = true;
        }
        Self { n, controls: controls.len(), dt, stencils, target }
    }

    /// Jacobi sweep by rows from `cur` into `next`. Returns the sup change and
    /// the number of nodes that dropped below the cap.
    fn sweep(&self, cur: &[f64], next: &mut [f64]) -> (f64, usize) {
        let (n, nc) = (self.n, self.controls);
        next.par_chunks_mut(n)
            .enumerate()
            .map(|(j, row)| {
                let mut change: f64 = 0.0;
                let mut crossed = 0;
                for (i, out) in row.iter_mut().enumerate() {
                    let k = j * n + i;
                    if self.target[k] {
                        *out = 0.0;
                        continue;
                    }
                    let mut best = UNREACHED;
                    for st in self.stencils[k * nc..(k + 1) * nc].iter().flatten() {
                        best = best.min(st.apply(cur, n));
                    }
                    let val = (best + self.dt).min(UNREACHED);
                    // Absolute change below the cap, relative change above it,
                    // where values only track the decay of the sentinel share.
                    let delta = (val - cur[k]).abs();
                    if val < HORIZON_CAP && cur[k] < HORIZON_CAP {
                        change = change.max(delta);
                    } else {
                        change = change.max(delta / val.max(cur[k]));
                        if val < HORIZON_CAP {
                            crossed += 1;
                        }
                    }
                    *out = val;
                }
                (change, crossed)
            })
            .reduce(|| (0.0, 0), |a, b| (a.0.max(b.0), a.1 + b.1))
    }
}

/// Corner nodes of every cell that contains the origin.
fn origin_cell_nodes(lo: [f64; 2], cell: [f64; 2], res: usize) -> Vec<usize> {
    let span = |l: f64, c: f64| {
        let f = -l / c;
        let a = (f.ceil() as usize).saturating_sub(1).min(res - 1);
        let b = (f.floor() as usize).min(res - 1);
        a..=b + 1
    };
    let mut out = Vec::new();
    for j in span(lo[1], cell[1]) {
        for i in span(lo[0], cell[0]) {
            out.push(j * (res + 1) + i);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Stencil {
    base: usize,
    w: [f64; 4],
}

impl Stencil {
    fn at(lo: [f64; 2], cell: [f64; 2], res: usize, x: &Vector2<f64>) -> Option<Self> {
        let fx = (x[0] - lo[0]) / cell[0];
        let fy = (x[1] - lo[1]) / cell[1];
        let r = res as f64;
        if !(fx >= 0.0 && fy >= 0.0 && fx <= r && fy <= r) {
            return None;
        }
        let i = (fx.floor() as usize).min(res - 1);
        let j = (fy.floor() as usize).min(res - 1);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        Some(Self { base: j * (res + 1) + i, w: [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty] })
    }

    #[inline]
    fn apply(&self, values: &[f64], n: usize) -> f64 {
        let b = self.base;
        self.w[0] * values[b] + self.w[1] * values[b + 1] + self.w[2] * values[b + n] + self.w[3] * values[b + n + 1]
    }
}

fn vertex_controls(m: usize) -> Vec<Vec<f64>> {
    (0..1usize << m)
        .map(|mask| (0..m).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }).collect())
        .collect()
}

/// Largest `||F(x) + G(x) u||` over grid nodes and vertex controls.
pub fn max_speed(dynamics: PlanarDynamics<'_>, spec: &GridSpec) -> f64 {
    let controls = vertex_controls(dynamics.control_dim());
    let r = spec.resolution as f64;
    let mut best: f64 = 0.0;
    for j in 0..=spec.resolution {
        for i in 0..=spec.resolution {
            let x = Vector2::new(
                spec.lo[0] + (spec.hi[0] - spec.lo[0]) * i as f64 / r,
                spec.lo[1] + (spec.hi[1] - spec.lo[1]) * j as f64 / r,
            );
            for u in &controls {
                best = best.max(dynamics.velocity(&x, u).norm());
            }
        }
    }
    best
}

/// Jacobi value iteration to a fixed point.
pub fn grid_value_iteration(dynamics: PlanarDynamics<'_>, spec: &GridSpec) -> Result<TimeGrid> {
    dynamics.check()?;
    let res = spec.resolution;
    if res < MIN_RESOLUTION {
        return Err(Error::InvalidArgument(format!("resolution {res} below {MIN_RESOLUTION}")));
    }
    if !(spec.lo[0] < 0.0 && spec.hi[0] > 0.0 && spec.lo[1] < 0.0 && spec.hi[1] > 0.0) {
        return Err(Error::InvalidArgument("the origin must lie inside the box".into()));
    }
    let cell = [(spec.hi[0] - spec.lo[0]) / res as f64, (spec.hi[1] - spec.lo[1]) / res as f64];
    let min_cell = cell[0].min(cell[1]);
    let speed = max_speed(dynamics, spec);
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(Error::Degenerate(format!("maximal speed on the box is {speed}")));
    }
    let dt = spec.dt.unwrap_or(CFL_FRACTION * min_cell / speed);
    if !(dt > 0.0) || dt * speed > min_cell {
        return Err(Error::Cfl { step: dt * speed, cell: min_cell });
    }

    let sweeper = Sweeper::new(dynamics, spec.lo, cell, res, dt);
    let mut cur = vec![UNREACHED; sweeper.n * sweeper.n];
    for (v, &t) in cur.iter_mut().zip(&sweeper.target) {
        if t {
            *v = 0.0;
        }
    }
    let mut next = cur.clone();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let (change, crossed) = sweeper.sweep(&cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
        if change < GRID_FIXED_POINT && crossed == 0 {
            break;
        }
        if iterations >= MAX_SWEEPS {
            return Err(Error::Inconsistent("value iteration did not reach a fixed point".into()));
        }
    }
    for v in &mut cur {
        if *v >= HORIZON_CAP {
            *v = f64::INFINITY;
        }
    }
    Ok(TimeGrid { lo: spec.lo, hi: spec.hi, resolution: res, dt, iterations, values: cur })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub x: [f64; 2],
    pub bisection: f64,
    pub grid: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub max_abs_gap: f64,
    pub table: Vec<OracleRow>,
}

/// Bisection values against a grid computed for the reversed system.
pub fn compare_with_grid(sys: &LinearSystem, points: &[Vector], grid: &TimeGrid, tol: f64) -> Result<OracleComparison> {
    let mut table = Vec::with_capacity(points.len());
    let mut max_abs_gap: f64 = 0.0;
    for x in points {
        if x.len() != 2 {
            return Err(Error::Dimension("oracle points are planar".into()));
        }
        let bisection = min_time_linear(sys, x, tol)?.time;
        let g = grid.interpolate(&Vector2::new(x[0], x[1]));
        let gap = (bisection - g).abs();
        max_abs_gap = max_abs_gap.max(gap);
        table.push(OracleRow { x: [x[0], x[1]], bisection, grid: g, gap });
    }
    Ok(OracleComparison { max_abs_gap, table })
}

/// `count` seeded points uniform in `[-half_width, half_width]^2`.
pub fn random_points(seed: u64, count: usize, half_width: f64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Vector::from_vec(vec![rng.gen_range(-half_width..half_width), rng.gen_range(-half_width..half_width)]))
        .collect()
}

/// Tabulates bisection against the grid oracle; the grid is only built when
/// there are points to compare.
pub fn compare_oracle(sys: &LinearSystem, points: &[Vector], spec: &GridSpec, tol: f64) -> Result<OracleComparison> {
    if points.is_empty() {
        return Ok(OracleComparison { max_abs_gap: 0.0, table: Vec::new() });
    }
    let rev = sys.reversed();
    let grid = grid_value_iteration(PlanarDynamics::Linear(&rev), spec)?;
    compare_with_grid(sys, points, &grid, tol)
}
