//! Sample-based certificates for reachable sets and minimum-time epigraphs:
//! strict-convexity constant and exponent, inscribed ball, positive-reach
//! ratio and the proximal-normal inequality on the epigraph.
//!
//! Every constant here is an extremal ratio over finitely many pairs, so it is
//! evidence at the sampled resolution and not a proof.

use serde::{Deserialize, Serialize};

use crate::bangbang::{
    integrate_linear, maximize_sphere, quasi_uniform_directions, sample_boundary_by_zeros, BangBangControl,
    ChannelSchedule, ReachableSet,
};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::sysdef::LinearSystem;

/// Pairs closer than this are excluded from every ratio.
pub const PAIR_EXCLUSION: f64 = 1e-9;
/// Smallest contact value admitted by the exponent regression.
pub const CONTACT_FLOOR: f64 = 1e-12;
/// Distance span, in decades, a well-posed exponent fit should cover.
pub const EXPONENT_SPAN_DECADES: f64 = 2.0;
/// Denominator floor of the epigraph check.
pub const EPIGRAPH_FLOOR: f64 = 1e-12;

/// Boundary sample `x` with a normal covector `ζ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSample {
    pub x: Vector,
    pub zeta: Vector,
}

impl NormalSample {
    pub fn new(x: Vector, zeta: Vector) -> Self {
        Self { x, zeta }
    }
}

/// `γ̂ = min -<ζ, y-x> / (||ζ|| ||y-x||^p)` over all tested pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityCertificate {
    pub exponent: f64,
    pub gamma_hat: f64,
    /// `(sample index, other index)` of the minimizing pair.
    pub worst_pair: (usize, usize),
    pub n_pairs: usize,
    /// Ratio of `gamma_hat` at the refined sampling to this one, when known.
    pub refinement_ratio: Option<f64>,
}

impl ConvexityCertificate {
    pub fn passes(&self) -> bool {
        self.gamma_hat > 0.0
    }
}

/// `φ̂ = max <v, y-x> / (||v|| ||y-x||^2)`, clamped below at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachCertificate {
    pub phi_hat: f64,
    pub worst_pair: (usize, usize),
    pub n_pairs: usize,
}

/// Least-squares slope of `log(-<ζ,y-x>/||ζ||)` against `log ||y-x||`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub exponent: f64,
    pub intercept: f64,
    pub n_used: usize,
    pub n_excluded: usize,
    pub span_decades: f64,
}

/// Triple `(x, ζ, y)` for the exponent regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPair {
    pub x: Vector,
    pub zeta: Vector,
    pub y: Vector,
}

/// Epigraph sample `(x, T(x))` with normal `(ζ, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpigraphPoint {
    pub x: Vector,
    pub time: f64,
    pub zeta: Vector,
    pub theta: f64,
}

/// `(y, β)` with `β >= T(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpigraphOther {
    pub y: Vector,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpigraphCheck {
    pub sigma_hat: f64,
    pub violations: usize,
    pub n_pairs: usize,
    pub skipped: usize,
    pub worst_pair: (usize, usize),
}

fn check_samples(samples: &[NormalSample], min: usize) -> Result<()> {
    if samples.len() < min {
        return Err(Error::InvalidArgument(format!("need at least {min} samples, got {}", samples.len())));
    }
    if samples.iter().any(|s| s.zeta.norm() == 0.0) {
        return Err(Error::InvalidArgument("normal covectors must be nonzero".into()));
    }
    Ok(())
}

/// Pairs every sample against every other point.
pub fn fit_convexity_constant(samples: &[NormalSample], others: &[Vector], p: f64) -> Result<ConvexityCertificate> {
    check_samples(samples, 1)?;
    let mut best = (f64::INFINITY, (0, 0));
    let mut n_pairs = 0;
    for (i, s) in samples.iter().enumerate() {
        let zn = s.zeta.norm();
        for (j, y) in others.iter().enumerate() {
            let d = y - &s.x;
            let dist = d.norm();
            if dist < PAIR_EXCLUSION {
                continue;
            }
            n_pairs += 1;
            let ratio = -s.zeta.dot(&d) / (zn * dist.powf(p));
            if ratio < best.0 {
                best = (ratio, (i, j));
            }
        }
    }
    if n_pairs == 0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    Ok(ConvexityCertificate { exponent: p, gamma_hat: best.0, worst_pair: best.1, n_pairs, refinement_ratio: None })
}

/// Convexity constant of a closed sample set against itself.
pub fn self_convexity(samples: &[NormalSample], p: f64) -> Result<ConvexityCertificate> {
    check_samples(samples, 2)?;
    let others: Vec<Vector> = samples.iter().map(|s| s.x.clone()).collect();
    fit_convexity_constant(samples, &others, p)
}

/// Regression slope over admissible pairs; needs 10 of them. Fits over less
/// than [`EXPONENT_SPAN_DECADES`] of distance are reported through
/// `span_decades` and are less reliable.
pub fn fit_exponent(pairs: &[ContactPair]) -> Result<ExponentFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = 0;
    for c in pairs {
        let d = &c.y - &c.x;
        let dist = d.norm();
        let contact = -c.zeta.dot(&d) / c.zeta.norm();
        if dist < PAIR_EXCLUSION || !(contact > CONTACT_FLOOR) {
            excluded += 1;
            continue;
        }
        xs.push(dist.ln());
        ys.push(contact.ln());
    }
    if xs.len() < 10 {
        return Err(Error::InvalidArgument(format!("only {} admissible pairs, need 10", xs.len())));
    }
    let span = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let (slope, intercept) = least_squares(&xs, &ys);
    Ok(ExponentFit {
        exponent: slope,
        intercept,
        n_used: xs.len(),
        n_excluded: excluded,
        span_decades: span / std::f64::consts::LN_10,
    })
}

/// Contact pairs at the `u ≡ +1` corner of a single-input reachable set: the
/// corner endpoint with the covector annihilating `b, Ab, ..., A^{n-2} b`,
/// against endpoints of `+1 → -1` controls switching at `T - d` for `count`
/// gaps `d` spread geometrically over `decades` below `T/2`.
pub fn corner_contact_pairs(sys: &LinearSystem, horizon: f64, count: usize, decades: f64) -> Result<Vec<ContactPair>> {
    if count < 2 || !(decades > 0.0) {
        return Err(Error::InvalidArgument(format!("need at least 2 gaps over a positive span, got {count}")));
    }
    let corner = sample_boundary_by_zeros(sys, horizon, 2)?
        .into_iter()
        .take(2)
        .find(|p| p.control.channels[0].initial_sign == 1 && p.control.channels[0].switch_times.is_empty())
        .ok_or_else(|| Error::Inconsistent("no constant-control corner among the first samples".into()))?;
    let x = Vector::from_vec(corner.x);
    let zeta = Vector::from_vec(corner.zeta);
    (0..count)
        .map(|k| {
            let gap = 0.5 * horizon * 10f64.powf(-decades * k as f64 / (count - 1) as f64);
            let u = BangBangControl::new(
                horizon,
                vec![ChannelSchedule { initial_sign: 1, switch_times: vec![horizon - gap] }],
            )?;
            Ok(ContactPair { x: x.clone(), zeta: zeta.clone(), y: integrate_linear(sys, &u) })
        })
        .collect()
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// `min_ζ h(ζ)` over sampled unit covectors with local refinement: the radius
/// of a ball about the origin inside the (centrally symmetric, convex)
/// reachable set.
pub fn inscribed_ball_radius(sys: &LinearSystem, horizon: f64, n_dirs: usize) -> Result<f64> {
    if n_dirs < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 directions, got {n_dirs}")));
    }
    let set = ReachableSet::new(sys, horizon)?;
    let n = sys.state_dim();
    let dirs = quasi_uniform_directions(n, n_dirs);
    let spacing = (4.0 * std::f64::consts::PI / n_dirs as f64).powf(1.0 / (n as f64 - 1.0)).min(0.5);
    let (neg, _) = maximize_sphere(&|z: &Vector| Ok(-set.support(z)?), &dirs, spacing)?;
    Ok(-neg)
}

/// Largest positive-reach ratio over all pairs.
pub fn positive_reach_estimate(samples: &[NormalSample], others: &[Vector]) -> Result<ReachCertificate> {
    check_samples(samples, 1)?;
    let mut best = (0.0f64, (0, 0));
    let mut n_pairs = 0;
    for (i, s) in samples.iter().enumerate() {
        let vn = s.zeta.norm();
        for (j, y) in others.iter().enumerate() {
            let d = y - &s.x;
            let dist = d.norm();
            if dist < PAIR_EXCLUSION {
                continue;
            }
            n_pairs += 1;
            let ratio = s.zeta.dot(&d) / (vn * dist * dist);
            if ratio > best.0 {
                best = (ratio, (i, j));
            }
        }
    }
    if n_pairs == 0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    Ok(ReachCertificate { phi_hat: best.0, worst_pair: best.1, n_pairs })
}

/// `σ̂ = max <(ζ,θ), (y,β) - (x,T(x))> / (||(ζ,θ)|| (||y-x||^2 + |β - T(x)|))`,
/// clamped at zero; pairs above `sigma_cap` count as violations.
pub fn epigraph_proximal_check(points: &[EpigraphPoint], others: &[EpigraphOther], sigma_cap: f64) -> EpigraphCheck {
    let mut out = EpigraphCheck { sigma_hat: 0.0, violations: 0, n_pairs: 0, skipped: 0, worst_pair: (0, 0) };
    for (i, p) in points.iter().enumerate() {
        let norm = (p.zeta.norm_squared() + p.theta * p.theta).sqrt();
        if norm == 0.0 {
            out.skipped += others.len();
            continue;
        }
        for (j, o) in others.iter().enumerate() {
            let d = &o.y - &p.x;
            let denom = d.norm_squared() + (o.beta - p.time).abs();
            if denom < EPIGRAPH_FLOOR {
                out.skipped += 1;
                continue;
            }
            out.n_pairs += 1;
            let ratio = (p.zeta.dot(&d) + p.theta * (o.beta - p.time)) / (norm * denom);
            if ratio > sigma_cap {
                out.violations += 1;
            }
            if ratio > out.sigma_hat {
                out.sigma_hat = ratio;
                out.worst_pair = (i, j);
            }
        }
    }
    out
}

/// Number of pair midpoints that leave the intersection of the sampled
/// supporting half-spaces by more than `tol`.
pub fn midpoint_violations(samples: &[NormalSample], tol: f64) -> usize {
    let mut bad = 0;
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let m = (&a.x + &b.x) * 0.5;
            let outside = samples.iter().any(|s| s.zeta.dot(&(&m - &s.x)) / s.zeta.norm() > tol);
            if outside {
                bad += 1;
            }
        }
    }
    bad
}

/// Relative change `|a - b| / max(|a|, |b|)` used for refinement stability.
pub fn relative_change(coarse: f64, fine: f64) -> f64 {
    let scale = coarse.abs().max(fine.abs());
    if scale == 0.0 {
        0.0
    } else {
        (coarse - fine).abs() / scale
    }
}
