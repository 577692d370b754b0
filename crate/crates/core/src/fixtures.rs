//! Reference systems with known closed forms.

use crate::bangbang::{BangBangControl, ChannelSchedule};
use crate::linalg::Matrix;
use crate::nonlinear2d::counterexample_system;
use crate::sysdef::{LinearSystem, Monomial, NonlinearSystem2D, PolyVectorField, Polynomial, SystemDef};

/// `x^(n) = u` in companion form.
pub fn chain_integrator(n: usize) -> LinearSystem {
    let a = Matrix::from_fn(n, n, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
    let b = Matrix::from_fn(n, 1, |i, _| if i + 1 == n { 1.0 } else { 0.0 });
    LinearSystem::new(a, b).expect("chain integrator dimensions are valid")
}

pub fn double_integrator() -> LinearSystem {
    chain_integrator(2)
}

pub fn triple_integrator() -> LinearSystem {
    chain_integrator(3)
}

/// Harmonic oscillator `x1' = x2`, `x2' = -x1 + u`.
pub fn rotation() -> LinearSystem {
    LinearSystem::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]], &[&[0.0], &[1.0]]).expect("valid")
}

/// `x1' = x2 (1 + u)`, `x2' = u`: satisfies every hypothesis except flatness
/// of the control field.
pub fn flat_failure_system() -> NonlinearSystem2D {
    counterexample_system()
}

/// `y1' = -y2² + u1`, `y2' = u2`: the linearization at the origin has no
/// drift and is not normal.
pub fn degenerate_linearization_system() -> NonlinearSystem2D {
    let f = PolyVectorField::new(Polynomial::new(vec![Monomial::new(0, 2, -1.0)]), Polynomial::zero());
    let g1 = PolyVectorField::new(Polynomial::constant(1.0), Polynomial::zero());
    let g2 = PolyVectorField::new(Polynomial::zero(), Polynomial::constant(1.0));
    NonlinearSystem2D::new(f, vec![g1, g2]).expect("valid")
}

/// Double integrator with cubic drift terms and constant control field.
pub fn cubic_double_integrator() -> NonlinearSystem2D {
    let f1 = Polynomial::new(vec![Monomial::new(0, 1, 1.0), Monomial::new(1, 2, 0.5), Monomial::new(3, 0, -0.2)]);
    let f2 = Polynomial::new(vec![Monomial::new(2, 1, 0.3), Monomial::new(0, 3, -0.4)]);
    let g = PolyVectorField::new(Polynomial::zero(), Polynomial::constant(1.0));
    NonlinearSystem2D::new(PolyVectorField::new(f1, f2), vec![g]).expect("valid")
}

/// `u = +1` on `(0, s)` and `-1` on `(s, horizon)`.
pub fn one_switch_control(horizon: f64, s: f64) -> BangBangControl {
    BangBangControl::new(horizon, vec![ChannelSchedule { initial_sign: 1, switch_times: vec![s] }])
        .expect("switch inside the horizon")
}

/// First coordinate of `x_s(T) - x_1(T)` for the chain of `n` integrators:
/// `-2 (T - s)^n / n!`.
pub fn chain_endpoint_gap(n: usize, horizon: f64, s: f64) -> f64 {
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    -2.0 * (horizon - s).powi(n as i32) / fact
}

/// Named fixtures as system definitions.
pub fn named(name: &str) -> Option<SystemDef> {
    Some(match name {
        "double_integrator" => SystemDef::Linear(double_integrator()),
        "triple_integrator" => SystemDef::Linear(triple_integrator()),
        "rotation" => SystemDef::Linear(rotation()),
        "flat_failure" => SystemDef::Nonlinear2D(flat_failure_system()),
        "degenerate_linearization" => SystemDef::Nonlinear2D(degenerate_linearization_system()),
        "cubic_double_integrator" => SystemDef::Nonlinear2D(cubic_double_integrator()),
        _ => return None,
    })
}

pub const NAMES: [&str; 6] = [
    "double_integrator",
    "triple_integrator",
    "rotation",
    "flat_failure",
    "degenerate_linearization",
    "cubic_double_integrator",
];
