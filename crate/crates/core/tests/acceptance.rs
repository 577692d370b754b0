//! Acceptance suite. Prints one line per criterion and exits nonzero when any
//! criterion fails. Reference values are computed here from closed forms or
//! from nalgebra, independently of the library routines under test.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reachkit::bangbang::{gaussian, integrate_linear, sample_boundary_by_zeros, BangBangControl};
use reachkit::fixtures::{
    chain_integrator, cubic_double_integrator, degenerate_linearization_system, double_integrator, one_switch_control,
    rotation, triple_integrator,
};
use reachkit::geometry::{
    epigraph_proximal_check, fit_convexity_constant, fit_exponent, inscribed_ball_radius, positive_reach_estimate,
    relative_change, self_convexity, ContactPair, EpigraphOther, EpigraphPoint, NormalSample,
};
use reachkit::linalg::{Matrix, Vector};
use reachkit::mintime::{compare_oracle, GridSpec};
use reachkit::nonlinear2d::{
    default_step, hamiltonian_constancy, integrate_extremal, minimized_hamiltonian, reproduce_counterexample,
    sample_nonlinear_boundary, Mode, NonlinearBoundary,
};
use reachkit::switching::{
    appendix_bounds_selftest, sum_derivative_lower_bound, switch_count_bound, SwitchingBasis, SwitchingFunction,
};
use reachkit::sysdef::{LinearSystem, NonlinearSystem2D};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn v(xs: &[f64]) -> Vector {
    Vector::from_row_slice(xs)
}

// 1. Chain of integrators: endpoint gap and contact exponent.
fn chain_gap() -> Outcome {
    let horizon = 1.0;
    let s_grid: Vec<f64> = (50..100).map(|k| k as f64 / 100.0).collect();
    let mut parts = Vec::new();
    for (n, lo, hi) in [(2usize, 1.9, 2.1), (3, 2.85, 3.15)] {
        let sys = chain_integrator(n);
        let x1 = integrate_linear(&sys, &BangBangControl::constant(horizon, &[1]).unwrap());
        let fact: f64 = (1..=n).map(|k| k as f64).product();
        let mut worst: f64 = 0.0;
        let mut pairs = Vec::new();
        for &s in &s_grid {
            let xs = integrate_linear(&sys, &one_switch_control(horizon, s));
            let expected = -2.0 * (horizon - s).powi(n as i32) / fact;
            worst = worst.max((xs[0] - x1[0] - expected).abs());
            let mut e1 = Vector::zeros(n);
            e1[0] = 1.0;
            pairs.push(ContactPair { x: x1.clone(), zeta: e1, y: xs });
        }
        let fit = fit_exponent(&pairs).map_err(|e| e.to_string())?;
        let msg = format!("N={n}: max gap error {worst:.2e}, exponent {:.4}", fit.exponent);
        check(worst <= 1e-8 && fit.exponent >= lo && fit.exponent <= hi, msg.clone())?;
        parts.push(msg);
    }
    Ok(parts.join("; "))
}

// 2. Flatness counterexample.
fn counterexample() -> Outcome {
    let s_grid: Vec<f64> = (1..=20).map(|k| k as f64 / 21.0).collect();
    let mut parts = Vec::new();
    for tau in [0.5, 1.0] {
        let table = reproduce_counterexample(tau, &s_grid).map_err(|e| e.to_string())?;
        let norm = (4.0f64 + tau * tau).sqrt();
        let zeta = Vector2::new(2.0, -tau) / norm;
        let mid = Vector2::new(tau * tau / 4.0, 0.0);
        let mut end_err: f64 = 0.0;
        let mut inner_err: f64 = 0.0;
        for row in &table.rows {
            let s = row.s;
            let expected = Vector2::new(s * s * tau * tau, tau * (2.0 * s - 1.0));
            let x = Vector2::new(row.endpoint[0], row.endpoint[1]);
            end_err = end_err.max((x - expected).norm());
            let closed = 2.0 * tau * tau * (s - 0.5).powi(2) / norm;
            inner_err = inner_err.max((zeta.dot(&(x - mid)) - closed).abs());
        }
        let sample = vec![NormalSample::new(v(&[mid[0], mid[1]]), v(&[zeta[0], zeta[1]]))];
        let others: Vec<Vector> = table.rows.iter().map(|r| v(&r.endpoint)).collect();
        let gamma = fit_convexity_constant(&sample, &others, 2.0).map_err(|e| e.to_string())?.gamma_hat;
        let reach = positive_reach_estimate(&sample, &others).map_err(|e| e.to_string())?.phi_hat;
        let bound = 8.0 / ((16.0 + tau.powi(4)) * norm);
        let msg = format!(
            "tau={tau}: endpoint err {end_err:.2e}, inner err {inner_err:.2e}, gamma_hat {gamma:.4}, reach {reach:.4} <= {bound:.4}"
        );
        check(end_err <= 1e-8 && inner_err <= 1e-8 && gamma < 0.0 && reach <= bound + 1e-6, msg.clone())?;
        parts.push(msg);
    }
    Ok(parts.join("; "))
}

fn random_normal_pair(rng: &mut ChaCha8Rng, n: usize) -> (Matrix, Vector) {
    loop {
        let a = DMatrix::from_fn(n, n, |_, _| gaussian(rng));
        let b = DVector::from_fn(n, |_, _| gaussian(rng));
        let norm = a.clone().svd(false, false).singular_values.max();
        let a = a * (2.0 * rng.gen_range(0.0..1.0) / norm);
        let k = controllability(&a, &b);
        let sv = k.svd(false, false).singular_values;
        if sv.min() > 1e-6 * sv.max() {
            return (a, b);
        }
    }
}

fn controllability(a: &Matrix, b: &Vector) -> Matrix {
    let n = a.nrows();
    let mut k = Matrix::zeros(n, n);
    let mut col = b.clone();
    for i in 0..n {
        k.set_column(i, &col);
        col = a * &col;
    }
    k
}

// 3. Derivative-sum lower bound.
fn lower_bound_sweep() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut violations = 0;
    let mut disagreements = 0;
    let mut checks = 0;
    for sys_idx in 0..1000 {
        let n = 2 + sys_idx % 2;
        let (a, b) = random_normal_pair(&mut rng, n);
        let k = controllability(&a, &b);
        let l_const = k.clone().svd(false, false).singular_values.min();
        let a_norm = a.clone().svd(false, false).singular_values.max();
        for _ in 0..10 {
            let zeta = DVector::from_fn(n, |_, _| gaussian(&mut rng)).normalize();
            let s = rng.gen_range(0.0..2.0);
            let w = (a.transpose() * s).exp() * &zeta;
            let lhs: f64 = (k.transpose() * w).iter().map(|x| x.abs()).sum();
            let rhs = l_const * (-a_norm * s).exp();
            checks += 1;
            if lhs < rhs - 1e-9 {
                violations += 1;
            }
            let lib = sum_derivative_lower_bound(&a, &b, &zeta, s).map_err(|e| e.to_string())?;
            if !lib.ok || (lib.lhs - lhs).abs() > 1e-9 * (1.0 + lhs) {
                disagreements += 1;
            }
        }
    }
    check(
        violations == 0 && disagreements == 0,
        format!("{checks} checks, {violations} violations, {disagreements} library disagreements"),
    )
}

// 4. Observed zeros never exceed the switch-count bound.
fn switch_counts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut parts = Vec::new();
    for (name, sys) in [("double integrator", double_integrator()), ("rotation", rotation())] {
        let b = sys.column(0);
        for horizon in [1.0, 5.0, 10.0] {
            let bound = switch_count_bound(sys.a(), &b, horizon).map_err(|e| e.to_string())?;
            let basis = Arc::new(SwitchingBasis::new(sys.a(), &b, horizon).map_err(|e| e.to_string())?);
            let mut max_seen = 0usize;
            for _ in 0..10_000 {
                let zeta = DVector::from_fn(2, |_, _| gaussian(&mut rng)).normalize();
                let sf = SwitchingFunction::with_basis(basis.clone(), &zeta).map_err(|e| e.to_string())?;
                max_seen = max_seen.max(sf.find_zeros().map_err(|e| e.to_string())?.len());
            }
            let msg = format!("{name} T={horizon}: max zeros {max_seen} <= bound {bound}");
            check(max_seen as u64 <= bound, msg.clone())?;
            parts.push(msg);
        }
    }
    Ok(parts.join("; "))
}

fn linear_samples(sys: &LinearSystem, horizon: f64, m: usize) -> Result<Vec<NormalSample>, String> {
    let pts = sample_boundary_by_zeros(sys, horizon, m).map_err(|e| e.to_string())?;
    Ok(pts.into_iter().map(|p| NormalSample::new(v(&p.x), v(&p.zeta))).collect())
}

// Number of zero-indexed samples on an `m`-cell grid in dimension `n`.
fn sample_count(n: usize, m: usize) -> usize {
    let mut c = 1;
    for k in 0..n - 1 {
        c = c * (m + 1 + k) / (k + 1);
    }
    2 * c
}

// 5. Strict convexity of linear reachable sets.
fn linear_convexity() -> Outcome {
    let mut parts = Vec::new();
    for (name, sys, m) in [("double", double_integrator(), 90usize), ("triple", triple_integrator(), 40)] {
        let n = sys.state_dim();
        let p = n as f64;
        let m_fine = (m..).find(|&k| sample_count(n, k) >= 2 * sample_count(n, m)).unwrap();
        let mut ratios = Vec::new();
        for horizon in [0.25, 0.5, 1.0] {
            let coarse = self_convexity(&linear_samples(&sys, horizon, m)?, p).map_err(|e| e.to_string())?;
            let fine = self_convexity(&linear_samples(&sys, horizon, m_fine)?, p).map_err(|e| e.to_string())?;
            let change = relative_change(coarse.gamma_hat, fine.gamma_hat);
            let msg = format!(
                "{name} T={horizon}: gamma_hat {:.4e} -> {:.4e} over {} -> {} samples (change {:.1}%)",
                coarse.gamma_hat,
                fine.gamma_hat,
                sample_count(n, m),
                sample_count(n, m_fine),
                100.0 * change
            );
            check(coarse.gamma_hat > 0.0 && fine.gamma_hat > 0.0 && change <= 0.10, msg.clone())?;
            parts.push(msg);
            let radius = inscribed_ball_radius(&sys, horizon, 720).map_err(|e| e.to_string())?;
            ratios.push(radius / horizon.powi(n as i32));
        }
        let spread = ratios.iter().cloned().fold(0.0, f64::max) / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let msg = format!("{name} radius/T^N {ratios:.4?} spread {spread:.3}");
        check(spread <= 2.0, msg.clone())?;
        parts.push(msg);
    }
    Ok(parts.join("; "))
}

// 6. Bisection against the grid oracle.
fn oracle_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let points: Vec<Vector> =
        (0..100).map(|_| v(&[rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])).collect();
    let cmp = compare_oracle(&double_integrator(), &points, &GridSpec::square(1.0, 512), 1e-6)
        .map_err(|e| e.to_string())?;
    check(cmp.max_abs_gap < 0.02, format!("max gap {:.4} s over {} points (limit 0.02)", cmp.max_abs_gap, cmp.table.len()))
}

fn reversed_levels(sys: &NonlinearSystem2D, tau: f64, n_dirs: usize) -> Result<Vec<NonlinearBoundary>, String> {
    let rev = sys.reversed();
    (1..=4)
        .map(|k| {
            let level = tau * k as f64 / 4.0;
            sample_nonlinear_boundary(&rev, level, n_dirs, default_step(level), Mode::Certified)
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn epigraph_sigma(sys: &NonlinearSystem2D, levels: &[NonlinearBoundary]) -> f64 {
    let mut points = Vec::new();
    let mut others = Vec::new();
    for b in levels {
        for s in &b.samples {
            let x = v(&[s.endpoint[0], s.endpoint[1]]);
            let theta = minimized_hamiltonian(sys, &s.endpoint, &s.zeta);
            points.push(EpigraphPoint { x: x.clone(), time: b.tau, zeta: v(&[s.zeta[0], s.zeta[1]]), theta });
            others.push(EpigraphOther { y: x, beta: b.tau });
        }
    }
    epigraph_proximal_check(&points, &others, f64::INFINITY).sigma_hat
}

// 7. Certified nonlinear boundaries.
fn nonlinear_certified() -> Outcome {
    let sys = cubic_double_integrator();
    let mut parts = Vec::new();
    for tau in [0.05, 0.1, 0.2] {
        let boundary = sample_nonlinear_boundary(&sys, tau, 360, default_step(tau), Mode::Certified)
            .map_err(|e| e.to_string())?;
        let gamma = self_convexity(&boundary.normal_samples(), 2.0).map_err(|e| e.to_string())?.gamma_hat;

        let mut dev_fine: f64 = 0.0;
        let mut dev_half: f64 = 0.0;
        for k in 0..36 {
            let angle = std::f64::consts::TAU * (k as f64 + 0.25) / 36.0;
            let lam = Vector2::new(angle.cos(), angle.sin());
            let a = integrate_extremal(&sys, lam, tau, 1e-4, Mode::Certified).map_err(|e| e.to_string())?;
            let b = integrate_extremal(&sys, lam, tau, 5e-5, Mode::Certified).map_err(|e| e.to_string())?;
            dev_fine = dev_fine.max(hamiltonian_constancy(&a).max_dev);
            dev_half = dev_half.max(hamiltonian_constancy(&b).max_dev);
        }
        let shrinks = dev_half <= dev_fine / 8.0 || (dev_fine < 1e-9 && dev_half < 1e-9);

        let coarse = reversed_levels(&sys, tau, 180)?;
        let fine = reversed_levels(&sys, tau, 360)?;
        let h_max = fine[3]
            .samples
            .iter()
            .map(|s| minimized_hamiltonian(&sys, &s.endpoint, &s.zeta))
            .fold(f64::NEG_INFINITY, f64::max);
        let sigma_coarse = epigraph_sigma(&sys, &coarse);
        let sigma_fine = epigraph_sigma(&sys, &fine);
        let sigma_change = relative_change(sigma_coarse, sigma_fine);

        let msg = format!(
            "tau={tau}: closed/simple {}, gamma_hat {gamma:.4}, H dev {dev_fine:.1e} -> {dev_half:.1e}, max h {h_max:.1e}, sigma_hat {sigma_coarse:.4} -> {sigma_fine:.4}",
            boundary.closed_simple()
        );
        check(
            boundary.closed_simple()
                && boundary.uncertified.is_empty()
                && gamma > 0.0
                && dev_fine <= 1e-5
                && shrinks
                && h_max <= 1e-9
                && sigma_fine.is_finite()
                && sigma_change <= 0.15,
            msg.clone(),
        )?;
        parts.push(msg);
    }
    Ok(parts.join("; "))
}

// 8. Eligibility gate on a system with a degenerate linearization.
fn eligibility_gate() -> Outcome {
    let sys = degenerate_linearization_system();
    let flags = sys.flags();
    let refused = sample_nonlinear_boundary(&sys, 0.2, 72, default_step(0.2), Mode::Certified);
    let code = refused.as_ref().err().map(|e| e.exit_code());
    let extremal_code = integrate_extremal(&sys, Vector2::new(1.0, 0.0), 0.2, default_step(0.2), Mode::Certified)
        .err()
        .map(|e| e.exit_code());
    let explored = sample_nonlinear_boundary(&sys, 0.2, 72, default_step(0.2), Mode::Exploratory)
        .map_err(|e| e.to_string())?;
    let n_points = explored.samples.len() + explored.uncertified.len();
    check(
        !flags.linearization_normal && code == Some(2) && extremal_code == Some(2) && n_points == 72,
        format!(
            "normal linearization {}, certified exit code {code:?}/{extremal_code:?}, exploratory points {n_points}",
            flags.linearization_normal
        ),
    )
}

// 9. Integral inequalities self-test.
fn appendix_selftest() -> Outcome {
    let report = appendix_bounds_selftest(1000, 9);
    check(
        report.violations() == 0,
        format!(
            "{} integral + {} growth checks, {} violations",
            report.integral_checks,
            report.growth_checks,
            report.violations()
        ),
    )
}

type Criterion = (u32, &'static str, u64, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "chain integrator endpoint gap", 10, chain_gap),
        (2, "flatness counterexample", 30, counterexample),
        (3, "derivative-sum lower bound sweep", 60, lower_bound_sweep),
        (4, "switch-count bound", 60, switch_counts),
        (5, "linear strict convexity", 120, linear_convexity),
        (6, "bisection vs grid oracle", 120, oracle_agreement),
        (7, "nonlinear certified mode", 300, nonlinear_certified),
        (8, "eligibility gate", 10, eligibility_gate),
        (9, "integral inequalities self-test", 30, appendix_selftest),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(limit);
        let pass = outcome.is_ok() && in_time;
        if !pass {
            failed += 1;
        }
        let detail = match outcome {
            Ok(m) | Err(m) => m,
        };
        println!(
            "criterion {id} [{}] {name}: {detail} ({:.1} s, limit {limit} s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
