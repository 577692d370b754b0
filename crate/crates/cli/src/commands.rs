use std::fmt::Write as _;
use std::path::PathBuf;

use nalgebra::Vector2;
use serde_json::{json, Value};

use reachkit::bangbang::{integrate_linear, sample_boundary, sample_boundary_by_zeros, BangBangControl, BoundaryPoint};
use reachkit::fixtures::{chain_endpoint_gap, chain_integrator, degenerate_linearization_system, one_switch_control};
use reachkit::geometry::{
    corner_contact_pairs, epigraph_proximal_check, fit_exponent, inscribed_ball_radius, positive_reach_estimate,
    relative_change, self_convexity, EpigraphOther, EpigraphPoint, NormalSample,
};
use reachkit::linalg::Vector;
use reachkit::mintime::{
    compare_oracle, grid_value_iteration, min_time_linear, random_points, GridSpec, PlanarDynamics, TimeGrid,
};
use reachkit::nonlinear2d::{
    default_step, hamiltonian_constancy, minimized_hamiltonian, pmp_residuals, reproduce_counterexample,
    sample_nonlinear_boundary, Mode, NonlinearBoundary,
};
use reachkit::sysdef::{linearize_at_origin, normality_check, LinearSystem, NonlinearSystem2D, SystemDef};

use crate::context::{
    fmt_num, load_system, parse_point, read_points, Failure, RunContext, CERTIFICATE, EXTREMALITY, OK, ORACLE_GAP,
    OTHER, PARSE,
};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// System definition file, or `builtin:<name>`.
    #[arg(long)]
    pub system: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Time tolerance in seconds.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Number of sampled directions.
    #[arg(long, default_value_t = 360)]
    pub dirs: usize,
    /// Grid cells per axis.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Horizon; defaults to 1 for linear and 0.2 for planar nonlinear systems.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Machine-readable report.
    #[arg(long)]
    pub json: bool,
}

impl Common {
    fn system(&self) -> Result<SystemDef, Failure> {
        let spec = self.system.as_deref().ok_or_else(|| Failure::new(PARSE, "missing --system"))?;
        load_system(spec)
    }

    fn tau(&self, sys: &SystemDef) -> f64 {
        self.tau.unwrap_or(match sys {
            SystemDef::Linear(_) => 1.0,
            SystemDef::Nonlinear2D(_) => 0.2,
        })
    }

    fn params(&self) -> Value {
        json!({
            "tol": self.tol,
            "dirs": self.dirs,
            "resolution": self.resolution,
            "tau": self.tau,
            "json": self.json,
        })
    }

    fn context(&self, command: &'static str, sys: Option<&SystemDef>, extra: Value) -> RunContext {
        let mut params = self.params();
        if let (Value::Object(p), Value::Object(e)) = (&mut params, extra) {
            p.extend(e);
        }
        RunContext::new(command, sys, params, self.seed, self.out.clone())
    }
}

fn report(common: &Common, text: &str, summary: &Value) {
    if common.json {
        eprintln!("{summary}");
    } else {
        eprint!("{text}");
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn pass_fail(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}

fn nonlinear_mode(sys: &NonlinearSystem2D, exploratory: bool) -> Result<Mode, Failure> {
    if sys.flags().all() {
        Ok(Mode::Certified)
    } else if exploratory {
        Ok(Mode::Exploratory)
    } else {
        sys.require_certified()?;
        Err(Failure::new(PARSE, "system not eligible for certified mode"))
    }
}

pub fn check(common: &Common) -> Result<u8, Failure> {
    let def = common.system()?;
    let ctx = common.context("check", Some(&def), json!({}));
    let mut text = String::new();
    let (eligible, body) = match &def {
        SystemDef::Linear(sys) => {
            let cols = normality_check(sys);
            let normal = cols.iter().all(|c| c.rank == sys.state_dim());
            for (i, c) in cols.iter().enumerate() {
                let _ = writeln!(
                    text,
                    "column {i}: rank {}/{}, normal: {}, L={}",
                    c.rank,
                    sys.state_dim(),
                    yes_no(c.rank == sys.state_dim()),
                    c.l_const
                );
            }
            let _ = writeln!(text, "normal: {}", yes_no(normal));
            let columns: Vec<Value> = cols
                .iter()
                .map(|c| json!({"rank": c.rank, "normal": c.rank == sys.state_dim(), "l_const": c.l_const}))
                .collect();
            (normal, json!({"kind": "linear", "state_dim": sys.state_dim(), "columns": columns, "normal": normal}))
        }
        SystemDef::Nonlinear2D(sys) => {
            let flags = sys.flags();
            let lin = linearize_at_origin(sys);
            let cols = normality_check(&lin);
            let lipschitz = sys.lipschitz_on_box([-2.0; 2], [2.0; 2], 41);
            let _ = writeln!(text, "(i) F(0) = 0: {}", pass_fail(flags.drift_vanishes));
            let _ = writeln!(text, "(ii) linearization normal: {}", pass_fail(flags.linearization_normal));
            let _ = writeln!(text, "(iii) DG(0) = 0: {}", pass_fail(flags.control_flat));
            for (i, c) in cols.iter().enumerate() {
                let _ = writeln!(text, "linearization column {i}: rank {}/2, L={}", c.rank, c.l_const);
            }
            if !flags.linearization_normal {
                let _ = writeln!(text, "linearization not normal");
            }
            let _ = writeln!(text, "Lipschitz estimate of DF, DG on [-2,2]^2: {lipschitz}");
            let _ = writeln!(text, "certified mode: {}", if flags.all() { "eligible" } else { "not eligible" });
            let columns: Vec<Value> = cols.iter().map(|c| json!({"rank": c.rank, "l_const": c.l_const})).collect();
            (
                flags.all(),
                json!({
                    "kind": "nonlinear2d",
                    "flags": flags,
                    "linearization_columns": columns,
                    "lipschitz_box": [[-2.0, -2.0], [2.0, 2.0]],
                    "lipschitz": lipschitz,
                    "eligible": flags.all(),
                }),
            )
        }
    };
    if common.json {
        ctx.emit_json(body)?;
    } else {
        ctx.emit_text(&text)?;
    }
    Ok(if eligible { OK } else { PARSE })
}

pub fn boundary(common: &Common, exploratory: bool) -> Result<u8, Failure> {
    let def = common.system()?;
    let tau = common.tau(&def);
    let ctx = common.context("boundary", Some(&def), json!({"exploratory": exploratory}));
    match &def {
        SystemDef::Linear(sys) => linear_boundary(common, &ctx, sys, tau),
        SystemDef::Nonlinear2D(sys) => nonlinear_boundary(common, &ctx, sys, tau, exploratory),
    }
}

fn linear_boundary(common: &Common, ctx: &RunContext, sys: &LinearSystem, tau: f64) -> Result<u8, Failure> {
    let n = sys.state_dim();
    let points = sample_boundary(sys, tau, common.dirs)?;
    let mut csv = String::new();
    let names: Vec<String> =
        (1..=n).map(|i| format!("zeta_{i}")).chain((1..=n).map(|i| format!("x_{i}"))).collect();
    let _ = writeln!(csv, "{},n_switches,residual", names.join(","));
    for p in &points {
        let cells: Vec<String> = p.zeta.iter().chain(&p.x).map(|v| fmt_num(*v)).collect();
        let switches: usize = p.control.n_switches().iter().sum();
        let _ = writeln!(csv, "{},{switches},{}", cells.join(","), fmt_num(p.residual));
    }
    ctx.emit_text(&csv)?;
    let max_switches = points.iter().map(|p| p.control.n_switches().iter().sum::<usize>()).max().unwrap_or(0);
    let max_residual = points.iter().map(|p| p.residual).fold(0.0, f64::max);
    let extremal = points.iter().all(BoundaryPoint::is_extremal);
    let summary = json!({
        "n_dirs": points.len(),
        "max_switches": max_switches,
        "max_extremality_residual": max_residual,
        "extremal": extremal,
    });
    let text = format!(
        "{} boundary points, at most {max_switches} switches, extremality residual {max_residual:.2e}: {}\n",
        points.len(),
        pass_fail(extremal)
    );
    report(common, &text, &summary);
    Ok(if extremal { OK } else { EXTREMALITY })
}

fn nonlinear_boundary(
    common: &Common,
    ctx: &RunContext,
    sys: &NonlinearSystem2D,
    tau: f64,
    exploratory: bool,
) -> Result<u8, Failure> {
    let mode = nonlinear_mode(sys, exploratory)?;
    let b = sample_nonlinear_boundary(sys, tau, common.dirs, default_step(tau), mode)?;
    let mut rows: Vec<(f64, String)> = Vec::new();
    for (s, certified) in b.samples.iter().map(|s| (s, 1)).chain(b.uncertified.iter().map(|s| (s, 0))) {
        let line = format!(
            "{},{},{},{},{certified}",
            fmt_num(s.angle),
            fmt_num(s.endpoint[0]),
            fmt_num(s.endpoint[1]),
            s.n_switches
        );
        rows.push((s.angle, line));
    }
    rows.sort_by(|a, c| a.0.total_cmp(&c.0));
    let mut csv = String::from("angle,x1,x2,n_switches,certified\n");
    for (_, line) in rows {
        csv.push_str(&line);
        csv.push('\n');
    }
    ctx.emit_text(&csv)?;

    let (mut adjoint, mut state, mut ham): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut mismatches = 0;
    let mut min_norm = f64::INFINITY;
    for s in &b.samples {
        let r = pmp_residuals(&s.trajectory);
        adjoint = adjoint.max(r.adjoint);
        state = state.max(r.state);
        mismatches += r.control_mismatches;
        min_norm = min_norm.min(r.min_adjoint_norm);
        ham = ham.max(hamiltonian_constancy(&s.trajectory).max_dev);
    }
    let max_switches = b.samples.iter().map(|s| s.n_switches).max().unwrap_or(0);
    let extremal = b.uncertified.is_empty() && adjoint <= 1e-6 && mismatches == 0 && min_norm >= 1e-8;
    let certified = mode == Mode::Certified;
    let summary = json!({
        "mode": mode,
        "n_dirs": common.dirs,
        "uncertified": b.uncertified.len(),
        "closed": b.closed,
        "simple": b.simple,
        "max_switches": max_switches,
        "adjoint_residual": adjoint,
        "state_residual": state,
        "control_mismatches": mismatches,
        "min_adjoint_norm": min_norm,
        "hamiltonian_max_dev": ham,
        "extremal": extremal,
    });
    let text = format!(
        "{:?} mode: {} regular and {} singular extremals, closed {}, simple {}, at most {max_switches} switches\n\
         adjoint residual {adjoint:.2e}, state residual {state:.2e}, {mismatches} control mismatches, \
         Hamiltonian deviation {ham:.2e}: {}\n",
        mode,
        b.samples.len(),
        b.uncertified.len(),
        yes_no(b.closed),
        yes_no(b.simple),
        pass_fail(extremal)
    );
    report(common, &text, &summary);
    Ok(if certified && !extremal { EXTREMALITY } else { OK })
}

/// Flags of `mintime`.
#[derive(Debug, Clone, clap::Args)]
pub struct MintimeArgs {
    /// Query point, comma separated; repeatable.
    #[arg(long = "point", allow_hyphen_values = true)]
    pub points: Vec<String>,
    /// File with one query point per line.
    #[arg(long = "points")]
    pub points_file: Option<PathBuf>,
    /// Half-width of the grid box.
    #[arg(long, default_value_t = 1.0)]
    pub half_width: f64,
    /// Largest accepted gap between bisection and grid, in seconds.
    #[arg(long, default_value_t = 0.02)]
    pub gap_bound: f64,
}

pub fn mintime(common: &Common, args: &MintimeArgs) -> Result<u8, Failure> {
    let def = common.system()?;
    let mut points = Vec::new();
    for p in &args.points {
        points.push(parse_point(p).map_err(|m| Failure::new(PARSE, m))?);
    }
    if let Some(path) = &args.points_file {
        points.extend(read_points(path)?);
    }
    if points.is_empty() {
        return Err(Failure::new(PARSE, "no query points (use --point or --points)"));
    }
    let n = match &def {
        SystemDef::Linear(sys) => sys.state_dim(),
        SystemDef::Nonlinear2D(_) => 2,
    };
    if let Some(bad) = points.iter().find(|p| p.len() != n) {
        return Err(Failure::new(PARSE, format!("point {bad:?} does not have {n} coordinates")));
    }
    let ctx = common.context(
        "mintime",
        Some(&def),
        json!({"points": points, "half_width": args.half_width, "gap_bound": args.gap_bound}),
    );
    let spec = |res: usize| GridSpec::square(args.half_width, res);
    let (method, bisection, grid): (&str, Option<Vec<f64>>, Option<TimeGrid>) = match &def {
        SystemDef::Linear(sys) => {
            let times = points
                .iter()
                .map(|p| min_time_linear(sys, &Vector::from_vec(p.clone()), common.tol).map(|r| r.time))
                .collect::<reachkit::Result<Vec<f64>>>()?;
            match common.resolution {
                Some(res) if n == 2 => {
                    let rev = sys.reversed();
                    ("both", Some(times), Some(grid_value_iteration(PlanarDynamics::Linear(&rev), &spec(res))?))
                }
                Some(_) => return Err(Failure::new(PARSE, "the grid oracle is planar")),
                None => ("bisect", Some(times), None),
            }
        }
        SystemDef::Nonlinear2D(sys) => {
            let rev = sys.reversed();
            let res = common.resolution.unwrap_or(256);
            ("grid", None, Some(grid_value_iteration(PlanarDynamics::Nonlinear(&rev), &spec(res))?))
        }
    };
    let coords: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
    let mut csv = format!("{},T,method,grid_T,gap\n", coords.join(","));
    let mut max_gap: f64 = 0.0;
    let mut compared = 0;
    for (k, p) in points.iter().enumerate() {
        let g = grid.as_ref().map(|g| g.interpolate(&Vector2::new(p[0], p[1])));
        let b = bisection.as_ref().map(|b| b[k]);
        let gap = match (b, g) {
            (Some(b), Some(g)) if b.is_finite() || g.is_finite() => Some((b - g).abs()),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        if let Some(gap) = gap {
            compared += 1;
            max_gap = if gap.is_nan() { f64::INFINITY } else { max_gap.max(gap) };
        }
        let t = b.or(g).unwrap_or(f64::NAN);
        let cells: Vec<String> = p.iter().map(|v| fmt_num(*v)).collect();
        let _ = writeln!(
            csv,
            "{},{},{method},{},{}",
            cells.join(","),
            fmt_num(t),
            g.map(fmt_num).unwrap_or_default(),
            gap.map(fmt_num).unwrap_or_default()
        );
    }
    ctx.emit_text(&csv)?;
    let within = max_gap <= args.gap_bound;
    let summary = json!({"points": points.len(), "method": method, "compared": compared, "max_gap": max_gap, "gap_bound": args.gap_bound});
    let text = if compared > 0 {
        format!("{} points by {method}, max gap {max_gap:.4} s (bound {}): {}\n", points.len(), args.gap_bound, pass_fail(within))
    } else {
        format!("{} points by {method}\n", points.len())
    };
    report(common, &text, &summary);
    Ok(if within { OK } else { ORACLE_GAP })
}

/// Flags of `oracle`.
#[derive(Debug, Clone, clap::Args)]
pub struct OracleArgs {
    /// Number of random query points.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Points are drawn from `[-h, h]^2`; the grid covers `[-2h, 2h]^2`.
    #[arg(long, default_value_t = 0.5)]
    pub half_width: f64,
    /// Largest accepted gap, in seconds.
    #[arg(long, default_value_t = 0.02)]
    pub gap_bound: f64,
}

pub fn oracle(common: &Common, args: &OracleArgs) -> Result<u8, Failure> {
    let def = common.system()?;
    let SystemDef::Linear(sys) = &def else {
        return Err(Failure::new(PARSE, "the oracle comparison needs a linear system"));
    };
    if sys.state_dim() != 2 {
        return Err(Failure::new(PARSE, "the grid oracle is planar"));
    }
    let res = common.resolution.unwrap_or(256);
    let ctx = common.context(
        "oracle",
        Some(&def),
        json!({"count": args.count, "half_width": args.half_width, "gap_bound": args.gap_bound}),
    );
    let points = random_points(common.seed, args.count, args.half_width);
    let spec = GridSpec::square(2.0 * args.half_width, res);
    let cmp = compare_oracle(sys, &points, &spec, common.tol)?;
    let mut csv = String::from("x1,x2,bisection,grid,gap\n");
    for r in &cmp.table {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            fmt_num(r.x[0]),
            fmt_num(r.x[1]),
            fmt_num(r.bisection),
            fmt_num(r.grid),
            fmt_num(r.gap)
        );
    }
    ctx.emit_text(&csv)?;
    let mut gaps: Vec<f64> = cmp.table.iter().map(|r| r.gap).collect();
    gaps.sort_by(f64::total_cmp);
    let median = gaps.get(gaps.len() / 2).copied().unwrap_or(0.0);
    let within = cmp.max_abs_gap <= args.gap_bound;
    let summary = json!({
        "points": cmp.table.len(),
        "resolution": res,
        "max_gap": cmp.max_abs_gap,
        "median_gap": median,
        "gap_bound": args.gap_bound,
    });
    let text = format!(
        "{} points, grid {res}x{res}: max gap {:.4} s, median {median:.4} s (bound {}): {}\n",
        cmp.table.len(),
        cmp.max_abs_gap,
        args.gap_bound,
        pass_fail(within)
    );
    report(common, &text, &summary);
    Ok(if within { OK } else { ORACLE_GAP })
}

struct Certificate {
    name: &'static str,
    pass: Option<bool>,
    body: Value,
}

impl Certificate {
    fn new(name: &'static str, pass: bool, body: Value) -> Self {
        Self { name, pass: Some(pass), body }
    }

    fn skipped(name: &'static str, reason: &str) -> Self {
        Self { name, pass: None, body: json!({"skipped": reason}) }
    }

    fn to_json(&self) -> Value {
        let mut v = self.body.clone();
        if let Value::Object(map) = &mut v {
            map.insert("name".into(), json!(self.name));
            map.insert("pass".into(), json!(self.pass));
        }
        v
    }
}

fn ratio(coarse: f64, fine: f64) -> f64 {
    fine / coarse
}

fn to_normal(points: &[BoundaryPoint]) -> Vec<NormalSample> {
    points
        .iter()
        .map(|p| NormalSample::new(Vector::from_vec(p.x.clone()), Vector::from_vec(p.zeta.clone())))
        .collect()
}

/// Zero-indexed samples for single-input systems, quasi-uniform covectors
/// otherwise; at least `count` points either way.
fn linear_samples(sys: &LinearSystem, tau: f64, count: usize) -> Result<Vec<BoundaryPoint>, Failure> {
    if sys.control_dim() != 1 {
        return Ok(sample_boundary(sys, tau, count)?);
    }
    let n = sys.state_dim();
    let total = |m: usize| {
        let mut c = 1usize;
        for k in 0..n - 1 {
            c = c * (m + k + 1) / (k + 1);
        }
        2 * c
    };
    let mut m = 2;
    while total(m) < count {
        m += 1;
    }
    Ok(sample_boundary_by_zeros(sys, tau, m)?)
}

fn sigma(points: &[EpigraphPoint], others: &[EpigraphOther]) -> f64 {
    epigraph_proximal_check(points, others, f64::INFINITY).sigma_hat
}

fn linear_epigraph(sys: &LinearSystem, tau: f64, count: usize) -> Result<f64, Failure> {
    let rev = sys.reversed();
    let mut points = Vec::new();
    let mut others = Vec::new();
    for k in 1..=4 {
        let level = tau * k as f64 / 4.0;
        for p in linear_samples(&rev, level, count)? {
            let x = Vector::from_vec(p.x.clone());
            let zeta = Vector::from_vec(p.zeta.clone());
            let drift = zeta.dot(&(sys.a() * &x));
            let control: f64 = (0..sys.control_dim()).map(|i| zeta.dot(&sys.column(i)).abs()).sum();
            points.push(EpigraphPoint { x: x.clone(), time: level, zeta, theta: drift - control });
            others.push(EpigraphOther { y: x, beta: level });
        }
    }
    Ok(sigma(&points, &others))
}

fn nonlinear_epigraph(sys: &NonlinearSystem2D, tau: f64, dirs: usize, mode: Mode) -> Result<f64, Failure> {
    let rev = sys.reversed();
    let mut points = Vec::new();
    let mut others = Vec::new();
    for k in 1..=4 {
        let level = tau * k as f64 / 4.0;
        let b = sample_nonlinear_boundary(&rev, level, dirs, default_step(level), mode)?;
        for s in &b.samples {
            let x = Vector::from_vec(vec![s.endpoint[0], s.endpoint[1]]);
            let theta = minimized_hamiltonian(sys, &s.endpoint, &s.zeta);
            points.push(EpigraphPoint {
                x: x.clone(),
                time: level,
                zeta: Vector::from_vec(vec![s.zeta[0], s.zeta[1]]),
                theta,
            });
            others.push(EpigraphOther { y: x, beta: level });
        }
    }
    Ok(sigma(&points, &others))
}

fn epigraph_certificate(coarse: f64, fine: f64) -> Certificate {
    let change = relative_change(coarse, fine);
    Certificate::new(
        "epigraph_proximal",
        fine.is_finite() && change <= 0.15,
        json!({"sigma_hat": coarse, "refined": fine, "refinement_ratio": ratio(coarse, fine), "relative_change": change}),
    )
}

fn certify_linear(sys: &LinearSystem, tau: f64, dirs: usize) -> Result<Vec<Certificate>, Failure> {
    sys.require_normal()?;
    let n = sys.state_dim();
    let p = n as f64;
    let mut certs = Vec::new();

    let coarse = self_convexity(&to_normal(&linear_samples(sys, tau, dirs)?), p)?;
    let fine = self_convexity(&to_normal(&linear_samples(sys, tau, 2 * dirs)?), p)?;
    certs.push(Certificate::new(
        "convexity",
        coarse.passes() && fine.passes(),
        json!({
            "exponent": p,
            "gamma_hat": coarse.gamma_hat,
            "refined": fine.gamma_hat,
            "refinement_ratio": ratio(coarse.gamma_hat, fine.gamma_hat),
            "pairs": fine.n_pairs,
        }),
    ));

    if sys.control_dim() == 1 {
        let fit = fit_exponent(&corner_contact_pairs(sys, tau, 24, 2.0)?)?;
        certs.push(Certificate::new(
            "contact_exponent",
            fit.exponent <= p + 0.15,
            json!({"exponent": fit.exponent, "span_decades": fit.span_decades, "pairs": fit.n_used, "limit": p}),
        ));
    } else {
        certs.push(Certificate::skipped("contact_exponent", "corner contact needs a single input"));
    }

    let r = inscribed_ball_radius(sys, tau, dirs)?;
    let r_fine = inscribed_ball_radius(sys, tau, 2 * dirs)?;
    certs.push(Certificate::new(
        "inscribed_ball",
        r > 0.0 && r_fine > 0.0,
        json!({"radius": r, "refined": r_fine, "refinement_ratio": ratio(r, r_fine)}),
    ));

    let epi_dirs = dirs.min(120);
    certs.push(epigraph_certificate(linear_epigraph(sys, tau, epi_dirs)?, linear_epigraph(sys, tau, 2 * epi_dirs)?));
    Ok(certs)
}

fn certify_nonlinear(sys: &NonlinearSystem2D, tau: f64, dirs: usize, mode: Mode) -> Result<Vec<Certificate>, Failure> {
    let step = default_step(tau);
    let coarse = sample_nonlinear_boundary(sys, tau, dirs, step, mode)?;
    let fine = sample_nonlinear_boundary(sys, tau, 2 * dirs, step, mode)?;
    let mut certs = Vec::new();
    let curve = |b: &NonlinearBoundary| json!({"closed": b.closed, "simple": b.simple, "uncertified": b.uncertified.len()});
    certs.push(Certificate::new(
        "closed_curve",
        coarse.closed_simple() && fine.closed_simple(),
        json!({"coarse": curve(&coarse), "refined": curve(&fine)}),
    ));

    let g = self_convexity(&coarse.normal_samples(), 2.0)?;
    let g_fine = self_convexity(&fine.normal_samples(), 2.0)?;
    certs.push(Certificate::new(
        "convexity",
        g.passes() && g_fine.passes(),
        json!({
            "exponent": 2.0,
            "gamma_hat": g.gamma_hat,
            "refined": g_fine.gamma_hat,
            "refinement_ratio": ratio(g.gamma_hat, g_fine.gamma_hat),
        }),
    ));

    let reach = positive_reach_estimate(&coarse.normal_samples(), &coarse.endpoints())?;
    let reach_fine = positive_reach_estimate(&fine.normal_samples(), &fine.endpoints())?;
    let change = relative_change(reach.phi_hat, reach_fine.phi_hat);
    certs.push(Certificate::new(
        "positive_reach",
        reach_fine.phi_hat.is_finite() && (reach_fine.phi_hat == 0.0 || change <= 0.25),
        json!({
            "phi_hat": reach.phi_hat,
            "refined": reach_fine.phi_hat,
            "refinement_ratio": ratio(reach.phi_hat, reach_fine.phi_hat),
            "relative_change": change,
        }),
    ));

    let epi_dirs = dirs.min(180);
    certs.push(epigraph_certificate(
        nonlinear_epigraph(sys, tau, epi_dirs, mode)?,
        nonlinear_epigraph(sys, tau, 2 * epi_dirs, mode)?,
    ));
    Ok(certs)
}

pub fn certify(common: &Common, exploratory: bool) -> Result<u8, Failure> {
    let def = common.system()?;
    let tau = common.tau(&def);
    let ctx = common.context("certify", Some(&def), json!({"exploratory": exploratory}));
    let (mode, certs) = match &def {
        SystemDef::Linear(sys) => (Mode::Certified, certify_linear(sys, tau, common.dirs)?),
        SystemDef::Nonlinear2D(sys) => {
            let mode = nonlinear_mode(sys, exploratory)?;
            (mode, certify_nonlinear(sys, tau, common.dirs, mode)?)
        }
    };
    let all = certs.iter().all(|c| c.pass != Some(false));
    let mut text = String::new();
    for c in &certs {
        let verdict = match c.pass {
            Some(p) => pass_fail(p),
            None => "skipped",
        };
        let _ = writeln!(text, "{}: {verdict}", c.name);
    }
    ctx.emit_json(json!({
        "mode": mode,
        "tau": tau,
        "certificates": certs.iter().map(Certificate::to_json).collect::<Vec<_>>(),
        "pass": all,
    }))?;
    eprint!("{text}");
    Ok(if all || mode == Mode::Exploratory { OK } else { CERTIFICATE })
}

struct ExampleCheck {
    name: String,
    pass: bool,
    detail: String,
}

fn relative_error(got: f64, expected: f64) -> f64 {
    (got - expected).abs() / expected.abs().max(1e-300)
}

fn chain_example(n: usize) -> ExampleCheck {
    let horizon = 1.0;
    let sys = chain_integrator(n);
    let x1 = integrate_linear(&sys, &BangBangControl::constant(horizon, &[1]).expect("valid control"));
    let worst = (1..20)
        .map(|k| {
            let s = k as f64 / 20.0;
            let xs = integrate_linear(&sys, &one_switch_control(horizon, s));
            relative_error(xs[0] - x1[0], chain_endpoint_gap(n, horizon, s))
        })
        .fold(0.0, f64::max);
    ExampleCheck {
        name: format!("chain_gap_n{n}"),
        pass: worst <= 1e-6,
        detail: format!("x_s(T) - x_1(T) against -2 (T-s)^{n}/{n}!, max relative error {worst:.2e}"),
    }
}

fn counterexample_example(tau: f64) -> Result<ExampleCheck, Failure> {
    let s_grid: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
    let table = reproduce_counterexample(tau, &s_grid)?;
    let mut end: f64 = 0.0;
    let mut inner: f64 = 0.0;
    for r in &table.rows {
        let scale = (r.expected[0].powi(2) + r.expected[1].powi(2)).sqrt().max(1e-300);
        end = end.max(r.endpoint_error / scale);
        if r.closed_form != 0.0 {
            inner = inner.max(relative_error(r.inner_product, r.closed_form));
        }
    }
    Ok(ExampleCheck {
        name: format!("flat_failure_tau{tau}"),
        pass: end <= 1e-6 && inner <= 1e-6,
        detail: format!("curve relative error {end:.2e}, inner-product relative error {inner:.2e}"),
    })
}

fn degenerate_example() -> ExampleCheck {
    let sys = degenerate_linearization_system();
    let refused = sample_nonlinear_boundary(&sys, 0.2, 36, default_step(0.2), Mode::Certified);
    let code = refused.as_ref().err().map(|e| e.exit_code());
    let pass = !sys.flags().linearization_normal && code == Some(2);
    ExampleCheck {
        name: "degenerate_linearization".into(),
        pass,
        detail: format!("linearization normal: {}, certified run exit code {code:?}", yes_no(sys.flags().linearization_normal)),
    }
}

pub fn examples(common: &Common) -> Result<u8, Failure> {
    let ctx = common.context("examples", None, json!({}));
    let checks = vec![
        chain_example(2),
        chain_example(3),
        counterexample_example(0.5)?,
        counterexample_example(1.0)?,
        degenerate_example(),
    ];
    let all = checks.iter().all(|c| c.pass);
    if common.json {
        let rows: Vec<Value> =
            checks.iter().map(|c| json!({"name": c.name, "pass": c.pass, "detail": c.detail})).collect();
        ctx.emit_json(json!({"examples": rows, "pass": all}))?;
    } else {
        let mut text = String::new();
        for c in &checks {
            let _ = writeln!(text, "{} {}: {}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
        }
        ctx.emit_text(&text)?;
    }
    Ok(if all { OK } else { OTHER })
}
