//! Control system definitions: linear `x' = A x + B u` and planar polynomial
//! control-affine `x' = F(x) + G(x) u`, both with the box control set
//! `[-1, 1]^m`.
//!
//! Polynomial fields are stored as monomial lists so evaluation and
//! differentiation are exact. Hypothesis flags of planar systems are derived
//! from the coefficients and can never be set by the caller.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Largest admitted total degree of a monomial.
pub const MAX_DEGREE: u32 = 6;
/// Admitted range of the linear state dimension.
pub const MIN_STATE_DIM: usize = 2;
pub const MAX_STATE_DIM: usize = 5;

/// Linear system `x' = A x + B u`, `u ∈ [-1,1]^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: Matrix,
    b: Matrix,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::Dimension(format!("A is {}x{}, expected square", n, a.ncols())));
        }
        if !(MIN_STATE_DIM..=MAX_STATE_DIM).contains(&n) {
            return Err(Error::Dimension(format!(
                "state dimension {n} outside {MIN_STATE_DIM}..={MAX_STATE_DIM}"
            )));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, A has {n}", b.nrows())));
        }
        let m = b.ncols();
        if m == 0 || m > n {
            return Err(Error::Dimension(format!("control dimension {m} outside 1..={n}")));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("system matrices".into()));
        }
        Ok(Self { a, b })
    }

    /// Convenience constructor from row-major nested slices.
    pub fn from_rows(a: &[&[f64]], b: &[&[f64]]) -> Result<Self> {
        Self::new(rows_to_matrix(a, "A")?, rows_to_matrix(b, "B")?)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn column(&self, i: usize) -> Vector {
        self.b.column(i).into_owned()
    }

    /// The system with `(A, B) -> (-A, -B)`, whose reachable sets are the
    /// sublevel sets of the minimum time to the origin.
    pub fn reversed(&self) -> Self {
        Self { a: -&self.a, b: -&self.b }
    }

    /// Rank and lower constant of `[b_i, A b_i, ..., A^{n-1} b_i]` per column.
    pub fn normality(&self) -> Vec<ColumnNormality> {
        normality_check(self)
    }

    pub fn is_normal(&self) -> bool {
        let n = self.state_dim();
        self.normality().iter().all(|c| c.rank == n)
    }

    /// First column that violates normality, as an error.
    pub fn require_normal(&self) -> Result<()> {
        let n = self.state_dim();
        match self.normality().iter().enumerate().find(|(_, c)| c.rank < n) {
            Some((column, c)) => Err(Error::NotNormal { column, rank: c.rank, n }),
            None => Ok(()),
        }
    }
}

fn rows_to_matrix(rows: &[&[f64]], name: &str) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!("{name} has ragged rows")));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Per-column normality record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnNormality {
    pub rank: usize,
    /// Smallest singular value of the column's controllability matrix.
    pub l_const: f64,
}

/// Kalman rank and lower constant for every input column.
pub fn normality_check(sys: &LinearSystem) -> Vec<ColumnNormality> {
    (0..sys.control_dim())
        .map(|i| {
            let k = linalg::controllability_matrix(sys.a(), &sys.column(i))
                .expect("validated dimensions");
            ColumnNormality {
                rank: linalg::numerical_rank(&k),
                l_const: linalg::min_singular_value(&k),
            }
        })
        .collect()
}

/// `c * x1^e1 * x2^e2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub exponents: [u32; 2],
    pub coeff: f64,
}

impl Monomial {
    pub fn new(e1: u32, e2: u32, coeff: f64) -> Self {
        Self { exponents: [e1, e2], coeff }
    }

    pub fn degree(&self) -> u32 {
        self.exponents[0] + self.exponents[1]
    }
}

/// Polynomial in two variables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(terms: Vec<Monomial>) -> Self {
        Self { terms }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![Monomial::new(0, 0, c)])
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &Vector2<f64>) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * x[0].powi(t.exponents[0] as i32) * x[1].powi(t.exponents[1] as i32))
            .sum()
    }

    /// Exact partial derivative with respect to `var` (0 or 1).
    pub fn partial(&self, var: usize) -> Polynomial {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.exponents[var] > 0 && t.coeff != 0.0)
            .map(|t| {
                let mut e = t.exponents;
                let k = e[var];
                e[var] -= 1;
                Monomial { exponents: e, coeff: t.coeff * f64::from(k) }
            })
            .collect();
        Polynomial { terms }
    }

    /// Sum of coefficients of monomials with the given exponents.
    pub fn coefficient(&self, e1: u32, e2: u32) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.exponents == [e1, e2])
            .map(|t| t.coeff)
            .sum()
    }

    fn negated(&self) -> Polynomial {
        Polynomial {
            terms: self.terms.iter().map(|t| Monomial { coeff: -t.coeff, ..*t }).collect(),
        }
    }
}

/// Two-component polynomial vector field on the plane.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolyVectorField {
    pub components: [Polynomial; 2],
}

impl PolyVectorField {
    pub fn new(c1: Polynomial, c2: Polynomial) -> Self {
        Self { components: [c1, c2] }
    }

    pub fn eval(&self, x: &Vector2<f64>) -> Vector2<f64> {
        eval_field(self, x)
    }

    pub fn jacobian(&self, x: &Vector2<f64>) -> Matrix2<f64> {
        eval_jacobian(self, x)
    }

    /// Sum of the Frobenius norms of the component Hessians at `x`.
    pub fn hessian_norm(&self, x: &Vector2<f64>) -> f64 {
        self.components
            .iter()
            .map(|p| {
                let dx = p.partial(0);
                let dy = p.partial(1);
                let h = [
                    dx.partial(0).eval(x),
                    dx.partial(1).eval(x),
                    dy.partial(0).eval(x),
                    dy.partial(1).eval(x),
                ];
                h.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .sum()
    }

    fn negated(&self) -> Self {
        Self { components: [self.components[0].negated(), self.components[1].negated()] }
    }
}

/// Exact evaluation of a planar polynomial field.
pub fn eval_field(f: &PolyVectorField, x: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(f.components[0].eval(x), f.components[1].eval(x))
}

/// Exact Jacobian `[∂f_i/∂x_j]` evaluated at `x`.
pub fn eval_jacobian(f: &PolyVectorField, x: &Vector2<f64>) -> Matrix2<f64> {
    let mut j = Matrix2::zeros();
    for (i, comp) in f.components.iter().enumerate() {
        for var in 0..2 {
            j[(i, var)] = comp.partial(var).eval(x);
        }
    }
    j
}

/// Standing hypotheses on a planar control-affine system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisFlags {
    /// `F(0) = 0`.
    pub drift_vanishes: bool,
    /// `rank [G_i(0), DF(0) G_i(0)] = 2` for every column.
    pub linearization_normal: bool,
    /// `DG(0) = 0`.
    pub control_flat: bool,
}

impl HypothesisFlags {
    pub fn all(&self) -> bool {
        self.drift_vanishes && self.linearization_normal && self.control_flat
    }
}

/// Planar control-affine system `x' = F(x) + Σ G_i(x) u_i` with one or two
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearSystem2D {
    f: PolyVectorField,
    g: Vec<PolyVectorField>,
    flags: HypothesisFlags,
}

impl NonlinearSystem2D {
    pub fn new(f: PolyVectorField, g: Vec<PolyVectorField>) -> Result<Self> {
        if g.is_empty() || g.len() > 2 {
            return Err(Error::Dimension(format!("expected 1 or 2 control columns, got {}", g.len())));
        }
        let fields = std::iter::once(&f).chain(g.iter());
        for (fi, field) in fields.enumerate() {
            for (ci, comp) in field.components.iter().enumerate() {
                for (ti, term) in comp.terms.iter().enumerate() {
                    let path = if fi == 0 {
                        format!("F[{ci}][{ti}]")
                    } else {
                        format!("G[{}][{ci}][{ti}]", fi - 1)
                    };
                    if !term.coeff.is_finite() {
                        return Err(Error::NonFinite(path));
                    }
                    if term.degree() > MAX_DEGREE {
                        return Err(Error::DegreeOverflow { path, degree: term.degree(), cap: MAX_DEGREE });
                    }
                }
            }
        }
        let mut sys = Self {
            f,
            g,
            flags: HypothesisFlags { drift_vanishes: false, linearization_normal: false, control_flat: false },
        };
        sys.flags = sys.compute_flags();
        Ok(sys)
    }

    fn compute_flags(&self) -> HypothesisFlags {
        let drift_vanishes = self.f.components.iter().all(|p| p.coefficient(0, 0) == 0.0);
        let linearization_normal = linearize_at_origin(self).is_normal();
        let control_flat = self.g.iter().all(|col| {
            col.components
                .iter()
                .all(|p| p.coefficient(1, 0) == 0.0 && p.coefficient(0, 1) == 0.0)
        });
        HypothesisFlags { drift_vanishes, linearization_normal, control_flat }
    }

    pub fn drift(&self) -> &PolyVectorField {
        &self.f
    }

    pub fn control_columns(&self) -> &[PolyVectorField] {
        &self.g
    }

    pub fn control_dim(&self) -> usize {
        self.g.len()
    }

    pub fn flags(&self) -> HypothesisFlags {
        self.flags
    }

    /// Errors unless every hypothesis flag holds.
    pub fn require_certified(&self) -> Result<()> {
        let f = self.flags;
        let mut failed = Vec::new();
        if !f.drift_vanishes {
            failed.push("F(0) != 0");
        }
        if !f.linearization_normal {
            failed.push("linearization at the origin is not normal");
        }
        if !f.control_flat {
            failed.push("DG(0) != 0");
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::NotEligible(failed.join("; ")))
        }
    }

    /// `(-F, -G)`.
    pub fn reversed(&self) -> Self {
        Self {
            f: self.f.negated(),
            g: self.g.iter().map(PolyVectorField::negated).collect(),
            flags: self.flags,
        }
    }

    /// Velocity `F(x) + Σ G_i(x) u_i`.
    pub fn velocity(&self, x: &Vector2<f64>, u: &[f64]) -> Vector2<f64> {
        let mut v = self.f.eval(x);
        for (col, &ui) in self.g.iter().zip(u) {
            v += col.eval(x) * ui;
        }
        v
    }

    /// Estimate of the Lipschitz constant of `DF` and `DG` on a box, taken as
    /// the largest summed Hessian norm on a `samples × samples` grid.
    pub fn lipschitz_on_box(&self, lo: [f64; 2], hi: [f64; 2], samples: usize) -> f64 {
        let samples = samples.max(2);
        let mut best: f64 = 0.0;
        for i in 0..samples {
            for j in 0..samples {
                let x = Vector2::new(
                    lo[0] + (hi[0] - lo[0]) * i as f64 / (samples - 1) as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / (samples - 1) as f64,
                );
                let total: f64 = std::iter::once(&self.f)
                    .chain(self.g.iter())
                    .map(|field| field.hessian_norm(&x))
                    .sum();
                best = best.max(total);
            }
        }
        best
    }
}

/// Linearization `A = DF(0)`, `B = [G_1(0), ..., G_m(0)]`.
pub fn linearize_at_origin(sys: &NonlinearSystem2D) -> LinearSystem {
    let origin = Vector2::zeros();
    let df = sys.f.jacobian(&origin);
    let a = Matrix::from_fn(2, 2, |i, j| df[(i, j)]);
    let b = Matrix::from_fn(2, sys.g.len(), |i, j| sys.g[j].eval(&origin)[i]);
    LinearSystem::new(a, b).expect("planar linearization has valid dimensions")
}

/// A parsed system definition.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemDef {
    Linear(LinearSystem),
    Nonlinear2D(NonlinearSystem2D),
}

impl SystemDef {
    pub fn to_json(&self) -> Value {
        serialize_system(self)
    }
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema { path: path.into(), message: message.into() }
}

/// Parse a JSON system definition.
///
/// ```json
/// {"kind": "linear", "A": [[0,1],[0,0]], "B": [[0],[1]]}
/// {"kind": "nonlinear2d",
///  "F": [[{"e":[0,1],"c":1}], []],
///  "G": [[[{"e":[0,1],"c":1}], [{"e":[0,0],"c":1}]]]}
/// ```
pub fn parse_system(document: &str) -> Result<SystemDef> {
    let root: Value = serde_json::from_str(document).map_err(|e| schema("$", e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| schema("$", "expected an object"))?;
    let kind = obj
        .get("kind")
        .ok_or_else(|| schema("kind", "missing"))?
        .as_str()
        .ok_or_else(|| schema("kind", "expected a string"))?;
    match kind {
        "linear" => {
            check_keys(obj, &["kind", "name", "A", "B"])?;
            let a = parse_matrix(obj.get("A"), "A")?;
            let b = parse_matrix(obj.get("B"), "B")?;
            Ok(SystemDef::Linear(LinearSystem::new(a, b)?))
        }
        "nonlinear2d" => {
            check_keys(obj, &["kind", "name", "F", "G"])?;
            let f = parse_field(obj.get("F").ok_or_else(|| schema("F", "missing"))?, "F")?;
            let g_val = obj.get("G").ok_or_else(|| schema("G", "missing"))?;
            let cols = g_val.as_array().ok_or_else(|| schema("G", "expected an array of columns"))?;
            let g = cols
                .iter()
                .enumerate()
                .map(|(i, c)| parse_field(c, &format!("G[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            Ok(SystemDef::Nonlinear2D(NonlinearSystem2D::new(f, g)?))
        }
        other => Err(schema("kind", format!("unknown kind `{other}`"))),
    }
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(schema(k.clone(), "unknown key")),
        None => Ok(()),
    }
}

fn parse_number(v: &Value, path: &str) -> Result<f64> {
    let x = v.as_f64().ok_or_else(|| schema(path, "expected a number"))?;
    if !x.is_finite() {
        return Err(Error::NonFinite(path.to_string()));
    }
    Ok(x)
}

fn parse_matrix(v: Option<&Value>, name: &str) -> Result<Matrix> {
    let v = v.ok_or_else(|| schema(name, "missing"))?;
    let rows = v.as_array().ok_or_else(|| schema(name, "expected an array of rows"))?;
    if rows.is_empty() {
        return Err(schema(name, "empty matrix"));
    }
    let mut data = Vec::new();
    let mut width = None;
    for (i, row) in rows.iter().enumerate() {
        let path = format!("{name}[{i}]");
        let cells = row.as_array().ok_or_else(|| schema(&path, "expected an array"))?;
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Dimension(format!("{path} has {} entries, expected {w}", cells.len())))
            }
            _ => {}
        }
        for (j, c) in cells.iter().enumerate() {
            data.push(parse_number(c, &format!("{path}[{j}]"))?);
        }
    }
    let w = width.unwrap_or(0);
    if w == 0 {
        return Err(schema(name, "empty rows"));
    }
    Ok(Matrix::from_row_slice(rows.len(), w, &data))
}

fn parse_polynomial(v: &Value, path: &str) -> Result<Polynomial> {
    let terms = v.as_array().ok_or_else(|| schema(path, "expected an array of terms"))?;
    let mut out = Vec::with_capacity(terms.len());
    for (k, t) in terms.iter().enumerate() {
        let tp = format!("{path}[{k}]");
        let obj = t.as_object().ok_or_else(|| schema(&tp, "expected an object"))?;
        check_keys(obj, &["e", "c"]).map_err(|e| match e {
            Error::Schema { path, message } => schema(format!("{tp}.{path}"), message),
            other => other,
        })?;
        let e = obj
            .get("e")
            .ok_or_else(|| schema(format!("{tp}.e"), "missing"))?
            .as_array()
            .ok_or_else(|| schema(format!("{tp}.e"), "expected [e1, e2]"))?;
        if e.len() != 2 {
            return Err(schema(format!("{tp}.e"), "expected exactly two exponents"));
        }
        let mut exps = [0u32; 2];
        for (i, ei) in e.iter().enumerate() {
            exps[i] = ei
                .as_u64()
                .and_then(|x| u32::try_from(x).ok())
                .ok_or_else(|| schema(format!("{tp}.e[{i}]"), "expected a nonnegative integer"))?;
        }
        let degree = exps[0].saturating_add(exps[1]);
        if degree > MAX_DEGREE {
            return Err(Error::DegreeOverflow { path: format!("{tp}.e"), degree, cap: MAX_DEGREE });
        }
        let c = parse_number(
            obj.get("c").ok_or_else(|| schema(format!("{tp}.c"), "missing"))?,
            &format!("{tp}.c"),
        )?;
        out.push(Monomial { exponents: exps, coeff: c });
    }
    Ok(Polynomial::new(out))
}

fn parse_field(v: &Value, path: &str) -> Result<PolyVectorField> {
    let comps = v.as_array().ok_or_else(|| schema(path, "expected two components"))?;
    if comps.len() != 2 {
        return Err(Error::Dimension(format!("{path} has {} components, expected 2", comps.len())));
    }
    Ok(PolyVectorField::new(
        parse_polynomial(&comps[0], &format!("{path}[0]"))?,
        parse_polynomial(&comps[1], &format!("{path}[1]"))?,
    ))
}

fn matrix_to_json(m: &Matrix) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::Array((0..m.ncols()).map(|j| json!(m[(i, j)])).collect()))
            .collect(),
    )
}

fn field_to_json(f: &PolyVectorField) -> Value {
    Value::Array(
        f.components
            .iter()
            .map(|p| {
                Value::Array(
                    p.terms
                        .iter()
                        .map(|t| json!({"e": [t.exponents[0], t.exponents[1]], "c": t.coeff}))
                        .collect(),
                )
            })
            .collect(),
    )
}

/// Inverse of [`parse_system`].
pub fn serialize_system(sys: &SystemDef) -> Value {
    match sys {
        SystemDef::Linear(l) => json!({
            "kind": "linear",
            "A": matrix_to_json(l.a()),
            "B": matrix_to_json(l.b()),
        }),
        SystemDef::Nonlinear2D(s) => json!({
            "kind": "nonlinear2d",
            "F": field_to_json(&s.f),
            "G": Value::Array(s.g.iter().map(field_to_json).collect()),
        }),
    }
}
