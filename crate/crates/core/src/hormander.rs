//! Vector-field algebra: the fields `V_0..V_m`, the convection field
//! `V_B[v]`, iterated Lie brackets, rank certification of the spanning
//! condition, and the operator constants `C_B`, `C_ij`.
//!
//! Diffusion/drift coefficients are multivariate polynomials (closed under
//! differentiation and products, so the bracket algebra is exact); the
//! convection weights `B_j` and couplings `c_jk`, `d_j` also accept
//! sinusoids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::grid::{derivative, Domain, Field};

/// Multivariate polynomial, kept in a canonical sorted term form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poly {
    n: usize,
    /// (exponent tuple, coefficient), sorted by exponents, no zeros.
    terms: Vec<(Vec<u32>, f64)>,
}

impl Poly {
    pub fn zero(n: usize) -> Poly {
        Poly { n, terms: vec![] }
    }

    pub fn constant(n: usize, c: f64) -> Poly {
        Poly::from_terms(n, vec![(vec![0; n], c)])
    }

    pub fn monomial(n: usize, exps: Vec<u32>, coef: f64) -> Poly {
        assert_eq!(exps.len(), n);
        Poly::from_terms(n, vec![(exps, coef)])
    }

    /// Coordinate polynomial `x_axis`.
    pub fn coordinate(n: usize, axis: usize) -> Poly {
        let mut e = vec![0u32; n];
        e[axis] = 1;
        Poly::monomial(n, e, 1.0)
    }

    pub fn from_terms(n: usize, terms: Vec<(Vec<u32>, f64)>) -> Poly {
        let mut p = Poly { n, terms };
        p.normalize();
        p
    }

    fn normalize(&mut self) {
        self.terms.sort_by(|a, b| a.0.cmp(&b.0));
        let mut merged: Vec<(Vec<u32>, f64)> = Vec::with_capacity(self.terms.len());
        for (e, c) in self.terms.drain(..) {
            if let Some(last) = merged.last_mut() {
                if last.0 == e {
                    last.1 += c;
                    continue;
                }
            }
            merged.push((e, c));
        }
        merged.retain(|(_, c)| c.abs() > 0.0);
        self.terms = merged;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[(Vec<u32>, f64)] {
        &self.terms
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|(e, _)| e.iter().sum())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut t = *c;
            for (a, &p) in e.iter().enumerate() {
                if p > 0 {
                    t *= x[a].powi(p as i32);
                }
            }
            acc += t;
        }
        acc
    }

    pub fn partial(&self, axis: usize) -> Poly {
        let mut terms = Vec::new();
        for (e, c) in &self.terms {
            if e[axis] > 0 {
                let mut e2 = e.clone();
                e2[axis] -= 1;
                terms.push((e2, c * e[axis] as f64));
            }
        }
        Poly::from_terms(self.n, terms)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Poly::from_terms(self.n, terms)
    }

    pub fn scale(&self, a: f64) -> Poly {
        Poly::from_terms(
            self.n,
            self.terms.iter().map(|(e, c)| (e.clone(), c * a)).collect(),
        )
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                terms.push((e, ca * cb));
            }
        }
        Poly::from_terms(self.n, terms)
    }
}

/// Smooth coefficient function with exact partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum Coeff {
    Poly(Poly),
    /// `amp * sin(freq * x[axis] + phase)`
    Sinusoid {
        n: usize,
        axis: usize,
        amp: f64,
        freq: f64,
        phase: f64,
    },
    Sum(Vec<Coeff>),
}

impl Coeff {
    pub fn constant(n: usize, c: f64) -> Coeff {
        Coeff::Poly(Poly::constant(n, c))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Coeff::Poly(p) => p.eval(x),
            Coeff::Sinusoid {
                axis,
                amp,
                freq,
                phase,
                ..
            } => amp * (freq * x[*axis] + phase).sin(),
            Coeff::Sum(parts) => parts.iter().map(|p| p.eval(x)).sum(),
        }
    }

    pub fn partial(&self, d_axis: usize) -> Coeff {
        match self {
            Coeff::Poly(p) => Coeff::Poly(p.partial(d_axis)),
            Coeff::Sinusoid {
                n,
                axis,
                amp,
                freq,
                phase,
            } => {
                if d_axis == *axis {
                    Coeff::Sinusoid {
                        n: *n,
                        axis: *axis,
                        amp: amp * freq,
                        freq: *freq,
                        phase: phase + std::f64::consts::FRAC_PI_2,
                    }
                } else {
                    Coeff::Poly(Poly::zero(*n))
                }
            }
            Coeff::Sum(parts) => Coeff::Sum(parts.iter().map(|p| p.partial(d_axis)).collect()),
        }
    }

    pub fn multi_partial(&self, alpha: &[usize]) -> Coeff {
        let mut out = self.clone();
        for (axis, &ord) in alpha.iter().enumerate() {
            for _ in 0..ord {
                out = out.partial(axis);
            }
        }
        out
    }

    pub fn as_poly(&self) -> Option<&Poly> {
        match self {
            Coeff::Poly(p) => Some(p),
            _ => None,
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            Coeff::Poly(p) => p.is_zero(),
            Coeff::Sinusoid { amp, .. } => *amp == 0.0,
            Coeff::Sum(parts) => parts.iter().all(|p| p.is_zero()),
        }
    }
}

/// First-order differential operator `sum_j coeffs[j] d/dx_j` with
/// polynomial coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    coeffs: Vec<Poly>,
}

impl VectorField {
    pub fn new(coeffs: Vec<Poly>) -> VectorField {
        VectorField { coeffs }
    }

    pub fn zero(n: usize) -> VectorField {
        VectorField {
            coeffs: (0..n).map(|_| Poly::zero(n)).collect(),
        }
    }

    /// The coordinate field `d/dx_axis`.
    pub fn coordinate_axis(n: usize, axis: usize) -> VectorField {
        let mut f = VectorField::zero(n);
        f.coeffs[axis] = Poly::constant(n, 1.0);
        f
    }

    pub fn n(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[Poly] {
        &self.coeffs
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.coeffs) {
            *o = p.eval(x);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|p| p.is_zero())
    }

    /// Lie bracket `[self, other]`: component j is
    /// `sum_k (self_k d_k other_j - other_k d_k self_j)`.
    pub fn bracket(&self, other: &VectorField) -> VectorField {
        let n = self.n();
        let mut coeffs = Vec::with_capacity(n);
        for j in 0..n {
            let mut acc = Poly::zero(n);
            for k in 0..n {
                acc = acc.add(&self.coeffs[k].mul(&other.coeffs[j].partial(k)));
                acc = acc.add(&other.coeffs[k].mul(&self.coeffs[j].partial(k)).scale(-1.0));
            }
            coeffs.push(acc);
        }
        VectorField { coeffs }
    }
}

/// Expression-tree node over the generators, carrying its exact coefficient
/// vector.
#[derive(Debug, Clone)]
pub struct BracketNode {
    label: String,
    depth: usize,
    field: VectorField,
}

impl BracketNode {
    pub fn generator(index: usize, field: VectorField) -> BracketNode {
        BracketNode {
            label: format!("V{index}"),
            depth: 0,
            field,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.field.eval_into(x, out)
    }
}

impl fmt::Display for BracketNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label)
    }
}

/// Maximum bracket depth the order-4 derivative budget supports.
pub const MAX_BRACKET_DEPTH: usize = 3;

/// `[a, b]` as a new node; antisymmetry holds exactly by construction.
pub fn lie_bracket(a: &BracketNode, b: &BracketNode) -> Result<BracketNode> {
    if a.field.n() != b.field.n() {
        return Err(Error::Mismatch(
            "bracket of fields over different spaces".into(),
        ));
    }
    let depth = a.depth.max(b.depth) + 1;
    if depth > MAX_BRACKET_DEPTH {
        return Err(Error::DerivativeBudget(format!(
            "bracket depth {depth} exceeds {MAX_BRACKET_DEPTH}"
        )));
    }
    Ok(BracketNode {
        label: format!("[{},{}]", a.label, b.label),
        depth,
        field: a.field.bracket(&b.field),
    })
}

// ---------------------------------------------------------------------------
// Systems
// ---------------------------------------------------------------------------

/// Coefficient data of the degenerate system: diffusion fields `V_1..V_m`,
/// drift `V_0`, convection weights `B_j`, couplings `c_jk`, `d_j`, and the
/// viscosity of the constant-coefficient specialization.
#[derive(Debug, Clone)]
pub struct HormanderSystem {
    n: usize,
    m: usize,
    nu: f64,
    /// `fields[0]` is the drift `V_0`; `fields[i]`, `1 <= i <= m`, diffuse.
    fields: Vec<VectorField>,
    b: Vec<Coeff>,
    c: Vec<Vec<Coeff>>,
    d: Vec<Coeff>,
}

impl HormanderSystem {
    /// Validates coefficient finiteness and the supplied analytic partials
    /// against central finite differences at 100 quasi-random points.
    pub fn new(
        n: usize,
        nu: f64,
        fields: Vec<VectorField>,
        b: Vec<Coeff>,
        c: Vec<Vec<Coeff>>,
        d: Vec<Coeff>,
    ) -> Result<HormanderSystem> {
        if n < 2 {
            return Err(Error::DimensionTooSmall(n));
        }
        if fields.is_empty() {
            return Err(Error::CoefficientValidation("no vector fields given".into()));
        }
        if fields.iter().any(|f| f.n() != n)
            || b.len() != n
            || c.len() != n
            || c.iter().any(|row| row.len() != n)
            || d.len() != n
        {
            return Err(Error::CoefficientValidation(
                "coefficient table sizes do not match the dimension".into(),
            ));
        }
        if nu <= 0.0 {
            return Err(Error::NonPositiveConstant {
                name: "nu",
                value: nu,
            });
        }
        let m = fields.len() - 1;
        let sys = HormanderSystem {
            n,
            m,
            nu,
            fields,
            b,
            c,
            d,
        };
        sys.validate_derivatives()?;
        Ok(sys)
    }

    fn validate_derivatives(&self) -> Result<()> {
        let points = halton_points(self.n, 100, 2.0);
        let check = |name: &str, co: &Coeff| -> Result<()> {
            for x in &points {
                let v = co.eval(x);
                if !v.is_finite() {
                    return Err(Error::CoefficientValidation(format!(
                        "{name} is not finite at {x:?}"
                    )));
                }
                for axis in 0..self.n {
                    let exact = co.partial(axis).eval(x);
                    let h = 1e-5 * (1.0 + x[axis].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[axis] += h;
                    xm[axis] -= h;
                    let fd = (co.eval(&xp) - co.eval(&xm)) / (2.0 * h);
                    if (fd - exact).abs() > 1e-6 * exact.abs().max(1.0) {
                        return Err(Error::CoefficientValidation(format!(
                            "{name}: analytic d/dx_{axis} = {exact} vs fd {fd} at {x:?}"
                        )));
                    }
                }
            }
            Ok(())
        };
        for (i, f) in self.fields.iter().enumerate() {
            for (j, p) in f.coeffs().iter().enumerate() {
                check(&format!("v[{j}][{i}]"), &Coeff::Poly(p.clone()))?;
            }
        }
        for (j, co) in self.b.iter().enumerate() {
            check(&format!("B[{j}]"), co)?;
        }
        for (j, row) in self.c.iter().enumerate() {
            for (k, co) in row.iter().enumerate() {
                check(&format!("c[{j}][{k}]"), co)?;
            }
        }
        for (j, co) in self.d.iter().enumerate() {
            check(&format!("d[{j}]"), co)?;
        }
        Ok(())
    }

    /// Classical incompressible model: `v_{ji} = sqrt(2 nu) delta_{ji}`
    /// (so `1/2 sum V_j^2 = nu Laplacian`), `V_0 = 0`, `B = 1`, `c = I`,
    /// `d = 0`.
    pub fn classical(n: usize, nu: f64) -> HormanderSystem {
        let s = (2.0 * nu).sqrt();
        let mut fields = vec![VectorField::zero(n)];
        for i in 0..n {
            let mut f = VectorField::zero(n);
            f.coeffs[i] = Poly::constant(n, s);
            fields.push(f);
        }
        HormanderSystem::new(n, nu, fields, ones(n), identity_coeffs(n), zeros(n))
            .expect("classical system is valid")
    }

    /// Heisenberg fields in R^3: `X = d_x - (y/2) d_z`, `Y = d_y + (x/2) d_z`.
    pub fn heisenberg() -> HormanderSystem {
        let n = 3;
        let mut x_field = VectorField::zero(n);
        x_field.coeffs[0] = Poly::constant(n, 1.0);
        x_field.coeffs[2] = Poly::coordinate(n, 1).scale(-0.5);
        let mut y_field = VectorField::zero(n);
        y_field.coeffs[1] = Poly::constant(n, 1.0);
        y_field.coeffs[2] = Poly::coordinate(n, 0).scale(0.5);
        HormanderSystem::new(
            n,
            1.0,
            vec![VectorField::zero(n), x_field, y_field],
            ones(n),
            identity_coeffs(n),
            zeros(n),
        )
        .expect("heisenberg system is valid")
    }

    /// Degenerate diffusion in R^2: `V_1 = d_x`, drift `V_0 = x d_y`.
    pub fn kolmogorov() -> HormanderSystem {
        let n = 2;
        let mut drift = VectorField::zero(n);
        drift.coeffs[1] = Poly::coordinate(n, 0);
        let v1 = VectorField::coordinate_axis(n, 0);
        HormanderSystem::new(
            n,
            1.0,
            vec![drift, v1],
            ones(n),
            identity_coeffs(n),
            zeros(n),
        )
        .expect("kolmogorov system is valid")
    }

    /// Grushin fields in R^2: `V_1 = d_x`, `V_2 = x d_y`.
    pub fn grushin() -> HormanderSystem {
        let n = 2;
        let v1 = VectorField::coordinate_axis(n, 0);
        let mut v2 = VectorField::zero(n);
        v2.coeffs[1] = Poly::coordinate(n, 0);
        HormanderSystem::new(
            n,
            1.0,
            vec![VectorField::zero(n), v1, v2],
            ones(n),
            identity_coeffs(n),
            zeros(n),
        )
        .expect("grushin system is valid")
    }

    pub fn builtin(name: &str) -> Result<HormanderSystem> {
        match name {
            "laplacian" => Ok(Self::classical(3, 1.0)),
            "laplacian2" => Ok(Self::classical(2, 1.0)),
            "heisenberg" => Ok(Self::heisenberg()),
            "kolmogorov" => Ok(Self::kolmogorov()),
            "grushin" => Ok(Self::grushin()),
            other => Err(Error::Config(format!("unknown builtin system {other}"))),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of diffusion fields.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn drift(&self) -> &VectorField {
        &self.fields[0]
    }

    /// Diffusion field `V_i`, `1 <= i <= m`.
    pub fn diffusion(&self, i: usize) -> &VectorField {
        &self.fields[i]
    }

    pub fn field(&self, i: usize) -> &VectorField {
        &self.fields[i]
    }

    pub fn convection_weights(&self) -> &[Coeff] {
        &self.b
    }

    pub fn couplings(&self) -> &[Vec<Coeff>] {
        &self.c
    }

    pub fn linear_couplings(&self) -> &[Coeff] {
        &self.d
    }

    /// Detects the classical specialization and returns its viscosity:
    /// `m = n`, `V_i = sqrt(2 nu) d_i`, `V_0 = 0`, `B = 1`, `c = I`, `d = 0`.
    pub fn classical_viscosity(&self) -> Option<f64> {
        if self.m != self.n || !self.fields[0].is_zero() {
            return None;
        }
        let mut scale = None;
        for i in 1..=self.m {
            for (j, p) in self.fields[i].coeffs().iter().enumerate() {
                let want_diag = j + 1 == i;
                match (want_diag, p.terms()) {
                    (false, t) if t.is_empty() => {}
                    (true, t)
                        if t.len() == 1 && t[0].0.iter().all(|&e| e == 0) && t[0].1 > 0.0 =>
                    {
                        match scale {
                            None => scale = Some(t[0].1),
                            Some(s) if (s - t[0].1).abs() < 1e-14 => {}
                            _ => return None,
                        }
                    }
                    _ => return None,
                }
            }
        }
        let is_const = |co: &Coeff, val: f64| match co.as_poly() {
            Some(p) => {
                let diff = p.add(&Poly::constant(self.n, -val));
                diff.is_zero() || diff.terms().iter().all(|(_, c)| c.abs() < 1e-14)
            }
            None => false,
        };
        for co in &self.b {
            if !is_const(co, 1.0) {
                return None;
            }
        }
        for (j, row) in self.c.iter().enumerate() {
            for (k, co) in row.iter().enumerate() {
                if !is_const(co, if j == k { 1.0 } else { 0.0 }) {
                    return None;
                }
            }
        }
        for co in &self.d {
            if !is_const(co, 0.0) {
                return None;
            }
        }
        scale.map(|s| s * s / 2.0)
    }

    /// Couplings and linear terms evaluated on a grid.
    pub fn coupling_values(&self, domain: &Domain) -> Result<(Vec<Vec<Field>>, Vec<Field>)> {
        let eval = |co: &Coeff| -> Result<Field> { Field::scalar_from_fn(domain, |p| co.eval(p)) };
        let c: Vec<Vec<Field>> = self
            .c
            .iter()
            .map(|row| row.iter().map(&eval).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let d: Vec<Field> = self.d.iter().map(&eval).collect::<Result<Vec<_>>>()?;
        Ok((c, d))
    }

    /// Whether the couplings are the identity matrix and `d = 0` (lets the
    /// solvers use the constant-matrix Leray fast path).
    pub fn has_identity_couplings(&self) -> bool {
        let is_const = |co: &Coeff, val: f64| match co.as_poly() {
            Some(p) => p.add(&Poly::constant(self.n, -val)).terms().iter().all(|(_, c)| c.abs() < 1e-14),
            None => false,
        };
        self.c.iter().enumerate().all(|(j, row)| {
            row.iter()
                .enumerate()
                .all(|(k, co)| is_const(co, if j == k { 1.0 } else { 0.0 }))
        }) && self.d.iter().all(|co| is_const(co, 0.0))
    }
}

fn ones(n: usize) -> Vec<Coeff> {
    (0..n).map(|_| Coeff::constant(n, 1.0)).collect()
}

fn zeros(n: usize) -> Vec<Coeff> {
    (0..n).map(|_| Coeff::Poly(Poly::zero(n))).collect()
}

fn identity_coeffs(n: usize) -> Vec<Vec<Coeff>> {
    (0..n)
        .map(|j| {
            (0..n)
                .map(|k| Coeff::constant(n, if j == k { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// JSON system files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PolyTermJson {
    exps: Vec<u32>,
    coef: f64,
}

/// System definition file: polynomial coefficient tables (exponent tuples
/// to coefficients) per `v_{ji}`, `B_j`, `c_{jk}`, `d_j`, plus `nu` — or a
/// named built-in.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    #[serde(default)]
    pub schema_version: Option<u32>,
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub nu: Option<f64>,
    /// `v[i][j]`: polynomial table of `v_{ji}` for field `V_i`, `0 <= i <= m`.
    #[serde(default)]
    v: Option<Vec<Vec<Vec<PolyTermJson>>>>,
    #[serde(default)]
    b: Option<Vec<Vec<PolyTermJson>>>,
    #[serde(default)]
    c: Option<Vec<Vec<Vec<PolyTermJson>>>>,
    #[serde(default)]
    d: Option<Vec<Vec<PolyTermJson>>>,
}

fn poly_from_json(n: usize, terms: &[PolyTermJson]) -> Result<Poly> {
    for t in terms {
        if t.exps.len() != n {
            return Err(Error::Config(format!(
                "polynomial term has {} exponents, expected {n}",
                t.exps.len()
            )));
        }
    }
    Ok(Poly::from_terms(
        n,
        terms.iter().map(|t| (t.exps.clone(), t.coef)).collect(),
    ))
}

impl HormanderSystem {
    pub fn from_json_str(text: &str) -> Result<HormanderSystem> {
        let file: SystemFile = serde_json::from_str(text)?;
        Self::from_system_file(&file)
    }

    pub fn from_file(path: &std::path::Path) -> Result<HormanderSystem> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_system_file(file: &SystemFile) -> Result<HormanderSystem> {
        if let Some(name) = &file.builtin {
            return Self::builtin(name);
        }
        let n = file
            .n
            .ok_or_else(|| Error::Config("system file needs `n` (or `builtin`)".into()))?;
        let m = file
            .m
            .ok_or_else(|| Error::Config("system file needs `m`".into()))?;
        let nu = file.nu.unwrap_or(1.0);
        let v = file
            .v
            .as_ref()
            .ok_or_else(|| Error::Config("system file needs `v` tables".into()))?;
        if v.len() != m + 1 {
            return Err(Error::Config(format!(
                "`v` lists {} fields, expected m+1 = {}",
                v.len(),
                m + 1
            )));
        }
        let mut fields = Vec::with_capacity(m + 1);
        for fi in v {
            if fi.len() != n {
                return Err(Error::Config(
                    "each field needs n coefficient tables".into(),
                ));
            }
            let coeffs: Vec<Poly> = fi
                .iter()
                .map(|t| poly_from_json(n, t))
                .collect::<Result<_>>()?;
            fields.push(VectorField::new(coeffs));
        }
        let b = match &file.b {
            None => ones(n),
            Some(rows) => rows
                .iter()
                .map(|t| poly_from_json(n, t).map(Coeff::Poly))
                .collect::<Result<_>>()?,
        };
        let c = match &file.c {
            None => identity_coeffs(n),
            Some(rows) => rows
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|t| poly_from_json(n, t).map(Coeff::Poly))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?,
        };
        let d = match &file.d {
            None => zeros(n),
            Some(rows) => rows
                .iter()
                .map(|t| poly_from_json(n, t).map(Coeff::Poly))
                .collect::<Result<_>>()?,
        };
        HormanderSystem::new(n, nu, fields, b, c, d)
    }
}

// ---------------------------------------------------------------------------
// Rank certification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RankReport {
    pub rank: usize,
    /// First bracket depth at which the span fills R^n
    /// (`max_depth + 1` when it never does).
    pub depth: usize,
    pub basis: Vec<BracketNode>,
}

/// Greedy rank growth of the spanning family at `x`: generators
/// `V_1..V_m` at depth 0, then bracket levels (including `V_0` inside
/// brackets) until the rank fills `R^n` or `max_depth` is reached.
pub fn hormander_rank(sys: &HormanderSystem, x: &[f64], max_depth: usize) -> Result<RankReport> {
    if max_depth > MAX_BRACKET_DEPTH {
        return Err(Error::DerivativeBudget(format!(
            "max_depth {max_depth} exceeds {MAX_BRACKET_DEPTH}"
        )));
    }
    let n = sys.n();
    let generators: Vec<BracketNode> = (0..=sys.m())
        .map(|i| BracketNode::generator(i, sys.fields[i].clone()))
        .collect();

    let tol_of = |cols: &[(Vec<f64>, BracketNode)]| {
        let max_norm = cols
            .iter()
            .map(|(v, _)| v.iter().map(|a| a * a).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        1e-8 * max_norm.max(1.0)
    };

    // V_0 does not count toward the depth-0 span.
    let mut candidates: Vec<BracketNode> = generators[1..].to_vec();
    let mut level: Vec<BracketNode> = Vec::new();
    let mut basis: Vec<BracketNode> = Vec::new();
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    let mut rank_depth = usize::MAX;
    let mut buf = vec![0.0; n];

    for depth in 0..=max_depth {
        if depth > 0 {
            // next bracket level: depth 1 pairs all generators, deeper
            // levels left-nest the previous level with a generator
            let next: Vec<BracketNode> = if depth == 1 {
                let mut pairs = Vec::new();
                for j in 0..generators.len() {
                    for k in (j + 1)..generators.len() {
                        pairs.push(lie_bracket(&generators[j], &generators[k])?);
                    }
                }
                pairs
            } else {
                let mut out = Vec::new();
                for b in &level {
                    for g in &generators {
                        out.push(lie_bracket(b, g)?);
                    }
                }
                out
            };
            level = next.clone();
            candidates = next;
        }
        let cols: Vec<(Vec<f64>, BracketNode)> = candidates
            .iter()
            .map(|node| {
                node.eval_into(x, &mut buf);
                (buf.clone(), node.clone())
            })
            .collect();
        let tol = tol_of(&cols);
        for (mut col, node) in cols {
            // modified Gram-Schmidt against the accepted basis
            for q in &ortho {
                let dot: f64 = q.iter().zip(&col).map(|(a, b)| a * b).sum();
                for (c, qv) in col.iter_mut().zip(q) {
                    *c -= dot * qv;
                }
            }
            let nrm = col.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nrm > tol {
                for c in col.iter_mut() {
                    *c /= nrm;
                }
                ortho.push(col);
                basis.push(node);
            }
            if ortho.len() == n {
                break;
            }
        }
        if ortho.len() == n {
            rank_depth = depth;
            break;
        }
    }
    Ok(RankReport {
        rank: ortho.len(),
        depth: if rank_depth == usize::MAX {
            max_depth + 1
        } else {
            rank_depth
        },
        basis,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub passed: bool,
    pub worst_rank: usize,
    pub max_depth_used: usize,
    pub samples: usize,
    /// Points where the span failed, with the achieved rank.
    pub failures: Vec<(Vec<f64>, usize)>,
    /// Largest depth needed among passing points.
    pub worst_depth: usize,
}

/// Runs [`hormander_rank`] at quasi-random points plus all box corners.
pub fn check_condition(
    sys: &HormanderSystem,
    domain: &Domain,
    samples: usize,
    max_depth: usize,
) -> Result<ConditionReport> {
    if samples == 0 {
        return Err(Error::TooFewPoints(
            "check_condition needs samples >= 1".into(),
        ));
    }
    let n = sys.n();
    let half: Vec<f64> = (0..n)
        .map(|a| {
            if domain.is_box() {
                domain.extent()[a]
            } else {
                domain.extent()[a] / 2.0
            }
        })
        .collect();
    let mut points = halton_points_scaled(n, samples, &half);
    for corner in 0..(1usize << n) {
        let p: Vec<f64> = (0..n)
            .map(|a| {
                if corner >> a & 1 == 1 {
                    half[a]
                } else {
                    -half[a]
                }
            })
            .collect();
        points.push(p);
    }
    let mut worst_rank = n;
    let mut worst_depth = 0;
    let mut failures = Vec::new();
    for x in &points {
        let rep = hormander_rank(sys, x, max_depth)?;
        if rep.rank < n {
            worst_rank = worst_rank.min(rep.rank);
            failures.push((x.clone(), rep.rank));
        } else {
            worst_depth = worst_depth.max(rep.depth);
        }
    }
    Ok(ConditionReport {
        passed: failures.is_empty(),
        worst_rank,
        max_depth_used: max_depth,
        samples: points.len(),
        failures,
        worst_depth,
    })
}

// ---------------------------------------------------------------------------
// Convection and operator constants
// ---------------------------------------------------------------------------

/// `V_B[v] target = sum_j B_j(x) v_j(x) d_j target`, pointwise.
pub fn convection_apply(sys: &HormanderSystem, v: &Field, target: &Field) -> Result<Field> {
    let n = sys.n();
    if v.components() != n {
        return Err(Error::Mismatch(format!(
            "convection needs an {n}-vector velocity, got {} components",
            v.components()
        )));
    }
    if target.components() != 1 {
        return Err(Error::Mismatch(
            "convection target must be a scalar (apply per component)".into(),
        ));
    }
    let domain = target.domain();
    let mut out = Field::zeros(domain, 1);
    for j in 0..n {
        let dj = derivative(target, j, 1)?;
        let bj = Field::scalar_from_fn(domain, |p| sys.b[j].eval(p))?;
        let term = bj.pointwise_mul(&v.component_field(j)).pointwise_mul(&dj);
        out.scaled_add(1.0, &term);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatorConstants {
    /// `C_B = sum_{|alpha|<=m} max_i sup |D^alpha B_i|`.
    pub c_b: f64,
    /// `C_{ij} = sum_{|alpha|<=m} sup |D^alpha c_ij|` per entry.
    pub c_ij: Vec<Vec<f64>>,
}

impl OperatorConstants {
    pub fn coupling_sum(&self) -> f64 {
        self.c_ij.iter().flatten().sum()
    }
}

/// Grid suprema of the convection and coupling constants up to derivative
/// order `m_order` (analytic derivatives, evaluated on the domain grid).
pub fn estimate_cb(
    sys: &HormanderSystem,
    domain: &Domain,
    m_order: usize,
) -> Result<OperatorConstants> {
    if m_order > 4 {
        return Err(Error::DerivativeBudget(format!(
            "estimate_cb order {m_order} > 4"
        )));
    }
    let n = sys.n();
    let alphas = crate::grid::multi_indices(n, m_order);
    let sup_of = |co: &Coeff| -> Result<f64> {
        let mut total = 0.0;
        for alpha in &alphas {
            let da = co.multi_partial(alpha);
            let f = Field::scalar_from_fn(domain, |p| da.eval(p))?;
            total += crate::grid::norm(&f, crate::grid::NormKind::Linf)?;
        }
        Ok(total)
    };
    // C_B: per-alpha max over components, summed over alpha
    let mut c_b = 0.0;
    for alpha in &alphas {
        let mut worst = 0.0f64;
        for co in &sys.b {
            let da = co.multi_partial(alpha);
            let f = Field::scalar_from_fn(domain, |p| da.eval(p))?;
            worst = worst.max(crate::grid::norm(&f, crate::grid::NormKind::Linf)?);
        }
        c_b += worst;
    }
    let mut c_ij = Vec::with_capacity(n);
    for row in &sys.c {
        let mut out_row = Vec::with_capacity(n);
        for co in row {
            out_row.push(sup_of(co)?);
        }
        c_ij.push(out_row);
    }
    Ok(OperatorConstants { c_b, c_ij })
}

// ---------------------------------------------------------------------------
// Quasi-random points
// ---------------------------------------------------------------------------

fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const HALTON_BASES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// `count` Halton points in `[-half, half]^n`.
pub(crate) fn halton_points(n: usize, count: usize, half: f64) -> Vec<Vec<f64>> {
    halton_points_scaled(n, count, &vec![half; n])
}

fn halton_points_scaled(n: usize, count: usize, half: &[f64]) -> Vec<Vec<f64>> {
    (1..=count)
        .map(|i| {
            (0..n)
                .map(|a| (halton(i, HALTON_BASES[a]) * 2.0 - 1.0) * half[a])
                .collect()
        })
        .collect()
}

/// Random point in `[-half, half]^n` from the given generator.
pub(crate) fn random_point(n: usize, half: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * half)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_algebra_basics() {
        let n = 2;
        // p = 3 x^2 y + 1
        let p = Poly::from_terms(n, vec![(vec![2, 1], 3.0), (vec![0, 0], 1.0)]);
        assert_eq!(p.eval(&[2.0, 0.5]), 7.0);
        let px = p.partial(0); // 6 x y
        assert_eq!(px.eval(&[2.0, 0.5]), 6.0);
        let py = p.partial(1); // 3 x^2
        assert_eq!(py.eval(&[2.0, 0.5]), 12.0);
        let q = Poly::coordinate(n, 1);
        assert_eq!(p.mul(&q).eval(&[2.0, 0.5]), 3.5);
        assert!(p.add(&p.scale(-1.0)).is_zero());
        assert_eq!(p.degree(), 3);
    }

    #[test]
    fn bracket_oracles() {
        let n = 2;
        // [V, V] = 0
        let v = VectorField::new(vec![Poly::coordinate(n, 1), Poly::coordinate(n, 0)]);
        assert!(v.bracket(&v).is_zero());

        // V = d_x, W = x d_y: [V, W] = d_y
        let d_x = VectorField::coordinate_axis(n, 0);
        let mut x_dy = VectorField::zero(n);
        x_dy.coeffs[1] = Poly::coordinate(n, 0);
        let br = d_x.bracket(&x_dy);
        assert_eq!(br.coeffs()[0], Poly::zero(n));
        assert_eq!(br.coeffs()[1], Poly::constant(n, 1.0));

        // Heisenberg: [X, Y] = d_z
        let sys = HormanderSystem::heisenberg();
        let br = sys.diffusion(1).bracket(sys.diffusion(2));
        assert_eq!(br.coeffs()[0], Poly::zero(3));
        assert_eq!(br.coeffs()[1], Poly::zero(3));
        assert_eq!(br.coeffs()[2], Poly::constant(3, 1.0));
    }

    #[test]
    fn bracket_depth_budget_is_enforced() {
        let n = 2;
        let a = BracketNode::generator(
            1,
            VectorField::new(vec![Poly::coordinate(n, 1), Poly::coordinate(n, 0)]),
        );
        let mut b = a.clone();
        for _ in 0..MAX_BRACKET_DEPTH {
            b = lie_bracket(&b, &a).unwrap();
        }
        assert!(matches!(
            lie_bracket(&b, &a),
            Err(Error::DerivativeBudget(_))
        ));
    }

    #[test]
    fn jacobi_identity_holds_at_random_points() {
        // [[V,W],U] + [[W,U],V] + [[U,V],W] = 0 for polynomial fields
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_field = || {
            let coeffs: Vec<Poly> = (0..n)
                .map(|_| {
                    let mut terms = Vec::new();
                    for _ in 0..3 {
                        let exps: Vec<u32> = (0..n).map(|_| rng.random_range(0..3u32)).collect();
                        terms.push((exps, rng.random::<f64>() * 2.0 - 1.0));
                    }
                    Poly::from_terms(n, terms)
                })
                .collect();
            VectorField::new(coeffs)
        };
        let v = rand_field();
        let w = rand_field();
        let u = rand_field();
        let total: Vec<Poly> = v
            .bracket(&w)
            .bracket(&u)
            .coeffs()
            .iter()
            .zip(w.bracket(&u).bracket(&v).coeffs())
            .zip(u.bracket(&v).bracket(&w).coeffs())
            .map(|((a, b), c)| a.add(b).add(c))
            .collect();
        for x in halton_points(n, 100, 2.0) {
            for p in &total {
                assert!(p.eval(&x).abs() <= 1e-8, "residual {} at {x:?}", p.eval(&x));
            }
        }
    }

    #[test]
    fn rank_oracles() {
        // full Laplacian: rank n at depth 0
        let lap = HormanderSystem::classical(3, 0.5);
        let rep = hormander_rank(&lap, &[0.3, -0.7, 1.1], 3).unwrap();
        assert_eq!((rep.rank, rep.depth), (3, 0));

        // Kolmogorov: rank 2 at depth 1 via [V_1, V_0] = d_y
        let kol = HormanderSystem::kolmogorov();
        let rep = hormander_rank(&kol, &[0.2, 0.4], 3).unwrap();
        assert_eq!((rep.rank, rep.depth), (2, 1));

        // Heisenberg: rank 3 at depth 1
        let heis = HormanderSystem::heisenberg();
        let rep = hormander_rank(&heis, &[1.0, -2.0, 0.5], 3).unwrap();
        assert_eq!((rep.rank, rep.depth), (3, 1));
        assert_eq!(rep.basis.len(), 3);

        // {d_x} alone in R^2: rank 1 at every depth (sentinel depth)
        let deg = HormanderSystem::new(
            2,
            1.0,
            vec![VectorField::zero(2), VectorField::coordinate_axis(2, 0)],
            ones(2),
            identity_coeffs(2),
            zeros(2),
        )
        .unwrap();
        let rep = hormander_rank(&deg, &[0.0, 0.0], 3).unwrap();
        assert_eq!(rep.rank, 1);
        assert_eq!(rep.depth, 4);
    }

    #[test]
    fn rank_is_invariant_under_generator_reordering() {
        let heis = HormanderSystem::heisenberg();
        let swapped = HormanderSystem::new(
            3,
            1.0,
            vec![
                heis.fields[0].clone(),
                heis.fields[2].clone(),
                heis.fields[1].clone(),
            ],
            ones(3),
            identity_coeffs(3),
            zeros(3),
        )
        .unwrap();
        for x in halton_points(3, 20, 2.0) {
            let a = hormander_rank(&heis, &x, 2).unwrap();
            let b = hormander_rank(&swapped, &x, 2).unwrap();
            assert_eq!((a.rank, a.depth), (b.rank, b.depth));
        }
    }

    #[test]
    fn condition_check_oracles() {
        let dom = Domain::cube_box(3, 8, 2.0).unwrap();
        let rep = check_condition(&HormanderSystem::heisenberg(), &dom, 100, 2).unwrap();
        assert!(rep.passed);
        assert_eq!(rep.worst_depth, 1);

        // full Laplacian passes at depth 0 for n = 2, 3, 4
        for n in 2..=4 {
            let d = Domain::cube_box(n, 8, 2.0).unwrap();
            let rep = check_condition(&HormanderSystem::classical(n, 1.0), &d, 30, 0).unwrap();
            assert!(rep.passed);
            assert_eq!(rep.worst_depth, 0);
        }

        // Grushin passes; depth 1 needed on the line x = 0, depth 0 elsewhere
        let dom2 = Domain::cube_box(2, 8, 2.0).unwrap();
        let rep = check_condition(&HormanderSystem::grushin(), &dom2, 100, 2).unwrap();
        assert!(rep.passed);
        let on_line = hormander_rank(&HormanderSystem::grushin(), &[0.0, 0.7], 2).unwrap();
        assert_eq!((on_line.rank, on_line.depth), (2, 1));
        let off_line = hormander_rank(&HormanderSystem::grushin(), &[0.5, 0.7], 2).unwrap();
        assert_eq!((off_line.rank, off_line.depth), (2, 0));

        // degenerate {d_x} in R^2 fails with witnesses
        let deg = HormanderSystem::new(
            2,
            1.0,
            vec![VectorField::zero(2), VectorField::coordinate_axis(2, 0)],
            ones(2),
            identity_coeffs(2),
            zeros(2),
        )
        .unwrap();
        let rep = check_condition(&deg, &dom2, 50, 3).unwrap();
        assert!(!rep.passed);
        assert!(!rep.failures.is_empty());
        assert_eq!(rep.worst_rank, 1);
    }

    #[test]
    fn classical_detection() {
        let sys = HormanderSystem::classical(2, 0.37);
        let nu = sys.classical_viscosity().unwrap();
        assert!((nu - 0.37).abs() < 1e-14);
        assert!(sys.has_identity_couplings());
        assert!(HormanderSystem::kolmogorov()
            .classical_viscosity()
            .is_none());
        assert!(HormanderSystem::grushin().classical_viscosity().is_none());
    }

    #[test]
    fn convection_oracles() {
        use crate::grid::{norm, NormKind};
        let dom = Domain::cube_torus(2, 32, 2.0 * std::f64::consts::PI).unwrap();
        let sys = HormanderSystem::classical(2, 0.1);
        let v = Field::vector_from_fn(&dom, |c, p| if c == 0 { p[1].sin() } else { p[0].cos() })
            .unwrap();
        let target = Field::scalar_from_fn(&dom, |p| (p[0] + p[1]).sin()).unwrap();

        // v = 0 gives 0; constant target gives 0
        let zero_v = Field::zeros(&dom, 2);
        assert_eq!(
            norm(
                &convection_apply(&sys, &zero_v, &target).unwrap(),
                NormKind::Linf
            )
            .unwrap(),
            0.0
        );
        let const_t = Field::scalar_from_fn(&dom, |_| 2.0).unwrap();
        assert!(
            norm(
                &convection_apply(&sys, &v, &const_t).unwrap(),
                NormKind::Linf
            )
            .unwrap()
                < 1e-11
        );

        // B = 1 recovers the classical convection sum_j v_j d_j target
        let got = convection_apply(&sys, &v, &target).unwrap();
        let expect = Field::scalar_from_fn(&dom, |p| {
            let c = (p[0] + p[1]).cos();
            p[1].sin() * c + p[0].cos() * c
        })
        .unwrap();
        let mut diff = got.clone();
        diff.scaled_add(-1.0, &expect);
        assert!(norm(&diff, NormKind::Linf).unwrap() < 1e-10);

        // bilinearity in (v, target)
        let mut v2 = v.clone();
        v2.scale(2.0);
        let a = convection_apply(&sys, &v2, &target).unwrap();
        let mut b = convection_apply(&sys, &v, &target).unwrap();
        b.scale(2.0);
        let mut d = a.clone();
        d.scaled_add(-1.0, &b);
        assert!(norm(&d, NormKind::Linf).unwrap() < 1e-12);
    }

    #[test]
    fn cb_estimates() {
        let dom = Domain::cube_box(2, 64, 4.0).unwrap();
        // B = 1: all derivatives vanish, C_B = 1 at any order
        let sys = HormanderSystem::classical(2, 1.0);
        let consts = estimate_cb(&sys, &dom, 2).unwrap();
        assert!((consts.c_b - 1.0).abs() < 1e-12);
        assert!((consts.coupling_sum() - 2.0).abs() < 1e-12); // identity couplings

        // B_i(x) = sin x_1, m = 1: C_B = sup|sin| + sup|cos| = 2
        let n = 2;
        let sin_b = |amp: f64| -> Vec<Coeff> {
            (0..n)
                .map(|_| Coeff::Sinusoid {
                    n,
                    axis: 0,
                    amp,
                    freq: 1.0,
                    phase: 0.0,
                })
                .collect()
        };
        let make = |amp: f64| {
            HormanderSystem::new(
                n,
                1.0,
                vec![
                    VectorField::zero(n),
                    VectorField::coordinate_axis(n, 0),
                    VectorField::coordinate_axis(n, 1),
                ],
                sin_b(amp),
                identity_coeffs(n),
                zeros(n),
            )
            .unwrap()
        };
        let consts = estimate_cb(&make(1.0), &dom, 1).unwrap();
        assert!((consts.c_b - 2.0).abs() < 0.02, "c_b = {}", consts.c_b);

        // scaling B by lambda scales C_B by lambda
        let consts3 = estimate_cb(&make(3.0), &dom, 1).unwrap();
        assert!((consts3.c_b - 3.0 * consts.c_b).abs() < 1e-10);

        assert!(estimate_cb(&sys, &dom, 5).is_err());
    }

    #[test]
    fn system_json_and_builtins() {
        let text = r#"{
            "schema_version": 1,
            "n": 2, "m": 1, "nu": 0.5,
            "v": [
                [[], [{"exps": [1, 0], "coef": 1.0}]],
                [[{"exps": [0, 0], "coef": 1.0}], []]
            ]
        }"#;
        let sys = HormanderSystem::from_json_str(text).unwrap();
        let rep = hormander_rank(&sys, &[0.3, 0.4], 2).unwrap();
        assert_eq!((rep.rank, rep.depth), (2, 1)); // the kolmogorov pair

        assert!(HormanderSystem::builtin("heisenberg").is_ok());
        assert!(HormanderSystem::builtin("nope").is_err());
        assert!(HormanderSystem::from_json_str("{\"n\": 2}").is_err());
        assert!(HormanderSystem::from_json_str("{").is_err());
    }

    #[test]
    fn validation_rejects_bad_sizes() {
        assert!(HormanderSystem::new(
            2,
            1.0,
            vec![VectorField::zero(2)],
            ones(3), // wrong length
            identity_coeffs(2),
            zeros(2),
        )
        .is_err());
    }
}
