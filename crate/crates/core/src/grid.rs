//! Domains, sampled fields, norms, and derivative stencils shared by all
//! backends.
//!
//! A [`Domain`] is either a periodic torus (spectral transforms available,
//! shape entries must be powers of two) or a truncated box on which fields
//! are assumed negligible at the faces. A [`Field`] is a dense row-major
//! array of 64-bit reals, one block per component; fields are immutable
//! values after construction and all public operations are pure.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fft;
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Torus,
    Box,
}

/// Spatial domain: dimension, grid shape, physical extent.
///
/// For a torus, `extent[a]` is the period along axis `a` and grid points sit
/// at `x = i*h`, `h = extent/shape`. For a box, `extent[a]` is the half-width
/// and points sit at `x = -extent + i*h`, `h = 2*extent/shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    kind: DomainKind,
    shape: Vec<usize>,
    extent: Vec<f64>,
}

impl Domain {
    pub fn new(kind: DomainKind, shape: Vec<usize>, extent: Vec<f64>) -> Result<Self> {
        let n = shape.len();
        if n < 2 {
            return Err(Error::InvalidDomain(format!("dimension {n} < 2")));
        }
        if extent.len() != n {
            return Err(Error::InvalidDomain(format!(
                "shape has {n} axes but extent has {}",
                extent.len()
            )));
        }
        for (a, &s) in shape.iter().enumerate() {
            if s < 8 {
                return Err(Error::InvalidDomain(format!("shape[{a}] = {s} < 8")));
            }
            if kind == DomainKind::Torus && !s.is_power_of_two() {
                return Err(Error::InvalidDomain(format!(
                    "torus shape[{a}] = {s} is not a power of two"
                )));
            }
            if !(extent[a].is_finite() && extent[a] > 0.0) {
                return Err(Error::InvalidDomain(format!(
                    "extent[{a}] = {} must be positive",
                    extent[a]
                )));
            }
        }
        Ok(Domain { kind, shape, extent })
    }

    pub fn torus(shape: Vec<usize>, periods: Vec<f64>) -> Result<Self> {
        Self::new(DomainKind::Torus, shape, periods)
    }

    pub fn boxed(shape: Vec<usize>, half_widths: Vec<f64>) -> Result<Self> {
        Self::new(DomainKind::Box, shape, half_widths)
    }

    /// Cubic torus with the same point count and period on every axis.
    pub fn cube_torus(n: usize, points: usize, period: f64) -> Result<Self> {
        Self::torus(vec![points; n], vec![period; n])
    }

    /// Cubic box with the same point count and half-width on every axis.
    pub fn cube_box(n: usize, points: usize, half_width: f64) -> Result<Self> {
        Self::boxed(vec![points; n], vec![half_width; n])
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn is_torus(&self) -> bool {
        self.kind == DomainKind::Torus
    }

    pub fn is_box(&self) -> bool {
        self.kind == DomainKind::Box
    }

    pub fn n(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn extent(&self) -> &[f64] {
        &self.extent
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid spacing along `axis`: period/shape (torus) or 2*extent/shape (box).
    pub fn spacing(&self, axis: usize) -> f64 {
        match self.kind {
            DomainKind::Torus => self.extent[axis] / self.shape[axis] as f64,
            DomainKind::Box => 2.0 * self.extent[axis] / self.shape[axis] as f64,
        }
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.n()).map(|a| self.spacing(a)).fold(0.0, f64::max)
    }

    /// Volume of one grid cell.
    pub fn cell_volume(&self) -> f64 {
        (0..self.n()).map(|a| self.spacing(a)).product()
    }

    /// Coordinate of grid index `i` along `axis`.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        match self.kind {
            DomainKind::Torus => i as f64 * self.spacing(axis),
            DomainKind::Box => -self.extent[axis] + i as f64 * self.spacing(axis),
        }
    }

    /// Writes the coordinates of the flat index `flat` into `out`.
    pub fn point_into(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for axis in (0..self.n()).rev() {
            let i = rem % self.shape[axis];
            rem /= self.shape[axis];
            out[axis] = self.coord(axis, i);
        }
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.n()];
        self.point_into(flat, &mut p);
        p
    }

    /// Trapezoidal quadrature weight of the flat index (boxes halve the face
    /// weights per axis; on the torus every weight is the cell volume).
    pub fn quad_weight(&self, flat: usize) -> f64 {
        let mut w = self.cell_volume();
        if self.kind == DomainKind::Box {
            let mut rem = flat;
            for axis in (0..self.n()).rev() {
                let i = rem % self.shape[axis];
                rem /= self.shape[axis];
                if i == 0 || i == self.shape[axis] - 1 {
                    w *= 0.5;
                }
            }
        }
        w
    }

    fn strides(&self) -> Vec<usize> {
        let n = self.n();
        let mut s = vec![1usize; n];
        for a in (0..n - 1).rev() {
            s[a] = s[a + 1] * self.shape[a + 1];
        }
        s
    }
}

/// Dense sampled field: `components` blocks of `domain.len()` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    domain: Domain,
    components: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(domain: &Domain, components: usize) -> Field {
        Field {
            domain: domain.clone(),
            components,
            data: vec![0.0; components * domain.len()],
        }
    }

    /// Builds a field from per-component point evaluations and checks
    /// finiteness.
    pub fn from_fn(
        domain: &Domain,
        components: usize,
        f: impl Fn(usize, &[f64]) -> f64 + Sync + Send,
    ) -> Result<Field> {
        let npts = domain.len();
        let mut field = Field::zeros(domain, components);
        let n = domain.n();
        for c in 0..components {
            let dom = domain.clone();
            let slice = &mut field.data[c * npts..(c + 1) * npts];
            parallel::fill_indexed(slice, |i| {
                let mut p = [0.0f64; 8];
                dom.point_into(i, &mut p[..n]);
                f(c, &p[..n])
            });
        }
        field.check_finite()?;
        Ok(field)
    }

    pub fn scalar_from_fn(domain: &Domain, f: impl Fn(&[f64]) -> f64 + Sync + Send) -> Result<Field> {
        Field::from_fn(domain, 1, |_, p| f(p))
    }

    pub fn vector_from_fn(
        domain: &Domain,
        f: impl Fn(usize, &[f64]) -> f64 + Sync + Send,
    ) -> Result<Field> {
        Field::from_fn(domain, domain.n(), f)
    }

    pub fn from_data(domain: &Domain, components: usize, data: Vec<f64>) -> Result<Field> {
        if data.len() != components * domain.len() {
            return Err(Error::Mismatch(format!(
                "data length {} != components {} x points {}",
                data.len(),
                components,
                domain.len()
            )));
        }
        let f = Field {
            domain: domain.clone(),
            components,
            data,
        };
        f.check_finite()?;
        Ok(f)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn is_scalar(&self) -> bool {
        self.components == 1
    }

    pub fn comp(&self, c: usize) -> &[f64] {
        let npts = self.domain.len();
        &self.data[c * npts..(c + 1) * npts]
    }

    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        let npts = self.domain.len();
        &mut self.data[c * npts..(c + 1) * npts]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extracts one component as a scalar field.
    pub fn component_field(&self, c: usize) -> Field {
        Field {
            domain: self.domain.clone(),
            components: 1,
            data: self.comp(c).to_vec(),
        }
    }

    /// Stacks scalar fields into one multi-component field.
    pub fn from_components(parts: &[Field]) -> Result<Field> {
        let domain = parts[0].domain.clone();
        let mut data = Vec::with_capacity(parts.len() * domain.len());
        for p in parts {
            if p.domain != domain || p.components != 1 {
                return Err(Error::Mismatch("stacking needs scalar fields on one domain".into()));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Field {
            domain,
            components: parts.len(),
            data,
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Mismatch(format!(
                    "non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// `self += a * g`.
    pub fn scaled_add(&mut self, a: f64, g: &Field) {
        debug_assert_eq!(self.data.len(), g.data.len());
        let src = &g.data;
        let dst = &mut self.data;
        parallel::for_each_chunk_mut(dst, 4096, |ci, chunk| {
            let base = ci * 4096;
            for (j, v) in chunk.iter_mut().enumerate() {
                *v += a * src[base + j];
            }
        });
    }

    pub fn scale(&mut self, a: f64) {
        parallel::for_each_chunk_mut(&mut self.data, 4096, |_, chunk| {
            for v in chunk {
                *v *= a;
            }
        });
    }

    /// Linear combination of fields over one domain.
    pub fn linear_comb(terms: &[(f64, &Field)]) -> Field {
        let mut out = Field::zeros(terms[0].1.domain(), terms[0].1.components());
        for &(a, f) in terms {
            out.scaled_add(a, f);
        }
        out
    }

    /// Pointwise product into a new scalar field (both scalar).
    pub fn pointwise_mul(&self, g: &Field) -> Field {
        debug_assert_eq!(self.components, 1);
        debug_assert_eq!(g.components, 1);
        let mut out = self.clone();
        let src = &g.data;
        parallel::for_each_chunk_mut(&mut out.data, 4096, |ci, chunk| {
            let base = ci * 4096;
            for (j, v) in chunk.iter_mut().enumerate() {
                *v *= src[base + j];
            }
        });
        out
    }
}

/// Norm kinds evaluated by [`norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    L2,
    Linf,
    /// Sobolev norm `sqrt(sum_{|alpha|<=m} ||D^alpha f||_{L2}^2)`, `m <= 4`.
    Hm(usize),
    /// `sup (1 + |x|^q) |f(x)|`; box domains only.
    WeightedLinf(f64),
}

/// Multi-indices of total order `<= m` in `n` variables.
pub(crate) fn multi_indices(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, m: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for d in 0..=m {
            prefix.push(d);
            rec(n, m - d, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, m, &mut Vec::new(), &mut out);
    out
}

/// Spectral derivative of one component on the torus.
fn spectral_derivative_comp(domain: &Domain, comp: &[f64], axis: usize, order: usize) -> Vec<f64> {
    let shape = domain.shape();
    let mut buf = fft::to_complex(comp);
    fft::forward(shape, &mut buf);
    let n_axis = shape[axis];
    let period = domain.extent()[axis];
    let post: usize = shape[axis + 1..].iter().product();
    parallel::for_each_chunk_mut(&mut buf, post * n_axis, |_, slab| {
        for t in 0..n_axis {
            let k = fft::signed_freq(t, n_axis);
            let xi = 2.0 * PI * k as f64 / period;
            let nyquist = 2 * t == n_axis;
            for v in &mut slab[t * post..(t + 1) * post] {
                match order {
                    1 => {
                        // Multiplier i*xi; the Nyquist mode is dropped to keep
                        // the derivative of a real field real.
                        if nyquist {
                            *v = Default::default();
                        } else {
                            let w = *v;
                            *v = rustfft::num_complex::Complex64::new(-w.im * xi, w.re * xi);
                        }
                    }
                    _ => {
                        *v *= -xi * xi;
                    }
                }
            }
        }
    });
    fft::inverse(shape, &mut buf);
    let mut out = vec![0.0; comp.len()];
    fft::real_parts_into(&buf, &mut out);
    out
}

/// Finite-difference derivative of one component: 4th-order centered stencil
/// in the interior, 2nd-order one-sided at box faces, periodic wrap on the
/// torus.
fn stencil_derivative_comp(domain: &Domain, comp: &[f64], axis: usize, order: usize) -> Vec<f64> {
    let shape = domain.shape();
    let n_axis = shape[axis];
    let h = domain.spacing(axis);
    let post: usize = shape[axis + 1..].iter().product();
    let periodic = domain.is_torus();
    let mut out = vec![0.0; comp.len()];
    let slab = n_axis * post;

    let value = |block: &[f64], t: i64, offset: usize| -> f64 {
        let ti = if periodic {
            t.rem_euclid(n_axis as i64) as usize
        } else {
            t.clamp(0, n_axis as i64 - 1) as usize
        };
        block[ti * post + offset]
    };

    parallel::for_each_chunk_mut(&mut out, slab, |b, out_block| {
        let in_block = &comp[b * slab..(b + 1) * slab];
        for t in 0..n_axis {
            let interior = periodic || (t >= 2 && t + 2 < n_axis);
            let edge = !periodic && (t == 0 || t + 1 == n_axis);
            for offset in 0..post {
                let g = |dt: i64| value(in_block, t as i64 + dt, offset);
                let d = match (order, interior, edge, t == 0) {
                    (1, true, _, _) => (-g(2) + 8.0 * g(1) - 8.0 * g(-1) + g(-2)) / (12.0 * h),
                    (1, false, false, _) => (g(1) - g(-1)) / (2.0 * h),
                    (1, false, true, true) => (-3.0 * g(0) + 4.0 * g(1) - g(2)) / (2.0 * h),
                    (1, false, true, false) => (3.0 * g(0) - 4.0 * g(-1) + g(-2)) / (2.0 * h),
                    (2, true, _, _) => {
                        (-g(2) + 16.0 * g(1) - 30.0 * g(0) + 16.0 * g(-1) - g(-2)) / (12.0 * h * h)
                    }
                    (2, false, false, _) => (g(1) - 2.0 * g(0) + g(-1)) / (h * h),
                    (2, false, true, true) => {
                        (2.0 * g(0) - 5.0 * g(1) + 4.0 * g(2) - g(3)) / (h * h)
                    }
                    (2, false, true, false) => {
                        (2.0 * g(0) - 5.0 * g(-1) + 4.0 * g(-2) - g(-3)) / (h * h)
                    }
                    _ => unreachable!(),
                };
                out_block[t * post + offset] = d;
            }
        }
    });
    out
}

/// Partial derivative of every component along `axis`.
///
/// Torus fields differentiate spectrally; box fields use the 4th-order
/// centered stencil with one-sided 2nd-order faces.
pub fn derivative(f: &Field, axis: usize, order: usize) -> Result<Field> {
    if axis >= f.domain().n() {
        return Err(Error::AxisOutOfRange {
            axis,
            n: f.domain().n(),
        });
    }
    if order != 1 && order != 2 {
        return Err(Error::BadDerivativeOrder(order));
    }
    let mut out = f.clone();
    let npts = f.domain().len();
    for c in 0..f.components() {
        let d = if f.domain().is_torus() {
            spectral_derivative_comp(f.domain(), f.comp(c), axis, order)
        } else {
            stencil_derivative_comp(f.domain(), f.comp(c), axis, order)
        };
        out.data[c * npts..(c + 1) * npts].copy_from_slice(&d);
    }
    Ok(out)
}

/// Stencil derivative regardless of domain kind (periodic wrap on the torus).
/// Used by the finite-difference semigroup backend.
pub fn derivative_stencil(f: &Field, axis: usize, order: usize) -> Result<Field> {
    if axis >= f.domain().n() {
        return Err(Error::AxisOutOfRange {
            axis,
            n: f.domain().n(),
        });
    }
    if order != 1 && order != 2 {
        return Err(Error::BadDerivativeOrder(order));
    }
    let mut out = f.clone();
    let npts = f.domain().len();
    for c in 0..f.components() {
        let d = stencil_derivative_comp(f.domain(), f.comp(c), axis, order);
        out.data[c * npts..(c + 1) * npts].copy_from_slice(&d);
    }
    Ok(out)
}

/// Applies the multi-index derivative `D^alpha` by repeated single-axis
/// passes.
pub fn multi_derivative(f: &Field, alpha: &[usize]) -> Result<Field> {
    let mut g = f.clone();
    for (axis, &ord) in alpha.iter().enumerate() {
        let mut left = ord;
        while left >= 2 {
            g = derivative(&g, axis, 2)?;
            left -= 2;
        }
        if left == 1 {
            g = derivative(&g, axis, 1)?;
        }
    }
    Ok(g)
}

fn l2_squared(f: &Field) -> f64 {
    let npts = f.domain().len();
    let dom = f.domain().clone();
    let mut total = 0.0;
    for c in 0..f.components() {
        let comp = f.comp(c);
        total += parallel::stable_sum_by(npts, |i| {
            let v = comp[i];
            v * v * dom.quad_weight(i)
        });
    }
    total
}

/// Torus H^m norm via the Parseval weight `sum_{|alpha|<=m} prod xi_a^{2 alpha_a}`.
fn hm_torus(f: &Field, m: usize) -> f64 {
    let shape = f.domain().shape().to_vec();
    let n = f.domain().n();
    let npts = f.domain().len();
    let alphas = multi_indices(n, m);
    let periods: Vec<f64> = f.domain().extent().to_vec();
    let norm_factor = f.domain().cell_volume() / npts as f64;
    let mut total = 0.0;
    for c in 0..f.components() {
        let mut buf = fft::to_complex(f.comp(c));
        fft::forward(&shape, &mut buf);
        total += parallel::stable_sum_by(npts, |flat| {
            let mut idx = [0usize; 8];
            fft::unravel(&shape, flat, &mut idx[..n]);
            let mut weight = 0.0;
            for alpha in &alphas {
                let mut w = 1.0;
                for a in 0..n {
                    if alpha[a] > 0 {
                        let xi = 2.0 * PI * fft::signed_freq(idx[a], shape[a]) as f64 / periods[a];
                        w *= xi.powi(2 * alpha[a] as i32);
                    }
                }
                weight += w;
            }
            buf[flat].norm_sqr() * weight
        }) * norm_factor;
    }
    total.sqrt()
}

/// Norm of a field; see [`NormKind`].
pub fn norm(f: &Field, kind: NormKind) -> Result<f64> {
    match kind {
        NormKind::L2 => Ok(l2_squared(f).sqrt()),
        NormKind::Linf => {
            let npts = f.domain().len() * f.components();
            let data = f.data();
            Ok(parallel::stable_max_by(npts, |i| data[i].abs()))
        }
        NormKind::Hm(m) => {
            if m > 4 {
                return Err(Error::DerivativeBudget(format!("H^{m} exceeds the order-4 budget")));
            }
            if f.domain().is_torus() {
                return Ok(hm_torus(f, m));
            }
            let mut total = 0.0;
            for alpha in multi_indices(f.domain().n(), m) {
                let d = multi_derivative(f, &alpha)?;
                total += l2_squared(&d);
            }
            Ok(total.sqrt())
        }
        NormKind::WeightedLinf(q) => {
            if !f.domain().is_box() {
                return Err(Error::WeightedNormOnTorus);
            }
            let npts = f.domain().len();
            let dom = f.domain().clone();
            let n = dom.n();
            let mut best = 0.0f64;
            for c in 0..f.components() {
                let comp = f.comp(c);
                best = best.max(parallel::stable_max_by(npts, |i| {
                    let mut p = [0.0f64; 8];
                    dom.point_into(i, &mut p[..n]);
                    let r = p[..n].iter().map(|x| x * x).sum::<f64>().sqrt();
                    (1.0 + r.powf(q)) * comp[i].abs()
                }));
            }
            Ok(best)
        }
    }
}

/// Divergence of an n-vector field via [`derivative`].
pub fn divergence(v: &Field) -> Result<Field> {
    let n = v.domain().n();
    if v.components() != n {
        return Err(Error::Mismatch(format!(
            "divergence needs {n} components, got {}",
            v.components()
        )));
    }
    let mut out = Field::zeros(v.domain(), 1);
    for axis in 0..n {
        let d = derivative(&v.component_field(axis), axis, 1)?;
        out.scaled_add(1.0, &d);
    }
    Ok(out)
}

/// Gradient of a scalar field as an n-vector field.
pub fn gradient(f: &Field) -> Result<Field> {
    debug_assert_eq!(f.components(), 1);
    let n = f.domain().n();
    let parts: Vec<Field> = (0..n)
        .map(|axis| derivative(f, axis, 1))
        .collect::<Result<_>>()?;
    Field::from_components(&parts)
}

// ---------------------------------------------------------------------------
// Snapshot I/O: raw little-endian f64 binary plus a JSON sidecar.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotMeta {
    kind: DomainKind,
    n: usize,
    shape: Vec<usize>,
    extent: Vec<f64>,
    components: usize,
    dtype: String,
    order: String,
}

/// Writes `<base>.bin` (row-major components concatenated, little-endian f64)
/// and `<base>.json`. The round trip is bit-exact.
pub fn save_snapshot(f: &Field, base: &Path) -> Result<()> {
    let meta = SnapshotMeta {
        kind: f.domain().kind(),
        n: f.domain().n(),
        shape: f.domain().shape().to_vec(),
        extent: f.domain().extent().to_vec(),
        components: f.components(),
        dtype: "f64le".into(),
        order: "row-major".into(),
    };
    let mut bytes = Vec::with_capacity(f.data().len() * 8);
    for v in f.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(base.with_extension("bin"), bytes)?;
    std::fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

/// Reads a snapshot written by [`save_snapshot`].
pub fn load_snapshot(base: &Path) -> Result<Field> {
    let meta: SnapshotMeta =
        serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
    if meta.dtype != "f64le" || meta.order != "row-major" {
        return Err(Error::SnapshotFormat(format!(
            "unsupported dtype/order {}/{}",
            meta.dtype, meta.order
        )));
    }
    if meta.shape.len() != meta.n || meta.extent.len() != meta.n {
        return Err(Error::SnapshotFormat("inconsistent sidecar dimensions".into()));
    }
    let domain = Domain::new(meta.kind, meta.shape, meta.extent)?;
    let bytes = std::fs::read(base.with_extension("bin"))?;
    let expect = meta.components * domain.len() * 8;
    if bytes.len() != expect {
        return Err(Error::SnapshotFormat(format!(
            "binary payload is {} bytes, sidecar implies {expect}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Field::from_data(&domain, meta.components, data)
}
