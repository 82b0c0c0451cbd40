//! The Poisson kernel, heat kernel, Leray multiplier, the convolution engine,
//! and numerical evaluation of the estimation constants `C_K` and `C_s`.
//!
//! Torus fields use exact Fourier multipliers under the standard transform
//! pairing (mode `exp(2 pi i m x / L)` at signed index `m`); box fields use
//! zero-padded free-space convolutions with sampled kernels, the singular
//! cell replaced by its analytic average.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{derivative, divergence, Domain, Field};
use crate::parallel;

/// Surface area of the unit sphere in `R^n` (`omega_n`): 2 pi for n = 2,
/// 4 pi for n = 3.
pub fn unit_sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 2.0 * PI * unit_sphere_area(n - 2) / (n as f64 - 2.0),
    }
}

/// `int_{S^{n-1}} |u_1| dsigma`, the angular factor in integrals of
/// `|x_i| / |x|^n`.
fn abs_coordinate_sphere_integral(n: usize) -> f64 {
    2.0 * unit_sphere_area(n - 1) / (n as f64 - 1.0)
}

/// Fundamental solution of the Laplacian on `R^n`, evaluated at `x != 0`:
/// `(1/2 pi) ln |x|` for n = 2, `|x|^{2-n} / ((2-n) omega_n)` for n >= 3.
pub fn poisson_kernel(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::DimensionTooSmall(n));
    }
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r == 0.0 {
        return Err(Error::KernelAtOrigin);
    }
    Ok(poisson_kernel_radial(r, n))
}

fn poisson_kernel_radial(r: f64, n: usize) -> f64 {
    if n == 2 {
        r.ln() / (2.0 * PI)
    } else {
        r.powi(2 - n as i32) / ((2.0 - n as f64) * unit_sphere_area(n))
    }
}

/// `K_{n,i}(x) = x_i / (omega_n |x|^n)`, the i-th first derivative of the
/// Poisson kernel (same closed form for every n >= 2).
pub fn poisson_kernel_gradient(x: &[f64], i: usize) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::DimensionTooSmall(n));
    }
    let r2 = x.iter().map(|v| v * v).sum::<f64>();
    if r2 == 0.0 {
        return Err(Error::KernelAtOrigin);
    }
    Ok(x[i] / (unit_sphere_area(n) * r2.powf(n as f64 / 2.0)))
}

/// Radial elliptic kernel interface: smooth off the diagonal with the
/// singularity orders `(2-n, 1-n)` of the Laplacian fundamental solution.
pub trait EllipticKernel: Sync {
    fn dim(&self) -> usize;
    /// Kernel value at `x != 0`.
    fn evaluate(&self, x: &[f64]) -> f64;
    /// `i`-th gradient component at `x != 0`.
    fn gradient_component(&self, x: &[f64], i: usize) -> f64;
    fn singularity_orders(&self) -> (f64, f64) {
        let n = self.dim() as f64;
        (2.0 - n, 1.0 - n)
    }
    /// Envelope constants `c` with `|K| <= c |x|^{2-n}` and
    /// `|K_i| <= c |x|^{1-n}`, measured on radii in `(0, r_max]`.
    fn envelope_constants(&self, r_max: f64) -> (f64, f64) {
        let n = self.dim();
        let mut c0 = 0.0f64;
        let mut c1 = 0.0f64;
        for k in 1..=200 {
            let r = r_max * k as f64 / 200.0;
            let x = vec![r / (n as f64).sqrt(); n];
            c0 = c0.max(self.evaluate(&x).abs() * r.powi(n as i32 - 2));
            for i in 0..n {
                c1 = c1.max(self.gradient_component(&x, i).abs() * r.powi(n as i32 - 1));
            }
        }
        (c0, c1)
    }
    /// Mean of the kernel over the ball of the same volume as a grid cell
    /// of spacing `h`, centered at the singularity.
    fn singular_cell_mean(&self, h: f64) -> f64;
    /// `int |K_i|` over that ball (the gradient's signed cell average is 0
    /// by antisymmetry; this absolute integral feeds `estimate_ck`).
    fn abs_gradient_cell_integral(&self, h: f64) -> f64;
    /// `int_{R^n} |K_i(z)| exp(-|z|^2/2) dz`, the screened singular mass
    /// split off analytically by `estimate_ck`.
    fn abs_gradient_screened_integral(&self) -> f64;
}

/// The default elliptic kernel: the Poisson kernel, optionally scaled.
#[derive(Debug, Clone)]
pub struct PoissonKernel {
    n: usize,
    scale: f64,
}

impl PoissonKernel {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::DimensionTooSmall(n));
        }
        Ok(PoissonKernel { n, scale: 1.0 })
    }

    pub fn scaled(n: usize, scale: f64) -> Result<Self> {
        Ok(PoissonKernel {
            scale,
            ..Self::new(n)?
        })
    }

    /// Radius of the ball with the volume of one grid cell.
    fn ball_radius(&self, h: f64) -> f64 {
        let n = self.n as f64;
        h * (n / unit_sphere_area(self.n)).powf(1.0 / n)
    }
}

impl EllipticKernel for PoissonKernel {
    fn dim(&self) -> usize {
        self.n
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.scale * poisson_kernel_radial(r, self.n)
    }

    fn gradient_component(&self, x: &[f64], i: usize) -> f64 {
        let r2 = x.iter().map(|v| v * v).sum::<f64>();
        self.scale * x[i] / (unit_sphere_area(self.n) * r2.powf(self.n as f64 / 2.0))
    }

    fn singular_cell_mean(&self, h: f64) -> f64 {
        let r = self.ball_radius(h);
        let n = self.n as f64;
        if self.n == 2 {
            self.scale * (r.ln() - 0.5) / (2.0 * PI)
        } else {
            // mean of |z|^{2-n} over B_r is (n/2) r^{2-n}
            self.scale * (n / 2.0) * r.powi(2 - self.n as i32)
                / ((2.0 - n) * unit_sphere_area(self.n))
        }
    }

    fn abs_gradient_cell_integral(&self, h: f64) -> f64 {
        // int_{B_r} |z_i| |z|^{-n} dz = (I_n / omega_n) * r
        let r = self.ball_radius(h);
        self.scale.abs() * abs_coordinate_sphere_integral(self.n) * r / unit_sphere_area(self.n)
    }

    fn abs_gradient_screened_integral(&self) -> f64 {
        // int |z_i| |z|^{-n} e^{-|z|^2/2} dz = (I_n/omega_n) sqrt(pi/2)
        self.scale.abs() * abs_coordinate_sphere_integral(self.n) / unit_sphere_area(self.n)
            * (PI / 2.0).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Spectral helpers (torus backend)
// ---------------------------------------------------------------------------

/// Effective frequency vector at a spectral index; Nyquist components are
/// zeroed so odd multipliers keep real fields real.
fn xi_at(shape: &[usize], periods: &[f64], idx: &[usize], out: &mut [f64]) {
    for a in 0..shape.len() {
        out[a] = if 2 * idx[a] == shape[a] {
            0.0
        } else {
            fft::signed_freq(idx[a], shape[a]) as f64 / periods[a]
        };
    }
}

fn spectrum(domain: &Domain, comp: &[f64]) -> Vec<Complex64> {
    let mut buf = fft::to_complex(comp);
    fft::forward(domain.shape(), &mut buf);
    buf
}

fn from_spectrum(domain: &Domain, mut buf: Vec<Complex64>) -> Vec<f64> {
    fft::inverse(domain.shape(), &mut buf);
    let mut out = vec![0.0; buf.len()];
    fft::real_parts_into(&buf, &mut out);
    out
}

/// Applies the heat multiplier `exp(-4 pi^2 |xi|^2 kt)` to every component.
fn heat_torus(f: &Field, kt: f64) -> Field {
    let domain = f.domain().clone();
    let shape = domain.shape().to_vec();
    let periods = domain.extent().to_vec();
    let n = domain.n();
    let mut out = f.clone();
    let npts = domain.len();
    for c in 0..f.components() {
        let mut buf = spectrum(&domain, f.comp(c));
        parallel::for_each_chunk_mut(&mut buf, 4096, |ci, chunk| {
            let base = ci * 4096;
            let mut idx = [0usize; 8];
            for (j, v) in chunk.iter_mut().enumerate() {
                fft::unravel(&shape, base + j, &mut idx[..n]);
                // the symbol is even, so the true signed frequency is used
                let mut xi2 = 0.0;
                for a in 0..n {
                    let xi = fft::signed_freq(idx[a], shape[a]) as f64 / periods[a];
                    xi2 += xi * xi;
                }
                *v *= (-4.0 * PI * PI * xi2 * kt).exp();
            }
        });
        out.data_mut()[c * npts..(c + 1) * npts].copy_from_slice(&from_spectrum(&domain, buf));
    }
    out
}

/// Separable truncated-Gaussian convolution on a box; per-axis standard
/// deviations `sigmas`, truncation at 8 standard deviations, each axis
/// kernel renormalized to unit discrete mass.
pub(crate) fn gaussian_smooth_box(f: &Field, sigmas: &[f64]) -> Field {
    let domain = f.domain().clone();
    let mut out = f.clone();
    for axis in 0..domain.n() {
        let sigma = sigmas[axis];
        if sigma == 0.0 {
            continue;
        }
        let h = domain.spacing(axis);
        let w = ((8.0 * sigma / h).ceil() as usize).max(1);
        let mut ker = Vec::with_capacity(2 * w + 1);
        for s in -(w as i64)..=(w as i64) {
            let z = s as f64 * h;
            ker.push((-z * z / (2.0 * sigma * sigma)).exp());
        }
        let mass: f64 = ker.iter().sum();
        for k in ker.iter_mut() {
            *k /= mass;
        }
        out = convolve_axis(&out, axis, &ker, w);
    }
    out
}

/// 1-D zero-padded convolution along `axis` with a kernel centered at
/// offset index `w`.
fn convolve_axis(f: &Field, axis: usize, ker: &[f64], w: usize) -> Field {
    let domain = f.domain().clone();
    let shape = domain.shape();
    let n_axis = shape[axis];
    let post: usize = shape[axis + 1..].iter().product();
    let slab = n_axis * post;
    let mut out = f.clone();
    let npts = domain.len();
    for c in 0..f.components() {
        let src = f.comp(c).to_vec();
        let dst = &mut out.data_mut()[c * npts..(c + 1) * npts];
        parallel::for_each_chunk_mut(dst, slab, |b, out_block| {
            let in_block = &src[b * slab..(b + 1) * slab];
            for t in 0..n_axis {
                for offset in 0..post {
                    let mut acc = 0.0;
                    for (ki, kv) in ker.iter().enumerate() {
                        let s = ki as i64 - w as i64;
                        let u = t as i64 - s;
                        if u >= 0 && (u as usize) < n_axis {
                            acc += kv * in_block[u as usize * post + offset];
                        }
                    }
                    out_block[t * post + offset] = acc;
                }
            }
        });
    }
    out
}

/// Heat semigroup `exp(kappa tau Laplacian)` applied to every component.
///
/// Torus: exact multiplier `exp(-4 pi^2 |xi|^2 kappa tau)` per mode. Box:
/// zero-padded convolution with the sampled Gaussian of variance
/// `2 kappa tau`, truncated at 8 standard deviations and renormalized to
/// unit mass.
pub fn heat_convolve(f: &Field, kappa: f64, tau: f64) -> Result<Field> {
    let kt = kappa * tau;
    if kt < 0.0 {
        return Err(Error::NegativeDiffusionTime(kt));
    }
    if kt == 0.0 {
        return Ok(f.clone());
    }
    if f.domain().is_torus() {
        Ok(heat_torus(f, kt))
    } else {
        let sigma = (2.0 * kt).sqrt();
        Ok(gaussian_smooth_box(f, &vec![sigma; f.domain().n()]))
    }
}

// ---------------------------------------------------------------------------
// Free-space convolution (box backend)
// ---------------------------------------------------------------------------

/// Cells within this many spacings of the singularity get cell-averaged
/// kernel samples (midpoint sampling of a near-singular kernel costs two
/// orders of accuracy there).
const NEAR_FIELD_CELLS: i64 = 4;
const NEAR_FIELD_SUBDIV: usize = 8;

/// Precomputed zero-padded convolution with a sampled translation-invariant
/// kernel on a box. The transform of the kernel is built once; `apply` then
/// costs two FFTs. Offset-zero takes `center_value` (the kernel's analytic
/// cell average); near-field cells are cell-averaged by subdivision.
pub struct BoxKernelConv {
    domain: Domain,
    padded: Vec<usize>,
    ker_hat: Vec<Complex64>,
}

impl BoxKernelConv {
    pub fn new(
        domain: &Domain,
        sample: &(dyn Fn(&[f64]) -> f64 + Sync),
        center_value: f64,
    ) -> Self {
        let n = domain.n();
        let padded: Vec<usize> = domain.shape().iter().map(|&s| 2 * s).collect();
        let total: usize = padded.iter().product();
        let cellvol = domain.cell_volume();

        // kernel samples at offsets delta in [-(N-1), N-1] per axis
        let mut ker = vec![Complex64::default(); total];
        {
            let padded_ref = &padded;
            let dom = domain.clone();
            parallel::for_each_chunk_mut(&mut ker, 4096, |ci, chunk| {
                let base = ci * 4096;
                let mut idx = [0usize; 8];
                let mut z = [0.0f64; 8];
                let mut d = [0i64; 8];
                for (j, v) in chunk.iter_mut().enumerate() {
                    fft::unravel(padded_ref, base + j, &mut idx[..n]);
                    let mut in_range = true;
                    let mut at_zero = true;
                    let mut near = true;
                    for a in 0..n {
                        let m = padded_ref[a];
                        d[a] = if idx[a] * 2 < m {
                            idx[a] as i64
                        } else {
                            idx[a] as i64 - m as i64
                        };
                        if d[a].unsigned_abs() as usize >= dom.shape()[a] {
                            in_range = false;
                        }
                        if d[a] != 0 {
                            at_zero = false;
                        }
                        if d[a].abs() > NEAR_FIELD_CELLS {
                            near = false;
                        }
                        z[a] = d[a] as f64 * dom.spacing(a);
                    }
                    *v = if !in_range {
                        Complex64::default()
                    } else if at_zero {
                        Complex64::new(center_value * cellvol, 0.0)
                    } else if near {
                        Complex64::new(cell_average(&dom, &z[..n], sample) * cellvol, 0.0)
                    } else {
                        Complex64::new(sample(&z[..n]) * cellvol, 0.0)
                    };
                }
            });
        }
        fft::forward(&padded, &mut ker);
        BoxKernelConv {
            domain: domain.clone(),
            padded,
            ker_hat: ker,
        }
    }

    /// Convolves one scalar component; includes the `h^n` quadrature factor.
    pub fn apply(&self, comp: &[f64]) -> Vec<f64> {
        let n = self.domain.n();
        let shape = self.domain.shape();
        let total: usize = self.padded.iter().product();
        let mut pad = vec![Complex64::default(); total];
        let mut idx = [0usize; 8];
        for (flat, &v) in comp.iter().enumerate() {
            fft::unravel(shape, flat, &mut idx[..n]);
            let mut pflat = 0usize;
            for a in 0..n {
                pflat = pflat * self.padded[a] + idx[a];
            }
            pad[pflat] = Complex64::new(v, 0.0);
        }
        fft::forward(&self.padded, &mut pad);
        let ker = &self.ker_hat;
        parallel::for_each_chunk_mut(&mut pad, 4096, |ci, chunk| {
            let base = ci * 4096;
            for (j, v) in chunk.iter_mut().enumerate() {
                *v *= ker[base + j];
            }
        });
        fft::inverse(&self.padded, &mut pad);

        let mut out = vec![0.0; comp.len()];
        for (flat, o) in out.iter_mut().enumerate() {
            fft::unravel(shape, flat, &mut idx[..n]);
            let mut pflat = 0usize;
            for a in 0..n {
                pflat = pflat * self.padded[a] + idx[a];
            }
            *o = pad[pflat].re;
        }
        out
    }
}

/// Mean of `sample` over the cell centered at `z` (midpoint subdivision).
fn cell_average(domain: &Domain, z: &[f64], sample: &(dyn Fn(&[f64]) -> f64 + Sync)) -> f64 {
    let n = domain.n();
    let q = NEAR_FIELD_SUBDIV;
    let mut acc = 0.0;
    let mut sub = vec![0usize; n];
    let count = q.pow(n as u32);
    let mut p = vec![0.0; n];
    for flat in 0..count {
        let mut rem = flat;
        for a in (0..n).rev() {
            sub[a] = rem % q;
            rem /= q;
        }
        for a in 0..n {
            let h = domain.spacing(a);
            p[a] = z[a] + ((sub[a] as f64 + 0.5) / q as f64 - 0.5) * h;
        }
        acc += sample(&p);
    }
    acc / count as f64
}

fn convolve_kernel_box(
    domain: &Domain,
    comp: &[f64],
    sample: &(dyn Fn(&[f64]) -> f64 + Sync),
    center_value: f64,
) -> Vec<f64> {
    BoxKernelConv::new(domain, sample, center_value).apply(comp)
}

/// Free-space convolution of two fields sampled on the same box
/// (`(a * b)(x) = int a(x-y) b(y) dy`, both zero outside the box).
pub fn convolve_fields_box(a: &Field, b: &Field) -> Result<Field> {
    if !a.domain().is_box() {
        return Err(Error::BoxOnly("convolve_fields_box"));
    }
    if a.domain() != b.domain() || a.components() != 1 || b.components() != 1 {
        return Err(Error::Mismatch(
            "convolution needs scalar fields on one box".into(),
        ));
    }
    let domain = a.domain().clone();
    let n = domain.n();
    let half: Vec<f64> = domain.extent().to_vec();
    let spac: Vec<f64> = (0..n).map(|ax| domain.spacing(ax)).collect();
    let shape = domain.shape().to_vec();
    let a_data = a.comp(0).to_vec();
    let sample = move |z: &[f64]| -> f64 {
        // a's value at position z (grid-aligned by construction)
        let mut flat = 0usize;
        for ax in 0..n {
            let m = ((z[ax] + half[ax]) / spac[ax]).round() as i64;
            if m < 0 || m as usize >= shape[ax] {
                return 0.0;
            }
            flat = flat * shape[ax] + m as usize;
        }
        a_data[flat]
    };
    let center = sample(&vec![0.0; n]);
    let out = convolve_kernel_box(&domain, b.comp(0), &sample, center);
    Field::from_data(&domain, 1, out)
}

// ---------------------------------------------------------------------------
// Leray machinery
// ---------------------------------------------------------------------------

/// Applies `x -> (K_{n,i} * w)(x)` for every i, returning an n-vector field.
///
/// Torus: multiplier `-2 pi i xi_i / (4 pi^2 |xi|^2)` on the transform of
/// `w`, zero mode set to 0. Box: zero-padded convolution with the sampled
/// gradient kernel; the singular cell takes its analytic average, 0.
pub fn leray_apply_scalar(w: &Field, kernel: &dyn EllipticKernel) -> Result<Field> {
    if w.components() != 1 {
        return Err(Error::Mismatch(
            "leray_apply_scalar needs a scalar integrand".into(),
        ));
    }
    let domain = w.domain().clone();
    let n = domain.n();
    if n < 2 {
        return Err(Error::DimensionTooSmall(n));
    }
    if domain.is_torus() {
        let shape = domain.shape().to_vec();
        let periods = domain.extent().to_vec();
        let base = spectrum(&domain, w.comp(0));
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let mut buf = base.clone();
            parallel::for_each_chunk_mut(&mut buf, 4096, |ci, chunk| {
                let cbase = ci * 4096;
                let mut idx = [0usize; 8];
                let mut xiv = [0.0f64; 8];
                for (j, v) in chunk.iter_mut().enumerate() {
                    fft::unravel(&shape, cbase + j, &mut idx[..n]);
                    xi_at(&shape, &periods, &idx[..n], &mut xiv[..n]);
                    let xi2: f64 = xiv[..n].iter().map(|x| x * x).sum();
                    if xi2 == 0.0 {
                        *v = Complex64::default();
                    } else {
                        // -2 pi i xi_i / (4 pi^2 |xi|^2) = i * m
                        let m = -xiv[i] / (2.0 * PI * xi2);
                        let wv = *v;
                        *v = Complex64::new(-wv.im * m, wv.re * m);
                    }
                }
            });
            parts.push(Field::from_data(&domain, 1, from_spectrum(&domain, buf))?);
        }
        Field::from_components(&parts)
    } else {
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let sample = |z: &[f64]| kernel.gradient_component(z, i);
            let data = convolve_kernel_box(&domain, w.comp(0), &sample, 0.0);
            parts.push(Field::from_data(&domain, 1, data)?);
        }
        Field::from_components(&parts)
    }
}

/// Quadratic Leray source of the momentum equation: component `i` is
/// `int K_{n,i}(x-y) [ tr(grad v . c . grad v) + sum_k d_k v_{i,k} ](y) dy`.
///
/// `couplings` is a constant n x n matrix contracted between the two
/// gradient factors (identity recovers the classical term
/// `sum_{j,k} v_{k,j} v_{j,k}`); `linear` is the optional d-coefficient
/// vector (all zeros drop it).
pub fn leray_source(v: &Field, couplings: &[Vec<f64>], linear: &[f64]) -> Result<Field> {
    let n = v.domain().n();
    if n < 2 {
        return Err(Error::DimensionTooSmall(n));
    }
    if v.components() != n {
        return Err(Error::Mismatch(format!(
            "leray_source needs {n} components, got {}",
            v.components()
        )));
    }
    let kernel = PoissonKernel::new(n)?;
    let grads = velocity_gradients(v)?;
    let shared = quadratic_integrand(&grads, couplings, n, v.domain());
    let use_linear = linear.iter().any(|&d| d != 0.0);
    if !use_linear {
        return leray_apply_scalar(&shared, &kernel);
    }
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let mut w = shared.clone();
        for (k, &dk) in linear.iter().enumerate() {
            if dk != 0.0 {
                w.scaled_add(dk, &grads[i][k]);
            }
        }
        let vec_i = leray_apply_scalar(&w, &kernel)?;
        parts.push(vec_i.component_field(i));
    }
    Field::from_components(&parts)
}

/// All partial derivatives `grads[j][k] = d v_j / d x_k`.
fn velocity_gradients(v: &Field) -> Result<Vec<Vec<Field>>> {
    let n = v.domain().n();
    let mut grads = Vec::with_capacity(n);
    for j in 0..n {
        let comp = v.component_field(j);
        let mut row = Vec::with_capacity(n);
        for k in 0..n {
            row.push(derivative(&comp, k, 1)?);
        }
        grads.push(row);
    }
    Ok(grads)
}

/// Coupled gradient contraction `tr(grad v . c . grad v)
/// = sum_{j,k,m} v_{j,k} c_{km} v_{m,j}`; the identity matrix recovers the
/// classical integrand `sum_{j,k} v_{k,j} v_{j,k}`.
fn quadratic_integrand(
    grads: &[Vec<Field>],
    couplings: &[Vec<f64>],
    n: usize,
    domain: &Domain,
) -> Field {
    let mut w = Field::zeros(domain, 1);
    for k in 0..n {
        for m in 0..n {
            let c = couplings[k][m];
            if c != 0.0 {
                for j in 0..n {
                    let prod = grads[j][k].pointwise_mul(&grads[m][j]);
                    w.scaled_add(c, &prod);
                }
            }
        }
    }
    w
}

/// Pressure recovered from the velocity:
/// `p = -int K_n(x-y) sum_{j,k} v_{k,j} v_{j,k} dy` (gauge `mean p = 0` on
/// the torus).
pub fn recover_pressure(v: &Field) -> Result<Field> {
    let n = v.domain().n();
    if v.components() != n {
        return Err(Error::Mismatch(format!(
            "recover_pressure needs {n} components, got {}",
            v.components()
        )));
    }
    let identity: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|k| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();
    let grads = velocity_gradients(v)?;
    let w = quadratic_integrand(&grads, &identity, n, v.domain());
    if v.domain().is_torus() {
        let domain = v.domain().clone();
        let shape = domain.shape().to_vec();
        let periods = domain.extent().to_vec();
        let mut buf = spectrum(&domain, w.comp(0));
        parallel::for_each_chunk_mut(&mut buf, 4096, |ci, chunk| {
            let cbase = ci * 4096;
            let mut idx = [0usize; 8];
            let mut xiv = [0.0f64; 8];
            for (j, v) in chunk.iter_mut().enumerate() {
                fft::unravel(&shape, cbase + j, &mut idx[..n]);
                xi_at(&shape, &periods, &idx[..n], &mut xiv[..n]);
                let xi2: f64 = xiv[..n].iter().map(|x| x * x).sum();
                if xi2 == 0.0 {
                    *v = Complex64::default();
                } else {
                    *v *= 1.0 / (4.0 * PI * PI * xi2);
                }
            }
        });
        Field::from_data(&domain, 1, from_spectrum(&domain, buf))
    } else {
        let kernel = PoissonKernel::new(n)?;
        let h = v.domain().max_spacing();
        let center = kernel.singular_cell_mean(h);
        let sample = |z: &[f64]| kernel.evaluate(z);
        let data = convolve_kernel_box(v.domain(), w.comp(0), &sample, center);
        let mut p = Field::from_data(v.domain(), 1, data)?;
        p.scale(-1.0);
        Ok(p)
    }
}

/// Divergence-free part of `v` (idempotent; fixes the gauge `mean p = 0`).
///
/// Torus: spectral projector `I - xi xi^T / |xi|^2`. Box: solves the
/// Poisson problem by free-space convolution and subtracts the gradient.
pub fn leray_project(v: &Field) -> Result<Field> {
    let n = v.domain().n();
    if v.components() != n {
        return Err(Error::Mismatch(format!(
            "leray_project needs {n} components, got {}",
            v.components()
        )));
    }
    if v.domain().is_torus() {
        let domain = v.domain().clone();
        let shape = domain.shape().to_vec();
        let periods = domain.extent().to_vec();
        let npts = domain.len();
        let spectra: Vec<Vec<Complex64>> = (0..n).map(|c| spectrum(&domain, v.comp(c))).collect();
        let mut out = v.clone();
        for i in 0..n {
            let mut buf = vec![Complex64::default(); npts];
            let spectra_ref = &spectra;
            parallel::for_each_chunk_mut(&mut buf, 4096, |ci, chunk| {
                let cbase = ci * 4096;
                let mut idx = [0usize; 8];
                let mut xiv = [0.0f64; 8];
                for (j, val) in chunk.iter_mut().enumerate() {
                    let flat = cbase + j;
                    fft::unravel(&shape, flat, &mut idx[..n]);
                    xi_at(&shape, &periods, &idx[..n], &mut xiv[..n]);
                    let xi2: f64 = xiv[..n].iter().map(|x| x * x).sum();
                    if xi2 == 0.0 {
                        *val = spectra_ref[i][flat];
                    } else {
                        let mut dot = Complex64::default();
                        for a in 0..n {
                            dot += spectra_ref[a][flat] * xiv[a];
                        }
                        *val = spectra_ref[i][flat] - dot * (xiv[i] / xi2);
                    }
                }
            });
            out.data_mut()[i * npts..(i + 1) * npts].copy_from_slice(&from_spectrum(&domain, buf));
        }
        Ok(out)
    } else {
        let kernel = PoissonKernel::new(n)?;
        let div = divergence(v)?;
        let h = v.domain().max_spacing();
        let center = kernel.singular_cell_mean(h);
        let sample = |z: &[f64]| kernel.evaluate(z);
        let phi = Field::from_data(
            v.domain(),
            1,
            convolve_kernel_box(v.domain(), div.comp(0), &sample, center),
        )?;
        let mut out = v.clone();
        for i in 0..n {
            let di = derivative(&phi, i, 1)?;
            let npts = v.domain().len();
            let dst = &mut out.data_mut()[i * npts..(i + 1) * npts];
            for (o, g) in dst.iter_mut().zip(di.comp(0)) {
                *o -= g;
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Estimation constants
// ---------------------------------------------------------------------------

/// Quadrature estimate of
/// `C_K = max_i int |K_{n,i}(x-y)| (1+|y|^n)^{-1} dy`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CkEstimate {
    pub value: f64,
    /// Estimated truncation tail of the integral outside the box.
    pub tail: f64,
    /// Values at the probed base points (x = 0 first).
    pub per_point: Vec<f64>,
}

const CK_PROBE_SEED: u64 = 0x43_4b; // fixed probe points, deterministic output

/// Evaluates `C_K` at `x = 0` and 8 random base points, returning the
/// maximum and the truncation tail estimate. Box domains only.
pub fn estimate_ck(domain: &Domain, kernel: &dyn EllipticKernel) -> Result<CkEstimate> {
    if !domain.is_box() {
        return Err(Error::BoxOnly("estimate_ck"));
    }
    let n = domain.n();
    let mut rng = ChaCha8Rng::seed_from_u64(CK_PROBE_SEED);
    let mut probes = vec![vec![0.0; n]];
    for _ in 0..8 {
        let p: Vec<f64> = (0..n)
            .map(|a| (rng.random::<f64>() - 0.5) * domain.extent()[a])
            .collect();
        probes.push(p);
    }
    let npts = domain.len();
    let h = domain.max_spacing();
    let near2 = (3.5 * h) * (3.5 * h);
    // The bare integrand |K_i(z)| W(x-z) is too singular for midpoint
    // quadrature, so the screened singular part |K_i(z)| W(x) exp(-|z|^2/2)
    // is subtracted cell by cell and its closed-form integral added back.
    let screened_total = kernel.abs_gradient_screened_integral();
    let weight_at = |y2: f64| 1.0 / (1.0 + y2.powf(n as f64 / 2.0));
    let mut per_point = Vec::with_capacity(probes.len());
    for x in &probes {
        let x2: f64 = x.iter().map(|v| v * v).sum();
        let w_x = weight_at(x2);
        let mut worst = 0.0f64;
        for i in 0..n {
            let dom = domain.clone();
            let xp = x.clone();
            let regularized = move |z: &[f64]| -> f64 {
                let r2: f64 = z.iter().map(|v| v * v).sum();
                if r2 < 1e-24 {
                    return 0.0;
                }
                let mut y2 = 0.0;
                for (a, &za) in z.iter().enumerate() {
                    let y = xp[a] - za;
                    y2 += y * y;
                }
                let k = kernel.gradient_component(z, i).abs();
                k * (weight_at(y2) - w_x * (-r2 / 2.0).exp())
            };
            let total = parallel::stable_sum_by(npts, |flat| {
                let mut y = [0.0f64; 8];
                dom.point_into(flat, &mut y[..n]);
                let mut z = [0.0f64; 8];
                let mut r2 = 0.0;
                for a in 0..n {
                    z[a] = x[a] - y[a];
                    r2 += z[a] * z[a];
                }
                if r2 < 1e-24 {
                    0.0
                } else if r2 < near2 {
                    cell_average(&dom, &z[..n], &regularized) * dom.quad_weight(flat)
                } else {
                    regularized(&z[..n]) * dom.quad_weight(flat)
                }
            });
            worst = worst.max(total + screened_total * w_x);
        }
        per_point.push(worst);
    }
    let r_box = domain
        .extent()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    // |K_i| ~ r^{1-n} and the weight ~ r^{-n} outside the box:
    // tail ~ (I_n / omega_n) R^{1-n} / (n-1)
    let tail = abs_coordinate_sphere_integral(n) / unit_sphere_area(n) * r_box.powi(1 - n as i32)
        / (n as f64 - 1.0);
    let value = per_point.iter().cloned().fold(0.0, f64::max);
    Ok(CkEstimate {
        value,
        tail,
        per_point,
    })
}

/// Empirical lower estimate of the weighted product constant `C_s` with
/// `|u|_{L2} <= C_s |v|_{L2} |w|_{L2}` for
/// `u(x) = int (1+|y|^2)^{-s/2} v(x-y) w(y) dy`, clamped to `>= 1`.
pub fn estimate_cs(domain: &Domain, s: f64, trials: usize, seed: u64) -> Result<f64> {
    if !domain.is_box() {
        return Err(Error::BoxOnly("estimate_cs"));
    }
    let n = domain.n();
    if s <= n as f64 / 2.0 {
        return Err(Error::WeightTooWeak { s, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..trials {
        let v = random_field(domain, &mut rng);
        let w = random_field(domain, &mut rng);
        best = best.max(cs_ratio(domain, &v, &w, s)?);
    }
    Ok(best.max(1.0))
}

/// Ratio `|u|_{L2} / (|v|_{L2} |w|_{L2})` for one pair.
pub fn cs_ratio(domain: &Domain, v: &Field, w: &Field, s: f64) -> Result<f64> {
    let n = domain.n();
    let weighted = {
        let mut g = w.clone();
        let dom = domain.clone();
        parallel::for_each_chunk_mut(g.data_mut(), 4096, |ci, chunk| {
            let base = ci * 4096;
            let mut p = [0.0f64; 8];
            for (j, val) in chunk.iter_mut().enumerate() {
                dom.point_into(base + j, &mut p[..n]);
                let y2: f64 = p[..n].iter().map(|x| x * x).sum();
                *val *= (1.0 + y2).powf(-s / 2.0);
            }
        });
        g
    };
    let u = convolve_fields_box(v, &weighted)?;
    let nu = crate::grid::norm(&u, crate::grid::NormKind::L2)?;
    let nv = crate::grid::norm(v, crate::grid::NormKind::L2)?;
    let nw = crate::grid::norm(w, crate::grid::NormKind::L2)?;
    if nv == 0.0 || nw == 0.0 {
        return Ok(0.0);
    }
    Ok(nu / (nv * nw))
}

fn random_field(domain: &Domain, rng: &mut ChaCha8Rng) -> Field {
    let mut f = Field::zeros(domain, 1);
    for v in f.data_mut() {
        *v = rng.random::<f64>() * 2.0 - 1.0;
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{norm, NormKind};
    use approx::assert_relative_eq;

    fn torus2(points: usize) -> Domain {
        Domain::cube_torus(2, points, 2.0 * PI).unwrap()
    }

    fn taylor_green(dom: &Domain) -> Field {
        Field::vector_from_fn(dom, |c, p| {
            if c == 0 {
                p[0].cos() * p[1].sin()
            } else {
                -p[0].sin() * p[1].cos()
            }
        })
        .unwrap()
    }

    fn identity(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|j| (0..n).map(|k| if j == k { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn poisson_kernel_reference_values() {
        // n=3, |x|=1: -1/(4 pi)
        let v = poisson_kernel(&[1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(v, -1.0 / (4.0 * PI), max_relative = 1e-14);
        // n=2, |x|=1: ln 1 = 0
        assert!(poisson_kernel(&[0.6, 0.8]).unwrap().abs() < 1e-15);
        // n=3, |x|=2: -1/(8 pi)
        let v = poisson_kernel(&[0.0, 2.0, 0.0]).unwrap();
        assert_relative_eq!(v, -1.0 / (8.0 * PI), max_relative = 1e-14);
        assert!(matches!(
            poisson_kernel(&[0.0, 0.0, 0.0]),
            Err(Error::KernelAtOrigin)
        ));
    }

    #[test]
    fn kernel_envelope_constants_are_finite() {
        let k = PoissonKernel::new(3).unwrap();
        let (c0, c1) = k.envelope_constants(4.0);
        assert_relative_eq!(c0, 1.0 / (4.0 * PI), max_relative = 1e-12);
        assert!(c1.is_finite() && c1 > 0.0 && c1 <= 1.0 / (4.0 * PI) + 1e-12);
    }

    #[test]
    fn heat_convolve_identity_at_time_zero() {
        let dom = torus2(16);
        let f = Field::scalar_from_fn(&dom, |p| p[0].sin() + (2.0 * p[1]).cos()).unwrap();
        let g = heat_convolve(&f, 0.7, 0.0).unwrap();
        assert_eq!(f, g);
        assert!(heat_convolve(&f, -1.0, 1.0).is_err());
    }

    #[test]
    fn heat_convolve_damps_plane_waves_exactly() {
        let dom = torus2(32);
        let (kappa, tau) = (0.3, 0.2);
        // mode (2, 1) on period 2 pi
        let f = Field::scalar_from_fn(&dom, |p| (2.0 * p[0] + p[1]).cos()).unwrap();
        let g = heat_convolve(&f, kappa, tau).unwrap();
        let xi2 = (4.0 + 1.0) / (2.0 * PI).powi(2);
        let factor = (-4.0 * PI * PI * xi2 * kappa * tau).exp();
        let mut expect = f.clone();
        expect.scale(factor);
        expect.scaled_add(-1.0, &g);
        assert!(norm(&expect, NormKind::Linf).unwrap() < 1e-13);
    }

    #[test]
    fn heat_semigroup_property_and_mean_preservation() {
        let dom = torus2(32);
        let f = Field::scalar_from_fn(&dom, |p| {
            1.5 + p[0].sin() * (2.0 * p[1]).cos() + (3.0 * p[0]).cos()
        })
        .unwrap();
        let kappa = 0.4;
        let a = heat_convolve(&heat_convolve(&f, kappa, 0.3).unwrap(), kappa, 0.5).unwrap();
        let b = heat_convolve(&f, kappa, 0.8).unwrap();
        let mut diff = a.clone();
        diff.scaled_add(-1.0, &b);
        assert!(norm(&diff, NormKind::Linf).unwrap() < 1e-12);

        let mean = |g: &Field| g.comp(0).iter().sum::<f64>() / g.comp(0).len() as f64;
        assert_relative_eq!(mean(&f), mean(&b), max_relative = 1e-12);
        // maximum principle on a resolved smooth field
        assert!(
            norm(&b, NormKind::Linf).unwrap()
                <= norm(&f, NormKind::Linf).unwrap() * (1.0 + 1e-12) + 1e-12
        );
    }

    #[test]
    fn box_gaussian_convolution_matches_closed_form() {
        // Gaussian of variance s0^2 convolved with the heat kernel becomes a
        // Gaussian of variance s0^2 + 2 kappa tau.
        let dom = Domain::cube_box(2, 64, 6.0).unwrap();
        let s0: f64 = 0.5;
        let f = Field::scalar_from_fn(&dom, |p| {
            let r2 = p[0] * p[0] + p[1] * p[1];
            (-r2 / (2.0 * s0 * s0)).exp() / (2.0 * PI * s0 * s0)
        })
        .unwrap();
        let (kappa, tau) = (0.25, 0.5);
        let s1_sq = s0 * s0 + 2.0 * kappa * tau;
        let g = heat_convolve(&f, kappa, tau).unwrap();
        let expect = Field::scalar_from_fn(&dom, |p| {
            let r2 = p[0] * p[0] + p[1] * p[1];
            (-r2 / (2.0 * s1_sq)).exp() / (2.0 * PI * s1_sq)
        })
        .unwrap();
        let mut diff = g.clone();
        diff.scaled_add(-1.0, &expect);
        assert!(norm(&diff, NormKind::Linf).unwrap() < 1e-6);
    }

    #[test]
    fn leray_source_zero_and_quadratic_scaling() {
        let dom = torus2(16);
        let z = Field::zeros(&dom, 2);
        let out = leray_source(&z, &identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(norm(&out, NormKind::Linf).unwrap(), 0.0);

        let v = taylor_green(&dom);
        let mut v2 = v.clone();
        v2.scale(2.0);
        let a = leray_source(&v, &identity(2), &[0.0, 0.0]).unwrap();
        let b = leray_source(&v2, &identity(2), &[0.0, 0.0]).unwrap();
        let mut expect = a.clone();
        expect.scale(4.0);
        expect.scaled_add(-1.0, &b);
        assert!(norm(&expect, NormKind::Linf).unwrap() < 1e-12);
    }

    #[test]
    fn taylor_green_pressure_and_source_closed_forms() {
        let dom = torus2(64);
        let v = taylor_green(&dom);
        // p = -(cos 2x + cos 2y)/4
        let p = recover_pressure(&v).unwrap();
        let p_exact =
            Field::scalar_from_fn(&dom, |q| -((2.0 * q[0]).cos() + (2.0 * q[1]).cos()) / 4.0)
                .unwrap();
        let mut dp = p.clone();
        dp.scaled_add(-1.0, &p_exact);
        assert!(norm(&dp, NormKind::Linf).unwrap() < 1e-9);

        // leray_source = -grad p
        let src = leray_source(&v, &identity(2), &[0.0, 0.0]).unwrap();
        let grad_p = crate::grid::gradient(&p_exact).unwrap();
        let mut diff = src.clone();
        diff.scaled_add(1.0, &grad_p);
        assert!(norm(&diff, NormKind::Linf).unwrap() < 1e-10);

        // multiplier identity: grad(recover_pressure(v)) = -leray_source(v)
        let grad_num = crate::grid::gradient(&p).unwrap();
        let mut diff2 = grad_num.clone();
        diff2.scaled_add(1.0, &src);
        assert!(norm(&diff2, NormKind::L2).unwrap() < 1e-10);
    }

    #[test]
    fn leray_project_fixed_point_kernel_and_idempotence() {
        let dom = torus2(32);
        let v = taylor_green(&dom); // divergence-free
        let pv = leray_project(&v).unwrap();
        let mut diff = pv.clone();
        diff.scaled_add(-1.0, &v);
        assert!(norm(&diff, NormKind::Linf).unwrap() < 1e-12);

        // pure gradient maps to 0
        let phi = Field::scalar_from_fn(&dom, |p| p[0].sin() * (2.0 * p[1]).cos()).unwrap();
        let grad = crate::grid::gradient(&phi).unwrap();
        let pg = leray_project(&grad).unwrap();
        assert!(norm(&pg, NormKind::Linf).unwrap() < 1e-10);

        // arbitrary field: projection is divergence-free and idempotent
        let w = Field::vector_from_fn(&dom, |c, p| {
            if c == 0 {
                (p[0] + p[1]).sin() + 0.3 * (2.0 * p[1]).cos()
            } else {
                (p[0] - 2.0 * p[1]).cos()
            }
        })
        .unwrap();
        let pw = leray_project(&w).unwrap();
        let div = divergence(&pw).unwrap();
        assert!(norm(&div, NormKind::Linf).unwrap() < 1e-10);
        let ppw = leray_project(&pw).unwrap();
        let mut d2 = ppw.clone();
        d2.scaled_add(-1.0, &pw);
        assert!(norm(&d2, NormKind::Linf).unwrap() < 1e-11);
    }

    #[test]
    fn box_and_torus_leray_agree_on_a_localized_field() {
        // divergence-free Gaussian vortex (mean-free integrand, so the torus
        // gauge matches free space); box half-width 4x the support radius.
        let half = 6.0;
        let pts = 512;
        let sigma = 0.5f64;
        let vel = move |x: f64, y: f64, c: usize| {
            let g = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            if c == 0 {
                -y / (sigma * sigma) * g
            } else {
                x / (sigma * sigma) * g
            }
        };
        let boxdom = Domain::cube_box(2, pts, half).unwrap();
        let vb = Field::vector_from_fn(&boxdom, |c, p| vel(p[0], p[1], c)).unwrap();
        let torus = Domain::cube_torus(2, pts, 2.0 * half).unwrap();
        let vt = Field::vector_from_fn(&torus, |c, p| vel(p[0] - half, p[1] - half, c)).unwrap();

        let sb = leray_source(&vb, &identity(2), &[0.0, 0.0]).unwrap();
        let st = leray_source(&vt, &identity(2), &[0.0, 0.0]).unwrap();
        // same grid layout: torus index i sits at x_t = x_b + half
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..2 {
            for i in 0..boxdom.len() {
                let d = sb.comp(c)[i] - st.comp(c)[i];
                num += d * d;
                den += st.comp(c)[i] * st.comp(c)[i];
            }
        }
        assert!(
            (num / den).sqrt() < 1e-3,
            "relative l2 {}",
            (num / den).sqrt()
        );
    }

    #[test]
    fn ck_estimate_matches_analytic_values_and_scales_linearly() {
        // closed forms at x = 0: C_K = 1 for n = 2, and for n = 3
        // (1/2) int_0^inf dr/(1+r^3) = pi/(3 sqrt 3).
        let dom2 = Domain::cube_box(2, 128, 40.0).unwrap();
        let k2 = PoissonKernel::new(2).unwrap();
        let est2 = estimate_ck(&dom2, &k2).unwrap();
        assert!(
            (est2.per_point[0] - 1.0).abs() < 0.08,
            "{}",
            est2.per_point[0]
        );

        let dom3 = Domain::cube_box(3, 48, 16.0).unwrap();
        let k3 = PoissonKernel::new(3).unwrap();
        let est3 = estimate_ck(&dom3, &k3).unwrap();
        let exact3 = PI / (3.0 * 3.0f64.sqrt());
        assert!(
            (est3.per_point[0] - exact3).abs() / exact3 < 0.1,
            "{} vs {exact3}",
            est3.per_point[0]
        );
        assert!(est3.value.is_finite() && est3.tail.is_finite());

        // linear in the kernel scale
        let k3x2 = PoissonKernel::scaled(3, 2.0).unwrap();
        let est3x2 = estimate_ck(&dom3, &k3x2).unwrap();
        assert_relative_eq!(est3x2.value, 2.0 * est3.value, max_relative = 1e-12);

        // quadrature self-convergence under resolution doubling (n = 3)
        let coarse3 = Domain::cube_box(3, 24, 16.0).unwrap();
        let est_c3 = estimate_ck(&coarse3, &k3).unwrap();
        assert!(
            (est_c3.value - est3.value).abs() / est3.value < 0.02,
            "{} vs {}",
            est_c3.value,
            est3.value
        );

        // torus domains are rejected
        assert!(estimate_ck(&torus2(16), &k2).is_err());
    }

    #[test]
    fn cs_estimate_properties() {
        let dom = Domain::cube_box(2, 32, 4.0).unwrap();
        assert!(estimate_cs(&dom, 0.5, 4, 7).is_err()); // s <= n/2
        let cs = estimate_cs(&dom, 2.0, 6, 7).unwrap();
        assert!(cs >= 1.0);

        // spike pair: ratio finite and below the clamped estimate
        let mut v = Field::zeros(&dom, 1);
        let mid = dom.len() / 2 + dom.shape()[1] / 2;
        v.data_mut()[mid] = 1.0;
        let ratio = cs_ratio(&dom, &v, &v, 2.0).unwrap();
        assert!(ratio.is_finite() && ratio <= cs);

        // scaling v leaves the ratio unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_field(&dom, &mut rng);
        let b = random_field(&dom, &mut rng);
        let r1 = cs_ratio(&dom, &a, &b, 2.0).unwrap();
        let mut a2 = a.clone();
        a2.scale(2.0);
        let r2 = cs_ratio(&dom, &a2, &b, 2.0).unwrap();
        assert_relative_eq!(r1, r2, max_relative = 1e-12);

        // doubling s cannot increase the ratio (weight decreases pointwise)
        let r_s4 = cs_ratio(&dom, &a, &b, 4.0).unwrap();
        assert!(r_s4 <= r1 * (1.0 + 1e-12));
    }
}
