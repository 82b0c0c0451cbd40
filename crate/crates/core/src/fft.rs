//! Small n-dimensional complex FFT built from 1-D rustfft passes.
//!
//! Convention: `forward` is the standard DFT `F(k) = sum_j f_j
//! exp(-2 pi i j k / N)` per axis, so the continuum mode `exp(2 pi i m x / L)`
//! lands at signed index `k = m` and the derivative `d/dx` acts as the
//! multiplier `2 pi i k / L`. `inverse` undoes it including the `1/N`
//! normalization. Plans are cached and read-only after warm-up; line passes
//! run in parallel over disjoint slabs.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::parallel;

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (len, matches!(direction, FftDirection::Forward));
    let mut guard = cache.lock().expect("fft plan cache");
    guard
        .entry(key)
        .or_insert_with(|| FftPlanner::new().plan_fft(len, direction))
        .clone()
}

/// One FFT pass along `axis` of a row-major array of the given shape.
fn axis_pass(shape: &[usize], data: &mut [Complex64], axis: usize, direction: FftDirection) {
    let n_axis = shape[axis];
    let post: usize = shape[axis + 1..].iter().product();
    let pre: usize = shape[..axis].iter().product();
    let fft = plan(n_axis, direction);
    let slab = n_axis * post;
    debug_assert_eq!(data.len(), pre * slab);
    parallel::for_each_chunk_mut(data, slab, |_, block| {
        let mut line = vec![Complex64::default(); n_axis];
        for offset in 0..post {
            for (t, v) in line.iter_mut().enumerate() {
                *v = block[t * post + offset];
            }
            fft.process(&mut line);
            for (t, v) in line.iter().enumerate() {
                block[t * post + offset] = *v;
            }
        }
    });
}

/// In-place forward transform (`e^{-2 pi i jk/N}` per axis, unnormalized).
pub fn forward(shape: &[usize], data: &mut [Complex64]) {
    for axis in 0..shape.len() {
        axis_pass(shape, data, axis, FftDirection::Forward);
    }
}

/// In-place inverse transform, normalized by the total number of points.
pub fn inverse(shape: &[usize], data: &mut [Complex64]) {
    for axis in 0..shape.len() {
        axis_pass(shape, data, axis, FftDirection::Inverse);
    }
    let scale = 1.0 / shape.iter().product::<usize>() as f64;
    parallel::for_each_chunk_mut(data, 4096, |_, chunk| {
        for v in chunk {
            *v *= scale;
        }
    });
}

/// Lifts a real slice into a complex buffer.
pub fn to_complex(real: &[f64]) -> Vec<Complex64> {
    real.iter().map(|&x| Complex64::new(x, 0.0)).collect()
}

/// Writes the real parts of `buf` into `out`.
pub fn real_parts_into(buf: &[Complex64], out: &mut [f64]) {
    debug_assert_eq!(buf.len(), out.len());
    for (o, v) in out.iter_mut().zip(buf) {
        *o = v.re;
    }
}

/// Signed integer frequency for index `k` on an axis of `n` points
/// (`0..n/2` then negative; the Nyquist index maps to `-n/2`).
pub fn signed_freq(k: usize, n: usize) -> i64 {
    let k = k as i64;
    let n = n as i64;
    if 2 * k >= n {
        k - n
    } else {
        k
    }
}

/// Decomposes a flat row-major index into per-axis indices.
pub fn unravel(shape: &[usize], mut flat: usize, out: &mut [usize]) {
    for axis in (0..shape.len()).rev() {
        out[axis] = flat % shape[axis];
        flat /= shape[axis];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_inverse_round_trip() {
        let shape = [8, 4];
        let real: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut buf = to_complex(&real);
        forward(&shape, &mut buf);
        inverse(&shape, &mut buf);
        for (a, b) in real.iter().zip(&buf) {
            assert!((a - b.re).abs() < 1e-12, "{a} vs {}", b.re);
        }
    }

    #[test]
    fn forward_picks_out_a_plane_wave() {
        // f_j = exp(2 pi i * 3 j / 16) must transform to N * delta_{k,3}.
        let n = 16usize;
        let mut buf: Vec<Complex64> = (0..n)
            .map(|j| {
                let phase = 2.0 * std::f64::consts::PI * 3.0 * j as f64 / n as f64;
                Complex64::new(phase.cos(), phase.sin())
            })
            .collect();
        forward(&[n], &mut buf);
        for (k, v) in buf.iter().enumerate() {
            let expect = if k == 3 { n as f64 } else { 0.0 };
            assert!((v.re - expect).abs() < 1e-9 && v.im.abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn signed_frequencies_cover_both_halves() {
        assert_eq!(signed_freq(0, 8), 0);
        assert_eq!(signed_freq(3, 8), 3);
        assert_eq!(signed_freq(4, 8), -4);
        assert_eq!(signed_freq(7, 8), -1);
    }
}
