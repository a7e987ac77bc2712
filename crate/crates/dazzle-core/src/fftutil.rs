//! FFT plumbing: cached plans, 2-D transforms, the scaled DFT used for
//! pupil-to-sensor propagation, linear convolution, and subpixel shifts.
//!
//! The scaled DFT is the chirp-z (Bluestein) realization of two-step scaled
//! Fresnel propagation: pre-chirp, linear convolution with a chirp kernel,
//! post-chirp. It evaluates
//!
//! ```text
//! y[p] = sum_n x[n] * exp(sign * 2*pi*i * alpha * (n - N/2) * (p - M/2))
//! ```
//!
//! exactly (to rounding), for any output pitch ratio `alpha`, and its adjoint
//! is the same transform with the opposite sign, which keeps gradients exact.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

type PlanKey = (usize, bool);

fn plan_cache() -> &'static Mutex<HashMap<PlanKey, Arc<dyn Fft<f64>>>> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Arc<dyn Fft<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Fetch (and cache) an FFT plan of length `n`.
pub fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    let mut cache = plan_cache().lock().unwrap();
    cache
        .entry((n, forward))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            planner.plan_fft(
                n,
                if forward {
                    FftDirection::Forward
                } else {
                    FftDirection::Inverse
                },
            )
        })
        .clone()
}

/// Smallest length >= n that factors into 2, 3, and 5.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for f in [2usize, 3, 5] {
            while k % f == 0 {
                k /= f;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

/// In-place unnormalized forward FFT over both axes.
pub fn fft2_inplace(a: &mut Array2<Complex64>) {
    fft2_dir(a, true);
}

/// In-place inverse FFT over both axes, scaled by 1/(rows*cols) so it inverts
/// `fft2_inplace`.
pub fn ifft2_inplace(a: &mut Array2<Complex64>) {
    fft2_dir(a, false);
    let scale = 1.0 / (a.nrows() * a.ncols()) as f64;
    a.mapv_inplace(|v| v * scale);
}

fn fft2_dir(a: &mut Array2<Complex64>, forward: bool) {
    let row_plan = plan(a.ncols(), forward);
    a.axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each_init(
            || vec![Complex64::ZERO; row_plan.get_inplace_scratch_len()],
            |scratch, mut row| {
                let slice = row.as_slice_mut().expect("contiguous row");
                row_plan.process_with_scratch(slice, scratch);
            },
        );
    let col_plan = plan(a.nrows(), forward);
    let n = a.nrows();
    a.axis_iter_mut(Axis(1))
        .into_par_iter()
        .for_each_init(
            || {
                (
                    vec![Complex64::ZERO; n],
                    vec![Complex64::ZERO; col_plan.get_inplace_scratch_len()],
                )
            },
            |(buf, scratch), mut col| {
                for (b, v) in buf.iter_mut().zip(col.iter()) {
                    *b = *v;
                }
                col_plan.process_with_scratch(buf, scratch);
                for (v, b) in col.iter_mut().zip(buf.iter()) {
                    *v = *b;
                }
            },
        );
}

/// One-axis scaled-DFT plan: maps `n_in` samples to `n_out` samples with
/// normalized pitch product `alpha`.
pub struct CztPlan {
    n_in: usize,
    n_out: usize,
    conv_len: usize,
    /// Pre-chirp applied to the input, length `n_in`.
    w_in: Vec<Complex64>,
    /// Post-chirp applied to the output, length `n_out`.
    w_out: Vec<Complex64>,
    /// FFT of the chirp kernel, length `conv_len`.
    kernel_fft: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl CztPlan {
    fn new(n_in: usize, n_out: usize, alpha: f64, sign: f64) -> Self {
        let n0 = (n_in / 2) as f64;
        let p0 = (n_out / 2) as f64;
        let conv_len = next_fast_len(n_in + n_out);

        // exp(sign*2*pi*i*alpha*(n-n0)(p-p0))
        //   = w(n) * w(p) * k((p-p0)-(n-n0)),
        // w(t) = exp(i*pi*sign*alpha*t^2), k(d) = exp(-i*pi*sign*alpha*d^2).
        let chirp = |t: f64, s: f64| Complex64::from_polar(1.0, s * PI * alpha * t * t);
        let w_in: Vec<Complex64> = (0..n_in).map(|n| chirp(n as f64 - n0, sign)).collect();
        let w_out: Vec<Complex64> = (0..n_out).map(|p| chirp(p as f64 - p0, sign)).collect();

        let off = n0 - p0;
        let mut kernel = vec![Complex64::ZERO; conv_len];
        // Lags q = p - n range over (-n_in, n_out); kernel argument is q + off.
        for q in 0..n_out as isize {
            kernel[q as usize] = chirp(q as f64 + off, -sign);
        }
        for j in 1..n_in as isize {
            kernel[conv_len - j as usize] = chirp(-j as f64 + off, -sign);
        }
        let fwd = plan(conv_len, true);
        let inv = plan(conv_len, false);
        let mut kernel_fft = kernel;
        fwd.process(&mut kernel_fft);

        Self {
            n_in,
            n_out,
            conv_len,
            w_in,
            w_out,
            kernel_fft,
            fwd,
            inv,
        }
    }

    /// Apply to one vector. `buf` must have length `conv_len`; it is used as
    /// scratch. Output is written to `out` (length `n_out`).
    fn apply(&self, x: &[Complex64], buf: &mut [Complex64], out: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.n_in);
        debug_assert_eq!(buf.len(), self.conv_len);
        debug_assert_eq!(out.len(), self.n_out);
        for b in buf.iter_mut() {
            *b = Complex64::ZERO;
        }
        for (b, (xv, w)) in buf.iter_mut().zip(x.iter().zip(&self.w_in)) {
            *b = xv * w;
        }
        self.fwd.process(buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_fft) {
            *b *= k;
        }
        self.inv.process(buf);
        let norm = 1.0 / self.conv_len as f64;
        for (o, (b, w)) in out.iter_mut().zip(buf.iter().zip(&self.w_out)) {
            *o = b * w * norm;
        }
    }
}

type CztKey = (usize, usize, u64, bool);

fn czt_cache() -> &'static Mutex<HashMap<CztKey, Arc<CztPlan>>> {
    static CACHE: OnceLock<Mutex<HashMap<CztKey, Arc<CztPlan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

pub fn czt_plan(n_in: usize, n_out: usize, alpha: f64, sign_positive: bool) -> Arc<CztPlan> {
    let key = (n_in, n_out, alpha.to_bits(), sign_positive);
    let mut cache = czt_cache().lock().unwrap();
    cache
        .entry(key)
        .or_insert_with(|| {
            Arc::new(CztPlan::new(
                n_in,
                n_out,
                alpha,
                if sign_positive { 1.0 } else { -1.0 },
            ))
        })
        .clone()
}

/// Separable 2-D scaled DFT: rows then columns.
///
/// Computes `Y[p,q] = sum_{m,n} X[m,n] exp(sign*2*pi*i*alpha*((m-M0)(p-P0) + (n-N0)(q-Q0)))`
/// with each axis centered at its half-length.
pub fn czt2d(
    input: &Array2<Complex64>,
    n_out_rows: usize,
    n_out_cols: usize,
    alpha: f64,
    sign_positive: bool,
) -> Array2<Complex64> {
    let n_in_rows = input.nrows();
    let n_in_cols = input.ncols();
    let col_plan = czt_plan(n_in_cols, n_out_cols, alpha, sign_positive);

    // Pass 1: transform each row (length n_in_cols -> n_out_cols).
    let mut mid = Array2::<Complex64>::zeros((n_in_rows, n_out_cols));
    mid.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(input.axis_iter(Axis(0)).into_par_iter())
        .for_each_init(
            || vec![Complex64::ZERO; col_plan.conv_len],
            |buf, (mut orow, irow)| {
                let x: Vec<Complex64> = irow.iter().copied().collect();
                col_plan.apply(&x, buf, orow.as_slice_mut().unwrap());
            },
        );

    // Pass 2: transform each column (length n_in_rows -> n_out_rows).
    let row_plan = czt_plan(n_in_rows, n_out_rows, alpha, sign_positive);
    let mut out = Array2::<Complex64>::zeros((n_out_rows, n_out_cols));
    let mid_t = mid.t().to_owned();
    out.axis_iter_mut(Axis(1))
        .into_par_iter()
        .zip(mid_t.axis_iter(Axis(0)).into_par_iter())
        .for_each_init(
            || {
                (
                    vec![Complex64::ZERO; row_plan.conv_len],
                    vec![Complex64::ZERO; n_out_rows],
                )
            },
            |(buf, tmp), (mut ocol, icol)| {
                let x: Vec<Complex64> = icol.iter().copied().collect();
                row_plan.apply(&x, buf, tmp);
                for (o, t) in ocol.iter_mut().zip(tmp.iter()) {
                    *o = *t;
                }
            },
        );
    out
}

/// Linear (zero-padded) 2-D convolution of `scene` with a centered `kernel`.
///
/// Output size is `(scene + kernel)` per axis; the scene occupies the central
/// region, so a delta kernel reproduces the scene after a central crop back to
/// its own size.
pub fn conv2_linear(scene: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (sh, sw) = (scene.nrows(), scene.ncols());
    let (kh, kw) = (kernel.nrows(), kernel.ncols());
    let (oh, ow) = (sh + kh, sw + kw);
    let (lh, lw) = (next_fast_len(oh), next_fast_len(ow));

    let mut s_grid = Array2::<Complex64>::zeros((lh, lw));
    for y in 0..sh {
        for x in 0..sw {
            s_grid[(y + kh / 2, x + kw / 2)] = Complex64::new(scene[(y, x)], 0.0);
        }
    }
    let mut k_grid = Array2::<Complex64>::zeros((lh, lw));
    for y in 0..kh {
        for x in 0..kw {
            // Center the kernel at index (0, 0) with wraparound.
            let gy = (y + lh - kh / 2) % lh;
            let gx = (x + lw - kw / 2) % lw;
            k_grid[(gy, gx)] = Complex64::new(kernel[(y, x)], 0.0);
        }
    }
    fft2_inplace(&mut s_grid);
    fft2_inplace(&mut k_grid);
    s_grid.zip_mut_with(&k_grid, |s, k| *s *= k);
    ifft2_inplace(&mut s_grid);

    Array2::from_shape_fn((oh, ow), |(y, x)| s_grid[(y, x)].re)
}

/// Center-crop a 2-D array to `(h, w)`.
pub fn center_crop(a: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let y0 = (a.nrows() - h) / 2;
    let x0 = (a.ncols() - w) / 2;
    a.slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned()
}

/// Sinc-interpolating upsample of a real 2-D array by an integer factor via
/// spectrum zero-padding. Exact for signals sampled above Nyquist.
pub fn fft_upsample2d(a: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let (hl, wl) = (h * factor, w * factor);
    let mut spec = a.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut spec);
    let mut big = Array2::<Complex64>::zeros((hl, wl));
    for y in 0..h {
        let ty = if y < h / 2 { y } else { y + (hl - h) };
        for x in 0..w {
            let tx = if x < w / 2 { x } else { x + (wl - w) };
            big[(ty, tx)] = spec[(y, x)];
        }
    }
    ifft2_inplace(&mut big);
    let scale = (factor * factor) as f64;
    big.mapv(|v| v.re * scale)
}

/// Translate `field` by `(dy, dx)` samples with zero-fill semantics.
///
/// The field is embedded centered in a grid of `grid_len` per axis
/// (`grid_len >= field + 2*ceil(|shift|) + margin` to keep wraparound out of
/// the populated region), shifted with a frequency-domain phase ramp, and
/// returned on that grid.
pub fn shift_complex_field(
    field: &Array2<Complex64>,
    dy: f64,
    dx: f64,
    grid_len: usize,
) -> Array2<Complex64> {
    let (fh, fw) = (field.nrows(), field.ncols());
    assert!(grid_len >= fh && grid_len >= fw);
    let g = grid_len;
    let mut grid = Array2::<Complex64>::zeros((g, g));
    let oy = g / 2 - fh / 2;
    let ox = g / 2 - fw / 2;
    for y in 0..fh {
        for x in 0..fw {
            grid[(y + oy, x + ox)] = field[(y, x)];
        }
    }
    fft2_inplace(&mut grid);
    // Frequency of bin k: k/g for k < g/2, (k-g)/g above.
    let freq = |k: usize| -> f64 {
        let k = k as isize;
        let g = g as isize;
        let s = if k <= g / 2 { k } else { k - g };
        s as f64 / g as f64
    };
    for y in 0..g {
        let fy = freq(y);
        for x in 0..g {
            let fx = freq(x);
            let phase = -2.0 * PI * (fy * dy + fx * dx);
            grid[(y, x)] *= Complex64::from_polar(1.0, phase);
        }
    }
    ifft2_inplace(&mut grid);
    grid
}
