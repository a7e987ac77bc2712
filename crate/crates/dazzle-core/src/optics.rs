//! Pupil-plane modeling and propagation to per-wavelength sensor-plane PSFs.
//!
//! The pupil field is a hard-edged circular aperture carrying the element's
//! height-induced phase. Propagation to the focal plane evaluates the scaled
//! Fourier relation between pupil pitch and sensor pitch with the chirp-z
//! transform from [`crate::fftutil`], which is exact for any pitch ratio and
//! exactly linear in the pupil field.
//!
//! Normalization convention: a clear aperture's PSF sums to 1 over the full
//! (alias-free) computational grid, and the same constant is applied to coded
//! PSFs, so a coded stack's in-sensor energy below 1 measures real throughput
//! loss.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::config::SimConfig;
use crate::config::WavelengthGrid;
use crate::error::{DazzleError, Result};
use crate::fftutil;
use crate::imgutil;

/// Physical height map of the diffractive element over the pupil grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    /// Heights in meters, rows = v, cols = u.
    pub heights: Array2<f64>,
    /// Pupil sample pitch (m).
    pub pitch: f64,
}

impl HeightMap {
    pub fn flat(cfg: &SimConfig) -> Self {
        Self {
            heights: Array2::zeros((cfg.pupil_res.1, cfg.pupil_res.0)),
            pitch: cfg.pupil_pitch,
        }
    }

    pub fn validate(&self, h_max: f64) -> Result<()> {
        for &h in self.heights.iter() {
            if !h.is_finite() || h < 0.0 || h > h_max {
                return Err(DazzleError::Other(format!(
                    "height map value {h} outside [0, {h_max}]"
                )));
            }
        }
        Ok(())
    }

    /// Digest of the raw height bytes; identifies a mask in manifests.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for &h in self.heights.iter() {
            hasher.update(h.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// Optional smoothness reparameterization: Gaussian blur of the raw height
/// grid. Symmetric, so the same blur maps gradients back (see `doe_opt`).
pub fn smooth_heights(raw: &Array2<f64>, sigma: f64) -> Array2<f64> {
    imgutil::gaussian_blur(raw, sigma)
}

/// Complex pupil-plane field at one wavelength.
#[derive(Debug, Clone)]
pub struct PupilField {
    pub field: Array2<Complex64>,
    pub lambda: f64,
    pub pitch: f64,
}

/// Phase imparted by the element at one wavelength:
/// `phi(u,v) = (2 pi / lambda) * dn(lambda) * h(u,v)`.
pub fn doe_phase(h: &HeightMap, lambda: f64, cfg: &SimConfig) -> Array2<f64> {
    let k = 2.0 * std::f64::consts::PI / lambda * cfg.doe_delta_n_model.delta_n(lambda);
    h.heights.mapv(|v| k * v)
}

/// Hard-edged circular aperture transmission on the pupil grid: 1 inside
/// radius `W_a / 2`, 0 outside.
pub fn aperture_mask(cfg: &SimConfig) -> Array2<f64> {
    let (nv, nu) = (cfg.pupil_res.1, cfg.pupil_res.0);
    let r2 = (cfg.aperture_diameter / 2.0).powi(2);
    Array2::from_shape_fn((nv, nu), |(j, i)| {
        let u = (i as f64 - (nu / 2) as f64) * cfg.pupil_pitch;
        let v = (j as f64 - (nv / 2) as f64) * cfg.pupil_pitch;
        if u * u + v * v <= r2 {
            1.0
        } else {
            0.0
        }
    })
}

/// Flux through the clear aperture in pupil-area units; the global PSF
/// normalization constant.
pub fn clear_aperture_flux(cfg: &SimConfig) -> f64 {
    let count: f64 = aperture_mask(cfg).sum();
    count * cfg.pupil_pitch * cfg.pupil_pitch
}

/// Aperture times element phase: `A(u,v) * exp(i phi(u,v))`.
pub fn pupil_function(h: &HeightMap, lambda: f64, cfg: &SimConfig) -> Result<PupilField> {
    let extent = cfg.pupil_res.0.min(cfg.pupil_res.1) as f64 * cfg.pupil_pitch;
    if extent < cfg.aperture_diameter {
        return Err(DazzleError::PupilTooSmall {
            extent_m: extent,
            aperture_m: cfg.aperture_diameter,
        });
    }
    if h.heights.dim() != (cfg.pupil_res.1, cfg.pupil_res.0) {
        return Err(DazzleError::ShapeMismatch {
            expected: format!("{}x{}", cfg.pupil_res.1, cfg.pupil_res.0),
            got: format!("{}x{}", h.heights.nrows(), h.heights.ncols()),
        });
    }
    let a = aperture_mask(cfg);
    let phi = doe_phase(h, lambda, cfg);
    let field = Array2::from_shape_fn(a.dim(), |idx| {
        if a[idx] > 0.0 {
            Complex64::from_polar(1.0, phi[idx])
        } else {
            Complex64::ZERO
        }
    });
    Ok(PupilField {
        field,
        lambda,
        pitch: cfg.pupil_pitch,
    })
}

/// One band of a [`PsfStack`].
#[derive(Debug, Clone)]
pub struct BandPsf {
    pub lambda: f64,
    /// Normalized PSF on the sensor window (rows = y).
    pub psf: Array2<f64>,
    /// Complex sensor-plane field on the same window (same normalization as
    /// `psf` up to the square): used for exact subpixel laser placement.
    pub field: Array2<Complex64>,
    /// Max of `psf` over the stored window.
    pub peak: f64,
    /// Sum of `psf` over the stored window.
    pub in_sensor_energy: f64,
    /// Total energy over the full computational grid; 1 for any phase-only
    /// mask under the clear-aperture normalization.
    pub grid_energy: f64,
}

/// Per-wavelength normalized PSFs with cached summary values.
#[derive(Debug, Clone)]
pub struct PsfStack {
    pub grid: WavelengthGrid,
    pub bands: Vec<BandPsf>,
    pub sensor_pitch: f64,
    pub config_hash: String,
}

impl PsfStack {
    pub fn band(&self, lambda: f64) -> Result<&BandPsf> {
        Ok(&self.bands[self.grid.band_index(lambda)?])
    }
}

/// Normalized pitch product of the scaled transform at one wavelength.
pub fn pitch_alpha(cfg: &SimConfig, lambda: f64) -> f64 {
    cfg.pupil_pitch * cfg.sensor_pitch / (lambda * cfg.focal_length)
}

fn check_window(cfg: &SimConfig, lambda: f64) -> Result<()> {
    let alpha = pitch_alpha(cfg, lambda);
    let m = cfg.sensor_res.0.max(cfg.sensor_res.1);
    let ratio = alpha * m as f64;
    if ratio > 1.0 {
        return Err(DazzleError::PropagationUnstable {
            ratio,
            window_m: m as f64 * cfg.sensor_pitch,
            period_m: lambda * cfg.focal_length / cfg.pupil_pitch,
            lambda_m: lambda,
        });
    }
    Ok(())
}

/// Propagate one pupil field to the sensor plane.
///
/// Returns the normalized PSF on the sensor window plus its cached peak,
/// in-sensor energy, and full-grid energy.
pub fn propagate_psf(pupil: &PupilField, cfg: &SimConfig) -> Result<BandPsf> {
    check_window(cfg, pupil.lambda)?;
    let (nx, ny) = cfg.sensor_res;
    let alpha = pitch_alpha(cfg, pupil.lambda);
    let lf = pupil.lambda * cfg.focal_length;
    let amp = cfg.pupil_pitch * cfg.pupil_pitch / lf;
    let flux0 = clear_aperture_flux(cfg);
    let cell = cfg.sensor_pitch * cfg.sensor_pitch;

    // Sensor-window field at sensor pitch via the scaled transform.
    let mut field = fftutil::czt2d(&pupil.field, ny, nx, alpha, false);
    field.mapv_inplace(|v| v * amp);
    let psf = field.mapv(|v| v.norm_sqr() * cell / flux0);

    // Full-grid energy through the plain (natural-pitch) transform. The
    // natural grid spans exactly one alias-free period, so this sum accounts
    // for all propagated energy.
    let (pv, pu) = pupil.field.dim();
    let mut nat = pupil.field.mapv(Complex64::from);
    fftutil::fft2_inplace(&mut nat);
    let nat_cell = (lf / (pv as f64 * cfg.pupil_pitch)) * (lf / (pu as f64 * cfg.pupil_pitch));
    let grid_energy: f64 =
        nat.iter().map(|v| v.norm_sqr()).sum::<f64>() * amp * amp * nat_cell / flux0;

    let peak = psf.iter().cloned().fold(0.0f64, f64::max);
    let in_sensor_energy = psf.sum();
    Ok(BandPsf {
        lambda: pupil.lambda,
        psf,
        field,
        peak,
        in_sensor_energy,
        grid_energy,
    })
}

/// Propagate every band of the grid for one height map.
pub fn build_psf_stack(h: &HeightMap, cfg: &SimConfig) -> Result<PsfStack> {
    let grid = cfg.grid()?;
    h.validate(cfg.doe_h_max)?;
    let bands: Result<Vec<BandPsf>> = grid
        .lambdas()
        .par_iter()
        .map(|&lambda| propagate_psf(&pupil_function(h, lambda, cfg)?, cfg))
        .collect();
    Ok(PsfStack {
        grid,
        bands: bands?,
        sensor_pitch: cfg.sensor_pitch,
        config_hash: cfg.hash(),
    })
}

/// Forward transfer function of one PSF plane: unnormalized 2-D FFT, so the
/// DC bin equals the PSF's total energy.
pub fn otf(psf: &Array2<f64>) -> Array2<Complex64> {
    let mut a = psf.mapv(|v| Complex64::new(v, 0.0));
    fftutil::fft2_inplace(&mut a);
    a
}

/// Angularly averaged radial profile of a centered PSF, sampled every
/// `pitch/4`, with bilinear interpolation.
pub fn radial_profile(psf: &Array2<f64>, pitch: f64) -> Vec<(f64, f64)> {
    let (h, w) = psf.dim();
    let cy = (h / 2) as f64;
    let cx = (w / 2) as f64;
    let r_max = (h.min(w) / 2 - 2) as f64;
    let n_angles = 720;
    let dr = 0.25;
    let mut profile = Vec::new();
    let mut r = 0.0;
    while r <= r_max {
        let mut acc = 0.0;
        for a in 0..n_angles {
            let theta = 2.0 * std::f64::consts::PI * a as f64 / n_angles as f64;
            let y = cy + r * theta.sin();
            let x = cx + r * theta.cos();
            let y0 = y.floor() as usize;
            let x0 = x.floor() as usize;
            let ty = y - y0 as f64;
            let tx = x - x0 as f64;
            let v = psf[(y0, x0)] * (1.0 - ty) * (1.0 - tx)
                + psf[(y0, x0 + 1)] * (1.0 - ty) * tx
                + psf[(y0 + 1, x0)] * ty * (1.0 - tx)
                + psf[(y0 + 1, x0 + 1)] * ty * tx;
            acc += v;
        }
        profile.push((r * pitch, acc / n_angles as f64));
        r += dr;
    }
    profile
}

/// Radius of the first local minimum of the angularly averaged profile, with
/// parabolic subsample refinement. Used to locate the first dark ring.
///
/// The PSF intensity is band-limited by the pupil extent, so it is first
/// upsampled 4x with exact sinc interpolation; the detection bias is then far
/// below the ring radius.
pub fn radial_first_minimum(psf: &Array2<f64>, pitch: f64) -> Option<f64> {
    let up = fftutil::fft_upsample2d(psf, 4);
    let profile = radial_profile(&up, pitch / 4.0);
    for i in 2..profile.len() - 1 {
        let (_, prev) = profile[i - 1];
        let (r, v) = profile[i];
        let (_, next) = profile[i + 1];
        if v <= prev && v < next && v < 0.25 * profile[0].1 {
            // Parabolic refinement around the discrete minimum.
            let denom = prev - 2.0 * v + next;
            let delta = if denom.abs() > 1e-300 {
                0.5 * (prev - next) / denom
            } else {
                0.0
            };
            let dr = profile[1].0 - profile[0].0;
            return Some(r + delta.clamp(-1.0, 1.0) * dr);
        }
    }
    None
}

/// Intensity centroid of a PSF plane in physical units relative to the grid
/// center.
pub fn centroid(psf: &Array2<f64>, pitch: f64) -> (f64, f64) {
    let (h, w) = psf.dim();
    let cy = (h / 2) as f64;
    let cx = (w / 2) as f64;
    let mut sy = 0.0;
    let mut sx = 0.0;
    let mut mass = 0.0;
    for ((y, x), &v) in psf.indexed_iter() {
        sy += (y as f64 - cy) * v;
        sx += (x as f64 - cx) * v;
        mass += v;
    }
    (sy / mass * pitch, sx / mass * pitch)
}
