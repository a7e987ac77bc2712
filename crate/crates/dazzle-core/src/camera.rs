//! Sensor-plane irradiance assembly and the capture chain: scene blur, laser
//! placement, procedural flare, photon statistics, electron conversion,
//! noise, digitization, and cropping.
//!
//! Radiometric anchoring works in multiples of the saturation irradiance:
//! the background level is set so the uncoded system's peak irradiance equals
//! `alpha_b * I_sat` at the brightest band, and the laser level is set so the
//! uncoded system's peak channel response equals `alpha_l` full wells, which
//! makes "alpha_l = 1 saturates exactly one pixel" hold end to end.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::config::{SimConfig, LIGHT_SPEED, PLANCK_H};
use crate::error::{DazzleError, Result};
use crate::fftutil;
use crate::metrics::i_sat;
use crate::optics::{build_psf_stack, HeightMap, PsfStack};
use crate::spectral::{
    laser_profile, RgbImage, RgbProjection, SpectralCube, SpectralCurve,
};

/// Narrowband laser illumination aimed at the sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserSpec {
    /// Central wavelength (m).
    pub lambda_l: f64,
    /// Strength in multiples of the saturation level.
    pub alpha_l: f64,
    /// Incidence direction components (n_u, n_v); the footprint shift on the
    /// focal plane is `f * (n_u, n_v)`.
    pub incidence: (f64, f64),
    /// Spectral full width at half maximum (m).
    pub fwhm: f64,
}

impl LaserSpec {
    pub fn new(lambda_l: f64, alpha_l: f64, incidence: (f64, f64)) -> Self {
        Self {
            lambda_l,
            alpha_l,
            incidence,
            fwhm: 10e-9,
        }
    }

    pub fn validate(&self, cfg: &SimConfig) -> Result<()> {
        if self.alpha_l < 0.0 || !self.alpha_l.is_finite() {
            return Err(DazzleError::LaserInvalid(format!(
                "alpha_l must be non-negative, got {}",
                self.alpha_l
            )));
        }
        let grid = cfg.grid()?;
        if !grid.contains(self.lambda_l) {
            return Err(DazzleError::BandNotInGrid {
                lambda_m: self.lambda_l,
            });
        }
        let max_shift = 2.0 * cfg.sensor_res.0.max(cfg.sensor_res.1) as f64 * cfg.sensor_pitch;
        let (sx, sy) = self.shift_m(cfg);
        if sx.abs() > max_shift || sy.abs() > max_shift {
            return Err(DazzleError::LaserInvalid(format!(
                "footprint shift ({sx:.3e}, {sy:.3e}) m beyond twice the sensor extent"
            )));
        }
        Ok(())
    }

    /// Focal-plane footprint shift in meters (x, y).
    pub fn shift_m(&self, cfg: &SimConfig) -> (f64, f64) {
        (
            cfg.focal_length * self.incidence.0,
            cfg.focal_length * self.incidence.1,
        )
    }
}

/// Broadband background illumination level and spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationSpec {
    /// Background strength in multiples of the saturation level.
    pub alpha_b: f64,
    pub illuminant: SpectralCurve,
}

/// Noise-chain switches and parameters for one capture. The per-source means
/// and widths override the config defaults so scenario sampling can vary
/// them; `mean_scale`/`c2` are the photon-noise modulation coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Scale applied to the photon mean when photon noise is enabled.
    pub mean_scale: f64,
    /// Scale applied to the photon standard deviation `sqrt(mean)`.
    pub c2: f64,
    /// Dark current mean (electrons/exposure).
    pub dark_current: f64,
    /// Read noise mean (electrons).
    pub read_noise_mean: f64,
    /// Read noise standard deviation (electrons).
    pub read_noise_std: f64,
    pub enable_photon: bool,
    pub enable_dark: bool,
    pub enable_read: bool,
    pub enable_quantization: bool,
    /// Procedural lens flare is stochastic, so it rides the noise switches.
    pub enable_flare: bool,
}

impl NoiseSpec {
    /// Everything off; the capture chain becomes deterministic pass-through.
    pub fn disabled() -> Self {
        Self {
            mean_scale: 1.0,
            c2: 1.0,
            dark_current: 0.0,
            read_noise_mean: 0.0,
            read_noise_std: 0.0,
            enable_photon: false,
            enable_dark: false,
            enable_read: false,
            enable_quantization: false,
            enable_flare: false,
        }
    }

    /// All sources on with the config's calibration values.
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            mean_scale: 1.0,
            c2: 1.0,
            dark_current: cfg.dark_current,
            read_noise_mean: cfg.read_noise_mean,
            read_noise_std: cfg.read_noise_std,
            enable_photon: true,
            enable_dark: true,
            enable_read: true,
            enable_quantization: true,
            enable_flare: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mean_scale", self.mean_scale),
            ("c2", self.c2),
            ("dark_current", self.dark_current),
            ("read_noise_mean", self.read_noise_mean),
            ("read_noise_std", self.read_noise_std),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(DazzleError::Other(format!(
                    "noise parameter {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Metadata stored with a capture; sufficient to regenerate it bit-exactly
/// and to calibrate restoration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub seed: u64,
    pub config_hash: String,
    pub mask_hash: String,
    pub laser: LaserSpec,
    pub alpha_b: f64,
    /// Background illuminant samples on the run grid.
    pub illuminant: Vec<f64>,
    pub noise: NoiseSpec,
    pub exposure_time: f64,
    /// Irradiance scale applied to the scene term.
    pub scene_scale: f64,
    /// Irradiance scale applied to the laser term.
    pub laser_scale: f64,
    /// Photon response per channel of a unit flat scene under this capture's
    /// illumination and mask; restoration divides by this.
    pub flat_photon_response: [f64; 3],
    pub s_sat: u32,
}

/// Integer sensor image plus the scenario that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorImage {
    pub width: usize,
    pub height: usize,
    /// Channel-fastest digital counts in `[0, s_sat]`.
    pub counts: Vec<u32>,
    pub meta: CaptureMeta,
}

impl SensorImage {
    #[inline]
    pub fn count(&self, x: usize, y: usize, c: usize) -> u32 {
        self.counts[(y * self.width + x) * 3 + c]
    }

    /// Per-pixel saturation mask: true where any channel reads `s_sat`.
    pub fn saturation_mask(&self) -> Array2<bool> {
        let s = self.meta.s_sat;
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            (0..3).any(|c| self.count(x, y, c) == s)
        })
    }

    pub fn saturated_count(&self) -> usize {
        self.saturation_mask().iter().filter(|v| **v).count()
    }

    /// Counts normalized by `s_sat` as floating-point RGB.
    pub fn normalized(&self) -> RgbImage {
        let s = self.meta.s_sat as f64;
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.counts.iter().map(|&c| c as f64 / s).collect(),
        }
    }
}

/// Prebuilt per-mask state reused across captures: coded and clear stacks.
#[derive(Debug, Clone)]
pub struct CaptureContext {
    pub cfg: SimConfig,
    pub coded: PsfStack,
    pub uncoded: PsfStack,
    pub mask_hash: String,
}

impl CaptureContext {
    pub fn new(cfg: &SimConfig, mask: &HeightMap) -> Result<Self> {
        let coded = build_psf_stack(mask, cfg)?;
        let uncoded = build_psf_stack(&HeightMap::flat(cfg), cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            coded,
            uncoded,
            mask_hash: mask.hash(),
        })
    }
}

/// Photon rate per pixel per band: `p = I * lambda * t * dx^2 / (h c)`.
pub fn photons(irradiance: &SpectralCube, cfg: &SimConfig) -> SpectralCube {
    photons_with_time(irradiance, cfg, cfg.exposure_time)
}

pub fn photons_with_time(irradiance: &SpectralCube, cfg: &SimConfig, t: f64) -> SpectralCube {
    let mut out = irradiance.clone();
    let cell = cfg.sensor_pitch * cfg.sensor_pitch;
    let bands = out.bands();
    let factors: Vec<f64> = out
        .grid
        .lambdas()
        .iter()
        .map(|&l| l * t * cell / (PLANCK_H * LIGHT_SPEED))
        .collect();
    for chunk in out.data.chunks_mut(bands) {
        for (v, f) in chunk.iter_mut().zip(&factors) {
            *v *= f;
        }
    }
    out
}

/// Scene irradiance on the padded grid: per band
/// `conv(b_lambda, PSF_lambda) * T_b(lambda)`, scaled so the uncoded system's
/// peak over bands and pixels equals `alpha_b * I_sat` at the peak band.
///
/// Returns the coded irradiance cube and the applied scale.
pub fn scene_irradiance(
    b: &SpectralCube,
    psf: &PsfStack,
    illum: &IlluminationSpec,
    uncoded: &PsfStack,
    cfg: &SimConfig,
) -> Result<(SpectralCube, f64)> {
    if b.grid != psf.grid || b.grid != uncoded.grid {
        return Err(DazzleError::GridMismatch(
            "scene cube and stacks must share the wavelength grid".to_string(),
        ));
    }
    if illum.illuminant.grid != b.grid {
        return Err(DazzleError::GridMismatch(
            "illuminant grid differs from scene grid".to_string(),
        ));
    }
    let bands = b.bands();
    let (kh, kw) = psf.bands[0].psf.dim();
    let out_w = b.width + kw;
    let out_h = b.height + kh;
    let mut coded = SpectralCube::zeros(out_w, out_h, b.grid.clone());

    let zero_scene = b.data.iter().all(|&v| v == 0.0);
    if zero_scene {
        return Ok((coded, 0.0));
    }

    let mut uncoded_peak = 0.0f64;
    let mut peak_band = 0usize;
    let mut coded_planes = Vec::with_capacity(bands);
    for band in 0..bands {
        let plane = b.band_plane(band);
        let t_b = illum.illuminant.values[band];
        let conv_coded = fftutil::conv2_linear(&plane, &psf.bands[band].psf);
        let conv_clear = fftutil::conv2_linear(&plane, &uncoded.bands[band].psf);
        let clear_peak = conv_clear.iter().cloned().fold(0.0f64, f64::max) * t_b;
        if clear_peak > uncoded_peak {
            uncoded_peak = clear_peak;
            peak_band = band;
        }
        coded_planes.push((conv_coded, t_b));
    }
    let lambda_star = b.grid.lambdas()[peak_band];
    let scale = if uncoded_peak > 0.0 {
        illum.alpha_b * i_sat(lambda_star, cfg) / uncoded_peak
    } else {
        0.0
    };
    for (band, (plane, t_b)) in coded_planes.into_iter().enumerate() {
        let weighted = plane.mapv(|v| (v * t_b * scale).max(0.0));
        coded.set_band_plane(band, &weighted);
    }
    Ok((coded, scale))
}

fn paste_shifted_band(
    dst: &mut Array2<f64>,
    field: &Array2<Complex64>,
    shift_px: (f64, f64),
    weight: f64,
) {
    // Shift the complex field on a grid large enough that nothing wraps into
    // the populated region, then overlay intensities center-to-center.
    let (fh, fw) = field.dim();
    let max_shift = shift_px.0.abs().max(shift_px.1.abs()).ceil() as usize;
    let grid_len = fftutil::next_fast_len(fh.max(fw) + 2 * max_shift + 8);
    let shifted = fftutil::shift_complex_field(field, shift_px.0, shift_px.1, grid_len);
    let (dh, dw) = dst.dim();
    let (gc, dc_y, dc_x) = (grid_len / 2, dh / 2, dw / 2);
    for y in 0..dh {
        let gy = (y + gc) as isize - dc_y as isize;
        if gy < 0 || gy >= grid_len as isize {
            continue;
        }
        for x in 0..dw {
            let gx = (x + gc) as isize - dc_x as isize;
            if gx < 0 || gx >= grid_len as isize {
                continue;
            }
            let v = shifted[(gy as usize, gx as usize)].norm_sqr();
            dst[(y, x)] += weight * v;
        }
    }
}

/// Laser irradiance on the padded grid.
///
/// Per band the coded sensor-plane field is translated to the footprint shift
/// `f * n_l` (subpixel, via a Fourier phase ramp) and weighted by the laser
/// line profile. The global scale is set from the uncoded stack so that the
/// unprotected system's peak channel response equals `alpha_l` full wells;
/// the coded cube then realizes `alpha_l * LSR * I_sat` automatically.
///
/// Returns the coded cube and the applied scale.
pub fn laser_irradiance(
    laser: &LaserSpec,
    psf: &PsfStack,
    psf_uncoded: &PsfStack,
    cfg: &SimConfig,
) -> Result<(SpectralCube, f64)> {
    laser.validate(cfg)?;
    let grid = psf.grid.clone();
    let bands = grid.n_bands();
    let (kh, kw) = psf.bands[0].psf.dim();
    let (out_h, out_w) = (cfg.sensor_res.1 + kh, cfg.sensor_res.0 + kw);
    let mut coded = SpectralCube::zeros(out_w, out_h, grid.clone());
    if laser.alpha_l == 0.0 {
        return Ok((coded, 0.0));
    }

    let profile = laser_profile(laser.lambda_l, laser.fwhm, &grid)?;
    let (sx_m, sy_m) = laser.shift_m(cfg);
    let shift_px = (sy_m / cfg.sensor_pitch, sx_m / cfg.sensor_pitch);
    let flux0 = crate::optics::clear_aperture_flux(cfg);
    let cell = cfg.sensor_pitch * cfg.sensor_pitch;

    let mut unscaled_coded = SpectralCube::zeros(out_w, out_h, grid.clone());
    let mut unscaled_clear = SpectralCube::zeros(out_w, out_h, grid.clone());
    for band in 0..bands {
        let w = profile.values[band] * cell / flux0;
        if w == 0.0 {
            continue;
        }
        let mut plane = Array2::zeros((out_h, out_w));
        paste_shifted_band(&mut plane, &psf.bands[band].field, shift_px, w);
        unscaled_coded.set_band_plane(band, &plane);
        let mut plane0 = Array2::zeros((out_h, out_w));
        paste_shifted_band(&mut plane0, &psf_uncoded.bands[band].field, shift_px, w);
        unscaled_clear.set_band_plane(band, &plane0);
    }

    // Anchor: peak channel response of the unprotected system = alpha_l full
    // wells at the nominal exposure.
    let unit = SpectralCurve::unit(&grid);
    let clear_photons = photons(&unscaled_clear, cfg);
    let response = crate::spectral::project_hsi_to_rgb(&clear_photons, &unit)?;
    let resp_peak = response.data.iter().cloned().fold(0.0f64, f64::max);
    if resp_peak <= 0.0 {
        return Err(DazzleError::LaserInvalid(
            "laser produces no sensor response (shift beyond computational grid?)".to_string(),
        ));
    }
    let scale = laser.alpha_l * cfg.full_well / cfg.quantum_efficiency / resp_peak;
    for (dst, src) in coded.data.iter_mut().zip(&unscaled_coded.data) {
        *dst = (src * scale).max(0.0);
    }
    Ok((coded, scale))
}

/// Procedural lens flare: radial streaks, a Gaussian halo, and a faint haze,
/// centered on the laser footprint and chromatically weighted like the laser
/// itself. Added energy per band is exactly `flare_fraction` times that
/// band's laser energy.
pub fn add_flare(
    irradiance: &SpectralCube,
    laser: &LaserSpec,
    flare_fraction: f64,
    cfg: &SimConfig,
    rng: &mut ChaCha12Rng,
) -> SpectralCube {
    let mut out = irradiance.clone();
    if flare_fraction <= 0.0 || laser.alpha_l == 0.0 {
        return out;
    }
    let (w, h) = (irradiance.width, irradiance.height);
    let (sx_m, sy_m) = laser.shift_m(cfg);
    let cx = w as f64 / 2.0 + sx_m / cfg.sensor_pitch;
    let cy = h as f64 / 2.0 + sy_m / cfg.sensor_pitch;

    let n_streaks: usize = rng.random_range(4..=12);
    let angles: Vec<f64> = (0..n_streaks)
        .map(|_| rng.random::<f64>() * std::f64::consts::PI)
        .collect();
    let streak_width = 0.8 + rng.random::<f64>() * 1.6;
    let halo_sigma = 0.04 * w as f64 * (1.0 + rng.random::<f64>());
    let haze_sigma = 0.25 * w as f64;

    // Unit-energy flare template shared by every band.
    let mut template = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let r2 = dx * dx + dy * dy;
            let mut v = 0.0;
            // streaks: Gaussian cross-section around lines through the center
            for &a in &angles {
                let (s, c) = a.sin_cos();
                let dist = (dx * s - dy * c).abs();
                v += 0.5 / n_streaks as f64 * (-0.5 * (dist / streak_width).powi(2)).exp()
                    * (-0.5 * r2 / (0.35 * w as f64).powi(2)).exp();
            }
            v += 0.35 * (-0.5 * r2 / (halo_sigma * halo_sigma)).exp();
            v += 0.15 * (-0.5 * r2 / (haze_sigma * haze_sigma)).exp();
            template[(y, x)] = v;
        }
    }
    let tsum = template.sum();
    if tsum <= 0.0 {
        return out;
    }

    let bands = irradiance.bands();
    for band in 0..bands {
        let band_energy = irradiance.band_energy(band);
        if band_energy == 0.0 {
            continue;
        }
        let add_scale = flare_fraction * band_energy / tsum;
        for y in 0..h {
            for x in 0..w {
                let i = out.idx(x, y, band);
                out.data[i] += add_scale * template[(y, x)];
            }
        }
    }
    out
}

/// Optional per-stage diagnostics collected during exposure.
#[derive(Debug, Clone, Default)]
pub struct ExposeTaps {
    /// Pre-gain electrons (after the full-well clip) on the cropped sensor
    /// grid, channel-fastest.
    pub electrons: Vec<f64>,
}

/// Full capture chain producing an integer sensor image.
///
/// Deterministic given `(inputs, seed)`. `b` is the lifted scene cube at any
/// resolution; the output is center-cropped to the configured sensor size.
pub fn expose(
    b: &SpectralCube,
    mask: &HeightMap,
    laser: &LaserSpec,
    illum: &IlluminationSpec,
    noise: &NoiseSpec,
    seed: u64,
    cfg: &SimConfig,
) -> Result<SensorImage> {
    let ctx = CaptureContext::new(cfg, mask)?;
    expose_with(&ctx, b, laser, illum, noise, cfg.exposure_time, seed, None)
}

/// Capture with a prebuilt [`CaptureContext`]; `exposure_time` may differ
/// from the nominal config value (scenario jitter).
#[allow(clippy::too_many_arguments)]
pub fn expose_with(
    ctx: &CaptureContext,
    b: &SpectralCube,
    laser: &LaserSpec,
    illum: &IlluminationSpec,
    noise: &NoiseSpec,
    exposure_time: f64,
    seed: u64,
    mut taps: Option<&mut ExposeTaps>,
) -> Result<SensorImage> {
    let cfg = &ctx.cfg;
    noise.validate()?;
    let grid = cfg.grid()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Irradiance assembly on the padded grid.
    let (mut irr, scene_scale) = scene_irradiance(b, &ctx.coded, illum, &ctx.uncoded, cfg)?;
    let mut laser_scale = 0.0;
    if laser.alpha_l > 0.0 {
        let (mut il, ls) = laser_irradiance(laser, &ctx.coded, &ctx.uncoded, cfg)?;
        laser_scale = ls;
        if noise.enable_flare && cfg.flare_fraction > 0.0 {
            il = add_flare(&il, laser, cfg.flare_fraction, cfg, &mut rng);
        }
        for (a, l) in irr.data.iter_mut().zip(&il.data) {
            *a += l;
        }
    } else {
        laser.validate(cfg)?;
    }

    // Photon rates and channel projection.
    let p = photons_with_time(&irr, cfg, exposure_time);
    let unit = SpectralCurve::unit(&grid);
    let rgb_p = crate::spectral::project_hsi_to_rgb(&p, &unit)?;

    // Flat-field response for restoration: photons per channel a unit flat
    // scene would produce under this illumination and mask.
    let proj = RgbProjection::new(&grid, &unit)?;
    let cell = cfg.sensor_pitch * cfg.sensor_pitch;
    let mut flat_photon_response = [0.0f64; 3];
    for (band, &lambda) in grid.lambdas().iter().enumerate() {
        let irr_flat = ctx.coded.bands[band].in_sensor_energy
            * illum.illuminant.values[band]
            * scene_scale;
        let photons_flat = irr_flat * lambda * exposure_time * cell / (PLANCK_H * LIGHT_SPEED);
        for c in 0..3 {
            flat_photon_response[c] += proj.weights[band][c] * photons_flat;
        }
    }

    // Per-pixel chain in a fixed scan order for reproducibility.
    let (pw, ph) = (rgb_p.width, rgb_p.height);
    let s_sat = cfg.s_sat();
    let mut counts_full = vec![0u32; pw * ph * 3];
    let mut electrons_full = if taps.is_some() {
        vec![0.0f64; pw * ph * 3]
    } else {
        Vec::new()
    };
    let read_dist = Normal::new(noise.read_noise_mean, noise.read_noise_std.max(0.0))
        .map_err(|e| DazzleError::Other(format!("read noise: {e}")))?;
    for i in 0..pw * ph * 3 {
        let mu_p = rgb_p.data[i].max(0.0);
        let omega = if noise.enable_photon {
            let sigma = noise.c2 * mu_p.sqrt();
            let draw = if sigma > 0.0 {
                Normal::new(noise.mean_scale * mu_p, sigma).unwrap().sample(&mut rng)
            } else {
                noise.mean_scale * mu_p
            };
            draw.max(0.0)
        } else {
            mu_p
        };
        let mut e = cfg.quantum_efficiency * omega;
        if noise.enable_dark && noise.dark_current > 0.0 {
            let n_c = Poisson::new(noise.dark_current).unwrap().sample(&mut rng);
            e += n_c;
        }
        if noise.enable_read {
            e += read_dist.sample(&mut rng);
        }
        let e_clipped = e.min(cfg.full_well);
        if !electrons_full.is_empty() {
            electrons_full[i] = e_clipped;
        }
        let mut v = cfg.gain * e_clipped;
        if noise.enable_quantization {
            v += rng.random::<f64>() - 0.5;
        }
        let q = v.floor();
        counts_full[i] = if q <= 0.0 {
            0
        } else {
            (q as u64).min(s_sat as u64) as u32
        };
    }

    // Crop the padded grid to the sensor.
    let (nx, ny) = cfg.sensor_res;
    let x0 = (pw - nx) / 2;
    let y0 = (ph - ny) / 2;
    let mut counts = vec![0u32; nx * ny * 3];
    for y in 0..ny {
        for x in 0..nx {
            for c in 0..3 {
                counts[(y * nx + x) * 3 + c] = counts_full[((y + y0) * pw + (x + x0)) * 3 + c];
            }
        }
    }
    if let Some(t) = taps.as_deref_mut() {
        t.electrons = vec![0.0; nx * ny * 3];
        for y in 0..ny {
            for x in 0..nx {
                for c in 0..3 {
                    t.electrons[(y * nx + x) * 3 + c] =
                        electrons_full[((y + y0) * pw + (x + x0)) * 3 + c];
                }
            }
        }
    }

    Ok(SensorImage {
        width: nx,
        height: ny,
        counts,
        meta: CaptureMeta {
            seed,
            config_hash: cfg.hash(),
            mask_hash: ctx.mask_hash.clone(),
            laser: laser.clone(),
            alpha_b: illum.alpha_b,
            illuminant: illum.illuminant.values.clone(),
            noise: noise.clone(),
            exposure_time,
            scene_scale,
            laser_scale,
            flat_photon_response,
            s_sat,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::daylight_illuminant;
    use approx::assert_relative_eq;

    fn desk() -> SimConfig {
        SimConfig::desk()
    }

    fn desk_ctx(cfg: &SimConfig) -> CaptureContext {
        CaptureContext::new(cfg, &HeightMap::flat(cfg)).unwrap()
    }

    fn zero_scene(cfg: &SimConfig) -> SpectralCube {
        SpectralCube::zeros(cfg.sensor_res.0, cfg.sensor_res.1, cfg.grid().unwrap())
    }

    fn daylight_illum(cfg: &SimConfig, alpha_b: f64) -> IlluminationSpec {
        IlluminationSpec {
            alpha_b,
            illuminant: daylight_illuminant(&cfg.grid().unwrap()).unwrap(),
        }
    }

    #[test]
    fn zero_scene_zero_laser_zero_counts() {
        let cfg = desk();
        let ctx = desk_ctx(&cfg);
        let img = expose_with(
            &ctx,
            &zero_scene(&cfg),
            &LaserSpec::new(550e-9, 0.0, (0.0, 0.0)),
            &daylight_illum(&cfg, 0.0),
            &NoiseSpec::disabled(),
            cfg.exposure_time,
            1,
            None,
        )
        .unwrap();
        assert!(img.counts.iter().all(|&c| c == 0));
        assert_eq!(img.saturated_count(), 0);
    }

    #[test]
    fn photon_formula_inverts_saturation() {
        // I = I_sat at one cell in one band gives p * Q_e = e_sat there.
        let cfg = desk();
        let grid = cfg.grid().unwrap();
        let mut cube = SpectralCube::zeros(4, 4, grid.clone());
        let band = 2;
        let lambda = grid.lambdas()[band];
        cube.set(1, 2, band, i_sat(lambda, &cfg));
        let p = photons(&cube, &cfg);
        assert_relative_eq!(
            p.get(1, 2, band) * cfg.quantum_efficiency,
            cfg.full_well,
            max_relative = 1e-12
        );
        // linear in exposure time
        let p2 = photons_with_time(&cube, &cfg, 2.0 * cfg.exposure_time);
        assert_relative_eq!(
            p2.get(1, 2, band),
            2.0 * p.get(1, 2, band),
            max_relative = 1e-12
        );
    }

    #[test]
    fn alpha_one_saturates_exactly_one_pixel() {
        let cfg = desk();
        let ctx = desk_ctx(&cfg);
        let img = expose_with(
            &ctx,
            &zero_scene(&cfg),
            &LaserSpec::new(550e-9, 1.0, (0.0, 0.0)),
            &daylight_illum(&cfg, 0.0),
            &NoiseSpec::disabled(),
            cfg.exposure_time,
            7,
            None,
        )
        .unwrap();
        assert_eq!(
            img.saturated_count(),
            1,
            "expected exactly one saturated pixel"
        );
        // the saturated pixel is the center
        let mask = img.saturation_mask();
        assert!(mask[(cfg.sensor_res.1 / 2, cfg.sensor_res.0 / 2)]);
    }

    #[test]
    fn laser_zero_shift_centered_and_scaled() {
        let cfg = desk();
        let ctx = desk_ctx(&cfg);
        let laser = LaserSpec::new(550e-9, 1.0, (0.0, 0.0));
        let (cube, scale) = laser_irradiance(&laser, &ctx.coded, &ctx.uncoded, &cfg).unwrap();
        assert!(scale > 0.0);
        // footprint peak at the padded-grid center
        let band = cube.grid.band_index(550e-9).unwrap();
        let plane = cube.band_plane(band);
        let mut best = ((0usize, 0usize), 0.0f64);
        for ((y, x), v) in plane.indexed_iter() {
            if *v > best.1 {
                best = ((y, x), *v);
            }
        }
        assert_eq!(best.0, (cube.height / 2, cube.width / 2));
    }

    #[test]
    fn coded_uncoded_peak_ratio_is_lsr() {
        use crate::metrics::lsr;
        let cfg = desk();
        let mask = crate::doe_opt::half_ring_mask(&cfg, None).unwrap();
        let ctx = CaptureContext::new(&cfg, &mask).unwrap();
        let laser = LaserSpec::new(550e-9, 100.0, (0.0, 0.0));
        let (coded_cube, _) = laser_irradiance(&laser, &ctx.coded, &ctx.uncoded, &cfg).unwrap();
        let (clear_cube, _) = laser_irradiance(&laser, &ctx.uncoded, &ctx.uncoded, &cfg).unwrap();
        let band = ctx.coded.grid.band_index(550e-9).unwrap();
        let peak = |c: &SpectralCube| {
            c.band_plane(band).iter().cloned().fold(0.0f64, f64::max)
        };
        let ratio = peak(&coded_cube) / peak(&clear_cube);
        let want = lsr(&ctx.coded, &ctx.uncoded, 550e-9).unwrap();
        assert_relative_eq!(ratio, want, max_relative = 1e-6);
    }

    #[test]
    fn flare_zero_fraction_is_identity_and_bounded_otherwise() {
        let cfg = desk();
        let ctx = desk_ctx(&cfg);
        let laser = LaserSpec::new(550e-9, 10.0, (0.0, 0.0));
        let (cube, _) = laser_irradiance(&laser, &ctx.coded, &ctx.uncoded, &cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let same = add_flare(&cube, &laser, 0.0, &cfg, &mut rng);
        assert_eq!(same, cube);

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let flared = add_flare(&cube, &laser, 0.05, &cfg, &mut rng);
        for (a, b) in flared.data.iter().zip(&cube.data) {
            assert!(a >= b, "flare must only add energy");
        }
        for band in 0..cube.bands() {
            let added = flared.band_energy(band) - cube.band_energy(band);
            assert!(added <= 0.05 * cube.band_energy(band) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let cfg = desk();
        let ctx = desk_ctx(&cfg);
        let grid = cfg.grid().unwrap();
        let rgb = RgbImage::from_fn(cfg.sensor_res.0, cfg.sensor_res.1, |x, y| {
            [
                x as f64 / cfg.sensor_res.0 as f64,
                y as f64 / cfg.sensor_res.1 as f64,
                0.3,
            ]
        });
        let scene = crate::spectral::lift_rgb_to_hsi(&rgb, &grid).unwrap();
        let laser = LaserSpec::new(520e-9, 1e4, (1e-5, -2e-5));
        let illum = daylight_illum(&cfg, 0.6);
        let noise = NoiseSpec::from_config(&cfg);
        let a = expose_with(&ctx, &scene, &laser, &illum, &noise, 0.1, 99, None).unwrap();
        let b = expose_with(&ctx, &scene, &laser, &illum, &noise, 0.1, 99, None).unwrap();
        assert_eq!(a, b);
        let c = expose_with(&ctx, &scene, &laser, &illum, &noise, 0.1, 100, None).unwrap();
        assert_ne!(a.counts, c.counts);
    }

    #[test]
    fn monotone_in_scene_scale() {
        let cfg = desk();
        let ctx = desk_ctx(&cfg);
        let grid = cfg.grid().unwrap();
        let rgb = RgbImage::from_fn(cfg.sensor_res.0, cfg.sensor_res.1, |x, y| {
            [
                (x % 7) as f64 / 7.0,
                (y % 5) as f64 / 5.0,
                ((x + y) % 11) as f64 / 11.0,
            ]
        });
        let scene = crate::spectral::lift_rgb_to_hsi(&rgb, &grid).unwrap();
        let laser = LaserSpec::new(550e-9, 0.0, (0.0, 0.0));
        let illum = daylight_illum(&cfg, 0.6);
        let noise = NoiseSpec::disabled();

        let full = expose_with(&ctx, &scene, &laser, &illum, &noise, 0.1, 5, None).unwrap();

        // The background anchor normalizes the scene's own level, so a global
        // scale of b cancels exactly and counts are unchanged.
        let mut dim_scene = scene.clone();
        for v in &mut dim_scene.data {
            *v *= 0.4;
        }
        let same = expose_with(&ctx, &dim_scene, &laser, &illum, &noise, 0.1, 5, None).unwrap();
        for (a, b) in same.counts.iter().zip(&full.counts) {
            let d = (*a as i64 - *b as i64).abs();
            assert!(d <= 1, "scene scaling changed a count by {d}");
        }

        // Actual dimming flows through alpha_b and must never raise a count.
        let dim_illum = daylight_illum(&cfg, 0.24);
        let dim = expose_with(&ctx, &scene, &laser, &dim_illum, &noise, 0.1, 5, None).unwrap();
        for (a, b) in dim.counts.iter().zip(&full.counts) {
            assert!(a <= b, "dimming must not increase any count");
        }
    }

    #[test]
    fn background_alpha_anchoring_exact() {
        let cfg = desk();
        let ctx = desk_ctx(&cfg);
        let grid = cfg.grid().unwrap();
        let rgb = RgbImage::from_fn(cfg.sensor_res.0, cfg.sensor_res.1, |x, y| {
            [
                0.2 + 0.6 * (x as f64 / cfg.sensor_res.0 as f64),
                0.5,
                0.2 + 0.6 * (y as f64 / cfg.sensor_res.1 as f64),
            ]
        });
        let scene = crate::spectral::lift_rgb_to_hsi(&rgb, &grid).unwrap();
        let illum = daylight_illum(&cfg, 0.7);
        let (cube, scale) =
            scene_irradiance(&scene, &ctx.uncoded, &illum, &ctx.uncoded, &cfg).unwrap();
        assert!(scale > 0.0);
        // uncoded system: peak over bands and pixels relative to i_sat at the
        // peak band is exactly alpha_b
        let mut peak = 0.0f64;
        let mut peak_band = 0;
        for band in 0..cube.bands() {
            let m = cube.band_plane(band).iter().cloned().fold(0.0f64, f64::max);
            if m > peak {
                peak = m;
                peak_band = band;
            }
        }
        let ratio = peak / i_sat(grid.lambdas()[peak_band], &cfg);
        assert_relative_eq!(ratio, 0.7, max_relative = 1e-9);
    }

    #[test]
    fn total_counts_linear_in_alpha_b() {
        let cfg = desk();
        let ctx = desk_ctx(&cfg);
        let grid = cfg.grid().unwrap();
        let rgb = RgbImage::from_fn(cfg.sensor_res.0, cfg.sensor_res.1, |x, y| {
            [
                0.3 + 0.3 * (x as f64 / 128.0),
                0.4,
                0.3 + 0.3 * (y as f64 / 128.0),
            ]
        });
        let scene = crate::spectral::lift_rgb_to_hsi(&rgb, &grid).unwrap();
        let laser = LaserSpec::new(550e-9, 0.0, (0.0, 0.0));
        let noise = NoiseSpec::disabled();
        let total = |alpha: f64| -> f64 {
            let img = expose_with(
                &ctx,
                &scene,
                &laser,
                &daylight_illum(&cfg, alpha),
                &noise,
                0.1,
                5,
                None,
            )
            .unwrap();
            img.counts.iter().map(|&c| c as f64).sum()
        };
        let t1 = total(0.2);
        let t2 = total(0.4);
        let t3 = total(0.6);
        assert_relative_eq!(t2 / t1, 2.0, max_relative = 0.01);
        assert_relative_eq!(t3 / t1, 3.0, max_relative = 0.01);
    }

    #[test]
    fn saturation_mask_matches_counts() {
        let cfg = desk();
        let ctx = desk_ctx(&cfg);
        let img = expose_with(
            &ctx,
            &zero_scene(&cfg),
            &LaserSpec::new(550e-9, 1e4, (0.0, 0.0)),
            &daylight_illum(&cfg, 0.0),
            &NoiseSpec::from_config(&cfg),
            0.1,
            11,
            None,
        )
        .unwrap();
        let mask = img.saturation_mask();
        assert!(img.saturated_count() > 1);
        for y in 0..img.height {
            for x in 0..img.width {
                let any = (0..3).any(|c| img.count(x, y, c) == img.meta.s_sat);
                assert_eq!(mask[(y, x)], any);
            }
        }
    }

    #[test]
    fn read_noise_moments() {
        // noise-only capture; inspect pre-gain electrons through the taps
        let mut cfg = desk();
        cfg.sensor_res = (600, 600);
        cfg.pupil_res = (16, 16);
        cfg.pupil_pitch = 0.8e-3;
        cfg.sensor_pitch = 0.1e-6;
        let ctx = CaptureContext::new(&cfg, &HeightMap::flat(&cfg)).unwrap();
        let mut noise = NoiseSpec::disabled();
        noise.enable_read = true;
        noise.read_noise_mean = cfg.read_noise_mean;
        noise.read_noise_std = cfg.read_noise_std;
        let mut taps = ExposeTaps::default();
        expose_with(
            &ctx,
            &zero_scene(&cfg),
            &LaserSpec::new(550e-9, 0.0, (0.0, 0.0)),
            &daylight_illum(&cfg, 0.0),
            &noise,
            0.1,
            42,
            Some(&mut taps),
        )
        .unwrap();
        let n = taps.electrons.len() as f64;
        assert!(n >= 1e6);
        let mean = taps.electrons.iter().sum::<f64>() / n;
        let var = taps
            .electrons
            .iter()
            .map(|e| (e - mean) * (e - mean))
            .sum::<f64>()
            / (n - 1.0);
        assert!(
            (mean - 390.0).abs() / 390.0 < 0.01,
            "read mean {mean} vs 390"
        );
        assert!(
            (var.sqrt() - 10.5).abs() / 10.5 < 0.02,
            "read std {} vs 10.5",
            var.sqrt()
        );
    }

    #[test]
    fn dark_current_moments() {
        let mut cfg = desk();
        cfg.sensor_res = (600, 600);
        cfg.pupil_res = (16, 16);
        cfg.pupil_pitch = 0.8e-3;
        cfg.sensor_pitch = 0.1e-6;
        let ctx = CaptureContext::new(&cfg, &HeightMap::flat(&cfg)).unwrap();
        let mut noise = NoiseSpec::disabled();
        noise.enable_dark = true;
        noise.dark_current = cfg.dark_current;
        let mut total = 0.0;
        let mut n = 0.0;
        for seed in 0..4u64 {
            let mut taps = ExposeTaps::default();
            expose_with(
                &ctx,
                &zero_scene(&cfg),
                &LaserSpec::new(550e-9, 0.0, (0.0, 0.0)),
                &daylight_illum(&cfg, 0.0),
                &noise,
                0.1,
                seed,
                Some(&mut taps),
            )
            .unwrap();
            total += taps.electrons.iter().sum::<f64>();
            n += taps.electrons.len() as f64;
        }
        let mean = total / n;
        assert!(
            (mean - 0.002).abs() / 0.002 < 0.05,
            "dark mean {mean} vs 0.002 over {n} pixels"
        );
    }
}
