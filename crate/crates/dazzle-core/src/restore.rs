//! Classical restoration: radiometric normalization, harmonic inpainting of
//! saturated regions, and per-channel Wiener deconvolution with the mask's
//! effective channel transfer functions.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::camera::SensorImage;
use crate::config::SimConfig;
use crate::error::{DazzleError, Result};
use crate::fftutil;
use crate::metrics;
use crate::optics::{build_psf_stack, otf, HeightMap, PsfStack};
use crate::spectral::{cie_cmf, RgbImage, SpectralCurve};

/// Tunable restoration parameters; stage 2 of the two-stage driver searches
/// these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestoreParams {
    /// Wiener spectral regularizer per channel.
    pub wiener_reg: [f64; 3],
    /// Harmonic fill iteration budget.
    pub inpaint_iters: usize,
    /// Relative early-stop tolerance of the fill.
    pub inpaint_tol: f64,
    /// Saturation-mask dilation radius in pixels.
    pub dilate_radius: usize,
}

impl Default for RestoreParams {
    fn default() -> Self {
        Self {
            wiener_reg: [1e-2; 3],
            inpaint_iters: 300,
            inpaint_tol: 1e-6,
            dilate_radius: 1,
        }
    }
}

impl RestoreParams {
    pub fn validate(&self) -> Result<()> {
        if self.wiener_reg.iter().any(|r| *r <= 0.0 || !r.is_finite()) {
            return Err(DazzleError::Other(format!(
                "wiener_reg must be strictly positive, got {:?}",
                self.wiener_reg
            )));
        }
        if self.inpaint_tol < 0.0 {
            return Err(DazzleError::Other(
                "inpaint_tol must be non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// Effective transfer function per output channel: the CMF-and-illuminant
/// weighted average of band OTFs, normalized to unit DC. Weights sum to 1
/// per channel.
pub fn effective_channel_otf(
    psf: &PsfStack,
    illuminant: &SpectralCurve,
) -> Result<[Array2<Complex64>; 3]> {
    if illuminant.grid != psf.grid {
        return Err(DazzleError::GridMismatch(
            "illuminant grid differs from stack grid".to_string(),
        ));
    }
    let (x, y, z) = cie_cmf(&psf.grid)?;
    let cmfs = [&x, &y, &z];
    let dim = psf.bands[0].psf.dim();
    let mut out: Vec<Array2<Complex64>> = Vec::with_capacity(3);
    for cmf in cmfs {
        let weights: Vec<f64> = (0..psf.grid.n_bands())
            .map(|b| cmf.values[b] * illuminant.values[b])
            .collect();
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(DazzleError::Other(
                "channel weights vanish; illuminant and sensitivity do not overlap".to_string(),
            ));
        }
        let mut kernel = Array2::<f64>::zeros(dim);
        for (b, w) in weights.iter().enumerate() {
            kernel.zip_mut_with(&psf.bands[b].psf, |k, p| *k += w / wsum * p);
        }
        let mut h = otf(&kernel);
        let dc = h[(0, 0)];
        if dc.norm() <= 0.0 {
            return Err(DazzleError::Other("channel OTF has zero DC".to_string()));
        }
        h.mapv_inplace(|v| v / dc);
        out.push(h);
    }
    Ok(out.try_into().expect("three channels"))
}

/// Dilate a boolean mask by a square radius.
pub fn dilate_mask(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize
                    && mask[(yy as usize, xx as usize)]
                {
                    return true;
                }
            }
        }
        false
    })
}

/// Outcome of the harmonic fill.
#[derive(Debug, Clone)]
pub struct InpaintResult {
    pub image: RgbImage,
    /// True when the mask covered the whole image and a mean fill was used.
    pub full_mask_fallback: bool,
}

/// Harmonic (Laplace) fill of masked pixels from their boundary values.
///
/// Gauss-Seidel iterations starting from zero, which keeps every iterate
/// below the exact harmonic solution, so the discrete maximum principle
/// holds at any iteration count. Unmasked pixels pass through unchanged.
pub fn harmonic_fill(img: &RgbImage, mask: &Array2<bool>, params: &RestoreParams) -> InpaintResult {
    let (w, h) = (img.width, img.height);
    let masked: Vec<(usize, usize)> = mask
        .indexed_iter()
        .filter(|(_, m)| **m)
        .map(|((y, x), _)| (y, x))
        .collect();
    if masked.is_empty() {
        return InpaintResult {
            image: img.clone(),
            full_mask_fallback: false,
        };
    }
    if masked.len() == w * h {
        let mut out = img.clone();
        for c in 0..3 {
            let mean = (0..w * h).map(|i| img.data[i * 3 + c]).sum::<f64>() / (w * h) as f64;
            for i in 0..w * h {
                out.data[i * 3 + c] = mean;
            }
        }
        return InpaintResult {
            image: out,
            full_mask_fallback: true,
        };
    }

    let mut out = img.clone();
    for (y, x) in &masked {
        out.set(*x, *y, [0.0; 3]);
    }
    let scale = img.data.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    for _ in 0..params.inpaint_iters {
        let mut max_delta = 0.0f64;
        for &(y, x) in &masked {
            let mut acc = [0.0f64; 3];
            let mut n = 0.0;
            let mut visit = |yy: isize, xx: isize| {
                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                    let px = out.get(xx as usize, yy as usize);
                    acc[0] += px[0];
                    acc[1] += px[1];
                    acc[2] += px[2];
                    n += 1.0;
                }
            };
            visit(y as isize - 1, x as isize);
            visit(y as isize + 1, x as isize);
            visit(y as isize, x as isize - 1);
            visit(y as isize, x as isize + 1);
            if n > 0.0 {
                let old = out.get(x, y);
                let new = [acc[0] / n, acc[1] / n, acc[2] / n];
                for c in 0..3 {
                    max_delta = max_delta.max((new[c] - old[c]).abs());
                }
                out.set(x, y, new);
            }
        }
        if max_delta <= params.inpaint_tol * scale {
            break;
        }
    }
    InpaintResult {
        image: out,
        full_mask_fallback: false,
    }
}

/// Fill saturated regions of a capture (counts normalized by `s_sat`) by
/// harmonic interpolation under the dilated saturation mask.
pub fn inpaint_saturated(s: &SensorImage, params: &RestoreParams) -> InpaintResult {
    let mask = dilate_mask(&s.saturation_mask(), params.dilate_radius);
    harmonic_fill(&s.normalized(), &mask, params)
}

/// Per-channel Wiener deconvolution:
/// `F^-1[ conj(H) F(x) / (|H|^2 + reg) ]`, clamped to [0, 1].
pub fn wiener_deconvolve(
    x: &RgbImage,
    otfs: &[Array2<Complex64>; 3],
    params: &RestoreParams,
) -> Result<RgbImage> {
    params.validate()?;
    let (w, h) = (x.width, x.height);
    if otfs[0].dim() != (h, w) {
        return Err(DazzleError::ShapeMismatch {
            expected: format!("{h}x{w}"),
            got: format!("{:?}", otfs[0].dim()),
        });
    }
    let mut out = RgbImage::zeros(w, h);
    for c in 0..3 {
        let mut plane = Array2::from_shape_fn((h, w), |(y, x_)| {
            Complex64::new(x.data[(y * w + x_) * 3 + c], 0.0)
        });
        fftutil::fft2_inplace(&mut plane);
        let reg = params.wiener_reg[c];
        // exact DC gain: undo the regularizer's attenuation of the mean
        let dc = otfs[c][(0, 0)].norm_sqr();
        let dc_fix = if dc > 0.0 { (dc + reg) / dc } else { 1.0 };
        plane.zip_mut_with(&otfs[c], |v, hh| {
            *v = hh.conj() * *v / (hh.norm_sqr() + reg) * dc_fix;
        });
        fftutil::ifft2_inplace(&mut plane);
        for y in 0..h {
            for x_ in 0..w {
                out.data[(y * w + x_) * 3 + c] = plane[(y, x_)].re.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Effective blur kernel per output channel: the CMF-and-illuminant weighted
/// average of band PSFs, normalized to unit sum.
pub fn effective_channel_kernels(
    psf: &PsfStack,
    illuminant: &SpectralCurve,
) -> Result<[Array2<f64>; 3]> {
    if illuminant.grid != psf.grid {
        return Err(DazzleError::GridMismatch(
            "illuminant grid differs from stack grid".to_string(),
        ));
    }
    let (x, y, z) = cie_cmf(&psf.grid)?;
    let cmfs = [&x, &y, &z];
    let dim = psf.bands[0].psf.dim();
    let mut out: Vec<Array2<f64>> = Vec::with_capacity(3);
    for cmf in cmfs {
        let weights: Vec<f64> = (0..psf.grid.n_bands())
            .map(|b| cmf.values[b] * illuminant.values[b])
            .collect();
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(DazzleError::Other(
                "channel weights vanish; illuminant and sensitivity do not overlap".to_string(),
            ));
        }
        let mut kernel = Array2::<f64>::zeros(dim);
        for (b, w) in weights.iter().enumerate() {
            kernel.zip_mut_with(&psf.bands[b].psf, |k, p| *k += w / wsum * p);
        }
        let ksum = kernel.sum();
        if ksum <= 0.0 {
            return Err(DazzleError::Other("channel kernel sums to zero".to_string()));
        }
        kernel.mapv_inplace(|v| v / ksum);
        out.push(kernel);
    }
    Ok(out.try_into().expect("three channels"))
}

/// Wiener deconvolution on the padded domain matching the capture model
/// (linear convolution followed by a center crop): the image is zero-padded
/// to `image + kernel` per axis, deconvolved against the kernel embedded on
/// that grid, and cropped back. Output clamped to [0, 1].
pub fn wiener_deconvolve_padded(
    x: &RgbImage,
    kernels: &[Array2<f64>; 3],
    params: &RestoreParams,
) -> Result<RgbImage> {
    params.validate()?;
    let (w, h) = (x.width, x.height);
    let (kh, kw) = kernels[0].dim();
    let (lh, lw) = (
        fftutil::next_fast_len(h + kh),
        fftutil::next_fast_len(w + kw),
    );
    let (oy, ox) = (kh / 2, kw / 2);
    let mut out = RgbImage::zeros(w, h);
    // reflect-continue the image into the margins so the circular model sees
    // a plausible stand-in for the unobserved spill
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - 1 - i;
            }
        }
        i as usize
    };
    for c in 0..3 {
        let mut plane = Array2::<Complex64>::zeros((lh, lw));
        for gy in 0..lh {
            for gx in 0..lw {
                let sy = gy as isize - oy as isize;
                let sx = gx as isize - ox as isize;
                let v = x.data[(reflect(sy, h) * w + reflect(sx, w)) * 3 + c];
                plane[(gy, gx)] = Complex64::new(v, 0.0);
            }
        }
        let mut ker = Array2::<Complex64>::zeros((lh, lw));
        for y in 0..kh {
            for x_ in 0..kw {
                let gy = (y + lh - kh / 2) % lh;
                let gx = (x_ + lw - kw / 2) % lw;
                ker[(gy, gx)] = Complex64::new(kernels[c][(y, x_)], 0.0);
            }
        }
        fftutil::fft2_inplace(&mut plane);
        fftutil::fft2_inplace(&mut ker);
        let reg = params.wiener_reg[c];
        let dc = ker[(0, 0)].norm_sqr();
        let dc_fix = if dc > 0.0 { (dc + reg) / dc } else { 1.0 };
        plane.zip_mut_with(&ker, |v, hh| {
            *v = hh.conj() * *v / (hh.norm_sqr() + reg) * dc_fix;
        });
        fftutil::ifft2_inplace(&mut plane);
        for y in 0..h {
            for x_ in 0..w {
                out.data[(y * w + x_) * 3 + c] =
                    plane[(y + oy, x_ + ox)].re.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Prebuilt restoration state for one mask + config.
#[derive(Debug, Clone)]
pub struct RestoreContext {
    pub config_hash: String,
    pub mask_hash: String,
    pub stack: PsfStack,
    /// Per-band crop-vignetting maps: the fraction of each band's kernel a
    /// sensor pixel actually collects, `crop(conv(1, psf_band))`.
    pub band_vignettes: Vec<Array2<f64>>,
}

impl RestoreContext {
    pub fn new(cfg: &SimConfig, mask: &HeightMap) -> Result<Self> {
        let stack = build_psf_stack(mask, cfg)?;
        Ok(Self {
            config_hash: cfg.hash(),
            mask_hash: mask.hash(),
            band_vignettes: band_vignettes(&stack, cfg),
            stack,
        })
    }
}

fn band_vignettes(stack: &PsfStack, cfg: &SimConfig) -> Vec<Array2<f64>> {
    let (nx, ny) = cfg.sensor_res;
    let ones = Array2::<f64>::ones((ny, nx));
    stack
        .bands
        .iter()
        .map(|b| {
            let full = crate::fftutil::conv2_linear(&ones, &b.psf);
            crate::fftutil::center_crop(&full, ny, nx)
        })
        .collect()
}

/// Scene-referred normalization of a capture: invert gain, subtract noise
/// means, invert quantum efficiency and the photon mean scale, then unmix
/// the channel coupling.
///
/// In the lift's clip-free regime the scene-to-photon map is an exactly
/// computable 3x3 matrix (band spectra of unit RGB inputs, times the
/// illuminant, photon factor, and per-band throughput); inverting it removes
/// the color cross-talk a per-channel flat field would leave behind. Falls
/// back to the recorded flat-field response when the matrix degenerates.
pub fn calibrated_normalize(s: &SensorImage, cfg: &SimConfig, ctx: &RestoreContext) -> RgbImage {
    use crate::config::{LIGHT_SPEED, PLANCK_H};
    use crate::spectral::{invert_3x3, LiftBasis, RgbProjection};

    let stack = &ctx.stack;
    let mean_scale = if s.meta.noise.enable_photon {
        s.meta.noise.mean_scale.max(1e-6)
    } else {
        1.0
    };
    let noise_mean = (if s.meta.noise.enable_read {
        s.meta.noise.read_noise_mean
    } else {
        0.0
    }) + (if s.meta.noise.enable_dark {
        s.meta.noise.dark_current
    } else {
        0.0
    });

    // per-band photon weights of the scene response
    let weights = (|| -> Option<(Vec<[f64; 3]>, Vec<f64>, Vec<[f64; 3]>)> {
        if s.meta.scene_scale <= 0.0
            || s.meta.illuminant.len() != stack.grid.n_bands()
            || s.width != ctx.band_vignettes[0].ncols()
            || s.height != ctx.band_vignettes[0].nrows()
        {
            return None;
        }
        let basis = LiftBasis::new(&stack.grid).ok()?;
        let lift_m = basis.min_norm_spectrum_matrix();
        let unit = SpectralCurve::unit(&stack.grid);
        let proj = RgbProjection::new(&stack.grid, &unit).ok()?;
        let cell = cfg.sensor_pitch * cfg.sensor_pitch;
        let rho: Vec<f64> = stack
            .grid
            .lambdas()
            .iter()
            .enumerate()
            .map(|(b, &lambda)| {
                s.meta.illuminant[b] * s.meta.scene_scale * lambda * s.meta.exposure_time
                    * cell
                    / (PLANCK_H * LIGHT_SPEED)
            })
            .collect();
        Some((proj.weights.clone(), rho, lift_m))
    })();

    let mut out = RgbImage::zeros(s.width, s.height);
    match weights {
        Some((proj_w, rho, lift_m)) => {
            // Spatially varying response: each pixel collects a per-band
            // vignetted share of the blur, so invert a per-pixel 3x3 map.
            let n_bands = stack.grid.n_bands();
            for y in 0..s.height {
                for x in 0..s.width {
                    let mut r = [[0.0f64; 3]; 3];
                    for b in 0..n_bands {
                        let v = ctx.band_vignettes[b][(y, x)].max(0.05);
                        let f = rho[b] * v;
                        for c in 0..3 {
                            let pc = proj_w[b][c] * f;
                            for j in 0..3 {
                                r[c][j] += pc * lift_m[b][j];
                            }
                        }
                    }
                    let i = (y * s.width + x) * 3;
                    match invert_3x3(&r) {
                        Some(r_inv) => {
                            let mut p = [0.0f64; 3];
                            for c in 0..3 {
                                p[c] = (s.counts[i + c] as f64 / cfg.gain - noise_mean)
                                    / (cfg.quantum_efficiency * mean_scale);
                            }
                            for c in 0..3 {
                                out.data[i + c] = r_inv[c][0] * p[0]
                                    + r_inv[c][1] * p[1]
                                    + r_inv[c][2] * p[2];
                            }
                        }
                        None => {
                            for c in 0..3 {
                                out.data[i + c] = s.counts[i + c] as f64 / s.meta.s_sat as f64;
                            }
                        }
                    }
                }
            }
        }
        None => {
            for c in 0..3 {
                let flat_e =
                    s.meta.flat_photon_response[c] * cfg.quantum_efficiency * mean_scale;
                for i in 0..s.width * s.height {
                    let e = (s.counts[i * 3 + c] as f64 / cfg.gain - noise_mean).max(0.0);
                    out.data[i * 3 + c] = if flat_e > 1e-30 {
                        e / flat_e
                    } else {
                        s.counts[i * 3 + c] as f64 / s.meta.s_sat as f64
                    };
                }
            }
        }
    }
    out
}

/// Full restoration chain: calibrated normalization, harmonic inpainting of
/// the dilated saturation mask, Wiener deconvolution with the mask's
/// effective channel transfer functions, clamp to [0, 1]. Deterministic.
pub fn restore_pipeline(
    s: &SensorImage,
    ctx: &RestoreContext,
    cfg: &SimConfig,
    params: &RestoreParams,
) -> Result<RgbImage> {
    if s.meta.config_hash != ctx.config_hash {
        return Err(DazzleError::ConfigHashMismatch {
            meta: s.meta.config_hash.clone(),
            supplied: ctx.config_hash.clone(),
        });
    }
    if s.meta.mask_hash != ctx.mask_hash {
        return Err(DazzleError::ConfigHashMismatch {
            meta: s.meta.mask_hash.clone(),
            supplied: ctx.mask_hash.clone(),
        });
    }
    let normalized = calibrated_normalize(s, cfg, ctx);
    let illuminant = SpectralCurve::new(ctx.stack.grid.clone(), s.meta.illuminant.clone())?;
    let kernels = effective_channel_kernels(&ctx.stack, &illuminant)?;
    let mask = dilate_mask(&s.saturation_mask(), params.dilate_radius);
    let filled = harmonic_fill(&normalized, &mask, params).image;
    let mut restored = wiener_deconvolve_padded(&filled, &kernels, params)?;
    restored.clamp01();
    Ok(restored)
}

/// Convenience wrapper building the context from a mask.
pub fn restore_image(
    s: &SensorImage,
    mask: &HeightMap,
    cfg: &SimConfig,
    params: &RestoreParams,
) -> Result<RgbImage> {
    let ctx = RestoreContext::new(cfg, mask)?;
    restore_pipeline(s, &ctx, cfg, params)
}

/// Stage-2 parameter tuning: golden-section search of the shared Wiener
/// regularizer (log scale) against validation captures, minimizing the mean
/// reconstruction metric. Returns the chosen parameters, the achieved value,
/// and the number of objective evaluations.
pub fn tune_restore_params(
    cfg: &SimConfig,
    mask: &HeightMap,
    val_scenes: &[RgbImage],
    budget: usize,
) -> Result<(RestoreParams, f64, usize)> {
    use crate::camera::{expose_with, CaptureContext, IlluminationSpec, LaserSpec, NoiseSpec};
    use crate::config::derive_seed;
    use crate::spectral::{daylight_illuminant, lift_rgb_to_hsi};

    let grid = cfg.grid()?;
    let capture_ctx = CaptureContext::new(cfg, mask)?;
    let restore_ctx = RestoreContext {
        config_hash: cfg.hash(),
        mask_hash: mask.hash(),
        band_vignettes: band_vignettes(&capture_ctx.coded, cfg),
        stack: capture_ctx.coded.clone(),
    };
    let illuminant = daylight_illuminant(&grid)?;
    let noise = NoiseSpec {
        mean_scale: 0.2,
        c2: 1.0,
        dark_current: 0.002,
        read_noise_mean: 390.0,
        read_noise_std: 10.5,
        enable_photon: true,
        enable_dark: true,
        enable_read: true,
        enable_quantization: true,
        enable_flare: true,
    };
    let lambda_mid = grid.lambdas()[grid.n_bands() / 2];

    // Validation captures: one laser-free and one mid-strength laser exposure
    // per scene.
    let mut pairs: Vec<(SensorImage, RgbImage)> = Vec::new();
    for (i, scene) in val_scenes.iter().enumerate() {
        let cube = lift_rgb_to_hsi(scene, &grid)?;
        let illum = IlluminationSpec {
            alpha_b: 0.7,
            illuminant: illuminant.clone(),
        };
        for (j, alpha_l) in [0.0, 1e4].into_iter().enumerate() {
            let seed = derive_seed(cfg.rng_seed ^ 0x7061_7261, (i * 2 + j) as u64);
            let laser = LaserSpec::new(lambda_mid, alpha_l, (0.0, 0.0));
            let img = expose_with(
                &capture_ctx,
                &cube,
                &laser,
                &illum,
                &noise,
                cfg.exposure_time,
                seed,
                None,
            )?;
            pairs.push((img, scene.clone()));
        }
    }

    let mut evals = 0usize;
    let mut best: Option<(f64, RestoreParams)> = None;
    let mut evaluate = |log_reg: f64, evals: &mut usize| -> Result<f64> {
        let params = RestoreParams {
            wiener_reg: [10f64.powf(log_reg); 3],
            ..RestoreParams::default()
        };
        let mut total = 0.0;
        for (img, gt) in &pairs {
            let restored = restore_pipeline(img, &restore_ctx, cfg, &params)?;
            total += metrics::charbonnier_fft(&restored, gt)?;
        }
        let value = total / pairs.len() as f64;
        *evals += 1;
        if best.as_ref().map_or(true, |(b, _)| value < *b) {
            best = Some((value, params));
        }
        Ok(value)
    };

    // Golden-section over log10(reg) in [-5, 0], endpoints included.
    let (mut a, mut b) = (-5.0f64, 0.0f64);
    evaluate(a, &mut evals)?;
    evaluate(b, &mut evals)?;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = evaluate(c, &mut evals)?;
    let mut fd = evaluate(d, &mut evals)?;
    while evals < budget.max(6) && (b - a) > 0.05 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = evaluate(c, &mut evals)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = evaluate(d, &mut evals)?;
        }
    }
    let (value, params) = best.expect("at least endpoint evaluations ran");
    Ok((params, value, evals))
}
