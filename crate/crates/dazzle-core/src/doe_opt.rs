//! Gradient-based optimization of the element height map against the design
//! loss, plus the half-ring baseline geometry and the two-stage driver.
//!
//! The forward model per band is
//! `heights -> phase -> aperture field -> scaled transform -> |field|^2`,
//! every stage of which is either elementwise or linear, so the exact
//! reverse-mode gradient is one conjugate pass through the same scaled
//! transform. Peaks use a mean-based log-sum-exp surrogate in gradient mode
//! (values normalized by the clear-aperture peak so the temperature has a
//! stable meaning) and a hard max in reporting mode.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{DazzleError, Result};
use crate::fftutil;
use crate::imgutil::gaussian_blur;
use crate::metrics;
use crate::optics::{
    aperture_mask, build_psf_stack, clear_aperture_flux, pitch_alpha, HeightMap,
};
use crate::restore::RestoreParams;
use crate::spectral::RgbImage;

/// Learning-rate schedule and iteration budget for the two stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stage1_iters: usize,
    /// Evaluation budget of the stage-2 parameter search.
    pub stage2_iters: usize,
    /// Adam step size in normalized height units (fractions of `h_max`).
    pub lr_weights: f64,
    /// Fraction of the budget after which the rate is halved.
    pub decay_start_frac: f64,
    /// Block length (fraction of the budget) after which the rate is further
    /// multiplied by 0.3.
    pub decay_block_frac: f64,
    /// Smooth-max temperature.
    pub beta: f64,
    /// Gradient accumulation: number of band subsets per update (1 = off).
    pub grad_accum: usize,
    /// Weight of the restorability term (mean Wiener attenuation over the
    /// low-frequency disk); 0 disables it and leaves the pure design loss.
    pub mtf_weight: f64,
    /// Noise-to-signal ratio assumed by the restorability term.
    pub mtf_reg: f64,
    /// Radius of the protected low-frequency disk as a fraction of the
    /// sensor's Nyquist extent.
    pub mtf_disk_frac: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            stage1_iters: 1000,
            stage2_iters: 24,
            lr_weights: 2e-4,
            decay_start_frac: 0.2,
            decay_block_frac: 0.1,
            beta: metrics::DEFAULT_SMOOTH_BETA,
            grad_accum: 1,
            mtf_weight: 0.0,
            mtf_reg: 1e-3,
            mtf_disk_frac: 0.125,
        }
    }
}

impl StageSchedule {
    /// Schedule sized for the reduced desk configuration: the height grid is
    /// optimized directly, so the step size is far larger than the reference
    /// network training rate.
    pub fn desk() -> Self {
        Self {
            stage1_iters: 1000,
            lr_weights: 0.02,
            beta: 200.0,
            mtf_weight: 1.0,
            mtf_reg: 1e-4,
            mtf_disk_frac: 0.0625,
            ..Self::default()
        }
    }

    pub fn lr_at(&self, iter: usize, total: usize) -> f64 {
        let ds = ((total as f64 * self.decay_start_frac).round() as usize).max(1);
        let block = ((total as f64 * self.decay_block_frac).round() as usize).max(1);
        if iter < ds {
            self.lr_weights
        } else {
            let blocks = (iter - ds) / block;
            self.lr_weights * 0.5 * 0.3f64.powi(blocks as i32)
        }
    }
}

/// Precomputed per-band constants of the design objective.
struct Objective {
    cfg: SimConfig,
    aperture: Array2<f64>,
    lambdas: Vec<f64>,
    /// Phase per meter of height, per band.
    k_phase: Vec<f64>,
    /// Transform amplitude prefactor, per band.
    amp: Vec<f64>,
    /// Normalized pitch product, per band.
    alpha: Vec<f64>,
    /// Clear-aperture hard peak, per band.
    clear_peak: Vec<f64>,
    /// Clear-aperture in-sensor energy, per band.
    clear_energy: Vec<f64>,
    /// cell / flux0 normalization of PSF values.
    psf_norm: f64,
    beta: f64,
    mtf_weight: f64,
    mtf_reg: f64,
    /// Wrapped frequency bins inside the low-frequency disk (DC excluded).
    low_freq_bins: Vec<(usize, usize)>,
}

/// Per-band forward result retained for the backward pass.
struct BandForward {
    band: usize,
    field: Array2<Complex64>,
    psf: Array2<f64>,
    hard_peak: f64,
    energy: f64,
}

impl Objective {
    fn new(cfg: &SimConfig, beta: f64) -> Result<Self> {
        Self::with_restorability(cfg, beta, 0.0, 1e-3, 0.125)
    }

    fn with_restorability(
        cfg: &SimConfig,
        beta: f64,
        mtf_weight: f64,
        mtf_reg: f64,
        mtf_disk_frac: f64,
    ) -> Result<Self> {
        let grid = cfg.grid()?;
        let flat = build_psf_stack(&HeightMap::flat(cfg), cfg)?;
        let flux0 = clear_aperture_flux(cfg);
        let cell = cfg.sensor_pitch * cfg.sensor_pitch;
        let (ny, nx) = (cfg.sensor_res.1, cfg.sensor_res.0);
        let r_bins = (nx.min(ny) as f64 * mtf_disk_frac).round() as isize;
        let mut low_freq_bins = Vec::new();
        for ky in 0..ny {
            let wy = if ky <= ny / 2 { ky as isize } else { ky as isize - ny as isize };
            for kx in 0..nx {
                let wx = if kx <= nx / 2 { kx as isize } else { kx as isize - nx as isize };
                if wy * wy + wx * wx <= r_bins * r_bins && (wy, wx) != (0, 0) {
                    low_freq_bins.push((ky, kx));
                }
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            aperture: aperture_mask(cfg),
            lambdas: grid.lambdas().to_vec(),
            k_phase: grid
                .lambdas()
                .iter()
                .map(|&l| 2.0 * std::f64::consts::PI / l * cfg.doe_delta_n_model.delta_n(l))
                .collect(),
            amp: grid
                .lambdas()
                .iter()
                .map(|&l| cfg.pupil_pitch * cfg.pupil_pitch / (l * cfg.focal_length))
                .collect(),
            alpha: grid.lambdas().iter().map(|&l| pitch_alpha(cfg, l)).collect(),
            clear_peak: flat.bands.iter().map(|b| b.peak).collect(),
            clear_energy: flat.bands.iter().map(|b| b.in_sensor_energy).collect(),
            psf_norm: cell / flux0,
            beta,
            mtf_weight,
            mtf_reg,
            low_freq_bins,
        })
    }

    fn forward_band(&self, heights: &Array2<f64>, band: usize) -> BandForward {
        let (ny, nx) = (self.cfg.sensor_res.1, self.cfg.sensor_res.0);
        let k = self.k_phase[band];
        let pupil = Array2::from_shape_fn(self.aperture.dim(), |idx| {
            if self.aperture[idx] > 0.0 {
                Complex64::from_polar(1.0, k * heights[idx])
            } else {
                Complex64::ZERO
            }
        });
        let mut field = fftutil::czt2d(&pupil, ny, nx, self.alpha[band], false);
        let amp = self.amp[band];
        field.mapv_inplace(|v| v * amp);
        let psf = field.mapv(|v| v.norm_sqr() * self.psf_norm);
        let hard_peak = psf.iter().cloned().fold(0.0f64, f64::max);
        let energy = psf.sum();
        BandForward {
            band,
            field,
            psf,
            hard_peak,
            energy,
        }
    }

    /// Smooth per-band loss value and its gradient with respect to the
    /// (possibly smoothed) height grid.
    fn band_loss_grad(
        &self,
        heights: &Array2<f64>,
        fwd: &BandForward,
    ) -> Result<(f64, Array2<f64>)> {
        let band = fwd.band;
        let u_peak = self.clear_peak[band];
        let u_energy = self.clear_energy[band];
        if fwd.energy <= 0.0 {
            return Err(DazzleError::DegenerateMask {
                lambda_m: self.lambdas[band],
            });
        }

        // Smooth loss terms.
        let vals: Vec<f64> = fwd.psf.iter().cloned().collect();
        let smax = metrics::smooth_max(&vals, u_peak, self.beta);
        let mut loss = smax / u_peak + u_energy / fwd.energy;

        // dL/dpsf = softmax / u_peak - u_energy / energy^2.
        let m = fwd.hard_peak;
        let scale = self.beta / u_peak;
        let mut softmax_den = 0.0;
        for v in fwd.psf.iter() {
            softmax_den += ((v - m) * scale).exp();
        }
        let energy_term = u_energy / (fwd.energy * fwd.energy);
        let mut r = Array2::from_shape_fn(fwd.psf.dim(), |idx| {
            ((fwd.psf[idx] - m) * scale).exp() / softmax_den / u_peak - energy_term
        });

        // Restorability term: mean Wiener attenuation of the unit-DC band
        // transfer function over the low-frequency disk. Keeps the optimizer
        // away from masks whose blur cannot be inverted afterwards.
        if self.mtf_weight > 0.0 && !self.low_freq_bins.is_empty() {
            let reg = self.mtf_reg;
            let w = self.mtf_weight / self.low_freq_bins.len() as f64;
            let e = fwd.energy;
            let mut h = fwd.psf.mapv(|v| Complex64::new(v, 0.0));
            fftutil::fft2_inplace(&mut h);
            let mut g_spec = Array2::<Complex64>::zeros(h.dim());
            let mut s_accum = 0.0;
            for &(ky, kx) in &self.low_freq_bins {
                let hv = h[(ky, kx)];
                let q = hv.norm_sqr() / (e * e);
                loss += w * reg / (q + reg);
                let g = -w * reg / ((q + reg) * (q + reg));
                g_spec[(ky, kx)] = hv.conj() * g;
                s_accum += g * hv.norm_sqr();
            }
            fftutil::fft2_inplace(&mut g_spec);
            let offset = -2.0 * s_accum / (e * e * e);
            r.zip_mut_with(&g_spec, |rv, gs| {
                *rv += 2.0 / (e * e) * gs.re + offset;
            });
        }

        // Back through psf = norm*|U|^2 and the linear transform.
        // dL/dU (Wirtinger) = norm * r * conj(U); transpose pass uses the
        // same exponent sign with swapped sizes.
        let g_u = Array2::from_shape_fn(fwd.field.dim(), |idx| {
            fwd.field[idx].conj() * (self.psf_norm * r[idx])
        });
        let (pv, pu) = self.aperture.dim();
        let mut g_p = fftutil::czt2d(&g_u, pv, pu, self.alpha[band], false);
        let amp = self.amp[band];
        g_p.mapv_inplace(|v| v * amp);

        // dL/dphi = -2 Im(dL/dP * P); dL/dh = k * dL/dphi.
        let k = self.k_phase[band];
        let grad = Array2::from_shape_fn(g_p.dim(), |idx| {
            if self.aperture[idx] > 0.0 {
                let p = Complex64::from_polar(1.0, k * heights[idx]);
                -2.0 * (g_p[idx] * p).im * k
            } else {
                0.0
            }
        });
        Ok((loss, grad))
    }
}

/// Value and gradient of the smooth-mode design loss over a band subset.
/// Returns (smooth loss, hard-mode report (mean lsr, mean bsr), gradient).
fn loss_and_grad(
    obj: &Objective,
    heights: &Array2<f64>,
    bands: &[usize],
) -> Result<(f64, (f64, f64), Array2<f64>)> {
    let fwds: Vec<BandForward> = bands
        .par_iter()
        .map(|&b| obj.forward_band(heights, b))
        .collect();
    let parts: Result<Vec<(f64, Array2<f64>)>> = fwds
        .par_iter()
        .map(|fwd| obj.band_loss_grad(heights, fwd))
        .collect();
    let parts = parts?;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(heights.dim());
    for (l, g) in &parts {
        loss += l;
        grad.zip_mut_with(g, |a, b| *a += b);
    }
    let mean_lsr = fwds
        .iter()
        .map(|f| f.hard_peak / obj.clear_peak[f.band])
        .sum::<f64>()
        / fwds.len() as f64;
    let mean_bsr = fwds
        .iter()
        .map(|f| f.energy / obj.clear_energy[f.band])
        .sum::<f64>()
        / fwds.len() as f64;
    Ok((loss, (mean_lsr, mean_bsr), grad))
}

/// Exact adjoint gradient of the smooth-mode design loss with respect to the
/// physical height map (no smoothing reparameterization).
pub fn grad_l_doe(h: &HeightMap, cfg: &SimConfig) -> Result<Array2<f64>> {
    let obj = Objective::new(cfg, metrics::DEFAULT_SMOOTH_BETA)?;
    let bands: Vec<usize> = (0..obj.lambdas.len()).collect();
    let (_, _, grad) = loss_and_grad(&obj, &h.heights, &bands)?;
    Ok(grad)
}

/// Smooth-mode design loss for the same chain `grad_l_doe` differentiates;
/// the finite-difference oracle evaluates this.
pub fn smooth_l_doe(h: &HeightMap, cfg: &SimConfig) -> Result<f64> {
    let obj = Objective::new(cfg, metrics::DEFAULT_SMOOTH_BETA)?;
    let bands: Vec<usize> = (0..obj.lambdas.len()).collect();
    let fwds: Vec<BandForward> = bands
        .iter()
        .map(|&b| obj.forward_band(&h.heights, b))
        .collect();
    let mut loss = 0.0;
    for fwd in &fwds {
        if fwd.energy <= 0.0 {
            return Err(DazzleError::DegenerateMask {
                lambda_m: obj.lambdas[fwd.band],
            });
        }
        let vals: Vec<f64> = fwd.psf.iter().cloned().collect();
        loss += metrics::smooth_max(&vals, obj.clear_peak[fwd.band], obj.beta) / obj.clear_peak[fwd.band]
            + obj.clear_energy[fwd.band] / fwd.energy;
    }
    Ok(loss)
}

/// One row of the optimization history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterStats {
    pub iter: usize,
    pub l_doe: f64,
    pub mean_lsr: f64,
    pub mean_bsr: f64,
    pub lr: f64,
}

/// Result of a stage-1 run.
#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub mask: HeightMap,
    pub history: Vec<IterStats>,
    /// Best recorded reporting-mode loss.
    pub best_l_doe: f64,
    pub best_iter: usize,
}

/// Seeded initial raw height grid: small uniform random values in
/// `[0, 0.05 h_max]` to break the flat-start symmetry.
pub fn initial_heights(cfg: &SimConfig, seed: u64) -> HeightMap {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    HeightMap {
        heights: Array2::from_shape_fn((cfg.pupil_res.1, cfg.pupil_res.0), |_| {
            rng.random::<f64>() * 0.05 * cfg.doe_h_max
        }),
        pitch: cfg.pupil_pitch,
    }
}

/// Adam descent of the design loss with projection onto `[0, h_max]`.
///
/// The optimized variable is the raw grid; when `cfg.mask_blur_sigma > 0` the
/// physical mask is its Gaussian smoothing, and the gradient flows back
/// through the (self-adjoint) blur. Returns the best-loss mask and the
/// per-iteration history.
pub fn optimize_doe(
    init: &HeightMap,
    sched: &StageSchedule,
    cfg: &SimConfig,
) -> Result<OptimizeResult> {
    let obj = Objective::with_restorability(cfg, sched.beta, sched.mtf_weight, sched.mtf_reg, sched.mtf_disk_frac)?;
    let sigma = cfg.mask_blur_sigma;
    let n_bands = obj.lambdas.len();
    let h_max = cfg.doe_h_max;

    let mut theta = init.heights.clone();
    theta.mapv_inplace(|v| v.clamp(0.0, h_max));
    let mut m = Array2::<f64>::zeros(theta.dim());
    let mut v = Array2::<f64>::zeros(theta.dim());
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-12);

    let physical = |t: &Array2<f64>| -> Array2<f64> {
        if sigma > 0.0 {
            gaussian_blur(t, sigma)
        } else {
            t.clone()
        }
    };

    let mut history = Vec::with_capacity(sched.stage1_iters);
    let mut best_l = f64::INFINITY;
    let mut best_iter = 0;
    let mut best_mask = physical(&theta);
    let mut initial_loss = None;
    let mut high_streak = 0usize;

    let accum = sched.grad_accum.max(1).min(n_bands);
    let band_groups: Vec<Vec<usize>> = (0..accum)
        .map(|g| (0..n_bands).filter(|b| b % accum == g).collect())
        .collect();

    for iter in 0..sched.stage1_iters {
        let heights = physical(&theta);
        let mut grad = Array2::<f64>::zeros(theta.dim());
        let mut loss = 0.0;
        let mut report = (0.0, 0.0);
        for group in &band_groups {
            let (l, rep, g) = loss_and_grad(&obj, &heights, group)?;
            loss += l;
            report.0 += rep.0 * group.len() as f64;
            report.1 += rep.1 * group.len() as f64;
            grad.zip_mut_with(&g, |a, b| *a += b);
        }
        report.0 /= n_bands as f64;
        report.1 /= n_bands as f64;
        if sigma > 0.0 {
            grad = gaussian_blur(&grad, sigma);
        }

        let lr = sched.lr_at(iter, sched.stage1_iters);
        history.push(IterStats {
            iter,
            l_doe: loss,
            mean_lsr: report.0,
            mean_bsr: report.1,
            lr,
        });
        if loss < best_l {
            best_l = loss;
            best_iter = iter;
            best_mask = heights.clone();
        }

        let init_l = *initial_loss.get_or_insert(loss);
        if loss > 10.0 * init_l {
            high_streak += 1;
            if high_streak >= 50 {
                return Err(DazzleError::Diverged {
                    iters: iter,
                    loss,
                    initial: init_l,
                });
            }
        } else {
            high_streak = 0;
        }

        // Adam step on the raw grid, normalized height units.
        let t = (iter + 1) as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        ndarray::Zip::from(&mut theta)
            .and(&mut m)
            .and(&mut v)
            .and(&grad)
            .for_each(|th, mi, vi, &g| {
                // gradient expressed against normalized heights
                let gn = g * h_max;
                *mi = beta1 * *mi + (1.0 - beta1) * gn;
                *vi = beta2 * *vi + (1.0 - beta2) * gn * gn;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let step = lr * mhat / (vhat.sqrt() + eps);
                *th = (*th - step * h_max).clamp(0.0, h_max);
            });
    }

    Ok(OptimizeResult {
        mask: HeightMap {
            heights: best_mask,
            pitch: cfg.pupil_pitch,
        },
        history,
        best_l_doe: best_l,
        best_iter,
    })
}

/// Parameters of the half-ring baseline geometry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HalfRingParams {
    pub r1: f64,
    pub r2: f64,
    /// Step height; the default gives a pi phase delay at 550 nm.
    pub h_step: f64,
}

/// Half-annulus step mask: `h_step` inside `r1 <= r <= r2` on the `v > 0`
/// half-plane, flat elsewhere.
pub fn half_ring_mask(cfg: &SimConfig, params: Option<HalfRingParams>) -> Result<HeightMap> {
    let r_ap = cfg.aperture_diameter / 2.0;
    let default_step = 550e-9 / (2.0 * cfg.doe_delta_n_model.delta_n(550e-9));
    let p = params.unwrap_or(HalfRingParams {
        r1: 0.5 * r_ap,
        r2: r_ap,
        h_step: default_step,
    });
    if !(p.r1 > 0.0 && p.r1 <= p.r2 && p.r2 <= r_ap) {
        return Err(DazzleError::InvalidRing {
            r1_m: p.r1,
            r2_m: p.r2,
            r_m: r_ap,
        });
    }
    if p.h_step < 0.0 || p.h_step > cfg.doe_h_max {
        return Err(DazzleError::Other(format!(
            "half-ring step {} outside [0, {}]",
            p.h_step, cfg.doe_h_max
        )));
    }
    let (nv, nu) = (cfg.pupil_res.1, cfg.pupil_res.0);
    let heights = if p.r1 == p.r2 {
        Array2::zeros((nv, nu))
    } else {
        Array2::from_shape_fn((nv, nu), |(j, i)| {
            let u = (i as f64 - (nu / 2) as f64) * cfg.pupil_pitch;
            let v = (j as f64 - (nv / 2) as f64) * cfg.pupil_pitch;
            let r = (u * u + v * v).sqrt();
            if v > 0.0 && r >= p.r1 && r <= p.r2 {
                p.h_step
            } else {
                0.0
            }
        })
    };
    Ok(HeightMap {
        heights,
        pitch: cfg.pupil_pitch,
    })
}

/// Output of the two-stage driver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub mask_hash: String,
    pub stage1_best_l_doe: f64,
    pub stage1_best_iter: usize,
    pub stage1_mean_lsr: f64,
    pub stage1_mean_bsr: f64,
    pub stage2_params: RestoreParams,
    pub stage2_val_charbonnier: f64,
    pub stage2_evaluations: usize,
}

/// Stage 1: optimize the mask. Stage 2: tune restoration parameters against
/// validation scenes with the mask frozen.
pub fn run_two_stage(
    cfg: &SimConfig,
    sched: &StageSchedule,
    val_scenes: &[RgbImage],
) -> Result<(HeightMap, RestoreParams, TwoStageReport, Vec<IterStats>)> {
    if val_scenes.is_empty() {
        return Err(DazzleError::Other(
            "two-stage run needs at least one validation scene".to_string(),
        ));
    }
    let init = initial_heights(cfg, cfg.rng_seed);
    let opt = optimize_doe(&init, sched, cfg)?;
    let hash_before = opt.mask.hash();

    let stack = build_psf_stack(&opt.mask, cfg)?;
    let report = metrics::SuppressionReport::compute(&stack, &build_psf_stack(&HeightMap::flat(cfg), cfg)?)?;

    let (params, val_value, evals) =
        crate::restore::tune_restore_params(cfg, &opt.mask, val_scenes, sched.stage2_iters)?;
    assert_eq!(hash_before, opt.mask.hash(), "stage 2 must not touch the mask");

    let two = TwoStageReport {
        mask_hash: hash_before,
        stage1_best_l_doe: opt.best_l_doe,
        stage1_best_iter: opt.best_iter,
        stage1_mean_lsr: report.mean_lsr,
        stage1_mean_bsr: report.mean_bsr,
        stage2_params: params.clone(),
        stage2_val_charbonnier: val_value,
        stage2_evaluations: evals,
    };
    Ok((opt.mask, params, two, opt.history))
}
