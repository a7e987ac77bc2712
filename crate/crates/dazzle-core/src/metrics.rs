//! Saturation threshold, suppression ratios, the element design loss, and
//! image-quality metrics.

use serde::{Deserialize, Serialize};

use crate::config::{SimConfig, LIGHT_SPEED, PLANCK_H};
use crate::error::{DazzleError, Result};
use crate::fftutil;
use crate::imgutil;
use crate::optics::PsfStack;
use crate::spectral::RgbImage;
use num_complex::Complex64;

/// Irradiance that fills the full well within one exposure at wavelength
/// `lambda`: `e_sat * h * c / (lambda * t * dx^2 * Q_e)`.
pub fn i_sat(lambda: f64, cfg: &SimConfig) -> f64 {
    cfg.full_well * PLANCK_H * LIGHT_SPEED
        / (lambda * cfg.exposure_time * cfg.sensor_pitch * cfg.sensor_pitch * cfg.quantum_efficiency)
}

/// Laser suppression ratio at one band: coded-to-uncoded peak ratio.
pub fn lsr(coded: &PsfStack, uncoded: &PsfStack, lambda: f64) -> Result<f64> {
    let c = coded.band(lambda)?;
    let u = uncoded.band(lambda)?;
    Ok(c.peak / u.peak)
}

/// Background suppression ratio at one band: coded-to-uncoded in-sensor
/// energy ratio.
pub fn bsr(coded: &PsfStack, uncoded: &PsfStack, lambda: f64) -> Result<f64> {
    let c = coded.band(lambda)?;
    let u = uncoded.band(lambda)?;
    Ok(c.in_sensor_energy / u.in_sensor_energy)
}

/// Per-band suppression ratios with aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub lambdas_nm: Vec<f64>,
    pub lsr: Vec<f64>,
    pub bsr: Vec<f64>,
    pub mean_lsr: f64,
    pub max_lsr: f64,
    pub mean_bsr: f64,
    pub max_bsr: f64,
}

impl SuppressionReport {
    pub fn compute(coded: &PsfStack, uncoded: &PsfStack) -> Result<Self> {
        let lambdas = coded.grid.lambdas().to_vec();
        let mut ls = Vec::with_capacity(lambdas.len());
        let mut bs = Vec::with_capacity(lambdas.len());
        for &l in &lambdas {
            ls.push(lsr(coded, uncoded, l)?);
            bs.push(bsr(coded, uncoded, l)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let max = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max);
        Ok(Self {
            lambdas_nm: lambdas.iter().map(|l| l * 1e9).collect(),
            mean_lsr: mean(&ls),
            max_lsr: max(&ls),
            mean_bsr: mean(&bs),
            max_bsr: max(&bs),
            lsr: ls,
            bsr: bs,
        })
    }
}

/// Peak evaluation mode for the design loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// Hard max; used for reporting.
    Report,
    /// Mean-based log-sum-exp surrogate with the given temperature, applied
    /// to PSF values normalized by the uncoded hard peak. Never exceeds the
    /// hard max, so reported values upper-bound surrogate values.
    Smooth { beta: f64 },
}

pub const DEFAULT_SMOOTH_BETA: f64 = 50.0;

/// Mean-based log-sum-exp of `values / scale`, multiplied back by `scale`.
pub(crate) fn smooth_max(values: &[f64], scale: f64, beta: f64) -> f64 {
    let m = values.iter().cloned().fold(f64::MIN, f64::max);
    let mn = m / scale;
    let sum: f64 = values
        .iter()
        .map(|v| ((v / scale - mn) * beta).exp())
        .sum();
    scale * (mn + (sum / values.len() as f64).ln() / beta)
}

/// Design loss: `sum_l lsr(l) + sum_l 1 / bsr(l)`.
pub fn l_doe(coded: &PsfStack, uncoded: &PsfStack, mode: LossMode) -> Result<f64> {
    let mut total = 0.0;
    for (c, u) in coded.bands.iter().zip(&uncoded.bands) {
        let b = c.in_sensor_energy / u.in_sensor_energy;
        if b <= 0.0 {
            return Err(DazzleError::DegenerateMask { lambda_m: c.lambda });
        }
        let l = match mode {
            LossMode::Report => c.peak / u.peak,
            LossMode::Smooth { beta } => {
                let vals: Vec<f64> = c.psf.iter().cloned().collect();
                smooth_max(&vals, u.peak, beta)
            }
        };
        total += l + 1.0 / b;
    }
    Ok(total)
}

/// Charbonnier-plus-spectrum reconstruction metric over fine and coarse
/// scales.
///
/// For each scale `L` in {0, 1} (1 = antialiased bicubic half-resolution):
/// `sum_px sqrt(|est - gt|^2 + eps) + sum_freq |F(est) - F(gt)|`,
/// summed over the three channels. `eps = 1e-6`.
pub fn charbonnier_fft(est: &RgbImage, gt: &RgbImage) -> Result<f64> {
    if est.width != gt.width || est.height != gt.height {
        return Err(DazzleError::ShapeMismatch {
            expected: format!("{}x{}", gt.width, gt.height),
            got: format!("{}x{}", est.width, est.height),
        });
    }
    const EPS: f64 = 1e-6;
    let mut total = 0.0;
    let scales = [
        (est.clone(), gt.clone()),
        (
            imgutil::resize_rgb(est, est.width / 2, est.height / 2),
            imgutil::resize_rgb(gt, gt.width / 2, gt.height / 2),
        ),
    ];
    for (e, g) in &scales {
        for (a, b) in e.data.iter().zip(&g.data) {
            let d = a - b;
            total += (d * d + EPS).sqrt();
        }
        for c in 0..3 {
            let to_plane = |img: &RgbImage| {
                ndarray::Array2::from_shape_fn((img.height, img.width), |(y, x)| {
                    Complex64::new(img.data[(y * img.width + x) * 3 + c], 0.0)
                })
            };
            let mut fe = to_plane(e);
            let mut fg = to_plane(g);
            fftutil::fft2_inplace(&mut fe);
            fftutil::fft2_inplace(&mut fg);
            for (x, y) in fe.iter().zip(fg.iter()) {
                total += (x - y).norm();
            }
        }
    }
    Ok(total)
}

/// Value `charbonnier_fft` takes when est == gt: every pixel term contributes
/// sqrt(eps) and both spectrum terms vanish.
pub fn charbonnier_floor(width: usize, height: usize) -> f64 {
    let fine = width * height * 3;
    let coarse = (width / 2) * (height / 2) * 3;
    (fine + coarse) as f64 * (1e-6f64).sqrt()
}

/// Bundle of image-quality numbers for one (estimate, ground-truth) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub l1: f64,
    /// Peak signal-to-noise ratio in dB; infinite for an exact match.
    pub psnr_db: f64,
    pub charbonnier_fft: f64,
}

/// Mean absolute error, PSNR, and the reconstruction metric, for images with
/// values in [0, 1].
pub fn quality_report(est: &RgbImage, gt: &RgbImage) -> Result<QualityReport> {
    if est.width != gt.width || est.height != gt.height {
        return Err(DazzleError::ShapeMismatch {
            expected: format!("{}x{}", gt.width, gt.height),
            got: format!("{}x{}", est.width, est.height),
        });
    }
    let n = est.data.len() as f64;
    let mut l1 = 0.0;
    let mut mse = 0.0;
    for (a, b) in est.data.iter().zip(&gt.data) {
        let d = a - b;
        l1 += d.abs();
        mse += d * d;
    }
    l1 /= n;
    mse /= n;
    let psnr_db = if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    };
    Ok(QualityReport {
        l1,
        psnr_db,
        charbonnier_fft: charbonnier_fft(est, gt)?,
    })
}
