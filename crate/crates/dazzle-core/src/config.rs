//! Physical parameter set, wavelength grid, constants, and seeding policy.
//!
//! A [`SimConfig`] is the single source of truth for a run. All fields are
//! stored in SI units; the JSON schema additionally accepts unit-suffixed
//! field names (`lambda_min_nm`, `aperture_diameter_mm`, ...) so config files
//! can be written in the units the numbers are usually quoted in.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{DazzleError, Result};

/// Planck constant (J s).
pub const PLANCK_H: f64 = 6.63e-34;
/// Speed of light in vacuum (m/s).
pub const LIGHT_SPEED: f64 = 3.0e8;

/// Ordered band-center wavelengths with uniform spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    lambdas: Vec<f64>,
    delta_lambda: f64,
}

impl WavelengthGrid {
    /// Uniform grid of `n_bands` band centers spanning `[lambda_min, lambda_max]` inclusive.
    pub fn new(lambda_min: f64, lambda_max: f64, n_bands: usize) -> Result<Self> {
        if !(lambda_min > 0.0 && lambda_max > lambda_min) {
            return Err(DazzleError::ConfigInvalid {
                field: "lambda_min",
                message: format!(
                    "need 0 < lambda_min < lambda_max, got [{lambda_min:e}, {lambda_max:e}]"
                ),
            });
        }
        if n_bands < 2 {
            return Err(DazzleError::ConfigInvalid {
                field: "n_bands",
                message: format!("need at least 2 bands, got {n_bands}"),
            });
        }
        let delta = (lambda_max - lambda_min) / (n_bands - 1) as f64;
        let lambdas = (0..n_bands)
            .map(|i| lambda_min + delta * i as f64)
            .collect();
        Ok(Self {
            lambdas,
            delta_lambda: delta,
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn delta_lambda(&self) -> f64 {
        self.delta_lambda
    }

    pub fn n_bands(&self) -> usize {
        self.lambdas.len()
    }

    pub fn min(&self) -> f64 {
        self.lambdas[0]
    }

    pub fn max(&self) -> f64 {
        *self.lambdas.last().unwrap()
    }

    pub fn contains(&self, lambda: f64) -> bool {
        lambda >= self.min() - 1e-15 && lambda <= self.max() + 1e-15
    }

    /// Index of the band whose center equals `lambda` (within numeric fuzz).
    pub fn band_index(&self, lambda: f64) -> Result<usize> {
        self.lambdas
            .iter()
            .position(|&l| (l - lambda).abs() <= self.delta_lambda * 1e-6 + 1e-15)
            .ok_or(DazzleError::BandNotInGrid { lambda_m: lambda })
    }

    /// Index of the band center nearest to `lambda`.
    pub fn nearest_band(&self, lambda: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &l) in self.lambdas.iter().enumerate() {
            let d = (l - lambda).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Dispersion model for the element's index contrast: dn(lambda) = a + b / lambda^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionModel {
    /// Constant term of the Cauchy law (unitless).
    pub cauchy_a: f64,
    /// 1/lambda^2 coefficient (m^2).
    pub cauchy_b: f64,
}

impl Default for DispersionModel {
    fn default() -> Self {
        Self {
            cauchy_a: 0.46,
            cauchy_b: 0.0,
        }
    }
}

impl DispersionModel {
    pub fn delta_n(&self, lambda: f64) -> f64 {
        self.cauchy_a + self.cauchy_b / (lambda * lambda)
    }
}

/// All physical parameters of a simulated capture plus numeric settings.
///
/// Defaults reproduce the reference sensor/optics parameter table exactly
/// (after conversion to SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Shortest band center (m).
    pub lambda_min: f64,
    /// Longest band center (m).
    pub lambda_max: f64,
    /// Number of spectral bands.
    pub n_bands: usize,
    /// Effective focal length (m).
    pub focal_length: f64,
    /// Exposure time (s).
    pub exposure_time: f64,
    /// Aperture diameter (m).
    pub aperture_diameter: f64,
    /// Quantum efficiency in (0, 1].
    pub quantum_efficiency: f64,
    /// Sensor gain (digital counts per electron).
    pub gain: f64,
    /// Full well capacity (electrons).
    pub full_well: f64,
    /// Read noise mean (electrons).
    pub read_noise_mean: f64,
    /// Read noise standard deviation (electrons).
    pub read_noise_std: f64,
    /// Dark current mean (electrons per exposure).
    pub dark_current: f64,
    /// Bit depth per channel.
    pub bpc: u32,
    /// Pupil sample pitch (m).
    pub pupil_pitch: f64,
    /// Sensor pixel pitch (m).
    pub sensor_pitch: f64,
    /// Pupil grid samples per axis (u, v).
    pub pupil_res: (usize, usize),
    /// Sensor pixels per axis (x, y).
    pub sensor_res: (usize, usize),
    /// Index-contrast dispersion model.
    pub doe_delta_n_model: DispersionModel,
    /// Maximum element height (m).
    pub doe_h_max: f64,
    /// Base seed for all stochastic stages.
    pub rng_seed: u64,
    /// Fraction of laser band energy converted to procedural flare.
    pub flare_fraction: f64,
    /// Gaussian smoothing sigma (pupil pixels) applied to the height map
    /// during optimization; 0 disables the reparameterization.
    pub mask_blur_sigma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            lambda_min: 400e-9,
            lambda_max: 700e-9,
            n_bands: 31,
            focal_length: 0.11,
            exposure_time: 0.1,
            aperture_diameter: 11e-3,
            quantum_efficiency: 0.56,
            gain: 0.37,
            full_well: 25500.0,
            read_noise_mean: 390.0,
            read_noise_std: 10.5,
            dark_current: 0.002,
            bpc: 16,
            pupil_pitch: 3.74e-6,
            sensor_pitch: 2.9e-6,
            pupil_res: (2160, 2160),
            sensor_res: (2048, 2048),
            doe_delta_n_model: DispersionModel::default(),
            doe_h_max: 1.6e-6,
            rng_seed: 0,
            flare_fraction: 0.05,
            mask_blur_sigma: 2.0,
        }
    }
}

impl SimConfig {
    /// Reduced-resolution configuration sized so a full optimize/synthesize/restore
    /// cycle completes in minutes: 128x128 pupil, 128x128 sensor, 5 bands.
    ///
    /// The focal length and aperture keep their reference values; pitches are
    /// rescaled so the aperture fits the pupil grid and the diffraction spot
    /// spans several sensor pixels. The gain is raised so that a full well maps
    /// to the top digital count, making saturation observable at 16 bits.
    pub fn desk() -> Self {
        Self {
            lambda_min: 450e-9,
            lambda_max: 650e-9,
            n_bands: 5,
            pupil_pitch: 100e-6,
            sensor_pitch: 1.0e-6,
            pupil_res: (128, 128),
            sensor_res: (128, 128),
            gain: 2.58,
            ..Self::default()
        }
    }

    /// Tiny configuration for gradient checks: 16x16 pupil, 16x16 sensor, 3 bands.
    pub fn probe() -> Self {
        Self {
            lambda_min: 450e-9,
            lambda_max: 650e-9,
            n_bands: 3,
            pupil_pitch: 0.8e-3,
            sensor_pitch: 3.2e-6,
            pupil_res: (16, 16),
            sensor_res: (16, 16),
            gain: 2.58,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> Result<WavelengthGrid> {
        WavelengthGrid::new(self.lambda_min, self.lambda_max, self.n_bands)
    }

    /// Top digital count: 2^bpc - 1.
    pub fn s_sat(&self) -> u32 {
        (1u32 << self.bpc) - 1
    }

    pub fn validate(&self) -> Result<()> {
        fn pos(field: &'static str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DazzleError::ConfigInvalid {
                    field,
                    message: format!("must be strictly positive and finite, got {v}"),
                })
            }
        }
        pos("lambda_min", self.lambda_min)?;
        pos("lambda_max", self.lambda_max)?;
        if self.lambda_min >= self.lambda_max {
            return Err(DazzleError::ConfigInvalid {
                field: "lambda_min",
                message: format!(
                    "lambda_min {} must be < lambda_max {}",
                    self.lambda_min, self.lambda_max
                ),
            });
        }
        if self.n_bands < 2 {
            return Err(DazzleError::ConfigInvalid {
                field: "n_bands",
                message: format!("need at least 2 bands, got {}", self.n_bands),
            });
        }
        pos("focal_length", self.focal_length)?;
        pos("exposure_time", self.exposure_time)?;
        pos("aperture_diameter", self.aperture_diameter)?;
        if !(self.quantum_efficiency > 0.0 && self.quantum_efficiency <= 1.0) {
            return Err(DazzleError::ConfigInvalid {
                field: "quantum_efficiency",
                message: format!("must be in (0, 1], got {}", self.quantum_efficiency),
            });
        }
        pos("gain", self.gain)?;
        pos("full_well", self.full_well)?;
        if self.read_noise_mean < 0.0 || !self.read_noise_mean.is_finite() {
            return Err(DazzleError::ConfigInvalid {
                field: "read_noise_mean",
                message: format!("must be non-negative, got {}", self.read_noise_mean),
            });
        }
        if self.read_noise_std < 0.0 || !self.read_noise_std.is_finite() {
            return Err(DazzleError::ConfigInvalid {
                field: "read_noise_std",
                message: format!("must be non-negative, got {}", self.read_noise_std),
            });
        }
        if self.dark_current < 0.0 || !self.dark_current.is_finite() {
            return Err(DazzleError::ConfigInvalid {
                field: "dark_current",
                message: format!("must be non-negative, got {}", self.dark_current),
            });
        }
        if !(8..=16).contains(&self.bpc) {
            return Err(DazzleError::ConfigInvalid {
                field: "bpc",
                message: format!("must be in 8..=16, got {}", self.bpc),
            });
        }
        pos("pupil_pitch", self.pupil_pitch)?;
        pos("sensor_pitch", self.sensor_pitch)?;
        for (field, n) in [
            ("pupil_res", self.pupil_res.0),
            ("pupil_res", self.pupil_res.1),
            ("sensor_res", self.sensor_res.0),
            ("sensor_res", self.sensor_res.1),
        ] {
            if n < 2 {
                return Err(DazzleError::ConfigInvalid {
                    field,
                    message: format!("resolution must be at least 2, got {n}"),
                });
            }
        }
        pos("doe_h_max", self.doe_h_max)?;
        if self.doe_delta_n_model.delta_n(self.lambda_min) <= 0.0
            || self.doe_delta_n_model.delta_n(self.lambda_max) <= 0.0
        {
            return Err(DazzleError::ConfigInvalid {
                field: "doe_delta_n_model",
                message: "index contrast must stay positive across the grid".to_string(),
            });
        }
        if !(0.0..=1.0).contains(&self.flare_fraction) {
            return Err(DazzleError::ConfigInvalid {
                field: "flare_fraction",
                message: format!("must be in [0, 1], got {}", self.flare_fraction),
            });
        }
        if self.mask_blur_sigma < 0.0 {
            return Err(DazzleError::ConfigInvalid {
                field: "mask_blur_sigma",
                message: format!("must be non-negative, got {}", self.mask_blur_sigma),
            });
        }
        self.grid()?;
        Ok(())
    }

    /// Stable hex digest of every physical field; used to tie captures,
    /// masks, and manifests together.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// JSON schema for config files. Every field is optional; unspecified fields
/// take the reference defaults. Unit-suffixed variants are accepted alongside
/// the bare SI field (supplying both is rejected).
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    lambda_min: Option<f64>,
    lambda_min_nm: Option<f64>,
    lambda_max: Option<f64>,
    lambda_max_nm: Option<f64>,
    n_bands: Option<usize>,
    focal_length: Option<f64>,
    focal_length_mm: Option<f64>,
    exposure_time: Option<f64>,
    exposure_time_ms: Option<f64>,
    aperture_diameter: Option<f64>,
    aperture_diameter_mm: Option<f64>,
    quantum_efficiency: Option<f64>,
    gain: Option<f64>,
    full_well_e: Option<f64>,
    read_noise_mean_e: Option<f64>,
    read_noise_std_e: Option<f64>,
    dark_current_e: Option<f64>,
    bpc: Option<u32>,
    pupil_pitch: Option<f64>,
    pupil_pitch_um: Option<f64>,
    sensor_pitch: Option<f64>,
    sensor_pitch_um: Option<f64>,
    pupil_res: Option<(usize, usize)>,
    sensor_res: Option<(usize, usize)>,
    doe_delta_n_model: Option<DispersionModel>,
    doe_h_max: Option<f64>,
    doe_h_max_um: Option<f64>,
    rng_seed: Option<u64>,
    flare_fraction: Option<f64>,
    mask_blur_sigma: Option<f64>,
}

fn pick(
    field: &'static str,
    si: Option<f64>,
    suffixed: Option<f64>,
    scale: f64,
) -> Result<Option<f64>> {
    match (si, suffixed) {
        (Some(_), Some(_)) => Err(DazzleError::ConfigInvalid {
            field,
            message: "given both as SI and unit-suffixed; pick one".to_string(),
        }),
        (Some(v), None) => Ok(Some(v)),
        (None, Some(v)) => Ok(Some(v * scale)),
        (None, None) => Ok(None),
    }
}

/// Parse a config from JSON text, fill defaults, validate.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let file: ConfigFile =
        serde_json::from_str(text).map_err(|e| DazzleError::ConfigParse(e.to_string()))?;
    let mut cfg = SimConfig::default();

    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                cfg.$field = v;
            }
        };
    }
    set!(lambda_min, pick("lambda_min", file.lambda_min, file.lambda_min_nm, 1e-9)?);
    set!(lambda_max, pick("lambda_max", file.lambda_max, file.lambda_max_nm, 1e-9)?);
    set!(n_bands, file.n_bands);
    set!(
        focal_length,
        pick("focal_length", file.focal_length, file.focal_length_mm, 1e-3)?
    );
    set!(
        exposure_time,
        pick("exposure_time", file.exposure_time, file.exposure_time_ms, 1e-3)?
    );
    set!(
        aperture_diameter,
        pick(
            "aperture_diameter",
            file.aperture_diameter,
            file.aperture_diameter_mm,
            1e-3
        )?
    );
    set!(quantum_efficiency, file.quantum_efficiency);
    set!(gain, file.gain);
    set!(full_well, file.full_well_e);
    set!(read_noise_mean, file.read_noise_mean_e);
    set!(read_noise_std, file.read_noise_std_e);
    set!(dark_current, file.dark_current_e);
    set!(bpc, file.bpc);
    set!(
        pupil_pitch,
        pick("pupil_pitch", file.pupil_pitch, file.pupil_pitch_um, 1e-6)?
    );
    set!(
        sensor_pitch,
        pick("sensor_pitch", file.sensor_pitch, file.sensor_pitch_um, 1e-6)?
    );
    set!(pupil_res, file.pupil_res);
    set!(sensor_res, file.sensor_res);
    set!(doe_delta_n_model, file.doe_delta_n_model);
    set!(doe_h_max, pick("doe_h_max", file.doe_h_max, file.doe_h_max_um, 1e-6)?);
    set!(rng_seed, file.rng_seed);
    set!(flare_fraction, file.flare_fraction);
    set!(mask_blur_sigma, file.mask_blur_sigma);

    if let Ok(seed) = std::env::var("DAZZLE_RNG_SEED") {
        cfg.rng_seed = seed.parse().map_err(|_| DazzleError::ConfigInvalid {
            field: "rng_seed",
            message: format!("DAZZLE_RNG_SEED is not a u64: {seed:?}"),
        })?;
    }

    cfg.validate()?;
    Ok(cfg)
}

/// Load and validate a config file from disk.
pub fn load_config(path: impl AsRef<Path>) -> Result<SimConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DazzleError::io(path, e))?;
    parse_config(&text)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-item seed derivation.
///
/// For a fixed `item_index` the map is a bijection of `base_seed`, and for a
/// fixed `base_seed` a bijection of `item_index`, so distinct inputs along
/// either argument can never collide.
pub fn derive_seed(base_seed: u64, item_index: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(item_index ^ 0xA076_1D64_78BD_642F))
}
