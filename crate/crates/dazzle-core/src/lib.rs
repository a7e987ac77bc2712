//! Hyperspectral wave-optics camera simulation and diffractive-element
//! optimization for laser-dazzle protection.
//!
//! The pipeline: RGB scenes are lifted to hyperspectral radiance, blurred by
//! per-band PSFs of a pupil-plane phase element, combined with a narrowband
//! laser term, pushed through a photon/electron/noise/digitization chain into
//! integer sensor images, and restored with Wiener deconvolution plus
//! harmonic inpainting. A gradient optimizer shapes the element's height map
//! to suppress laser peaks while preserving scene throughput.

pub mod camera;
pub mod cie;
pub mod config;
pub mod datagen;
pub mod doe_opt;
pub mod error;
pub mod eval;
pub mod fftutil;
pub mod imgutil;
pub mod io;
pub mod metrics;
pub mod optics;
pub mod restore;
pub mod spectral;

pub use config::{derive_seed, load_config, SimConfig, WavelengthGrid};
pub use error::{DazzleError, Result};
