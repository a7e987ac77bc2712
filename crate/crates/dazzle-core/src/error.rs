use thiserror::Error;

/// Error type shared across the simulation pipeline.
#[derive(Debug, Error)]
pub enum DazzleError {
    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("config constraint violated: {field}: {message}")]
    ConfigInvalid { field: &'static str, message: String },

    #[error("wavelength grid outside table support: {0}")]
    GridOutsideTable(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("pupil grid too small for aperture: extent {extent_m:.6e} m < aperture {aperture_m:.6e} m")]
    PupilTooSmall { extent_m: f64, aperture_m: f64 },

    #[error(
        "scaled propagation outside stable range: output window ratio {ratio:.4} exceeds 1 \
         (window {window_m:.4e} m vs alias-free extent {period_m:.4e} m at lambda {lambda_m:.3e} m)"
    )]
    PropagationUnstable {
        ratio: f64,
        window_m: f64,
        period_m: f64,
        lambda_m: f64,
    },

    #[error("band {lambda_m:.3e} m not in wavelength grid")]
    BandNotInGrid { lambda_m: f64 },

    #[error("laser spec invalid: {0}")]
    LaserInvalid(String),

    #[error("degenerate mask: in-sensor energy vanished at band {lambda_m:.3e} m")]
    DegenerateMask { lambda_m: f64 },

    #[error("optimizer diverged after {iters} iterations (loss {loss:.3e} > 10x initial {initial:.3e})")]
    Diverged { iters: usize, loss: f64, initial: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid half-ring radii: r1 {r1_m:.4e} m, r2 {r2_m:.4e} m, aperture radius {r_m:.4e} m")]
    InvalidRing { r1_m: f64, r2_m: f64, r_m: f64 },

    #[error("config hash mismatch: image metadata {meta}, supplied {supplied}")]
    ConfigHashMismatch { meta: String, supplied: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Image { path: String, message: String },

    #[error("sidecar error on {path}: {message}")]
    Sidecar { path: String, message: String },

    #[error("scene directory {0} has no readable scenes")]
    NoScenes(String),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, DazzleError>;

impl DazzleError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DazzleError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
