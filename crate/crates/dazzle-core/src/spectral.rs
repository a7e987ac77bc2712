//! Spectral curves, hyperspectral cubes, and RGB conversion in both directions.
//!
//! The RGB->spectrum lift is a per-pixel constrained least squares over a
//! small bank of smooth non-negative Gaussian basis spectra: minimize the
//! coefficient norm subject to matching the color-matching-function
//! projection, with non-negativity enforced by clipped coordinate descent.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cie;
use crate::config::WavelengthGrid;
use crate::error::{DazzleError, Result};

/// Relative spectral curve sampled on a run's wavelength grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralCurve {
    pub grid: WavelengthGrid,
    pub values: Vec<f64>,
}

impl SpectralCurve {
    pub fn new(grid: WavelengthGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_bands() {
            return Err(DazzleError::GridMismatch(format!(
                "curve has {} values for {} bands",
                values.len(),
                grid.n_bands()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Curve that is 1 on every band.
    pub fn unit(grid: &WavelengthGrid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![1.0; grid.n_bands()],
        }
    }

    pub fn value_at_band(&self, band: usize) -> f64 {
        self.values[band]
    }
}

/// H x W x bands volume of non-negative per-band values.
///
/// Layout: row-major over (y, x), band-fastest. The value at (x, y, band) sits
/// at index `(y * width + x) * bands + band`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    pub width: usize,
    pub height: usize,
    pub grid: WavelengthGrid,
    pub data: Vec<f64>,
}

impl SpectralCube {
    pub fn zeros(width: usize, height: usize, grid: WavelengthGrid) -> Self {
        let data = vec![0.0; width * height * grid.n_bands()];
        Self {
            width,
            height,
            grid,
            data,
        }
    }

    pub fn bands(&self) -> usize {
        self.grid.n_bands()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, band: usize) -> usize {
        (y * self.width + x) * self.bands() + band
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, band: usize) -> f64 {
        self.data[self.idx(x, y, band)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, band: usize, v: f64) {
        let i = self.idx(x, y, band);
        self.data[i] = v;
    }

    /// Extract one band as a 2-D array (rows = y).
    pub fn band_plane(&self, band: usize) -> Array2<f64> {
        let b = self.bands();
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            self.data[(y * self.width + x) * b + band]
        })
    }

    pub fn set_band_plane(&mut self, band: usize, plane: &Array2<f64>) {
        let b = self.bands();
        for y in 0..self.height {
            for x in 0..self.width {
                self.data[(y * self.width + x) * b + band] = plane[(y, x)];
            }
        }
    }

    /// Sum of all values in one band.
    pub fn band_energy(&self, band: usize) -> f64 {
        let b = self.bands();
        self.data[band..].iter().step_by(b).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.width * self.height * self.bands() {
            return Err(DazzleError::ShapeMismatch {
                expected: format!("{}", self.width * self.height * self.bands()),
                got: format!("{}", self.data.len()),
            });
        }
        if self.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DazzleError::Other(
                "spectral cube contains negative or non-finite values".to_string(),
            ));
        }
        Ok(())
    }
}

/// Planar RGB image of non-negative reals.
///
/// Layout: row-major over (y, x), channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                img.set(x, y, px);
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = px[0];
        self.data[i + 1] = px[1];
        self.data[i + 2] = px[2];
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mean absolute difference against another image of the same shape.
    pub fn l1_to(&self, other: &RgbImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        s / self.data.len() as f64
    }
}

/// Sample the CIE 1931 color matching functions on `grid`.
pub fn cie_cmf(grid: &WavelengthGrid) -> Result<(SpectralCurve, SpectralCurve, SpectralCurve)> {
    let mut xs = Vec::with_capacity(grid.n_bands());
    let mut ys = Vec::with_capacity(grid.n_bands());
    let mut zs = Vec::with_capacity(grid.n_bands());
    for &l in grid.lambdas() {
        let (x, y, z) = cie::cmf_at(l)?;
        xs.push(x);
        ys.push(y);
        zs.push(z);
    }
    Ok((
        SpectralCurve::new(grid.clone(), xs)?,
        SpectralCurve::new(grid.clone(), ys)?,
        SpectralCurve::new(grid.clone(), zs)?,
    ))
}

/// D65 daylight illuminant on `grid`, normalized so that
/// `sum(values) * delta_lambda == 1`.
pub fn daylight_illuminant(grid: &WavelengthGrid) -> Result<SpectralCurve> {
    let mut vals = Vec::with_capacity(grid.n_bands());
    for &l in grid.lambdas() {
        vals.push(cie::d65_at(l)?);
    }
    let total: f64 = vals.iter().sum::<f64>() * grid.delta_lambda();
    for v in &mut vals {
        *v /= total;
    }
    SpectralCurve::new(grid.clone(), vals)
}

/// Gaussian line shape with unit peak: value at `lambda` of a line centered
/// at `lambda_l` with the given full width at half maximum.
pub fn gaussian_line(lambda: f64, lambda_l: f64, fwhm: f64) -> f64 {
    let sigma = fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt());
    let d = (lambda - lambda_l) / sigma;
    (-0.5 * d * d).exp()
}

/// Narrow laser line sampled on `grid`: unit-peak Gaussian centered at
/// `lambda_l` with FWHM `fwhm`.
pub fn laser_profile(lambda_l: f64, fwhm: f64, grid: &WavelengthGrid) -> Result<SpectralCurve> {
    if !grid.contains(lambda_l) {
        return Err(DazzleError::BandNotInGrid { lambda_m: lambda_l });
    }
    let vals = grid
        .lambdas()
        .iter()
        .map(|&l| gaussian_line(l, lambda_l, fwhm))
        .collect();
    SpectralCurve::new(grid.clone(), vals)
}

/// Per-band projection weights implementing the CMF projection
/// `p_c = sum_i S_i * I_i * cmf_c_i * dl / sum_i I_i * ybar_i * dl`,
/// i.e. the 100-normalized tristimulus formula rescaled so a flat unit
/// spectrum maps to channel-G value 1.
#[derive(Debug, Clone)]
pub struct RgbProjection {
    pub grid: WavelengthGrid,
    /// weights[band] = per-channel weight triple.
    pub weights: Vec<[f64; 3]>,
}

impl RgbProjection {
    pub fn new(grid: &WavelengthGrid, illuminant: &SpectralCurve) -> Result<Self> {
        if illuminant.grid != *grid {
            return Err(DazzleError::GridMismatch(
                "illuminant grid differs from cube grid".to_string(),
            ));
        }
        let (x, y, z) = cie_cmf(grid)?;
        let dl = grid.delta_lambda();
        let denom: f64 = (0..grid.n_bands())
            .map(|i| illuminant.values[i] * y.values[i] * dl)
            .sum();
        if denom <= 0.0 {
            return Err(DazzleError::Other(
                "illuminant has zero ybar-weighted power".to_string(),
            ));
        }
        let weights = (0..grid.n_bands())
            .map(|i| {
                let w = illuminant.values[i] * dl / denom;
                [w * x.values[i], w * y.values[i], w * z.values[i]]
            })
            .collect();
        Ok(Self {
            grid: grid.clone(),
            weights,
        })
    }

    #[inline]
    pub fn project_spectrum(&self, spectrum: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (s, w) in spectrum.iter().zip(&self.weights) {
            out[0] += s * w[0];
            out[1] += s * w[1];
            out[2] += s * w[2];
        }
        out
    }
}

/// Project a hyperspectral cube to RGB under the given illuminant.
pub fn project_hsi_to_rgb(cube: &SpectralCube, illuminant: &SpectralCurve) -> Result<RgbImage> {
    let proj = RgbProjection::new(&cube.grid, illuminant)?;
    let bands = cube.bands();
    let mut img = RgbImage::zeros(cube.width, cube.height);
    img.data
        .par_chunks_mut(cube.width * 3)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..cube.width {
                let base = (y * cube.width + x) * bands;
                let px = proj.project_spectrum(&cube.data[base..base + bands]);
                row[x * 3] = px[0];
                row[x * 3 + 1] = px[1];
                row[x * 3 + 2] = px[2];
            }
        });
    Ok(img)
}

/// Bank of smooth Gaussian bump spectra used by the RGB lift.
#[derive(Debug, Clone)]
pub struct LiftBasis {
    pub grid: WavelengthGrid,
    /// `n_basis` spectra, each `n_bands` long.
    pub spectra: Vec<Vec<f64>>,
    /// 3 x n_basis projection of the basis under the identity illuminant.
    proj: Vec<[f64; 3]>,
}

pub const LIFT_BASIS_SIZE: usize = 8;

impl LiftBasis {
    pub fn new(grid: &WavelengthGrid) -> Result<Self> {
        let k = LIFT_BASIS_SIZE;
        let lo = grid.min();
        let hi = grid.max();
        let centers: Vec<f64> = (0..k)
            .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
            .collect();
        let sigma = (hi - lo) / (k - 1) as f64 * 0.75;
        let spectra: Vec<Vec<f64>> = centers
            .iter()
            .map(|&c| {
                grid.lambdas()
                    .iter()
                    .map(|&l| {
                        let d = (l - c) / sigma;
                        (-0.5 * d * d).exp()
                    })
                    .collect()
            })
            .collect();
        let unit = SpectralCurve::unit(grid);
        let rgbp = RgbProjection::new(grid, &unit)?;
        let proj = spectra.iter().map(|s| rgbp.project_spectrum(s)).collect();
        Ok(Self {
            grid: grid.clone(),
            spectra,
            proj,
        })
    }

    /// Solve for non-negative coefficients whose projection matches `rgb`,
    /// preferring the smallest coefficient norm. Clipped cyclic coordinate
    /// descent on `|A c - rgb|^2 + mu |c|^2` started from zero.
    pub fn solve_coeffs(&self, rgb: [f64; 3]) -> Vec<f64> {
        const MU: f64 = 1e-9;
        const MAX_SWEEPS: usize = 400;
        const TOL: f64 = 1e-14;

        let k = self.proj.len();
        let mut c = vec![0.0; k];
        // residual r = A c - y
        let mut r = [-rgb[0], -rgb[1], -rgb[2]];
        let col_sq: Vec<f64> = self
            .proj
            .iter()
            .map(|a| a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + MU)
            .collect();
        for _ in 0..MAX_SWEEPS {
            let mut max_delta = 0.0f64;
            for j in 0..k {
                let a = self.proj[j];
                let grad = a[0] * r[0] + a[1] * r[1] + a[2] * r[2] + MU * c[j];
                let new = (c[j] - grad / col_sq[j]).max(0.0);
                let d = new - c[j];
                if d != 0.0 {
                    r[0] += a[0] * d;
                    r[1] += a[1] * d;
                    r[2] += a[2] * d;
                    c[j] = new;
                    max_delta = max_delta.max(d.abs());
                }
            }
            if max_delta < TOL {
                break;
            }
        }
        c
    }

    /// Per-band spectra of the min-norm (clip-free) lift of the three unit
    /// RGB inputs: row `b` holds `[S_R(l_b), S_G(l_b), S_B(l_b)]`. Where no
    /// clipping engages, the lift is linear and `spectrum = M * rgb`.
    pub fn min_norm_spectrum_matrix(&self) -> Vec<[f64; 3]> {
        // A A^T (3x3) from the basis projections
        let k = self.proj.len();
        let mut aat = [[0.0f64; 3]; 3];
        for a in &self.proj {
            for i in 0..3 {
                for j in 0..3 {
                    aat[i][j] += a[i] * a[j];
                }
            }
        }
        let inv = invert_3x3(&aat).expect("basis projections span RGB");
        // coefficient matrix C = A^T (A A^T)^-1, k x 3
        let mut coef = vec![[0.0f64; 3]; k];
        for (ci, a) in coef.iter_mut().zip(&self.proj) {
            for j in 0..3 {
                ci[j] = (0..3).map(|i| a[i] * inv[i][j]).sum();
            }
        }
        let n = self.grid.n_bands();
        let mut m = vec![[0.0f64; 3]; n];
        for (kk, basis) in self.spectra.iter().enumerate() {
            for (b, &bv) in basis.iter().enumerate() {
                for j in 0..3 {
                    m[b][j] += coef[kk][j] * bv;
                }
            }
        }
        m
    }

    pub fn spectrum_from_coeffs(&self, c: &[f64]) -> Vec<f64> {
        let n = self.grid.n_bands();
        let mut s = vec![0.0; n];
        for (cj, basis) in c.iter().zip(&self.spectra) {
            if *cj != 0.0 {
                for (si, bi) in s.iter_mut().zip(basis) {
                    *si += cj * bi;
                }
            }
        }
        s
    }
}

/// Inverse of a 3x3 matrix; None when singular.
pub fn invert_3x3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut out = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let a = m[(i + 1) % 3][(j + 1) % 3] * m[(i + 2) % 3][(j + 2) % 3]
                - m[(i + 1) % 3][(j + 2) % 3] * m[(i + 2) % 3][(j + 1) % 3];
            out[j][i] = a * inv_det;
        }
    }
    Some(out)
}

/// Lift an RGB radiance map to a smooth non-negative hyperspectral cube whose
/// identity-illuminant CMF projection reproduces the input.
pub fn lift_rgb_to_hsi(rgb: &RgbImage, grid: &WavelengthGrid) -> Result<SpectralCube> {
    let basis = LiftBasis::new(grid)?;
    let bands = grid.n_bands();
    let mut cube = SpectralCube::zeros(rgb.width, rgb.height, grid.clone());
    cube.data
        .par_chunks_mut(rgb.width * bands)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..rgb.width {
                let px = rgb.get(x, y);
                if px == [0.0, 0.0, 0.0] {
                    continue;
                }
                let c = basis.solve_coeffs(px);
                let s = basis.spectrum_from_coeffs(&c);
                row[x * bands..(x + 1) * bands].copy_from_slice(&s);
            }
        });
    Ok(cube)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn grid31() -> WavelengthGrid {
        SimConfig::default().grid().unwrap()
    }

    #[test]
    fn cmf_ybar_peaks_near_555() {
        let g = grid31();
        let (_, y, _) = cie_cmf(&g).unwrap();
        let i550 = g.band_index(550e-9).unwrap();
        let max = y.values.iter().cloned().fold(0.0f64, f64::max);
        // 555 nm is off-grid; the on-grid max sits at 550 or 560 nm.
        assert!(max >= 0.99 && max <= 1.0);
        assert!(y.values[i550] > 0.9);
        let (_, y555, _) = cie::cmf_at(555e-9).unwrap();
        assert_eq!(y555, 1.0);
    }

    #[test]
    fn cmf_nonnegative_everywhere() {
        let g = grid31();
        let (x, y, z) = cie_cmf(&g).unwrap();
        for c in [&x, &y, &z] {
            assert!(c.values.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn cmf_outside_support_errors() {
        let g = WavelengthGrid::new(200e-9, 900e-9, 8).unwrap();
        assert!(cie_cmf(&g).is_err());
    }

    #[test]
    fn d65_normalized_and_blue_rich() {
        let g = grid31();
        let d = daylight_illuminant(&g).unwrap();
        let total: f64 = d.values.iter().sum::<f64>() * g.delta_lambda();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        let i460 = g.band_index(460e-9).unwrap();
        let i700 = g.band_index(700e-9).unwrap();
        assert!(d.values[i460] > d.values[i700]);
        assert!(d.values.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn laser_profile_peak_fwhm_tail() {
        let l = 550e-9;
        let fwhm = 10e-9;
        assert_eq!(gaussian_line(l, l, fwhm), 1.0);
        assert_relative_eq!(gaussian_line(l + 5e-9, l, fwhm), 0.5, max_relative = 1e-12);
        assert_relative_eq!(gaussian_line(l - 5e-9, l, fwhm), 0.5, max_relative = 1e-12);
        assert!(gaussian_line(l + 20e-9, l, fwhm) < 1e-4);
        assert!(gaussian_line(l - 20e-9, l, fwhm) < 1e-4);

        let g = grid31();
        let curve = laser_profile(l, fwhm, &g).unwrap();
        let i = g.band_index(550e-9).unwrap();
        assert_eq!(curve.values[i], 1.0);
        assert!(laser_profile(300e-9, fwhm, &g).is_err());
    }

    #[test]
    fn projection_zero_and_flat() {
        let g = grid31();
        let unit = SpectralCurve::unit(&g);
        let cube = SpectralCube::zeros(2, 2, g.clone());
        let img = project_hsi_to_rgb(&cube, &unit).unwrap();
        assert!(img.data.iter().all(|v| *v == 0.0));

        let mut flat = SpectralCube::zeros(2, 2, g.clone());
        flat.data.fill(1.0);
        let img = project_hsi_to_rgb(&flat, &unit).unwrap();
        // Channel G is exactly 1 by construction of the normalization.
        for y in 0..2 {
            for x in 0..2 {
                assert_relative_eq!(img.get(x, y)[1], 1.0, max_relative = 1e-12);
            }
        }
        // Also holds for a non-flat illuminant.
        let d65 = daylight_illuminant(&g).unwrap();
        let img = project_hsi_to_rgb(&flat, &d65).unwrap();
        assert_relative_eq!(img.get(0, 0)[1], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn monochromatic_green_beats_blue() {
        let g = grid31();
        let unit = SpectralCurve::unit(&g);
        let mut cube = SpectralCube::zeros(1, 1, g.clone());
        let i = g.band_index(550e-9).unwrap();
        cube.set(0, 0, i, 1.0);
        let px = project_hsi_to_rgb(&cube, &unit).unwrap().get(0, 0);
        assert!(px[1] > px[2], "G {} should exceed B {}", px[1], px[2]);
    }

    #[test]
    fn lift_black_is_zero() {
        let g = grid31();
        let img = RgbImage::zeros(3, 3);
        let cube = lift_rgb_to_hsi(&img, &g).unwrap();
        assert!(cube.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lift_gray_round_trip() {
        let g = grid31();
        let img = RgbImage::from_fn(1, 1, |_, _| [0.5, 0.5, 0.5]);
        let cube = lift_rgb_to_hsi(&img, &g).unwrap();
        assert!(cube.data.iter().all(|v| *v >= 0.0));
        let unit = SpectralCurve::unit(&g);
        let back = project_hsi_to_rgb(&cube, &unit).unwrap().get(0, 0);
        for c in 0..3 {
            assert_relative_eq!(back[c], 0.5, max_relative = 1e-3);
        }
    }

    #[test]
    fn lift_red_dominant_mass_above_580() {
        let g = grid31();
        let img = RgbImage::from_fn(1, 1, |_, _| [0.8, 0.1, 0.1]);
        let cube = lift_rgb_to_hsi(&img, &g).unwrap();
        let mut below = 0.0;
        let mut above = 0.0;
        for (i, &l) in g.lambdas().iter().enumerate() {
            if l > 580e-9 {
                above += cube.get(0, 0, i);
            } else {
                below += cube.get(0, 0, i);
            }
        }
        assert!(
            above > below,
            "expected red-end mass to dominate: above {above}, below {below}"
        );
    }

    #[test]
    fn lift_is_positively_homogeneous() {
        let g = grid31();
        let basis = LiftBasis::new(&g).unwrap();
        let unit = SpectralCurve::unit(&g);
        let proj = RgbProjection::new(&g, &unit).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            // Feasible target: project a random non-negative basis combination.
            let c: Vec<f64> = (0..LIFT_BASIS_SIZE).map(|_| rng.random::<f64>()).collect();
            let y = proj.project_spectrum(&basis.spectrum_from_coeffs(&c));
            let a = rng.random::<f64>();
            let s1 = basis.spectrum_from_coeffs(&basis.solve_coeffs(y));
            let s2 = basis.spectrum_from_coeffs(&basis.solve_coeffs([
                a * y[0],
                a * y[1],
                a * y[2],
            ]));
            for (v1, v2) in s1.iter().zip(&s2) {
                assert_relative_eq!(a * v1, *v2, max_relative = 1e-6, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn lift_round_trip_feasible_triples() {
        // Criterion-style round trip over randomly generated in-gamut triples.
        let g = grid31();
        let basis = LiftBasis::new(&g).unwrap();
        let unit = SpectralCurve::unit(&g);
        let proj = RgbProjection::new(&g, &unit).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let c: Vec<f64> = (0..LIFT_BASIS_SIZE).map(|_| rng.random::<f64>()).collect();
            let y = proj.project_spectrum(&basis.spectrum_from_coeffs(&c));
            let s = basis.spectrum_from_coeffs(&basis.solve_coeffs(y));
            let back = proj.project_spectrum(&s);
            for ch in 0..3 {
                let denom = y[ch].abs().max(1e-9);
                worst = worst.max((back[ch] - y[ch]).abs() / denom);
            }
        }
        assert!(worst <= 1e-3, "worst relative round-trip error {worst}");
    }
}
