//! On-disk formats: raw float32 buffers with JSON sidecars for height maps
//! and spectral cubes, 16-bit PNG for images, and capture sidecars.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{CaptureMeta, SensorImage};
use crate::error::{DazzleError, Result};
use crate::optics::HeightMap;
use crate::spectral::{RgbImage, SpectralCube};
use crate::WavelengthGrid;

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct HeightMapSidecar {
    n_u: usize,
    n_v: usize,
    pitch_m: f64,
    h_max_m: f64,
}

/// Write a height map as float32 little-endian raw plus a JSON sidecar at
/// `<path>.json`.
pub fn save_height_map(path: impl AsRef<Path>, h: &HeightMap, h_max: f64) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(h.heights.len() * 4);
    for &v in h.heights.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| DazzleError::io(path, e))?;
    let sidecar = HeightMapSidecar {
        n_u: h.heights.ncols(),
        n_v: h.heights.nrows(),
        pitch_m: h.pitch,
        h_max_m: h_max,
    };
    let sc = sidecar_path(path);
    fs::write(&sc, serde_json::to_vec_pretty(&sidecar).unwrap())
        .map_err(|e| DazzleError::io(&sc, e))?;
    Ok(())
}

pub fn load_height_map(path: impl AsRef<Path>) -> Result<HeightMap> {
    let path = path.as_ref();
    let sc = sidecar_path(path);
    let text = fs::read_to_string(&sc).map_err(|e| DazzleError::io(&sc, e))?;
    let sidecar: HeightMapSidecar =
        serde_json::from_str(&text).map_err(|e| DazzleError::Sidecar {
            path: sc.display().to_string(),
            message: e.to_string(),
        })?;
    let mut file = fs::File::open(path).map_err(|e| DazzleError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| DazzleError::io(path, e))?;
    let expected = sidecar.n_u * sidecar.n_v * 4;
    if bytes.len() != expected {
        return Err(DazzleError::Sidecar {
            path: path.display().to_string(),
            message: format!("raw length {} != sidecar shape {}", bytes.len(), expected),
        });
    }
    let mut heights = ndarray::Array2::zeros((sidecar.n_v, sidecar.n_u));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        heights[(i / sidecar.n_u, i % sidecar.n_u)] =
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok(HeightMap {
        heights,
        pitch: sidecar.pitch_m,
    })
}

/// Round a height map through float32, matching what a save/load round trip
/// produces. Dataset synthesis quantizes masks this way so that regeneration
/// from the saved mask file is bit-exact.
pub fn quantize_height_map_f32(h: &HeightMap) -> HeightMap {
    HeightMap {
        heights: h.heights.mapv(|v| v as f32 as f64),
        pitch: h.pitch,
    }
}

#[derive(Serialize, Deserialize)]
struct CubeSidecar {
    width: usize,
    height: usize,
    bands: usize,
    wavelengths_nm: Vec<f64>,
    layout: String,
}

/// Write a spectral cube as float32 little-endian raw plus a JSON sidecar.
pub fn save_cube(path: impl AsRef<Path>, cube: &SpectralCube) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    for &v in &cube.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| DazzleError::io(path, e))?;
    let sidecar = CubeSidecar {
        width: cube.width,
        height: cube.height,
        bands: cube.bands(),
        wavelengths_nm: cube.grid.lambdas().iter().map(|l| l * 1e9).collect(),
        layout: "row-major-band-fastest".to_string(),
    };
    let sc = sidecar_path(path);
    fs::write(&sc, serde_json::to_vec_pretty(&sidecar).unwrap())
        .map_err(|e| DazzleError::io(&sc, e))?;
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let path = path.as_ref();
    let sc = sidecar_path(path);
    let text = fs::read_to_string(&sc).map_err(|e| DazzleError::io(&sc, e))?;
    let sidecar: CubeSidecar = serde_json::from_str(&text).map_err(|e| DazzleError::Sidecar {
        path: sc.display().to_string(),
        message: e.to_string(),
    })?;
    let bytes = fs::read(path).map_err(|e| DazzleError::io(path, e))?;
    let n = sidecar.width * sidecar.height * sidecar.bands;
    if bytes.len() != n * 4 {
        return Err(DazzleError::Sidecar {
            path: path.display().to_string(),
            message: format!("raw length {} != sidecar shape {}", bytes.len(), n * 4),
        });
    }
    let lambda_min = sidecar.wavelengths_nm.first().copied().unwrap_or(0.0) * 1e-9;
    let lambda_max = sidecar.wavelengths_nm.last().copied().unwrap_or(0.0) * 1e-9;
    let grid = WavelengthGrid::new(lambda_min, lambda_max, sidecar.bands)?;
    let mut data = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(SpectralCube {
        width: sidecar.width,
        height: sidecar.height,
        grid,
        data,
    })
}

/// Write an RGB image (values clamped to [0, 1]) as 16-bit PNG.
pub fn save_rgb16(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u16> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_raw(
        img.width as u32,
        img.height as u32,
        data,
    )
    .expect("buffer size matches");
    buf.save(path).map_err(|e| DazzleError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Read any PNG as a [0, 1] RGB image (8- or 16-bit sources).
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| DazzleError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().iter().map(|&v| v as f64 / 65535.0).collect();
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// Write sensor counts as 16-bit PNG plus the capture sidecar at
/// `<path>.json`. Counts are stored verbatim.
pub fn save_sensor_image(path: impl AsRef<Path>, img: &SensorImage) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u16> = img.counts.iter().map(|&c| c.min(65535) as u16).collect();
    let buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_raw(
        img.width as u32,
        img.height as u32,
        data,
    )
    .expect("buffer size matches");
    buf.save(path).map_err(|e| DazzleError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let sc = sidecar_path(path);
    let mut f = fs::File::create(&sc).map_err(|e| DazzleError::io(&sc, e))?;
    f.write_all(serde_json::to_string_pretty(&img.meta).unwrap().as_bytes())
        .map_err(|e| DazzleError::io(&sc, e))?;
    Ok(())
}

pub fn load_sensor_image(path: impl AsRef<Path>) -> Result<SensorImage> {
    let path = path.as_ref();
    let sc = sidecar_path(path);
    let text = fs::read_to_string(&sc).map_err(|e| DazzleError::io(&sc, e))?;
    let meta: CaptureMeta = serde_json::from_str(&text).map_err(|e| DazzleError::Sidecar {
        path: sc.display().to_string(),
        message: e.to_string(),
    })?;
    let img = image::open(path).map_err(|e| DazzleError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let counts = rgb.into_raw().iter().map(|&v| v as u32).collect();
    Ok(SensorImage {
        width: w,
        height: h,
        counts,
        meta,
    })
}

/// Write a 2-D array as a 16-bit grayscale PNG, optionally on a log scale
/// (floor at `max * 10^-log_decades`).
pub fn save_gray16(
    path: impl AsRef<Path>,
    a: &ndarray::Array2<f64>,
    log_decades: Option<f64>,
) -> Result<()> {
    let path = path.as_ref();
    let max = a.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let (h, w) = a.dim();
    let mut data = Vec::with_capacity(w * h);
    for v in a.iter() {
        let t = match log_decades {
            Some(d) => {
                let floor = max * 10f64.powf(-d);
                ((v.max(floor) / floor).log10() / d).clamp(0.0, 1.0)
            }
            None => (v / max).clamp(0.0, 1.0),
        };
        data.push((t * 65535.0).round() as u16);
    }
    let buf =
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, data)
            .expect("buffer size matches");
    buf.save(path).map_err(|e| DazzleError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SimConfig;

    #[test]
    fn height_map_round_trip() {
        let cfg = SimConfig::probe();
        let h = crate::doe_opt::initial_heights(&cfg, 3);
        let q = quantize_height_map_f32(&h);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.raw");
        save_height_map(&p, &q, cfg.doe_h_max).unwrap();
        let back = load_height_map(&p).unwrap();
        assert_eq!(q, back);
        assert_eq!(q.hash(), back.hash());
    }

    #[test]
    fn cube_round_trip() {
        let grid = WavelengthGrid::new(450e-9, 650e-9, 5).unwrap();
        let mut cube = SpectralCube::zeros(4, 3, grid);
        for (i, v) in cube.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin().abs();
        }
        // quantize through f32 for exact comparison
        for v in cube.data.iter_mut() {
            *v = *v as f32 as f64;
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cube.raw");
        save_cube(&p, &cube).unwrap();
        let back = load_cube(&p).unwrap();
        assert_eq!(cube.width, back.width);
        assert_eq!(cube.data, back.data);
    }

    #[test]
    fn rgb_png_round_trip() {
        let img = RgbImage::from_fn(7, 5, |x, y| {
            [
                x as f64 / 6.0,
                y as f64 / 4.0,
                ((x + y) % 2) as f64,
            ]
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        save_rgb16(&p, &img).unwrap();
        let back = load_rgb(&p).unwrap();
        assert_eq!(back.width, 7);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }
}
