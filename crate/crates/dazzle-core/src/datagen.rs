//! Scenario sampling and batch synthesis of (sensor image, ground truth)
//! pairs, with a manifest that makes every item bit-exactly regenerable.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{
    expose_with, CaptureContext, IlluminationSpec, LaserSpec, NoiseSpec, SensorImage,
};
use crate::config::{derive_seed, SimConfig};
use crate::error::{DazzleError, Result};
use crate::imgutil::resize_rgb;
use crate::io;
use crate::optics::HeightMap;
use crate::spectral::{daylight_illuminant, lift_rgb_to_hsi, RgbImage};

const ALPHA_TABLE_SEED: u64 = 0x00A1_FA00_7AB1_E000;
const ALPHA_TABLE_LEN: usize = 100_000;

/// Marginal distributions of capture scenarios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioDistribution {
    /// Predetermined laser strengths, sampled uniformly by index.
    #[serde(skip, default = "default_alpha_table")]
    pub alpha_l_table: Vec<f64>,
    /// Probability of a laser-free item.
    pub p_laser_free: f64,
    /// Laser central wavelength range (m).
    pub lambda_range: (f64, f64),
    /// Per-axis standard deviation of the incidence components.
    pub sigma_incidence: (f64, f64),
    pub alpha_b_range: (f64, f64),
    pub mu_r_range: (f64, f64),
    pub sigma_r_range: (f64, f64),
    /// Photon mean-scale range (the c1 modulation coefficient).
    pub c1_range: (f64, f64),
    /// When true, force the photon mean scale to 1 (physically consistent
    /// Gaussian approximation) instead of sampling `c1_range`.
    pub physical_photon_mean: bool,
    pub c2_range: (f64, f64),
    /// Dark current mean; sampled normally with std = mean/2.
    pub mu_c_mean: f64,
    /// Exposure time mean (s); sampled normally with std = mean/10.
    pub exposure_mean: f64,
}

fn default_alpha_table() -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(ALPHA_TABLE_SEED);
    (0..ALPHA_TABLE_LEN)
        .map(|_| rng.random::<f64>() * 2e6)
        .collect()
}

impl ScenarioDistribution {
    /// Reference marginals bound to a config's grid and geometry. The
    /// incidence sigma is set so that three standard deviations of the
    /// focal-plane shift equal 0.36 of the sensor extent per axis; pass
    /// `paper_literal_shift` to use the 0.36 * f / W_s reading instead.
    pub fn for_config(cfg: &SimConfig, paper_literal_shift: bool) -> Result<Self> {
        let grid = cfg.grid()?;
        let extent_x = cfg.sensor_res.0 as f64 * cfg.sensor_pitch;
        let extent_y = cfg.sensor_res.1 as f64 * cfg.sensor_pitch;
        let sigma = if paper_literal_shift {
            (
                0.36 * cfg.focal_length / extent_x / 3.0,
                0.36 * cfg.focal_length / extent_y / 3.0,
            )
        } else {
            // shift = f * n, so sigma_n = 0.36 * extent / (3 f)
            (
                0.36 * extent_x / (3.0 * cfg.focal_length),
                0.36 * extent_y / (3.0 * cfg.focal_length),
            )
        };
        Ok(Self {
            alpha_l_table: default_alpha_table(),
            p_laser_free: 1.0 / 7.0,
            lambda_range: (grid.min().max(400e-9), grid.max().min(700e-9)),
            sigma_incidence: sigma,
            alpha_b_range: (0.3, 0.7),
            mu_r_range: (350.0, 400.0),
            sigma_r_range: (10.0, 11.0),
            c1_range: (0.0, 0.25),
            physical_photon_mean: false,
            c2_range: (0.9, 1.1),
            mu_c_mean: 0.002,
            exposure_mean: 0.1,
        })
    }
}

/// One sampled capture scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub laser: LaserSpec,
    pub alpha_b: f64,
    pub noise: NoiseSpec,
    pub exposure_time: f64,
}

/// Deterministically draw one scenario. The draw order is fixed (laser-free
/// flag, strength index, wavelength, incidence, background, read noise,
/// photon coefficients, dark current, exposure), so equal seeds give equal
/// scenarios forever.
pub fn sample_scenario(dist: &ScenarioDistribution, seed: u64) -> Scenario {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let laser_free = rng.random::<f64>() < dist.p_laser_free;
    let idx = rng.random_range(0..dist.alpha_l_table.len());
    let alpha_l = if laser_free {
        0.0
    } else {
        dist.alpha_l_table[idx]
    };
    let lambda_l =
        dist.lambda_range.0 + rng.random::<f64>() * (dist.lambda_range.1 - dist.lambda_range.0);
    let n_u = Normal::new(0.0, dist.sigma_incidence.0)
        .unwrap()
        .sample(&mut rng);
    let n_v = Normal::new(0.0, dist.sigma_incidence.1)
        .unwrap()
        .sample(&mut rng);
    // keep the footprint within the validity bound (a >5-sigma event)
    let clamp_n = |v: f64, sigma: f64| v.clamp(-5.0 * sigma, 5.0 * sigma);
    let uniform = |rng: &mut ChaCha12Rng, (lo, hi): (f64, f64)| lo + rng.random::<f64>() * (hi - lo);
    let alpha_b = uniform(&mut rng, dist.alpha_b_range);
    let mu_r = uniform(&mut rng, dist.mu_r_range);
    let sigma_r = uniform(&mut rng, dist.sigma_r_range);
    let c1 = uniform(&mut rng, dist.c1_range);
    let c2 = uniform(&mut rng, dist.c2_range);
    let mu_c = Normal::new(dist.mu_c_mean, dist.mu_c_mean / 2.0)
        .unwrap()
        .sample(&mut rng)
        .max(0.0);
    let exposure = Normal::new(dist.exposure_mean, dist.exposure_mean / 10.0)
        .unwrap()
        .sample(&mut rng)
        .max(1e-4);
    Scenario {
        laser: LaserSpec {
            lambda_l,
            alpha_l,
            incidence: (
                clamp_n(n_u, dist.sigma_incidence.0),
                clamp_n(n_v, dist.sigma_incidence.1),
            ),
            fwhm: 10e-9,
        },
        alpha_b,
        noise: NoiseSpec {
            mean_scale: if dist.physical_photon_mean { 1.0 } else { c1 },
            c2,
            dark_current: mu_c,
            read_noise_mean: mu_r,
            read_noise_std: sigma_r,
            enable_photon: true,
            enable_dark: true,
            enable_read: true,
            enable_quantization: true,
            enable_flare: true,
        },
        exposure_time: exposure,
    }
}

/// Manifest header line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub base_seed: u64,
    pub config_hash: String,
    pub mask_hash: String,
    pub n_items: usize,
    /// Pairs are optionally downsampled to this edge length.
    pub downsample: Option<usize>,
}

/// Manifest row: everything needed to regenerate one item bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: usize,
    pub seed: u64,
    pub scene_file: String,
    pub crop_x: usize,
    pub crop_y: usize,
    pub scenario: Scenario,
    pub sensor_png: String,
    pub gt_png: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    /// JSON-lines layout: a header object, then one object per item.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        text.push_str(&serde_json::to_string(&self.header).unwrap());
        text.push('\n');
        for item in &self.items {
            text.push_str(&serde_json::to_string(item).unwrap());
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| DazzleError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DazzleError::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| DazzleError::Other("empty manifest".to_string()))?,
        )
        .map_err(|e| DazzleError::Sidecar {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut items = Vec::new();
        for line in lines {
            items.push(serde_json::from_str(line).map_err(|e| DazzleError::Sidecar {
                path: path.display().to_string(),
                message: e.to_string(),
            })?);
        }
        Ok(Self { header, items })
    }
}

/// Sorted list of readable scenes (name, image) that are at least the sensor
/// size; unreadable or undersized files are skipped with a warning.
fn load_scene_dir(scene_dir: &Path, cfg: &SimConfig) -> Result<Vec<(String, RgbImage)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(scene_dir)
        .map_err(|e| DazzleError::io(scene_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    let mut scenes = Vec::new();
    for p in names {
        match io::load_rgb(&p) {
            Ok(img) => {
                if img.width >= cfg.sensor_res.0 && img.height >= cfg.sensor_res.1 {
                    scenes.push((p.file_name().unwrap().to_string_lossy().to_string(), img));
                } else {
                    eprintln!(
                        "warning: scene {} is {}x{}, smaller than the sensor; skipped",
                        p.display(),
                        img.width,
                        img.height
                    );
                }
            }
            Err(e) => eprintln!("warning: scene {} unreadable ({e}); skipped", p.display()),
        }
    }
    if scenes.is_empty() {
        return Err(DazzleError::NoScenes(scene_dir.display().to_string()));
    }
    Ok(scenes)
}

fn crop_rgb(img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
    let mut out = RgbImage::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(x + x0, y + y0));
        }
    }
    out
}

/// Number of digital counts a normalized value maps to when a downsampled
/// sensor image is re-quantized.
fn requantize(img: &RgbImage, s_sat: u32) -> Vec<u32> {
    img.data
        .iter()
        .map(|&v| ((v.clamp(0.0, 1.0) * s_sat as f64).round() as u64).min(s_sat as u64) as u32)
        .collect()
}

struct ItemBuild {
    item: ManifestItem,
    sensor: SensorImage,
    gt: RgbImage,
}

fn build_item(
    index: usize,
    base_seed: u64,
    scene_name: &str,
    scene: &RgbImage,
    scenario: Scenario,
    ctx: &CaptureContext,
    illuminant: &crate::spectral::SpectralCurve,
    downsample: Option<usize>,
    random_crop: bool,
) -> Result<ItemBuild> {
    let cfg = &ctx.cfg;
    let item_seed = derive_seed(base_seed, index as u64);
    let (nx, ny) = cfg.sensor_res;
    let (crop_x, crop_y) = if random_crop {
        let mut crop_rng = ChaCha12Rng::seed_from_u64(derive_seed(item_seed, 1));
        (
            crop_rng.random_range(0..=scene.width - nx),
            crop_rng.random_range(0..=scene.height - ny),
        )
    } else {
        ((scene.width - nx) / 2, (scene.height - ny) / 2)
    };
    let mut gt = crop_rgb(scene, crop_x, crop_y, nx, ny);
    gt.clamp01();
    let cube = lift_rgb_to_hsi(&gt, &ctx.coded.grid)?;
    let illum = IlluminationSpec {
        alpha_b: scenario.alpha_b,
        illuminant: illuminant.clone(),
    };
    let expose_seed = derive_seed(item_seed, 2);
    let mut sensor = expose_with(
        ctx,
        &cube,
        &scenario.laser,
        &illum,
        &scenario.noise,
        scenario.exposure_time,
        expose_seed,
        None,
    )?;
    if let Some(edge) = downsample {
        let norm = sensor.normalized();
        let small = resize_rgb(&norm, edge, edge);
        sensor = SensorImage {
            width: edge,
            height: edge,
            counts: requantize(&small, sensor.meta.s_sat),
            meta: sensor.meta,
        };
        gt = resize_rgb(&gt, edge, edge);
        gt.clamp01();
    }
    Ok(ItemBuild {
        item: ManifestItem {
            index,
            seed: item_seed,
            scene_file: scene_name.to_string(),
            crop_x,
            crop_y,
            scenario,
            sensor_png: format!("items/item_{index:06}_sensor.png"),
            gt_png: format!("items/item_{index:06}_gt.png"),
        },
        sensor,
        gt,
    })
}

/// Synthesize `n_items` (sensor, ground-truth) pairs from the scenes in
/// `scene_dir` under the sampled scenario distribution. Items are
/// independent; they run on the worker pool and the manifest rows are
/// written in index order.
pub fn synth_dataset(
    scene_dir: impl AsRef<Path>,
    mask: &HeightMap,
    dist: &ScenarioDistribution,
    n_items: usize,
    out_dir: impl AsRef<Path>,
    cfg: &SimConfig,
    downsample: Option<usize>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("items")).map_err(|e| DazzleError::io(out_dir, e))?;
    let quantized = io::quantize_height_map_f32(mask);
    let ctx = CaptureContext::new(cfg, &quantized)?;
    let scenes = load_scene_dir(scene_dir.as_ref(), cfg)?;
    let grid = cfg.grid()?;
    let illuminant = daylight_illuminant(&grid)?;
    let base_seed = cfg.rng_seed;

    // round-robin over a seeded shuffle of the scene list
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(base_seed, 0x5CE_EE));
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.random_range(0..=i);
        order.swap(i, j);
    }

    let builds: Result<Vec<ItemBuild>> = (0..n_items)
        .into_par_iter()
        .map(|k| {
            let (name, scene) = &scenes[order[k % scenes.len()]];
            let scenario = sample_scenario(dist, derive_seed(derive_seed(base_seed, k as u64), 0));
            build_item(
                k,
                base_seed,
                name,
                scene,
                scenario,
                &ctx,
                &illuminant,
                downsample,
                true,
            )
        })
        .collect();
    let mut builds = builds?;
    builds.sort_by_key(|b| b.item.index);

    for b in &builds {
        io::save_sensor_image(out_dir.join(&b.item.sensor_png), &b.sensor)?;
        io::save_rgb16(out_dir.join(&b.item.gt_png), &b.gt)?;
    }
    let manifest = DatasetManifest {
        header: ManifestHeader {
            base_seed,
            config_hash: cfg.hash(),
            mask_hash: quantized.hash(),
            n_items,
            downsample,
        },
        items: builds.into_iter().map(|b| b.item).collect(),
    };
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// The seven evaluation strengths: 0 and the six powers of ten up to 1e6.
pub const TEST_GRID_STRENGTHS: [f64; 7] =
    [0.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6];

/// Fixed evaluation scenario at one strength: reference noise values, full
/// background, seeded wavelength and incidence.
fn test_grid_scenario(dist: &ScenarioDistribution, seed: u64, alpha_l: f64) -> Scenario {
    let mut s = sample_scenario(dist, seed);
    s.laser.alpha_l = alpha_l;
    s.alpha_b = 0.7;
    s.noise.mean_scale = 0.2;
    s.noise.c2 = 1.0;
    s.noise.dark_current = 0.002;
    s.noise.read_noise_mean = 390.0;
    s.noise.read_noise_std = 10.5;
    s.exposure_time = dist.exposure_mean;
    s
}

/// The fixed evaluation grid: every scene crossed with the seven strengths,
/// other parameters pinned to the reference evaluation values.
pub fn test_grid(
    scene_dir: impl AsRef<Path>,
    mask: &HeightMap,
    cfg: &SimConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("items")).map_err(|e| DazzleError::io(out_dir, e))?;
    let quantized = io::quantize_height_map_f32(mask);
    let ctx = CaptureContext::new(cfg, &quantized)?;
    let scenes = load_scene_dir(scene_dir.as_ref(), cfg)?;
    let grid = cfg.grid()?;
    let illuminant = daylight_illuminant(&grid)?;
    let dist = ScenarioDistribution::for_config(cfg, false)?;
    let base_seed = cfg.rng_seed;

    let mut jobs = Vec::new();
    for (si, _) in scenes.iter().enumerate() {
        for (ai, &alpha_l) in TEST_GRID_STRENGTHS.iter().enumerate() {
            jobs.push((si * TEST_GRID_STRENGTHS.len() + ai, si, alpha_l));
        }
    }
    let builds: Result<Vec<ItemBuild>> = jobs
        .par_iter()
        .map(|&(index, si, alpha_l)| {
            let (name, scene) = &scenes[si];
            let scenario = test_grid_scenario(
                &dist,
                derive_seed(derive_seed(base_seed, index as u64), 0),
                alpha_l,
            );
            build_item(
                index, base_seed, name, scene, scenario, &ctx, &illuminant, None, false,
            )
        })
        .collect();
    let mut builds = builds?;
    builds.sort_by_key(|b| b.item.index);
    for b in &builds {
        io::save_sensor_image(out_dir.join(&b.item.sensor_png), &b.sensor)?;
        io::save_rgb16(out_dir.join(&b.item.gt_png), &b.gt)?;
    }
    let manifest = DatasetManifest {
        header: ManifestHeader {
            base_seed,
            config_hash: cfg.hash(),
            mask_hash: quantized.hash(),
            n_items: builds.len(),
            downsample: None,
        },
        items: builds.into_iter().map(|b| b.item).collect(),
    };
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Rebuild one manifest item from scratch; used to verify bit-exact
/// regeneration.
pub fn regenerate_item(
    manifest: &DatasetManifest,
    item: &ManifestItem,
    scene_dir: impl AsRef<Path>,
    mask: &HeightMap,
    cfg: &SimConfig,
) -> Result<SensorImage> {
    let quantized = io::quantize_height_map_f32(mask);
    if quantized.hash() != manifest.header.mask_hash {
        return Err(DazzleError::ConfigHashMismatch {
            meta: manifest.header.mask_hash.clone(),
            supplied: quantized.hash(),
        });
    }
    let ctx = CaptureContext::new(cfg, &quantized)?;
    let grid = cfg.grid()?;
    let illuminant = daylight_illuminant(&grid)?;
    let scene = io::load_rgb(scene_dir.as_ref().join(&item.scene_file))?;
    let (nx, ny) = cfg.sensor_res;
    let mut gt = crop_rgb(&scene, item.crop_x, item.crop_y, nx, ny);
    gt.clamp01();
    let cube = lift_rgb_to_hsi(&gt, &grid)?;
    let illum = IlluminationSpec {
        alpha_b: item.scenario.alpha_b,
        illuminant,
    };
    let mut sensor = expose_with(
        &ctx,
        &cube,
        &item.scenario.laser,
        &illum,
        &item.scenario.noise,
        item.scenario.exposure_time,
        derive_seed(item.seed, 2),
        None,
    )?;
    if let Some(edge) = manifest.header.downsample {
        let norm = sensor.normalized();
        let small = resize_rgb(&norm, edge, edge);
        sensor = SensorImage {
            width: edge,
            height: edge,
            counts: requantize(&small, sensor.meta.s_sat),
            meta: sensor.meta,
        };
    }
    Ok(sensor)
}

/// In-process pair source: the same sampling and capture chain as
/// [`synth_dataset`], without touching disk. Item `k` here equals item `k`
/// of a materialized run over the same inputs.
pub struct OnlineSynth {
    ctx: CaptureContext,
    scenes: Vec<(String, RgbImage)>,
    order: Vec<usize>,
    dist: ScenarioDistribution,
    illuminant: crate::spectral::SpectralCurve,
    base_seed: u64,
}

impl OnlineSynth {
    pub fn new(
        scene_dir: impl AsRef<Path>,
        mask: &HeightMap,
        dist: ScenarioDistribution,
        cfg: &SimConfig,
    ) -> Result<Self> {
        let quantized = io::quantize_height_map_f32(mask);
        let ctx = CaptureContext::new(cfg, &quantized)?;
        let scenes = load_scene_dir(scene_dir.as_ref(), cfg)?;
        let grid = cfg.grid()?;
        let illuminant = daylight_illuminant(&grid)?;
        let base_seed = cfg.rng_seed;
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(base_seed, 0x5CE_EE));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        Ok(Self {
            ctx,
            scenes,
            order,
            dist,
            illuminant,
            base_seed,
        })
    }

    /// Synthesize item `index` on the fly.
    pub fn item(&self, index: usize) -> Result<(SensorImage, RgbImage)> {
        let (name, scene) = &self.scenes[self.order[index % self.scenes.len()]];
        let scenario = sample_scenario(
            &self.dist,
            derive_seed(derive_seed(self.base_seed, index as u64), 0),
        );
        let b = build_item(
            index,
            self.base_seed,
            name,
            scene,
            scenario,
            &self.ctx,
            &self.illuminant,
            None,
            true,
        )?;
        Ok((b.sensor, b.gt))
    }

    /// Iterator over the first `n` items.
    pub fn take(&self, n: usize) -> impl Iterator<Item = Result<(SensorImage, RgbImage)>> + '_ {
        (0..n).map(move |k| self.item(k))
    }
}

/// Procedural in-gamut scene generator: smooth mixtures of colors drawn from
/// the lift basis's reachable set, so lifted spectra reproject exactly.
pub fn synthetic_scenes(
    dir: impl AsRef<Path>,
    count: usize,
    width: usize,
    height: usize,
    seed: u64,
    grid: &crate::config::WavelengthGrid,
) -> Result<Vec<PathBuf>> {
    use crate::spectral::{LiftBasis, RgbProjection, SpectralCurve, LIFT_BASIS_SIZE};
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| DazzleError::io(dir, e))?;
    let basis = LiftBasis::new(grid)?;
    let proj = RgbProjection::new(grid, &SpectralCurve::unit(grid))?;
    let mut paths = Vec::with_capacity(count);
    for s in 0..count {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, s as u64));
        let n_colors = rng.random_range(3..=5);
        let palette: Vec<[f64; 3]> = (0..n_colors)
            .map(|_| {
                let coefs: Vec<f64> =
                    (0..LIFT_BASIS_SIZE).map(|_| rng.random::<f64>()).collect();
                let mut c = proj.project_spectrum(&basis.spectrum_from_coeffs(&coefs));
                let maxc = c.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
                let level = 0.25 + 0.65 * rng.random::<f64>();
                for v in &mut c {
                    *v = *v / maxc * level;
                }
                c
            })
            .collect();
        // smooth weight fields: random low-frequency cosine mixtures
        let fields: Vec<[f64; 5]> = (0..n_colors)
            .map(|_| {
                [
                    rng.random::<f64>() * 4.0 - 2.0,
                    rng.random::<f64>() * 4.0 - 2.0,
                    rng.random::<f64>() * std::f64::consts::TAU,
                    rng.random::<f64>() * 4.0 - 2.0,
                    rng.random::<f64>() * std::f64::consts::TAU,
                ]
            })
            .collect();
        let img = RgbImage::from_fn(width, height, |x, y| {
            let fx = x as f64 / width as f64;
            let fy = y as f64 / height as f64;
            let mut weights = Vec::with_capacity(n_colors);
            let mut total = 0.0;
            for f in &fields {
                let v = (f[0] * fx + f[1] * fy + f[2]).cos()
                    + (f[3] * (fx - fy) + f[4]).cos();
                let w = (1.6 * v).exp();
                weights.push(w);
                total += w;
            }
            let mut px = [0.0; 3];
            for (w, color) in weights.iter().zip(&palette) {
                for c in 0..3 {
                    px[c] += w / total * color[c];
                }
            }
            px
        });
        let path = dir.join(format!("scene_{s:03}.png"));
        io::save_rgb16(&path, &img)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_dist() -> ScenarioDistribution {
        ScenarioDistribution::for_config(&SimConfig::desk(), false).unwrap()
    }

    #[test]
    fn scenario_sampling_deterministic() {
        let dist = desk_dist();
        assert_eq!(sample_scenario(&dist, 42), sample_scenario(&dist, 42));
        assert_ne!(sample_scenario(&dist, 42), sample_scenario(&dist, 43));
    }

    #[test]
    fn alpha_b_mean_matches_uniform() {
        let dist = desk_dist();
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|i| sample_scenario(&dist, derive_seed(7, i)).alpha_b)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "alpha_b mean {mean}");
    }

    #[test]
    fn incidence_three_sigma_matches_fraction() {
        let cfg = SimConfig::desk();
        let dist = desk_dist();
        let n = 100_000;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let s = sample_scenario(&dist, derive_seed(11, i));
            sum_sq += s.laser.incidence.0 * s.laser.incidence.0;
        }
        let sigma = (sum_sq / n as f64).sqrt();
        let three_sigma_shift = 3.0 * sigma * cfg.focal_length;
        let want = 0.36 * cfg.sensor_res.0 as f64 * cfg.sensor_pitch;
        assert!(
            (three_sigma_shift - want).abs() / want < 0.05,
            "3-sigma shift {three_sigma_shift:.4e} vs {want:.4e}"
        );
    }

    fn ks_uniform(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d = 0.0f64;
        for (i, &x) in samples.iter().enumerate() {
            let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            let lo_e = i as f64 / n;
            let hi_e = (i + 1) as f64 / n;
            d = d.max((f - lo_e).abs()).max((f - hi_e).abs());
        }
        d
    }

    #[test]
    fn uniform_marginals_pass_ks() {
        let dist = desk_dist();
        let n = 100_000usize;
        let mut alpha_b = Vec::with_capacity(n);
        let mut mu_r = Vec::with_capacity(n);
        let mut sigma_r = Vec::with_capacity(n);
        let mut c1 = Vec::with_capacity(n);
        let mut c2 = Vec::with_capacity(n);
        let mut lambda = Vec::with_capacity(n);
        for i in 0..n {
            let s = sample_scenario(&dist, derive_seed(23, i as u64));
            alpha_b.push(s.alpha_b);
            mu_r.push(s.noise.read_noise_mean);
            sigma_r.push(s.noise.read_noise_std);
            c1.push(s.noise.mean_scale);
            c2.push(s.noise.c2);
            lambda.push(s.laser.lambda_l);
        }
        // alpha = 0.01 critical value for the one-sample KS statistic
        let crit = 1.628 / (n as f64).sqrt();
        assert!(ks_uniform(&mut alpha_b, 0.3, 0.7) < crit);
        assert!(ks_uniform(&mut mu_r, 350.0, 400.0) < crit);
        assert!(ks_uniform(&mut sigma_r, 10.0, 11.0) < crit);
        assert!(ks_uniform(&mut c1, 0.0, 0.25) < crit);
        assert!(ks_uniform(&mut c2, 0.9, 1.1) < crit);
        assert!(ks_uniform(&mut lambda, 450e-9, 650e-9) < crit);
    }

    #[test]
    fn normal_marginals_pass_ks() {
        let dist = desk_dist();
        let n = 100_000usize;
        let mut exposure = Vec::with_capacity(n);
        let mut incidence = Vec::with_capacity(n);
        for i in 0..n {
            let s = sample_scenario(&dist, derive_seed(29, i as u64));
            exposure.push(s.exposure_time);
            incidence.push(s.laser.incidence.1);
        }
        let phi = |x: f64| 0.5 * (1.0 + erf(x / 2f64.sqrt()));
        let crit = 1.628 / (n as f64).sqrt();
        exposure.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d = 0.0f64;
        for (i, &x) in exposure.iter().enumerate() {
            let f = phi((x - 0.1) / 0.01);
            d = d
                .max((f - i as f64 / n as f64).abs())
                .max((f - (i + 1) as f64 / n as f64).abs());
        }
        assert!(d < crit, "exposure KS {d} vs {crit}");
        incidence.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sigma = dist.sigma_incidence.1;
        let mut d = 0.0f64;
        for (i, &x) in incidence.iter().enumerate() {
            let f = phi(x / sigma);
            d = d
                .max((f - i as f64 / n as f64).abs())
                .max((f - (i + 1) as f64 / n as f64).abs());
        }
        assert!(d < crit, "incidence KS {d} vs {crit}");
    }

    // error function via Abramowitz-Stegun 7.1.26, plenty for KS use
    fn erf(x: f64) -> f64 {
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
                + 0.254829592)
                * t
                * (-x * x).exp();
        sign * y
    }

    #[test]
    fn laser_free_fraction_near_one_seventh() {
        let dist = desk_dist();
        let n = 70_000;
        let free = (0..n)
            .filter(|&i| sample_scenario(&dist, derive_seed(31, i)).laser.alpha_l == 0.0)
            .count();
        let frac = free as f64 / n as f64;
        assert!((frac - 1.0 / 7.0).abs() < 0.01, "laser-free fraction {frac}");
    }

    #[test]
    fn alpha_table_values_in_range() {
        let dist = desk_dist();
        assert_eq!(dist.alpha_l_table.len(), ALPHA_TABLE_LEN);
        assert!(dist
            .alpha_l_table
            .iter()
            .all(|&v| (0.0..=2e6).contains(&v)));
    }

    #[test]
    fn empty_dataset() {
        let cfg = SimConfig::probe();
        let dir = tempfile::tempdir().unwrap();
        let scene_dir = dir.path().join("scenes");
        synthetic_scenes(&scene_dir, 1, 16, 16, 5, &cfg.grid().unwrap()).unwrap();
        let mask = HeightMap::flat(&cfg);
        let dist = ScenarioDistribution::for_config(&cfg, false).unwrap();
        let out = dir.path().join("out");
        let m = synth_dataset(&scene_dir, &mask, &dist, 0, &out, &cfg, None).unwrap();
        assert!(m.items.is_empty());
        assert!(out.join("manifest.jsonl").exists());
    }

    #[test]
    fn online_synth_matches_materialized_items() {
        let mut cfg = SimConfig::probe();
        cfg.rng_seed = 31;
        let dir = tempfile::tempdir().unwrap();
        let scene_dir = dir.path().join("scenes");
        synthetic_scenes(&scene_dir, 2, 16, 16, 5, &cfg.grid().unwrap()).unwrap();
        let mask = HeightMap::flat(&cfg);
        let dist = ScenarioDistribution::for_config(&cfg, false).unwrap();
        let out = dir.path().join("out");
        let manifest = synth_dataset(&scene_dir, &mask, &dist, 3, &out, &cfg, None).unwrap();
        let online = OnlineSynth::new(&scene_dir, &mask, dist, &cfg).unwrap();
        for (k, pair) in online.take(3).enumerate() {
            let (sensor, _gt) = pair.unwrap();
            let stored = io::load_sensor_image(out.join(&manifest.items[k].sensor_png)).unwrap();
            assert_eq!(sensor.counts, stored.counts, "online item {k} differs");
        }
    }

    #[test]
    fn synthetic_scenes_are_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let grid = SimConfig::desk().grid().unwrap();
        let paths = synthetic_scenes(dir.path(), 2, 32, 32, 9, &grid).unwrap();
        assert_eq!(paths.len(), 2);
        for p in paths {
            let img = io::load_rgb(&p).unwrap();
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
