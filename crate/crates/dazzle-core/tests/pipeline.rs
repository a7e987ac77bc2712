//! Cross-module integration tests: irradiance identities, suppression
//! oracles, the restoration contract, and dataset properties.

use dazzle_core::camera::{
    expose_with, laser_irradiance, scene_irradiance, CaptureContext, IlluminationSpec, LaserSpec,
    NoiseSpec,
};
use dazzle_core::config::{derive_seed, SimConfig};
use dazzle_core::datagen::{
    sample_scenario, synth_dataset, synthetic_scenes, test_grid, ScenarioDistribution,
    TEST_GRID_STRENGTHS,
};
use dazzle_core::doe_opt::half_ring_mask;
use dazzle_core::metrics::{bsr, l_doe, LossMode};
use dazzle_core::optics::{build_psf_stack, propagate_psf, HeightMap, PsfStack, PupilField};
use dazzle_core::restore::{restore_pipeline, RestoreContext, RestoreParams};
use dazzle_core::spectral::{daylight_illuminant, lift_rgb_to_hsi, RgbImage, SpectralCube};
use ndarray::Array2;
use num_complex::Complex64;

fn desk() -> SimConfig {
    SimConfig::desk()
}

fn daylight(cfg: &SimConfig, alpha_b: f64) -> IlluminationSpec {
    IlluminationSpec {
        alpha_b,
        illuminant: daylight_illuminant(&cfg.grid().unwrap()).unwrap(),
    }
}

#[test]
fn delta_scene_reproduces_psf_shape() {
    // A single bright pixel convolved with the clear stack gives the PSF
    // itself, band-weighted by the illuminant.
    let cfg = desk();
    let ctx = CaptureContext::new(&cfg, &HeightMap::flat(&cfg)).unwrap();
    let grid = cfg.grid().unwrap();
    let mut delta = SpectralCube::zeros(cfg.sensor_res.0, cfg.sensor_res.1, grid.clone());
    let (cx, cy) = (cfg.sensor_res.0 / 2, cfg.sensor_res.1 / 2);
    for b in 0..grid.n_bands() {
        delta.set(cx, cy, b, 1.0);
    }
    let illum = daylight(&cfg, 0.5);
    let (cube, scale) =
        scene_irradiance(&delta, &ctx.coded, &illum, &ctx.uncoded, &cfg).unwrap();
    assert!(scale > 0.0);
    for (b, band) in ctx.coded.bands.iter().enumerate() {
        let plane = cube.band_plane(b);
        let t_b = illum.illuminant.values[b];
        // compare shapes at the center window against the stored psf
        let (kh, kw) = band.psf.dim();
        let oy = (plane.nrows() - kh) / 2;
        let ox = (plane.ncols() - kw) / 2;
        let mut worst = 0.0f64;
        for y in 0..kh {
            for x in 0..kw {
                let got = plane[(y + oy, x + ox)];
                let want = band.psf[(y, x)] * t_b * scale;
                worst = worst.max((got - want).abs() / (band.peak * t_b * scale));
            }
        }
        assert!(worst < 1e-9, "band {b}: delta-scene mismatch {worst}");
    }
}

#[test]
fn ramp_mask_halves_in_sensor_energy() {
    // Shift theorem oracle: a linear pupil phase ramp that moves the spot to
    // the sensor edge halves the in-window energy.
    let cfg = desk();
    let lambda = 550e-9;
    let clear = build_psf_stack(&HeightMap::flat(&cfg), &cfg).unwrap();
    let shift = cfg.sensor_res.0 as f64 / 2.0 * cfg.sensor_pitch; // to the edge
    let tilt = shift / cfg.focal_length;
    let a = dazzle_core::optics::aperture_mask(&cfg);
    let k = 2.0 * std::f64::consts::PI / lambda;
    let nu = cfg.pupil_res.0;
    let field = Array2::from_shape_fn(a.dim(), |(j, i)| {
        if a[(j, i)] > 0.0 {
            let u = (i as f64 - (nu / 2) as f64) * cfg.pupil_pitch;
            Complex64::from_polar(1.0, k * tilt * u)
        } else {
            Complex64::ZERO
        }
    });
    let band = propagate_psf(
        &PupilField {
            field,
            lambda,
            pitch: cfg.pupil_pitch,
        },
        &cfg,
    )
    .unwrap();
    let tilted = PsfStack {
        grid: clear.grid.clone(),
        bands: {
            let mut bands = clear.bands.clone();
            let idx = clear.grid.band_index(lambda).unwrap();
            bands[idx] = band;
            bands
        },
        sensor_pitch: cfg.sensor_pitch,
        config_hash: clear.config_hash.clone(),
    };
    let v = bsr(&tilted, &clear, lambda).unwrap();
    // shift-theorem oracle: the tilted stack's in-window energy equals the
    // clear psf summed over the window translated by the shift
    let idx = clear.grid.band_index(lambda).unwrap();
    let clear_band = &clear.bands[idx];
    let shift_px = (shift / cfg.sensor_pitch).round() as usize;
    let (h, w) = clear_band.psf.dim();
    let mut translated = 0.0;
    for y in 0..h {
        for t in 0..w - shift_px {
            translated += clear_band.psf[(y, t)];
        }
    }
    let expected = translated / clear_band.in_sensor_energy;
    assert!(
        (v - expected).abs() < 0.01,
        "bsr {v} vs shift-theorem oracle {expected}"
    );
    assert!((0.35..0.65).contains(&v), "roughly half the energy stays in-sensor, got {v}");
}

#[test]
fn bsr_bounded_by_energy_conservation() {
    // Windowed energy of any tested mask never exceeds the clear aperture's.
    let cfg = desk();
    let clear = build_psf_stack(&HeightMap::flat(&cfg), &cfg).unwrap();
    let masks = [
        half_ring_mask(&cfg, None).unwrap(),
        dazzle_core::doe_opt::initial_heights(&cfg, 3),
    ];
    for mask in &masks {
        let stack = build_psf_stack(mask, &cfg).unwrap();
        for &l in stack.grid.lambdas() {
            let v = bsr(&stack, &clear, l).unwrap();
            assert!((0.0..=1.0 + 1e-6).contains(&v), "bsr {v} out of range");
        }
    }
}

#[test]
fn l_doe_below_identity_for_suppressing_mask() {
    let cfg = desk();
    let clear = build_psf_stack(&HeightMap::flat(&cfg), &cfg).unwrap();
    let ring = build_psf_stack(&half_ring_mask(&cfg, None).unwrap(), &cfg).unwrap();
    let identity = l_doe(&clear, &clear, LossMode::Report).unwrap();
    assert_eq!(identity, 2.0 * cfg.n_bands as f64);
    // the half-ring suppresses peaks at a small throughput cost
    let ring_loss = l_doe(&ring, &clear, LossMode::Report).unwrap();
    let lsr_part: f64 = ring
        .grid
        .lambdas()
        .iter()
        .map(|&l| dazzle_core::metrics::lsr(&ring, &clear, l).unwrap())
        .sum();
    assert!(lsr_part < cfg.n_bands as f64);
    assert!(ring_loss < 2.0 * cfg.n_bands as f64 + 1.0);
}

#[test]
fn restore_constant_scene_noise_free() {
    // Uncoded, noise-free capture of a neutral constant scene restores to
    // within 1e-3 mean absolute error.
    let cfg = desk();
    let flat = HeightMap::flat(&cfg);
    let ctx = CaptureContext::new(&cfg, &flat).unwrap();
    let grid = cfg.grid().unwrap();
    let gt = RgbImage::from_fn(cfg.sensor_res.0, cfg.sensor_res.1, |_, _| [0.5, 0.5, 0.5]);
    let cube = lift_rgb_to_hsi(&gt, &grid).unwrap();
    let img = expose_with(
        &ctx,
        &cube,
        &LaserSpec::new(550e-9, 0.0, (0.0, 0.0)),
        &daylight(&cfg, 0.6),
        &NoiseSpec::disabled(),
        cfg.exposure_time,
        3,
        None,
    )
    .unwrap();
    let rctx = RestoreContext::new(&cfg, &flat).unwrap();
    let restored = restore_pipeline(&img, &rctx, &cfg, &RestoreParams::default()).unwrap();
    let l1 = restored.l1_to(&gt);
    assert!(l1 <= 1e-3, "constant-scene restoration L1 {l1}");
}

#[test]
fn restore_deterministic_and_hash_checked() {
    let cfg = desk();
    let ring = half_ring_mask(&cfg, None).unwrap();
    let ctx = CaptureContext::new(&cfg, &ring).unwrap();
    let grid = cfg.grid().unwrap();
    let gt = RgbImage::from_fn(cfg.sensor_res.0, cfg.sensor_res.1, |x, y| {
        [
            0.3 + 0.4 * (x as f64 / 128.0),
            0.5,
            0.3 + 0.4 * (y as f64 / 128.0),
        ]
    });
    let cube = lift_rgb_to_hsi(&gt, &grid).unwrap();
    let img = expose_with(
        &ctx,
        &cube,
        &LaserSpec::new(550e-9, 100.0, (0.0, 0.0)),
        &daylight(&cfg, 0.7),
        &NoiseSpec::from_config(&cfg),
        cfg.exposure_time,
        9,
        None,
    )
    .unwrap();
    let rctx = RestoreContext::new(&cfg, &ring).unwrap();
    let a = restore_pipeline(&img, &rctx, &cfg, &RestoreParams::default()).unwrap();
    let b = restore_pipeline(&img, &rctx, &cfg, &RestoreParams::default()).unwrap();
    assert_eq!(a, b, "restoration must be deterministic");
    assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));

    // wrong mask rejected by hash comparison
    let wrong = RestoreContext::new(&cfg, &HeightMap::flat(&cfg)).unwrap();
    assert!(restore_pipeline(&img, &wrong, &cfg, &RestoreParams::default()).is_err());
}

#[test]
fn restore_second_pass_changes_little() {
    // The deconvolution stage applied to its own output moves the image by
    // far less than the first pass gained.
    let cfg = desk();
    let ring = half_ring_mask(&cfg, None).unwrap();
    let ctx = CaptureContext::new(&cfg, &ring).unwrap();
    let grid = cfg.grid().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let scenes = synthetic_scenes(dir.path(), 1, 128, 128, 42, &grid).unwrap();
    let gt = dazzle_core::io::load_rgb(&scenes[0]).unwrap();
    let cube = lift_rgb_to_hsi(&gt, &grid).unwrap();
    let img = expose_with(
        &ctx,
        &cube,
        &LaserSpec::new(550e-9, 0.0, (0.0, 0.0)),
        &daylight(&cfg, 0.7),
        &NoiseSpec::disabled(),
        cfg.exposure_time,
        4,
        None,
    )
    .unwrap();
    let rctx = RestoreContext::new(&cfg, &ring).unwrap();
    let params = RestoreParams::default();
    let cal = dazzle_core::restore::calibrated_normalize(&img, &cfg, &rctx);
    let restored = restore_pipeline(&img, &rctx, &cfg, &params).unwrap();
    let illuminant = dazzle_core::spectral::SpectralCurve::new(
        grid.clone(),
        img.meta.illuminant.clone(),
    )
    .unwrap();
    let kernels =
        dazzle_core::restore::effective_channel_kernels(&rctx.stack, &illuminant).unwrap();
    let twice =
        dazzle_core::restore::wiener_deconvolve_padded(&restored, &kernels, &params).unwrap();

    let l1_raw = img.normalized().l1_to(&gt);
    let l1_cal = cal.l1_to(&gt);
    let l1_once = restored.l1_to(&gt);
    let l1_twice = twice.l1_to(&gt);
    assert!(l1_cal < l1_raw && l1_once < l1_raw, "restoration must improve on the raw capture");
    // first-pass improvement measured from the raw normalized capture
    let improvement = l1_raw - l1_once;
    assert!(
        (l1_twice - l1_once).abs() < 0.1 * improvement,
        "second pass moved L1 from {l1_once} to {l1_twice}, more than 10% of the {improvement} gain"
    );
}

#[test]
fn laser_free_distribution_never_saturates() {
    // Collapse the distribution to laser-free draws and synthesize: at the
    // sampled background levels nothing reaches the top count.
    let mut cfg = desk();
    cfg.rng_seed = 21;
    let grid = cfg.grid().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let scenes_dir = dir.path().join("scenes");
    synthetic_scenes(&scenes_dir, 3, 128, 128, 8, &grid).unwrap();
    let mut dist = ScenarioDistribution::for_config(&cfg, false).unwrap();
    dist.p_laser_free = 1.0;
    let mask = half_ring_mask(&cfg, None).unwrap();
    let out = dir.path().join("out");
    let manifest = synth_dataset(&scenes_dir, &mask, &dist, 6, &out, &cfg, None).unwrap();
    for item in &manifest.items {
        assert_eq!(item.scenario.laser.alpha_l, 0.0);
        let img = dazzle_core::io::load_sensor_image(out.join(&item.sensor_png)).unwrap();
        assert_eq!(
            img.saturated_count(),
            0,
            "laser-free item {} saturated",
            item.index
        );
    }
}

#[test]
fn test_grid_shape_and_saturation_ordering() {
    let mut cfg = desk();
    cfg.rng_seed = 13;
    let grid = cfg.grid().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let scenes_dir = dir.path().join("scenes");
    synthetic_scenes(&scenes_dir, 3, 128, 128, 6, &grid).unwrap();
    let out = dir.path().join("grid");
    let mask = HeightMap::flat(&cfg);
    let manifest = test_grid(&scenes_dir, &mask, &cfg, &out).unwrap();
    assert_eq!(manifest.items.len(), 3 * TEST_GRID_STRENGTHS.len());

    let mut sat_at = std::collections::HashMap::new();
    for item in &manifest.items {
        let img = dazzle_core::io::load_sensor_image(out.join(&item.sensor_png)).unwrap();
        let sat = img.saturated_count();
        if item.scenario.laser.alpha_l == 0.0 {
            assert_eq!(sat, 0, "laser-free grid item saturated");
        }
        sat_at.insert((item.index / 7, item.scenario.laser.alpha_l as u64), sat);
    }
    for scene in 0..3 {
        let low = sat_at[&(scene, 10_000u64)];
        let high = sat_at[&(scene, 1_000_000u64)];
        assert!(
            high > low,
            "scene {scene}: saturated area at 1e6 ({high}) not larger than at 1e4 ({low})"
        );
    }
}

#[test]
fn laser_peak_realizes_suppressed_level() {
    // With a coded mask, the laser cube's peak is alpha_l * LSR * the level
    // the clear system would reach.
    let cfg = desk();
    let ring = half_ring_mask(&cfg, None).unwrap();
    let ctx = CaptureContext::new(&cfg, &ring).unwrap();
    let laser = LaserSpec::new(550e-9, 50.0, (0.0, 0.0));
    let (coded, _) = laser_irradiance(&laser, &ctx.coded, &ctx.uncoded, &cfg).unwrap();
    let (clear, _) = laser_irradiance(&laser, &ctx.uncoded, &ctx.uncoded, &cfg).unwrap();
    let band = ctx.coded.grid.band_index(550e-9).unwrap();
    let peak = |c: &SpectralCube| c.band_plane(band).iter().cloned().fold(0.0f64, f64::max);
    let want = dazzle_core::metrics::lsr(&ctx.coded, &ctx.uncoded, 550e-9).unwrap();
    let got = peak(&coded) / peak(&clear);
    assert!((got - want).abs() / want < 1e-6);
}

#[test]
fn scenario_collapse_matches_sampled_noise() {
    // sample_scenario output plugs into expose deterministically
    let cfg = desk();
    let dist = ScenarioDistribution::for_config(&cfg, false).unwrap();
    let s = sample_scenario(&dist, derive_seed(3, 0));
    assert!(s.exposure_time > 0.0);
    assert!(s.noise.dark_current >= 0.0);
    assert!((0.3..=0.7).contains(&s.alpha_b));
}

#[test]
fn stage2_beats_search_endpoints() {
    use dazzle_core::restore::tune_restore_params;
    let mut cfg = desk();
    cfg.rng_seed = 5;
    let grid = cfg.grid().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let scenes = synthetic_scenes(dir.path(), 1, 128, 128, 3, &grid).unwrap();
    let scene = dazzle_core::io::load_rgb(&scenes[0]).unwrap();
    let mask = half_ring_mask(&cfg, None).unwrap();
    let (params, best_val, evals) = tune_restore_params(&cfg, &mask, &[scene.clone()], 10).unwrap();
    assert!(evals >= 4);

    // explicit endpoint evaluations can never beat the returned optimum
    let capture = CaptureContext::new(&cfg, &mask).unwrap();
    let rctx = RestoreContext::new(&cfg, &mask).unwrap();
    let cube = lift_rgb_to_hsi(&scene, &grid).unwrap();
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
    for log_reg in [-5.0, 0.0] {
        let p = RestoreParams {
            wiener_reg: [10f64.powf(log_reg); 3],
            ..RestoreParams::default()
        };
        let mut total = 0.0;
        let mut n = 0;
        for (j, alpha_l) in [0.0, 1e4].into_iter().enumerate() {
            let seed = derive_seed(cfg.rng_seed ^ 0x7061_7261, j as u64);
            let img = expose_with(
                &capture,
                &cube,
                &LaserSpec::new(grid.lambdas()[grid.n_bands() / 2], alpha_l, (0.0, 0.0)),
                &daylight(&cfg, 0.7),
                &noise,
                cfg.exposure_time,
                seed,
                None,
            )
            .unwrap();
            let restored = restore_pipeline(&img, &rctx, &cfg, &p).unwrap();
            total += dazzle_core::metrics::charbonnier_fft(&restored, &scene).unwrap();
            n += 1;
        }
        let endpoint_val = total / n as f64;
        assert!(
            best_val <= endpoint_val + 1e-9,
            "tuned {best_val} worse than endpoint {endpoint_val} at log reg {log_reg}"
        );
    }
    assert!(params.wiener_reg[0] > 0.0);
}
