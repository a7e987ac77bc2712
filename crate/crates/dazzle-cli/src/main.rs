//! Command-line entry point tying the simulation pipeline together.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dazzle_core::camera::{expose_with, CaptureContext, IlluminationSpec, LaserSpec, NoiseSpec};
use dazzle_core::config::{load_config, SimConfig};
use dazzle_core::datagen::{
    synth_dataset, synthetic_scenes, test_grid, DatasetManifest, ScenarioDistribution,
};
use dazzle_core::doe_opt::{
    grad_l_doe, half_ring_mask, initial_heights, optimize_doe, run_two_stage, smooth_l_doe,
    StageSchedule,
};
use dazzle_core::eval::evaluate_manifest;
use dazzle_core::io;
use dazzle_core::metrics::SuppressionReport;
use dazzle_core::optics::{build_psf_stack, radial_first_minimum, HeightMap};
use dazzle_core::restore::RestoreParams;
use dazzle_core::spectral::{daylight_illuminant, lift_rgb_to_hsi, SpectralCube};

#[derive(Parser)]
#[command(name = "dazzle", version, about = "Hyperspectral laser-dazzle camera simulator and element optimizer")]
struct Cli {
    /// JSON config file; unspecified fields take the reference defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the reduced desk-scale configuration (the default).
    #[arg(long, global = true)]
    desk: bool,
    /// Allow the full-resolution reference configuration (large memory).
    #[arg(long, global = true)]
    full: bool,
    /// Override the config's base RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: hardware parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate a mask (default: flat) and write per-band PSFs, a log-scaled
    /// montage, and the mask height image.
    Psf {
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Capture one scene under a chosen scenario.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        alpha_l: f64,
        #[arg(long, default_value_t = 550.0)]
        lambda_l_nm: f64,
        #[arg(long, default_value_t = 0.7)]
        alpha_b: f64,
        #[arg(long, default_value_t = 0.0)]
        n_u: f64,
        #[arg(long, default_value_t = 0.0)]
        n_v: f64,
        /// Disable every stochastic corruption.
        #[arg(long)]
        no_noise: bool,
    },
    /// Stage-1 optimization of the element height map.
    Optimize {
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Stage 1 plus restoration-parameter tuning on validation scenes.
    TwoStage {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        /// Number of validation scenes drawn from the directory.
        #[arg(long, default_value_t = 3)]
        val_scenes: usize,
    },
    /// Synthesize a degraded/ground-truth pair dataset.
    Synth {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        items: usize,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Downsample pairs to this edge length.
        #[arg(long)]
        downsample: Option<usize>,
        /// Use the literal 0.36 * f / W_s reading of the incidence spread.
        #[arg(long)]
        paper_literal_shift: bool,
    },
    /// The fixed evaluation grid: every scene at the seven laser strengths.
    TestGrid {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Restore every item of a manifest and aggregate quality per stratum.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Restoration parameters JSON (defaults otherwise).
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Compare the adjoint gradient against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        probes: usize,
    },
    /// Per-wavelength suppression table for one or more masks.
    LsrTable {
        /// Mask files; the flat mask is always included as the first row.
        #[arg(long)]
        mask: Vec<PathBuf>,
    },
    /// Generate procedural in-gamut scenes.
    MakeScenes {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        size: Option<usize>,
    },
}

fn resolve_config(cli: &Cli) -> Result<SimConfig> {
    if cli.desk && cli.full {
        bail!("--desk and --full are mutually exclusive");
    }
    let mut cfg = match (&cli.config, cli.full) {
        (Some(path), _) => load_config(path)?,
        (None, true) => SimConfig::default(),
        (None, false) => SimConfig::desk(),
    };
    if let Ok(seed) = std::env::var("DAZZLE_RNG_SEED") {
        cfg.rng_seed = seed
            .parse()
            .context("DAZZLE_RNG_SEED must be an unsigned 64-bit integer")?;
    }
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;

    let big = cfg.pupil_res.0.max(cfg.pupil_res.1) > 512
        || cfg.sensor_res.0.max(cfg.sensor_res.1) > 512;
    if big && !cli.full {
        let n = cfg.sensor_res.0.max(cfg.sensor_res.1) as f64;
        let bands = cfg.n_bands as f64;
        let gib = 8.0 * (2.0 * n).powi(2) * (3.0 * bands + 6.0) / 1024f64.powi(3);
        bail!(
            "configuration is full-scale ({}x{} pupil, {}x{} sensor, {} bands); \
             rough working-set estimate {gib:.1} GiB. Pass --full to proceed.",
            cfg.pupil_res.0,
            cfg.pupil_res.1,
            cfg.sensor_res.0,
            cfg.sensor_res.1,
            cfg.n_bands
        );
    }
    Ok(cfg)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn write_run_manifest(cli: &Cli, cfg: &SimConfig) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    let manifest = serde_json::json!({
        "schema_version": 1,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config": cfg,
        "config_hash": cfg.hash(),
        "seed": cfg.rng_seed,
        "git_describe": git_describe(),
    });
    std::fs::write(
        cli.out.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_mask_or_flat(path: &Option<PathBuf>, cfg: &SimConfig) -> Result<HeightMap> {
    let mask = match path {
        Some(p) => io::load_height_map(p).with_context(|| format!("loading mask {}", p.display()))?,
        None => HeightMap::flat(cfg),
    };
    if mask.heights.dim() != (cfg.pupil_res.1, cfg.pupil_res.0) {
        bail!(
            "mask is {}x{} but the config pupil is {}x{}",
            mask.heights.ncols(),
            mask.heights.nrows(),
            cfg.pupil_res.0,
            cfg.pupil_res.1
        );
    }
    mask.validate(cfg.doe_h_max)?;
    Ok(mask)
}

fn center_crop_rgb(
    img: &dazzle_core::spectral::RgbImage,
    w: usize,
    h: usize,
) -> Result<dazzle_core::spectral::RgbImage> {
    if img.width < w || img.height < h {
        bail!(
            "scene is {}x{}, smaller than the sensor {}x{}",
            img.width,
            img.height,
            w,
            h
        );
    }
    let x0 = (img.width - w) / 2;
    let y0 = (img.height - h) / 2;
    let mut out = dazzle_core::spectral::RgbImage::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(x + x0, y + y0));
        }
    }
    Ok(out)
}

fn cmd_psf(cli: &Cli, cfg: &SimConfig, mask_path: &Option<PathBuf>) -> Result<()> {
    let mask = load_mask_or_flat(mask_path, cfg)?;
    let stack = build_psf_stack(&mask, cfg)?;
    let grid = cfg.grid()?;

    // per-band PSFs in the cube format
    let (ny, nx) = stack.bands[0].psf.dim();
    let mut cube = SpectralCube::zeros(nx, ny, grid.clone());
    for (b, band) in stack.bands.iter().enumerate() {
        cube.set_band_plane(b, &band.psf);
    }
    io::save_cube(cli.out.join("psf_stack.raw"), &cube)?;

    // log-scaled montage, bands left to right
    let mut montage = ndarray::Array2::<f64>::zeros((ny, nx * stack.bands.len()));
    for (b, band) in stack.bands.iter().enumerate() {
        for y in 0..ny {
            for x in 0..nx {
                montage[(y, b * nx + x)] = band.psf[(y, x)];
            }
        }
    }
    io::save_gray16(cli.out.join("psf_montage.png"), &montage, Some(5.0))?;
    io::save_gray16(cli.out.join("mask_height.png"), &mask.heights, None)?;
    io::save_height_map(cli.out.join("mask.raw"), &mask, cfg.doe_h_max)?;

    let mid = grid.lambdas()[grid.n_bands() / 2];
    if let Some(r) = radial_first_minimum(&stack.band(mid)?.psf, cfg.sensor_pitch) {
        println!(
            "first radial minimum at {:.3} um (lambda {:.0} nm)",
            r * 1e6,
            mid * 1e9
        );
    }
    println!(
        "wrote psf_stack.raw, psf_montage.png, mask_height.png to {}",
        cli.out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    cli: &Cli,
    cfg: &SimConfig,
    scene: &Path,
    mask_path: &Option<PathBuf>,
    alpha_l: f64,
    lambda_l_nm: f64,
    alpha_b: f64,
    incidence: (f64, f64),
    no_noise: bool,
) -> Result<()> {
    let mask = load_mask_or_flat(mask_path, cfg)?;
    let grid = cfg.grid()?;
    let img = io::load_rgb(scene)?;
    let mut gt = center_crop_rgb(&img, cfg.sensor_res.0, cfg.sensor_res.1)?;
    gt.clamp01();
    let cube = lift_rgb_to_hsi(&gt, &grid)?;
    let ctx = CaptureContext::new(cfg, &mask)?;
    let illum = IlluminationSpec {
        alpha_b,
        illuminant: daylight_illuminant(&grid)?,
    };
    let noise = if no_noise {
        NoiseSpec::disabled()
    } else {
        NoiseSpec::from_config(cfg)
    };
    let laser = LaserSpec::new(lambda_l_nm * 1e-9, alpha_l, incidence);
    let capture = expose_with(
        &ctx,
        &cube,
        &laser,
        &illum,
        &noise,
        cfg.exposure_time,
        cfg.rng_seed,
        None,
    )?;
    io::save_sensor_image(cli.out.join("sensor.png"), &capture)?;
    io::save_rgb16(cli.out.join("gt.png"), &gt)?;
    println!(
        "captured {} saturated pixels of {}; wrote sensor.png and gt.png to {}",
        capture.saturated_count(),
        capture.width * capture.height,
        cli.out.display()
    );
    Ok(())
}

fn schedule_for(cfg: &SimConfig, iters: Option<usize>, lr: Option<f64>) -> StageSchedule {
    let desk_like = cfg.pupil_res.0.max(cfg.pupil_res.1) <= 512;
    let mut sched = if desk_like {
        StageSchedule::desk()
    } else {
        StageSchedule::default()
    };
    if let Some(n) = iters {
        sched.stage1_iters = n;
    }
    if let Some(lr) = lr {
        sched.lr_weights = lr;
    }
    sched
}

fn write_history_csv(path: &Path, history: &[dazzle_core::doe_opt::IterStats]) -> Result<()> {
    let mut s = String::from("iter,l_doe,mean_lsr,mean_bsr,lr\n");
    for row in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            row.iter, row.l_doe, row.mean_lsr, row.mean_bsr, row.lr
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn cmd_optimize(cli: &Cli, cfg: &SimConfig, iters: Option<usize>, lr: Option<f64>) -> Result<()> {
    let sched = schedule_for(cfg, iters, lr);
    let init = initial_heights(cfg, cfg.rng_seed);
    let result = optimize_doe(&init, &sched, cfg)?;
    let quantized = io::quantize_height_map_f32(&result.mask);
    io::save_height_map(cli.out.join("mask.raw"), &quantized, cfg.doe_h_max)?;
    io::save_gray16(cli.out.join("mask_height.png"), &quantized.heights, None)?;
    write_history_csv(&cli.out.join("history.csv"), &result.history)?;

    let stack = build_psf_stack(&quantized, cfg)?;
    let clear = build_psf_stack(&HeightMap::flat(cfg), cfg)?;
    let report = SuppressionReport::compute(&stack, &clear)?;
    std::fs::write(
        cli.out.join("report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "mask_hash": quantized.hash(),
            "best_l_doe": result.best_l_doe,
            "best_iter": result.best_iter,
            "suppression": report,
        }))?,
    )?;
    println!(
        "optimized mask: mean LSR {:.4}, mean BSR {:.4}; wrote mask.raw, history.csv, report.json to {}",
        report.mean_lsr,
        report.mean_bsr,
        cli.out.display()
    );
    Ok(())
}

fn cmd_two_stage(
    cli: &Cli,
    cfg: &SimConfig,
    scenes: &Path,
    iters: Option<usize>,
    n_val: usize,
) -> Result<()> {
    let sched = schedule_for(cfg, iters, None);
    let mut names: Vec<PathBuf> = std::fs::read_dir(scenes)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no scenes in {}", scenes.display());
    }
    let val: Result<Vec<_>> = names
        .iter()
        .take(n_val.max(1))
        .map(|p| io::load_rgb(p).map_err(Into::into))
        .collect();
    let (mask, params, report, history) = run_two_stage(cfg, &sched, &val?)?;
    let quantized = io::quantize_height_map_f32(&mask);
    io::save_height_map(cli.out.join("mask.raw"), &quantized, cfg.doe_h_max)?;
    io::save_gray16(cli.out.join("mask_height.png"), &quantized.heights, None)?;
    write_history_csv(&cli.out.join("history.csv"), &history)?;
    std::fs::write(
        cli.out.join("restore_params.json"),
        serde_json::to_string_pretty(&params)?,
    )?;
    std::fs::write(
        cli.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "two-stage done: mean LSR {:.4}, mean BSR {:.4}, val metric {:.1}; outputs in {}",
        report.stage1_mean_lsr,
        report.stage1_mean_bsr,
        report.stage2_val_charbonnier,
        cli.out.display()
    );
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    cfg: &SimConfig,
    manifest_path: &Path,
    mask_path: &Path,
    params_path: &Option<PathBuf>,
) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let mask = io::load_height_map(mask_path)?;
    let params: RestoreParams = match params_path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => RestoreParams::default(),
    };
    let dataset_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let report = evaluate_manifest(dataset_dir, &manifest, &mask, cfg, &params)?;
    if !report.missing_files.is_empty() {
        eprintln!("missing files:");
        for f in &report.missing_files {
            eprintln!("  {f}");
        }
    }
    std::fs::write(
        cli.out.join("eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(cli.out.join("eval.csv"), report.to_csv())?;
    println!(
        "evaluated {} items: mean L1 restored {:.4} vs raw {:.4}; wrote eval.json, eval.csv to {}",
        report.n_items,
        report.mean_l1_restored,
        report.mean_l1_raw,
        cli.out.display()
    );
    Ok(())
}

fn cmd_grad_check(cfg: &SimConfig, probes: usize) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut worst: f64 = 0.0;
    for seed in [1u64, 2, 3] {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0xFD);
        let mut h = initial_heights(cfg, seed);
        h.heights.mapv_inplace(|v| v + 0.3 * cfg.doe_h_max);
        let grad = grad_l_doe(&h, cfg)?;
        let step = 1e-9;
        for _ in 0..probes {
            let dir = ndarray::Array2::from_shape_fn(h.heights.dim(), |_| {
                rng.random::<f64>() * 2.0 - 1.0
            });
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dir = dir.mapv(|v| v / norm);
            let analytic: f64 = grad.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();
            let mut hp = h.clone();
            hp.heights.zip_mut_with(&dir, |a, d| *a += step * d);
            let mut hm = h.clone();
            hm.heights.zip_mut_with(&dir, |a, d| *a -= step * d);
            let fd = (smooth_l_doe(&hp, cfg)? - smooth_l_doe(&hm, cfg)?) / (2.0 * step);
            let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    println!("max relative gradient error over {} probes x 3 seeds: {worst:.3e}", probes);
    if worst > 1e-4 {
        bail!("gradient check failed: {worst:.3e} > 1e-4");
    }
    Ok(())
}

fn cmd_lsr_table(cli: &Cli, cfg: &SimConfig, masks: &[PathBuf]) -> Result<()> {
    let grid = cfg.grid()?;
    let clear = build_psf_stack(&HeightMap::flat(cfg), cfg)?;
    let mut csv = String::from("mask");
    for l in grid.lambdas() {
        csv.push_str(&format!(",lsr_{:.0}nm", l * 1e9));
    }
    for l in grid.lambdas() {
        csv.push_str(&format!(",bsr_{:.0}nm", l * 1e9));
    }
    csv.push('\n');

    let mut rows: Vec<(String, HeightMap)> = vec![
        ("flat".to_string(), HeightMap::flat(cfg)),
        ("half-ring".to_string(), half_ring_mask(cfg, None)?),
    ];
    for p in masks {
        rows.push((
            p.file_stem().unwrap_or_default().to_string_lossy().to_string(),
            io::load_height_map(p)?,
        ));
    }
    for (name, mask) in rows {
        let stack = build_psf_stack(&mask, cfg)?;
        let report = SuppressionReport::compute(&stack, &clear)?;
        csv.push_str(&name);
        for v in &report.lsr {
            csv.push_str(&format!(",{v}"));
        }
        for v in &report.bsr {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
        println!(
            "{name}: mean LSR {:.4}, mean BSR {:.4}",
            report.mean_lsr, report.mean_bsr
        );
    }
    std::fs::write(cli.out.join("lsr_table.csv"), csv)?;
    println!("wrote lsr_table.csv to {}", cli.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("setting worker pool size")?;
    }
    let cfg = resolve_config(&cli)?;
    std::fs::create_dir_all(&cli.out)?;
    write_run_manifest(&cli, &cfg)?;

    match &cli.command {
        Command::Psf { mask } => cmd_psf(&cli, &cfg, mask),
        Command::Simulate {
            scene,
            mask,
            alpha_l,
            lambda_l_nm,
            alpha_b,
            n_u,
            n_v,
            no_noise,
        } => cmd_simulate(
            &cli,
            &cfg,
            scene,
            mask,
            *alpha_l,
            *lambda_l_nm,
            *alpha_b,
            (*n_u, *n_v),
            *no_noise,
        ),
        Command::Optimize { iters, lr } => cmd_optimize(&cli, &cfg, *iters, *lr),
        Command::TwoStage {
            scenes,
            iters,
            val_scenes,
        } => cmd_two_stage(&cli, &cfg, scenes, *iters, *val_scenes),
        Command::Synth {
            scenes,
            items,
            mask,
            downsample,
            paper_literal_shift,
        } => {
            let mask = load_mask_or_flat(mask, &cfg)?;
            let dist = ScenarioDistribution::for_config(&cfg, *paper_literal_shift)?;
            let manifest =
                synth_dataset(scenes, &mask, &dist, *items, &cli.out, &cfg, *downsample)?;
            println!(
                "synthesized {} items; manifest at {}",
                manifest.items.len(),
                cli.out.join("manifest.jsonl").display()
            );
            Ok(())
        }
        Command::TestGrid { scenes, mask } => {
            let mask = load_mask_or_flat(mask, &cfg)?;
            let manifest = test_grid(scenes, &mask, &cfg, &cli.out)?;
            println!(
                "test grid: {} items; manifest at {}",
                manifest.items.len(),
                cli.out.join("manifest.jsonl").display()
            );
            Ok(())
        }
        Command::Eval {
            manifest,
            mask,
            params,
        } => cmd_eval(&cli, &cfg, manifest, mask, params),
        Command::GradCheck { probes } => cmd_grad_check(&cfg, *probes),
        Command::LsrTable { mask } => cmd_lsr_table(&cli, &cfg, mask),
        Command::MakeScenes { count, size } => {
            let grid = cfg.grid()?;
            let edge = size.unwrap_or(cfg.sensor_res.0.max(cfg.sensor_res.1));
            let paths = synthetic_scenes(&cli.out, *count, edge, edge, cfg.rng_seed, &grid)?;
            println!("wrote {} scenes to {}", paths.len(), cli.out.display());
            Ok(())
        }
    }
}
