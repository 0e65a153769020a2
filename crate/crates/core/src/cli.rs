//! Command-line front end: run configuration, the five subcommands and the
//! files they leave under `--out-dir`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::edge::{EdgeDetectorParams, ThresholdSchedule};
use crate::error::{Error, Result};
use crate::image::{load_image, save_png, write_bytes, write_text, ImageBuffer};
use crate::inr::{fit_image_with_anchor, NetworkShape, TrainConfig, DEFAULT_OMEGA0};
use crate::metrics::{affine_fit, error_map};
use crate::nerf::{fit_nerf, orbit_cameras, orbit_views, AnalyticScene, NerfConfig, View};
use crate::report::{parse_csv, rows_to_csv, MetricRow, TrainReport};
use crate::selection::{
    apply_beta, extract_anchor, extract_anchor_cached, save_anchor_pgm, AnchorMask, Strategy,
    SupervisionPlan,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ARGUMENT: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Convergence { .. } => EXIT_CONVERGENCE,
        Error::Divergence { .. } | Error::Numeric(_) => EXIT_DIVERGENCE,
        Error::Io { .. } | Error::Format(_) | Error::Argument(_) => EXIT_ARGUMENT,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Image,
    Nerf,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Image => "image",
            Backbone::Nerf => "nerf",
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Backbone::Image),
            "nerf" => Ok(Backbone::Nerf),
            _ => Err(Error::arg(format!("unknown backbone '{s}' (image or nerf)"))),
        }
    }
}

/// Every setting of every subcommand, stored as a flat `key=value` file.
/// Keys match the long flag names.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub xi_a: f64,
    pub xi_s: f64,
    pub beta: f64,
    pub total_iters: usize,
    pub seed: u64,
    pub mu: f64,
    pub blur_sigma: f64,
    pub learning_rate: f64,
    pub eval_interval: usize,
    pub deterministic: bool,
    pub run_id: String,
    pub out_dir: PathBuf,

    pub image: Option<PathBuf>,
    /// Pixels per iteration for the image network; `None` follows the plan.
    pub batch: Option<usize>,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub omega0: f64,
    pub anchor_cache: bool,

    /// `cluster`, `two-spheres` or a path to a scene file.
    pub scene: String,
    pub train_views: usize,
    pub held_out_views: usize,
    pub view_size: usize,
    /// Focal length in units of the view size.
    pub focal_factor: f64,
    pub orbit_radius: f64,
    pub elevation: f64,
    pub gt_samples: usize,
    pub ray_budget: usize,
    pub rays_per_iter: Option<usize>,
    pub n_samples: usize,
    pub eval_samples: usize,
    pub grid_resolution: usize,
    pub anchor_fallback: bool,

    pub backbone: Backbone,
    pub strategies: Vec<Strategy>,
    pub betas: Vec<f64>,
    pub jobs: usize,
}

impl RunConfig {
    /// Defaults for the image network: 5000 iterations.
    pub fn image_defaults() -> Self {
        let plan = SupervisionPlan::default();
        let t = TrainConfig::default();
        let n = NerfConfig::default();
        Self {
            strategy: plan.strategy,
            xi_a: plan.xi_a,
            xi_s: plan.xi_s,
            beta: plan.beta,
            total_iters: 5000,
            seed: plan.rng_seed,
            mu: t.threshold.mu,
            blur_sigma: t.edge.blur_sigma,
            learning_rate: t.learning_rate,
            eval_interval: t.eval_interval,
            deterministic: false,
            run_id: "run".into(),
            out_dir: PathBuf::from("out"),
            image: None,
            batch: None,
            hidden_width: t.network.hidden_width,
            hidden_layers: t.network.hidden_layers,
            omega0: DEFAULT_OMEGA0,
            anchor_cache: true,
            scene: "cluster".into(),
            train_views: 24,
            held_out_views: 2,
            view_size: 48,
            focal_factor: 2.0,
            orbit_radius: 4.0,
            elevation: 25.0,
            gt_samples: 256,
            ray_budget: n.ray_budget,
            rays_per_iter: None,
            n_samples: n.n_samples,
            eval_samples: n.eval_samples,
            grid_resolution: n.resolution[0],
            anchor_fallback: n.anchor_fallback,
            backbone: Backbone::Image,
            strategies: vec![Strategy::Standard, Strategy::Expansive, Strategy::EdgeResample],
            betas: vec![1.0],
            jobs: 1,
        }
    }

    /// Defaults for the voxel-grid radiance field: 20000 iterations.
    pub fn nerf_defaults() -> Self {
        let n = NerfConfig::default();
        Self {
            total_iters: n.plan.total_iters,
            learning_rate: n.learning_rate,
            eval_interval: n.eval_interval,
            backbone: Backbone::Nerf,
            ..Self::image_defaults()
        }
    }

    pub fn defaults_for(backbone: Backbone) -> Self {
        match backbone {
            Backbone::Image => Self::image_defaults(),
            Backbone::Nerf => Self::nerf_defaults(),
        }
    }

    pub fn plan(&self) -> SupervisionPlan {
        SupervisionPlan {
            strategy: self.strategy,
            xi_a: self.xi_a,
            xi_s: self.xi_s,
            beta: self.beta,
            total_iters: self.total_iters,
            rng_seed: self.seed,
        }
    }

    pub fn threshold(&self) -> ThresholdSchedule {
        ThresholdSchedule {
            mu: self.mu,
            ..ThresholdSchedule::default()
        }
    }

    pub fn edge(&self) -> EdgeDetectorParams {
        EdgeDetectorParams {
            blur_sigma: self.blur_sigma,
            ..EdgeDetectorParams::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            plan: self.plan(),
            learning_rate: self.learning_rate,
            eval_interval: self.eval_interval,
            batch: self.batch,
            network: NetworkShape {
                hidden_width: self.hidden_width,
                hidden_layers: self.hidden_layers,
                omega0: self.omega0,
            },
            threshold: self.threshold(),
            edge: self.edge(),
            deterministic: self.deterministic,
            run_id: self.run_id.clone(),
        }
    }

    pub fn nerf_config(&self) -> NerfConfig {
        NerfConfig {
            plan: self.plan(),
            learning_rate: self.learning_rate,
            eval_interval: self.eval_interval,
            ray_budget: self.ray_budget,
            rays_per_iter: self.rays_per_iter,
            n_samples: self.n_samples,
            eval_samples: self.eval_samples,
            resolution: [self.grid_resolution; 3],
            threshold: self.threshold(),
            edge: self.edge(),
            anchor_fallback: self.anchor_fallback,
            deterministic: self.deterministic,
            run_id: self.run_id.clone(),
            ..NerfConfig::default()
        }
    }

    /// All settings as `(key, value)` pairs, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |n| n.to_string());
        let list = |v: Vec<String>| v.join(",");
        vec![
            ("strategy", self.strategy.name().into()),
            ("xi-a", self.xi_a.to_string()),
            ("xi-s", self.xi_s.to_string()),
            ("beta", self.beta.to_string()),
            ("total-iters", self.total_iters.to_string()),
            ("seed", self.seed.to_string()),
            ("mu", self.mu.to_string()),
            ("blur-sigma", self.blur_sigma.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("eval-interval", self.eval_interval.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("run-id", self.run_id.clone()),
            ("out-dir", self.out_dir.display().to_string()),
            (
                "image",
                self.image.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("batch", opt(self.batch)),
            ("hidden-width", self.hidden_width.to_string()),
            ("hidden-layers", self.hidden_layers.to_string()),
            ("omega0", self.omega0.to_string()),
            ("anchor-cache", self.anchor_cache.to_string()),
            ("scene", self.scene.clone()),
            ("train-views", self.train_views.to_string()),
            ("held-out-views", self.held_out_views.to_string()),
            ("view-size", self.view_size.to_string()),
            ("focal-factor", self.focal_factor.to_string()),
            ("orbit-radius", self.orbit_radius.to_string()),
            ("elevation", self.elevation.to_string()),
            ("gt-samples", self.gt_samples.to_string()),
            ("ray-budget", self.ray_budget.to_string()),
            ("rays-per-iter", opt(self.rays_per_iter)),
            ("n-samples", self.n_samples.to_string()),
            ("eval-samples", self.eval_samples.to_string()),
            ("grid-resolution", self.grid_resolution.to_string()),
            ("anchor-fallback", self.anchor_fallback.to_string()),
            ("backbone", self.backbone.name().into()),
            (
                "strategies",
                list(self.strategies.iter().map(|s| s.name().to_string()).collect()),
            ),
            ("betas", list(self.betas.iter().map(|b| b.to_string()).collect())),
            ("jobs", self.jobs.to_string()),
        ]
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::arg(format!("{key}: cannot parse '{v}'")))
        }
        fn opt(key: &str, v: &str) -> Result<Option<usize>> {
            if v == "auto" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        let v = value.trim();
        match key {
            "strategy" => self.strategy = v.parse()?,
            "xi-a" => self.xi_a = num(key, v)?,
            "xi-s" => self.xi_s = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "total-iters" => self.total_iters = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "mu" => self.mu = num(key, v)?,
            "blur-sigma" => self.blur_sigma = num(key, v)?,
            "lr" => self.learning_rate = num(key, v)?,
            "eval-interval" => self.eval_interval = num(key, v)?,
            "deterministic" => self.deterministic = num(key, v)?,
            "run-id" => self.run_id = v.to_string(),
            "out-dir" => self.out_dir = PathBuf::from(v),
            "image" => self.image = (!v.is_empty()).then(|| PathBuf::from(v)),
            "batch" => self.batch = opt(key, v)?,
            "hidden-width" => self.hidden_width = num(key, v)?,
            "hidden-layers" => self.hidden_layers = num(key, v)?,
            "omega0" => self.omega0 = num(key, v)?,
            "anchor-cache" => self.anchor_cache = num(key, v)?,
            "scene" => self.scene = v.to_string(),
            "train-views" => self.train_views = num(key, v)?,
            "held-out-views" => self.held_out_views = num(key, v)?,
            "view-size" => self.view_size = num(key, v)?,
            "focal-factor" => self.focal_factor = num(key, v)?,
            "orbit-radius" => self.orbit_radius = num(key, v)?,
            "elevation" => self.elevation = num(key, v)?,
            "gt-samples" => self.gt_samples = num(key, v)?,
            "ray-budget" => self.ray_budget = num(key, v)?,
            "rays-per-iter" => self.rays_per_iter = opt(key, v)?,
            "n-samples" => self.n_samples = num(key, v)?,
            "eval-samples" => self.eval_samples = num(key, v)?,
            "grid-resolution" => self.grid_resolution = num(key, v)?,
            "anchor-fallback" => self.anchor_fallback = num(key, v)?,
            "backbone" => self.backbone = v.parse()?,
            "strategies" => {
                self.strategies = v
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "betas" => {
                self.betas = v
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "jobs" => self.jobs = num(key, v)?,
            _ => return Err(Error::arg(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Applies a `key=value` text on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("config line {}: expected key=value", lineno + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    /// Reads a config file over the defaults for `backbone`.
    pub fn load(path: &Path, backbone: Backbone) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::defaults_for(backbone);
        c.apply_text(&text)?;
        Ok(c)
    }
}

/// Loads the named scene: `cluster`, `two-spheres`, or a scene file.
pub fn load_scene(name: &str) -> Result<AnalyticScene> {
    match name {
        "cluster" => Ok(AnalyticScene::cluster(11, 30, 1.0)),
        "two-spheres" => Ok(AnalyticScene::two_spheres()),
        path => AnalyticScene::load(path),
    }
}

/// Ground-truth training and held-out views on one orbit. Training cameras
/// are evenly spaced from azimuth 0; each held-out camera sits halfway
/// between two training cameras.
pub fn scene_views(scene: &AnalyticScene, c: &RunConfig) -> Result<(Vec<View>, Vec<View>)> {
    if c.train_views < 2 || c.held_out_views == 0 || c.view_size == 0 {
        return Err(Error::arg("need at least 2 training views, 1 held-out view and a positive size"));
    }
    let orbit = |count: usize, azimuth0: f64| {
        orbit_cameras(
            count,
            c.orbit_radius,
            c.elevation,
            azimuth0,
            c.focal_factor * c.view_size as f64,
            c.view_size,
            1.0,
        )
    };
    let train = orbit(c.train_views, 0.0)?;
    let held = orbit(c.held_out_views, 180.0 / c.train_views as f64)?;
    Ok((
        orbit_views(scene, &train, c.gt_samples)?,
        orbit_views(scene, &held, c.gt_samples)?,
    ))
}

fn error_png(pred: &ImageBuffer, truth: &ImageBuffer, path: &Path) -> Result<()> {
    let err = error_map(pred, truth)?;
    let hi = err.max();
    let scale = if hi > 0.0 { 1.0 / hi } else { 1.0 };
    let gray = ImageBuffer::new(
        err.height(),
        err.width(),
        1,
        err.data().iter().map(|v| v * scale).collect(),
    )?;
    save_png(&gray, path)
}

fn write_run(out: &Path, config: &RunConfig, report: &TrainReport) -> Result<()> {
    let mut text = config.to_text();
    text.push_str("# resolved run settings\n");
    for line in report.config_snapshot.lines() {
        let _ = writeln!(text, "# {line}");
    }
    write_text(&out.join("config.txt"), &text)?;
    write_text(&out.join("report.csv"), &report.csv())?;
    write_bytes(out.join("checkpoints").join("final.ckpt"), &report.checkpoint)?;
    if report.anchor.total_pixels() > 0 && !report.anchor.anchor_indices.is_empty() {
        save_anchor_pgm(&report.anchor, &out.join("masks").join("anchor.pgm"))?;
    }
    Ok(())
}

fn save_last_good(out: &Path, err: &Error) {
    if let Error::Divergence {
        last_good: Some(bytes),
        ..
    } = err
    {
        let path = out.join("checkpoints").join("last_good.ckpt");
        if let Err(e) = write_bytes(&path, bytes) {
            log::warn!("could not save last good checkpoint: {e}");
        }
    }
}

fn image_anchor(config: &RunConfig, path: &Path, img: &ImageBuffer) -> Result<AnchorMask> {
    if !config.strategy.uses_anchor() {
        return Ok(AnchorMask::none(img.pixel_count()));
    }
    let xa = apply_beta(&config.plan()).0;
    extract_anchor_cached(path, img, xa, &config.threshold(), &config.edge(), config.anchor_cache)
}

/// Fits the image network to `config.image`. Writes the report, config,
/// checkpoint, final render, error map and anchor mask.
pub fn cmd_fit_image(config: &RunConfig) -> Result<TrainReport> {
    let path = config
        .image
        .as_deref()
        .ok_or_else(|| Error::arg("fit-image needs --image"))?;
    let img = load_image(path)?.to_rgb();
    let train = config.train_config();
    train.validate()?;
    let anchor = image_anchor(config, path, &img)?;
    let out = &config.out_dir;
    let report = fit_image_with_anchor(&img, anchor, &train).inspect_err(|e| save_last_good(out, e))?;
    write_run(out, config, &report)?;
    if let Some(render) = report.renders.last() {
        save_png(render, out.join("renders").join("final.png"))?;
        error_png(render, &img, &out.join("renders").join("error.png"))?;
    }
    Ok(report)
}

/// Trains the voxel grid on views of `config.scene`. Writes held-out renders
/// and ground truth next to the usual report files.
pub fn cmd_fit_nerf(config: &RunConfig) -> Result<TrainReport> {
    let scene = load_scene(&config.scene)?;
    let nerf = config.nerf_config();
    nerf.validate()?;
    let (train, held) = scene_views(&scene, config)?;
    let out = &config.out_dir;
    let report = fit_nerf(&train, &held, scene.background, &nerf).inspect_err(|e| save_last_good(out, e))?;
    write_run(out, config, &report)?;
    let renders = out.join("renders");
    for (k, (pred, view)) in report.renders.iter().zip(&held).enumerate() {
        save_png(pred, renders.join(format!("heldout_{k}.png")))?;
        save_png(&view.image, renders.join(format!("truth_{k}.png")))?;
        error_png(pred, &view.image, &renders.join(format!("error_{k}.png")))?;
    }
    Ok(report)
}

/// One line of the bench table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub beta: f64,
    pub outcome: std::result::Result<BenchResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub iterations: usize,
    pub final_psnr: f64,
    pub final_ssim: f64,
    pub rendered_rays: u64,
    pub field_queries: u64,
    pub supervised_fraction: f64,
    pub rho: f64,
    pub predicted_savings: f64,
    pub step_secs: f64,
    pub rows: Vec<MetricRow>,
}

pub const BENCH_HEADER: &str = "strategy,beta,status,iterations,final_psnr,final_ssim,rendered_rays_cum,field_queries_cum,supervised_fraction,rho,predicted_savings,measured_savings,message";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Per-strategy affine fit of rendered rays against beta, for strategies
    /// run at two or more distinct betas.
    pub fn linearity(&self) -> Vec<(Strategy, f64, f64, f64)> {
        let mut out = Vec::new();
        for s in Strategy::ALL {
            let (xs, ys): (Vec<f64>, Vec<f64>) = self
                .rows
                .iter()
                .filter(|r| r.strategy == s)
                .filter_map(|r| r.outcome.as_ref().ok().map(|o| (r.beta, o.rendered_rays as f64)))
                .unzip();
            if let Ok((m, b, r2)) = affine_fit(&xs, &ys) {
                out.push((s, m, b, r2));
            }
        }
        out
    }

    fn baseline_step(&self) -> Option<f64> {
        let standard = |r: &&BenchRow| r.strategy == Strategy::Standard;
        let pick = self
            .rows
            .iter()
            .filter(standard)
            .find(|r| r.beta == 1.0)
            .or_else(|| self.rows.iter().find(standard))?;
        let o = pick.outcome.as_ref().ok()?;
        (o.step_secs > 0.0).then(|| o.step_secs / o.iterations as f64)
    }

    pub fn to_csv(&self) -> String {
        let base = self.baseline_step();
        let mut s = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            let head = format!("{},{}", r.strategy.name(), r.beta);
            match &r.outcome {
                Ok(o) => {
                    let measured = match base {
                        Some(b) if o.step_secs > 0.0 => {
                            format!("{:.4}", 1.0 - o.step_secs / o.iterations as f64 / b)
                        }
                        _ => String::new(),
                    };
                    let _ = writeln!(
                        s,
                        "{head},ok,{},{:.4},{:.4},{},{},{},{:.6},{:.6},{measured},",
                        o.iterations,
                        o.final_psnr,
                        o.final_ssim,
                        o.rendered_rays,
                        o.field_queries,
                        o.supervised_fraction,
                        o.rho,
                        o.predicted_savings
                    );
                }
                Err(msg) => {
                    let msg = msg.replace([',', '\n'], ";");
                    let _ = writeln!(s, "{head},error,,,,,,,,,,,{msg}");
                }
            }
        }
        s
    }

    /// Rendered rays and savings per beta, with the affine fit per strategy.
    pub fn savings_table(&self) -> String {
        let mut s = String::from("strategy,beta,rendered_rays_cum,rho,ray_savings\n");
        for r in &self.rows {
            if let Ok(o) = &r.outcome {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6},{:.6}",
                    r.strategy.name(),
                    r.beta,
                    o.rendered_rays,
                    o.rho,
                    1.0 - o.rho
                );
            }
        }
        for (st, m, b, r2) in self.linearity() {
            let _ = writeln!(s, "# fit {}: rays = {m:.3} * beta + {b:.3}, r2 = {r2:.6}", st.name());
        }
        s
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok())
            .flat_map(|o| o.rows.iter().cloned())
            .collect()
    }
}

fn bench_one(config: &RunConfig, data: &BenchData) -> Result<BenchResult> {
    let report = match data {
        BenchData::Image { path, img } => {
            let anchor = image_anchor(config, path, img)?;
            fit_image_with_anchor(img, anchor, &config.train_config())?
        }
        BenchData::Nerf { background, train, held } => {
            fit_nerf(train, held, *background, &config.nerf_config())?
        }
    };
    let last = report
        .final_row()
        .ok_or_else(|| Error::Numeric("run produced no metric rows".into()))?;
    Ok(BenchResult {
        iterations: report.counters.iterations,
        final_psnr: last.psnr_db,
        final_ssim: last.ssim,
        rendered_rays: report.counters.rendered_rays,
        field_queries: report.counters.field_queries,
        supervised_fraction: config.plan().supervised_fraction(),
        rho: report.resource.rendered_ray_fraction,
        predicted_savings: report.resource.predicted_savings,
        step_secs: if config.deterministic { 0.0 } else { report.counters.step_secs },
        rows: report.rows,
    })
}

enum BenchData {
    Image { path: PathBuf, img: ImageBuffer },
    Nerf { background: [f64; 3], train: Vec<View>, held: Vec<View> },
}

/// Runs every `(strategy, beta)` pair with the same seed. A failed run is
/// recorded in its row and the bench moves on. Writes `bench.csv`,
/// `savings.csv`, `report.csv` and `config.txt`.
pub fn cmd_bench(config: &RunConfig) -> Result<BenchReport> {
    if config.strategies.is_empty() || config.betas.is_empty() {
        return Err(Error::arg("bench needs at least one strategy and one beta"));
    }
    let data = match config.backbone {
        Backbone::Image => {
            let path = config
                .image
                .clone()
                .ok_or_else(|| Error::arg("image bench needs --image"))?;
            let img = load_image(&path)?.to_rgb();
            BenchData::Image { path, img }
        }
        Backbone::Nerf => {
            let scene = load_scene(&config.scene)?;
            let (train, held) = scene_views(&scene, config)?;
            BenchData::Nerf {
                background: scene.background,
                train,
                held,
            }
        }
    };
    let jobs: Vec<(Strategy, f64)> = config
        .strategies
        .iter()
        .flat_map(|&s| config.betas.iter().map(move |&b| (s, b)))
        .collect();
    let results: Vec<Mutex<Option<BenchRow>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.jobs.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(strategy, beta)) = jobs.get(i) else {
                    break;
                };
                let mut c = config.clone();
                c.strategy = strategy;
                c.beta = beta;
                c.run_id = format!("{}-{}-b{}", config.run_id, strategy.name(), beta);
                log::info!("bench: {}", c.run_id);
                let outcome = bench_one(&c, &data).map_err(|e| e.to_string());
                if let Err(msg) = &outcome {
                    log::warn!("bench run {} failed: {msg}", c.run_id);
                }
                *results[i].lock().unwrap() = Some(BenchRow {
                    strategy,
                    beta,
                    outcome,
                });
            });
        }
    });
    let report = BenchReport {
        rows: results
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every bench job ran"))
            .collect(),
    };
    let out = &config.out_dir;
    config.save(&out.join("config.txt"))?;
    write_text(&out.join("bench.csv"), &report.to_csv())?;
    write_text(&out.join("savings.csv"), &report.savings_table())?;
    write_text(&out.join("report.csv"), &rows_to_csv(&report.metric_rows()))?;
    Ok(report)
}

/// Outcome of a standalone anchor extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorStats {
    pub threshold: f64,
    pub iterations: usize,
    /// `E(T) / (xi_a |I|)`.
    pub ratio: f64,
    /// `E(T) / |I|`.
    pub fraction: f64,
    pub converged: bool,
}

impl AnchorStats {
    pub fn line(&self, config: &RunConfig) -> String {
        format!(
            "threshold={:.6} iterations={} ratio={:.4} fraction={:.4} converged={} xi_a={} mu={} blur_sigma={}",
            self.threshold,
            self.iterations,
            self.ratio,
            self.fraction,
            self.converged,
            config.xi_a,
            config.mu,
            config.blur_sigma
        )
    }
}

/// Extracts the anchor of `config.image` at `config.xi_a` and writes
/// `masks/anchor.pgm`. On a convergence failure the closest mask is still
/// written and the stats are returned alongside the error.
pub fn cmd_extract_anchor(config: &RunConfig) -> (Option<AnchorStats>, Result<()>) {
    let run = || -> std::result::Result<AnchorStats, (Option<AnchorStats>, Error)> {
        let path = config
            .image
            .as_deref()
            .ok_or_else(|| (None, Error::arg("extract-anchor needs --image")))?;
        let img = load_image(path).map_err(|e| (None, e))?;
        let mask_path = config.out_dir.join("masks").join("anchor.pgm");
        let n = img.pixel_count() as f64;
        let target = config.xi_a * n;
        match extract_anchor(&img, config.xi_a, &config.threshold(), &config.edge()) {
            Ok(anchor) => {
                save_anchor_pgm(&anchor, &mask_path).map_err(|e| (None, e))?;
                let count = anchor.anchor_indices.len() as f64;
                Ok(AnchorStats {
                    threshold: anchor.threshold().unwrap_or(0.0),
                    iterations: anchor.iterations,
                    ratio: count / target,
                    fraction: count / n,
                    converged: true,
                })
            }
            Err(e) => {
                let Error::Convergence {
                    iterations,
                    best_ratio,
                    best_threshold,
                    best,
                } = &e
                else {
                    return Err((None, e));
                };
                let stats = AnchorStats {
                    threshold: *best_threshold,
                    iterations: *iterations,
                    ratio: *best_ratio,
                    fraction: best.count() as f64 / n,
                    converged: false,
                };
                let anchor = AnchorMask::from_mask((**best).clone(), vec![*best_threshold], *iterations);
                if let Err(w) = save_anchor_pgm(&anchor, &mask_path) {
                    log::warn!("could not write best-effort mask: {w}");
                }
                Err((Some(stats), e))
            }
        }
    };
    match run() {
        Ok(stats) => (Some(stats), Ok(())),
        Err((stats, e)) => (stats, Err(e)),
    }
}

/// Final row of every run found in the given report CSVs, one line each.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::arg("report needs at least one CSV"));
    }
    let mut finals: Vec<MetricRow> = Vec::new();
    for p in paths {
        let p = if p.is_dir() { p.join("report.csv") } else { p.clone() };
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let start = finals.len();
        for row in parse_csv(&text)? {
            match finals[start..]
                .iter_mut()
                .find(|r| r.run_id == row.run_id && r.strategy == row.strategy && r.beta == row.beta)
            {
                Some(r) if r.iter <= row.iter => *r = row,
                Some(_) => {}
                None => finals.push(row),
            }
        }
    }
    let mut s = format!(
        "{:<28} {:<18} {:>5} {:>7} {:>8} {:>7} {:>14} {:>16}\n",
        "run_id", "strategy", "beta", "iter", "psnr_db", "ssim", "rendered_rays", "field_queries"
    );
    for r in &finals {
        let _ = writeln!(
            s,
            "{:<28} {:<18} {:>5} {:>7} {:>8.3} {:>7.4} {:>14} {:>16}",
            r.run_id,
            r.strategy.name(),
            r.beta,
            r.iter,
            r.psnr_db,
            r.ssim,
            r.rendered_rays_cum,
            r.field_queries_cum
        );
    }
    Ok(s)
}

#[derive(Debug, Parser)]
#[command(name = "expansive", version, about = "Expansive supervision for image networks and toy radiance fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the sinusoidal image network to one image.
    FitImage(RunArgs),
    /// Train the voxel radiance field on an analytic scene.
    FitNerf(RunArgs),
    /// Sweep strategies and betas with shared seeds.
    Bench(RunArgs),
    /// Extract and save the anchor mask of an image.
    ExtractAnchor(RunArgs),
    /// Summarize the final rows of report CSVs (files or run directories).
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

/// Flags shared by the run commands. Each flag overrides the key of the same
/// name; `--set key=value` reaches every other key.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Config file applied over the defaults before any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long = "xi-a")]
    pub xi_a: Option<String>,
    #[arg(long = "xi-s")]
    pub xi_s: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub mu: Option<String>,
    #[arg(long = "blur-sigma")]
    pub blur_sigma: Option<String>,
    #[arg(long = "total-iters")]
    pub total_iters: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long = "eval-interval")]
    pub eval_interval: Option<String>,
    #[arg(long = "out-dir")]
    pub out_dir: Option<String>,
    #[arg(long = "run-id")]
    pub run_id: Option<String>,
    #[arg(long)]
    pub image: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub strategies: Option<String>,
    #[arg(long)]
    pub betas: Option<String>,
    #[arg(long)]
    pub jobs: Option<String>,
    /// Zero out timings so reports are byte-reproducible.
    #[arg(long)]
    pub deterministic: bool,
    /// Skip the on-disk anchor cache.
    #[arg(long = "no-cache")]
    pub no_cache: bool,
}

impl RunArgs {
    /// Defaults, then the config file, then `--set`, then named flags.
    pub fn resolve(&self, backbone: Backbone) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p, backbone)?,
            None => RunConfig::defaults_for(backbone),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("--set expects key=value, got '{kv}'")))?;
            c.set(k.trim(), v)?;
        }
        let named = [
            ("strategy", &self.strategy),
            ("xi-a", &self.xi_a),
            ("xi-s", &self.xi_s),
            ("beta", &self.beta),
            ("mu", &self.mu),
            ("blur-sigma", &self.blur_sigma),
            ("total-iters", &self.total_iters),
            ("seed", &self.seed),
            ("lr", &self.lr),
            ("eval-interval", &self.eval_interval),
            ("out-dir", &self.out_dir),
            ("run-id", &self.run_id),
            ("image", &self.image),
            ("batch", &self.batch),
            ("scene", &self.scene),
            ("strategies", &self.strategies),
            ("betas", &self.betas),
            ("jobs", &self.jobs),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                c.set(k, v)?;
            }
        }
        if self.deterministic {
            c.deterministic = true;
        }
        if self.no_cache {
            c.anchor_cache = false;
        }
        Ok(c)
    }

    fn backbone(&self) -> Result<Backbone> {
        self.backbone.as_deref().map_or(Ok(Backbone::Image), str::parse)
    }
}

fn summary(report: &TrainReport) -> String {
    let mut s = String::new();
    if let Some(r) = report.final_row() {
        let _ = writeln!(
            s,
            "final iter={} psnr_db={:.3} ssim={:.4} rendered_rays={} field_queries={}",
            r.iter, r.psnr_db, r.ssim, r.rendered_rays_cum, r.field_queries_cum
        );
    }
    let _ = writeln!(s, "{}", report.resource.describe());
    s
}

/// Runs a parsed command line and returns the process exit code. Output
/// goes to stdout, diagnostics to stderr.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::FitImage(a) => a
            .resolve(Backbone::Image)
            .and_then(|c| cmd_fit_image(&c))
            .map(|r| print!("{}", summary(&r))),
        Command::FitNerf(a) => a
            .resolve(Backbone::Nerf)
            .and_then(|c| cmd_fit_nerf(&c))
            .map(|r| print!("{}", summary(&r))),
        Command::Bench(a) => a
            .backbone()
            .and_then(|b| a.resolve(b))
            .and_then(|c| cmd_bench(&c))
            .map(|r| print!("{}{}", r.to_csv(), r.savings_table())),
        Command::ExtractAnchor(a) => a.resolve(Backbone::Image).and_then(|c| {
            let (stats, res) = cmd_extract_anchor(&c);
            if let Some(st) = stats {
                println!("{}", st.line(&c));
            }
            res
        }),
        Command::Report { paths } => cmd_report(paths).map(|s| print!("{s}")),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (program name first) and runs. Argument errors from the
/// parser exit with code 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ARGUMENT } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
