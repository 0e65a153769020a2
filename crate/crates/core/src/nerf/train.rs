use std::fmt::Write as _;
use std::time::Instant;

use super::{
    generate_rays, render_ray, render_ray_backward, render_view, AnalyticScene, Camera,
    RadianceGrid, Ray,
};
use crate::adam::{AdamConfig, AdamState};
use crate::checkpoint::encode_grid;
use crate::edge::{EdgeDetectorParams, ThresholdSchedule};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::{psnr, resource_report, ssim, ResourceCounters};
use crate::report::{MetricRow, TrainReport};
use crate::selection::{
    apply_beta, extract_anchor, extract_anchor_or_rank, AnchorMask, BatchBudget, BatchSampler,
    Strategy, SupervisionPlan,
};
use crate::supervision::{
    edge_resample_weights, expansive_loss, loss_gradient_weights, ExpansiveSchedule,
};

/// A posed image.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub image: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NerfConfig {
    /// Strategy, ratios and seed. `plan.total_iters` is the iteration count.
    pub plan: SupervisionPlan,
    pub learning_rate: f64,
    pub eval_interval: usize,
    /// Full per-iteration ray budget `b`.
    pub ray_budget: usize,
    /// Rays rendered per iteration. `None` renders the supervised share
    /// `round(beta (xi_a + xi_s) b)` for every strategy.
    pub rays_per_iter: Option<usize>,
    pub n_samples: usize,
    pub eval_samples: usize,
    pub resolution: [usize; 3],
    pub half_extent: f64,
    /// Initial raw density (softplus input) of every voxel.
    pub init_density: f64,
    pub threshold: ThresholdSchedule,
    pub edge: EdgeDetectorParams,
    /// Fill anchors by gradient rank when a view has too few edges for the
    /// threshold band.
    pub anchor_fallback: bool,
    pub deterministic: bool,
    pub run_id: String,
}

impl Default for NerfConfig {
    fn default() -> Self {
        Self {
            plan: SupervisionPlan {
                total_iters: 20_000,
                ..SupervisionPlan::default()
            },
            learning_rate: 0.05,
            eval_interval: 1000,
            ray_budget: 1024,
            rays_per_iter: None,
            n_samples: 64,
            eval_samples: 128,
            resolution: [32; 3],
            half_extent: 1.0,
            init_density: -2.0,
            threshold: ThresholdSchedule::default(),
            edge: EdgeDetectorParams::default(),
            anchor_fallback: true,
            deterministic: false,
            run_id: "run".into(),
        }
    }
}

impl NerfConfig {
    pub fn rays_per_iteration(&self) -> usize {
        self.rays_per_iter.unwrap_or_else(|| {
            (self.plan.supervised_fraction() * self.ray_budget as f64).round() as usize
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.threshold.validate()?;
        self.edge.validate()?;
        if self.eval_interval == 0
            || self.n_samples == 0
            || self.eval_samples == 0
            || self.ray_budget == 0
        {
            return Err(Error::arg(
                "eval interval, sample counts and ray budget must be positive",
            ));
        }
        if self.rays_per_iteration() == 0 {
            return Err(Error::arg("configuration renders no rays per iteration"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if self.run_id.contains(',') || self.run_id.contains('\n') {
            return Err(Error::arg("run id may not contain commas or newlines"));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> String {
        let p = &self.plan;
        let mut s = String::new();
        let _ = writeln!(s, "run_id={}\nstrategy={}", self.run_id, p.strategy);
        let _ = writeln!(s, "xi_a={}\nxi_s={}\nbeta={}", p.xi_a, p.xi_s, p.beta);
        let _ = writeln!(s, "supervised_fraction={}", p.supervised_fraction());
        let _ = writeln!(
            s,
            "total_iters={}\nseed={}\nmu={}",
            p.total_iters, p.rng_seed, self.threshold.mu
        );
        let _ = writeln!(
            s,
            "lr={}\neval_interval={}",
            self.learning_rate, self.eval_interval
        );
        let _ = writeln!(
            s,
            "ray_budget={}\nrays_per_iter={}",
            self.ray_budget,
            self.rays_per_iteration()
        );
        let _ = writeln!(
            s,
            "n_samples={}\neval_samples={}",
            self.n_samples, self.eval_samples
        );
        let r = self.resolution;
        let _ = writeln!(
            s,
            "resolution={}x{}x{}\nhalf_extent={}",
            r[0], r[1], r[2], self.half_extent
        );
        let _ = writeln!(s, "anchor_fallback={}", self.anchor_fallback);
        let _ = writeln!(s, "deterministic={}", self.deterministic);
        s
    }
}

/// `count` cameras on a circle of `radius` around the origin at a fixed
/// elevation, starting at `azimuth0_deg`. Near/far bracket the cube of
/// half-width `half_extent`.
pub fn orbit_cameras(
    count: usize,
    radius: f64,
    elevation_deg: f64,
    azimuth0_deg: f64,
    focal: f64,
    size: usize,
    half_extent: f64,
) -> Result<Vec<Camera>> {
    let reach = 3f64.sqrt() * half_extent;
    if radius <= reach {
        return Err(Error::arg("cameras must sit outside the scene bounds"));
    }
    let el = elevation_deg.to_radians();
    (0..count)
        .map(|k| {
            let az = (azimuth0_deg + 360.0 * k as f64 / count as f64).to_radians();
            let eye = [
                radius * el.cos() * az.sin(),
                radius * el.sin(),
                radius * el.cos() * az.cos(),
            ];
            Camera::look_at(
                eye,
                [0.0; 3],
                [0.0, 1.0, 0.0],
                focal,
                size,
                size,
                radius - reach,
                radius + reach,
            )
        })
        .collect()
}

/// Ground-truth views of `scene` from `cameras` at `n` quadrature bins.
pub fn orbit_views(scene: &AnalyticScene, cameras: &[Camera], n: usize) -> Result<Vec<View>> {
    cameras
        .iter()
        .map(|c| {
            Ok(View {
                camera: *c,
                image: scene.render_view(c, n)?,
            })
        })
        .collect()
}

fn evaluate(
    grid: &RadianceGrid,
    views: &[View],
    n: usize,
    bg: [f64; 3],
) -> Result<(f64, f64, Vec<ImageBuffer>)> {
    let mut p = 0.0;
    let mut s = 0.0;
    let mut renders = Vec::with_capacity(views.len());
    for v in views {
        let img = render_view(grid, &v.camera, n, bg)?;
        p += psnr(&img, &v.image)?;
        s += ssim(&img, &v.image)?;
        renders.push(img);
    }
    let k = views.len() as f64;
    Ok((p / k, s / k, renders))
}

/// Trains a voxel grid on `train` views and reports mean PSNR/SSIM on the
/// `held_out` views.
pub fn fit_nerf(
    train: &[View],
    held_out: &[View],
    background: [f64; 3],
    config: &NerfConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::arg("need at least two training views"));
    }
    if held_out.is_empty() {
        return Err(Error::arg("need at least one held-out view"));
    }
    let width = train[0].image.width();
    for v in train.iter().chain(held_out) {
        v.camera.validate()?;
        if (v.image.height(), v.image.width()) != (v.camera.height, v.camera.width) {
            return Err(Error::arg("view image does not match its camera"));
        }
    }
    if train.iter().any(|v| v.image.width() != width) {
        return Err(Error::arg("training views must share a width"));
    }

    let plan = config.plan.clone();
    let strategy = plan.strategy;
    let mut rays: Vec<Ray> = Vec::new();
    let mut truth: Vec<[f64; 3]> = Vec::new();
    for v in train {
        rays.extend(generate_rays(&v.camera)?);
        let rgb = v.image.to_rgb();
        truth.extend((0..rgb.pixel_count()).map(|i| rgb.rgb(i)));
    }
    let total = rays.len();

    let anchor = if strategy.uses_anchor() {
        let xa = apply_beta(&plan).0;
        let per_view = train
            .iter()
            .map(|v| {
                if config.anchor_fallback {
                    extract_anchor_or_rank(&v.image, xa, &config.threshold, &config.edge)
                } else {
                    extract_anchor(&v.image, xa, &config.threshold, &config.edge)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        AnchorMask::stack(&per_view)?
    } else {
        AnchorMask::none(total)
    };
    let mut sampler = BatchSampler::new(plan.clone(), anchor.clone())?;
    if strategy == Strategy::EdgeResample {
        let mut weights = Vec::with_capacity(total);
        for v in train {
            weights.extend(edge_resample_weights(&v.image, &config.edge)?);
        }
        sampler = sampler.with_edge_distribution(&weights)?;
    }
    let sched = ExpansiveSchedule::new(apply_beta(&plan).0, plan.total_iters)?;
    let n_rays = config.rays_per_iteration();

    let mut grid = RadianceGrid::new(
        config.resolution,
        config.half_extent,
        config.init_density,
        0.0,
    )?;
    let mut adam: AdamState<f64> = AdamState::new(
        AdamConfig::with_lr(config.learning_rate),
        &[grid.density.len(), grid.color.len()],
    );
    let (mut g_density, mut g_color) = grid.zeros_like();

    let mut counters = ResourceCounters {
        full_rays: config.ray_budget,
        ..Default::default()
    };
    let mut rows = Vec::new();
    let checkpoint =
        |grid: &RadianceGrid, adam: &AdamState<f64>| encode_grid(&grid.to_checkpoint(Some(adam)));
    let mut last_good = checkpoint(&grid, &adam)?;
    let mut interval_secs = 0.0;
    let mut interval_steps = 0usize;

    for t in 0..plan.total_iters {
        let step_start = Instant::now();
        let batch = sampler.make_batch(t, BatchBudget::Rays(n_rays))?;
        let ids: Vec<usize> = batch.ids().collect();

        let render_start = Instant::now();
        let mut pred = Vec::with_capacity(ids.len());
        let mut caches = Vec::with_capacity(ids.len());
        for &id in &ids {
            let (c, cache, samples) = render_ray(&grid, &rays[id], config.n_samples, background)?;
            pred.push(c);
            caches.push((cache, samples));
        }
        let render_secs = render_start.elapsed().as_secs_f64();

        let target: Vec<[f64; 3]> = ids.iter().map(|&i| truth[i]).collect();
        let loss = expansive_loss(&pred, &target, &batch, &sched, strategy)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                reason: format!("non-finite loss {}", loss.total),
                last_good: Some(last_good),
            });
        }
        let weights = loss_gradient_weights(&batch, &sched, strategy)?;
        g_density.iter_mut().for_each(|g| *g = 0.0);
        g_color.iter_mut().for_each(|g| *g = 0.0);
        for (r, (cache, samples)) in caches.iter().enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let gc: [f64; 3] =
                std::array::from_fn(|k| 2.0 * weights[r] * (pred[r][k] - target[r][k]));
            let (d_tau, d_col) = render_ray_backward(cache, gc)?;
            for (i, s) in samples.iter().enumerate() {
                if let Some(s) = s {
                    RadianceGrid::accumulate(s, d_tau[i], d_col[i], &mut g_density, &mut g_color);
                }
            }
        }
        adam.step(
            &mut [&mut grid.density, &mut grid.color],
            &[&g_density, &g_color],
        )?;
        if grid
            .density
            .iter()
            .chain(&grid.color)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Divergence {
                iteration: t,
                reason: "grid parameters became non-finite".into(),
                last_good: Some(last_good),
            });
        }

        counters.iterations += 1;
        counters.rendered_rays += ids.len() as u64;
        counters.field_queries += (ids.len() * config.n_samples) as u64;
        let step_secs = step_start.elapsed().as_secs_f64();
        if !config.deterministic {
            counters.render_secs += render_secs;
            counters.step_secs += step_secs;
        }
        interval_secs += step_secs;
        interval_steps += 1;

        let done = t + 1;
        if done % config.eval_interval == 0 || done == plan.total_iters {
            let (p, s, _) = evaluate(&grid, held_out, config.eval_samples, background)?;
            rows.push(MetricRow {
                run_id: config.run_id.clone(),
                strategy,
                beta: plan.beta,
                iter: done,
                psnr_db: p,
                ssim: s,
                loss_total: loss.total,
                anchor_term: loss.anchor_term,
                source_term: loss.source_term,
                weight_t: loss.weight_t,
                rendered_rays_cum: counters.rendered_rays,
                field_queries_cum: counters.field_queries,
                step_ms: if config.deterministic {
                    0.0
                } else {
                    1e3 * interval_secs / interval_steps as f64
                },
            });
            interval_secs = 0.0;
            interval_steps = 0;
            last_good = checkpoint(&grid, &adam)?;
        }
    }

    let (_, _, renders) = evaluate(&grid, held_out, config.eval_samples, background)?;
    Ok(TrainReport {
        run_id: config.run_id.clone(),
        config_snapshot: config.snapshot(),
        rows,
        resource: resource_report(&counters, None)?,
        counters,
        checkpoint: last_good,
        checkpoint_path: None,
        renders,
        anchor,
    })
}
