use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;

use super::{adam_step, backward, forward, predict, siren_init, SineMlp, DEFAULT_OMEGA0};
use crate::adam::AdamConfig;
use crate::checkpoint::encode_mlp;
use crate::edge::{EdgeDetectorParams, ThresholdSchedule};
use crate::error::{Error, Result};
use crate::image::{pixel_grid, ImageBuffer};
use crate::metrics::{psnr, resource_report, ssim, ResourceCounters};
use crate::report::{MetricRow, TrainReport};
use crate::selection::{
    apply_beta, batch_rng, extract_anchor, AnchorMask, BatchBudget, BatchSampler, SupervisionPlan,
};
use crate::supervision::{
    edge_resample_weights, expansive_loss, loss_gradient_weights, ExpansiveSchedule,
};

/// Hidden width, depth and frequency scale of the image network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkShape {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub omega0: f64,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            hidden_layers: 3,
            omega0: DEFAULT_OMEGA0,
        }
    }
}

impl NetworkShape {
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![2];
        d.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        d.push(3);
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Strategy, ratios and seed. `plan.total_iters` is the iteration count.
    pub plan: SupervisionPlan,
    pub learning_rate: f64,
    /// Evaluate and log every this many iterations (and always at the end).
    pub eval_interval: usize,
    /// Rays per iteration. `None` lets the plan decide: every anchor pixel
    /// plus a source sample, or `beta (xi_a + xi_s) |I|` uniform pixels.
    pub batch: Option<usize>,
    pub network: NetworkShape,
    pub threshold: ThresholdSchedule,
    pub edge: EdgeDetectorParams,
    /// Write zero step times so that reports are byte-reproducible.
    pub deterministic: bool,
    pub run_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            plan: SupervisionPlan::default(),
            learning_rate: 1e-4,
            eval_interval: 500,
            batch: None,
            network: NetworkShape::default(),
            threshold: ThresholdSchedule::default(),
            edge: EdgeDetectorParams::default(),
            deterministic: false,
            run_id: "run".into(),
        }
    }
}

impl TrainConfig {
    pub fn iterations(&self) -> usize {
        self.plan.total_iters
    }

    pub fn budget(&self) -> BatchBudget {
        self.batch.map_or(BatchBudget::Full, BatchBudget::Rays)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.threshold.validate()?;
        self.edge.validate()?;
        if self.eval_interval == 0 {
            return Err(Error::arg("eval interval must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if self.network.hidden_width == 0 || self.network.hidden_layers == 0 {
            return Err(Error::arg("network needs at least one hidden layer"));
        }
        if self.batch == Some(0) {
            return Err(Error::arg("batch must be positive"));
        }
        if self.run_id.contains(',') || self.run_id.contains('\n') {
            return Err(Error::arg("run id may not contain commas or newlines"));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> String {
        let p = &self.plan;
        let mut s = String::new();
        let _ = writeln!(s, "run_id={}", self.run_id);
        let _ = writeln!(s, "strategy={}", p.strategy);
        let _ = writeln!(s, "xi_a={}\nxi_s={}\nbeta={}", p.xi_a, p.xi_s, p.beta);
        let _ = writeln!(s, "supervised_fraction={}", p.supervised_fraction());
        let _ = writeln!(s, "total_iters={}\nseed={}", p.total_iters, p.rng_seed);
        let _ = writeln!(s, "mu={}", self.threshold.mu);
        let _ = writeln!(
            s,
            "lr={}\neval_interval={}",
            self.learning_rate, self.eval_interval
        );
        match self.batch {
            Some(b) => {
                let _ = writeln!(s, "batch={b}");
            }
            None => s.push_str("batch=plan\n"),
        }
        let n = &self.network;
        let _ = writeln!(
            s,
            "hidden_width={}\nhidden_layers={}\nomega0={}",
            n.hidden_width, n.hidden_layers, n.omega0
        );
        let _ = writeln!(s, "deterministic={}", self.deterministic);
        s
    }
}

/// Fits the image network, extracting the anchor area first when the
/// strategy needs one.
pub fn fit_image(img: &ImageBuffer, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let anchor = if config.plan.strategy.uses_anchor() {
        extract_anchor(
            img,
            apply_beta(&config.plan).0,
            &config.threshold,
            &config.edge,
        )?
    } else {
        AnchorMask::none(img.pixel_count())
    };
    fit_image_with_anchor(img, anchor, config)
}

/// Chunk size for full-image evaluation passes.
const EVAL_CHUNK: usize = 8192;

fn to_image(y: &Array2<f32>, h: usize, w: usize) -> Result<ImageBuffer> {
    ImageBuffer::new(h, w, 3, y.iter().map(|&v| v as f64).collect())
}

/// Fits the image network with a precomputed anchor area.
pub fn fit_image_with_anchor(
    img: &ImageBuffer,
    anchor: AnchorMask,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let img = img.to_rgb();
    let (h, w) = (img.height(), img.width());
    let n = img.pixel_count();
    if anchor.total_pixels() != n {
        return Err(Error::arg("anchor area does not match the image size"));
    }
    let plan = config.plan.clone();
    let strategy = plan.strategy;
    let grid = pixel_grid(h, w)?;
    let coords = Array2::from_shape_fn((n, 2), |(i, j)| grid.coords[i][j] as f32);
    let truth: Vec<[f64; 3]> = (0..n).map(|i| img.rgb(i)).collect();

    let mut sampler = BatchSampler::new(plan.clone(), anchor.clone())?;
    if strategy == crate::selection::Strategy::EdgeResample {
        sampler = sampler.with_edge_distribution(&edge_resample_weights(&img, &config.edge)?)?;
    }
    let sched = ExpansiveSchedule::new(apply_beta(&plan).0, plan.total_iters)?;

    let mut init_rng = batch_rng(plan.rng_seed ^ 0x5EED_1417, 0);
    let mut net: SineMlp<f32> =
        siren_init(&mut init_rng, &config.network.dims(), config.network.omega0)?;
    let mut adam = net.adam(AdamConfig::with_lr(config.learning_rate));

    let mut counters = ResourceCounters {
        full_rays: n,
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut last_good = encode_mlp(&net, Some(&adam));
    let mut interval_secs = 0.0;
    let mut interval_steps = 0usize;

    for t in 0..plan.total_iters {
        let step_start = Instant::now();
        let batch = sampler.make_batch(t, config.budget())?;
        let ids: Vec<usize> = batch.ids().collect();
        let batch_coords = Array2::from_shape_fn((ids.len(), 2), |(r, j)| coords[[ids[r], j]]);

        let render_start = Instant::now();
        let cache = forward(&net, batch_coords.view())?;
        let render_secs = render_start.elapsed().as_secs_f64();

        let out = cache.output();
        let pred: Vec<[f64; 3]> = out
            .rows()
            .into_iter()
            .map(|r| [r[0] as f64, r[1] as f64, r[2] as f64])
            .collect();
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
        let grad_out = Array2::from_shape_fn((ids.len(), 3), |(r, c)| {
            (2.0 * weights[r] * (pred[r][c] - target[r][c])) as f32
        });
        let grads = backward(&net, &cache, grad_out.view())?;
        adam_step(&mut net, &grads, &mut adam)?;
        if !net.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                reason: "parameters became non-finite".into(),
                last_good: Some(last_good),
            });
        }

        counters.iterations += 1;
        counters.rendered_rays += ids.len() as u64;
        counters.field_queries += ids.len() as u64;
        let step_secs = step_start.elapsed().as_secs_f64();
        if !config.deterministic {
            counters.render_secs += render_secs;
            counters.step_secs += step_secs;
        }
        interval_secs += step_secs;
        interval_steps += 1;

        let done = t + 1;
        if done % config.eval_interval == 0 || done == plan.total_iters {
            let y = predict(&net, coords.view(), EVAL_CHUNK)?;
            let render = to_image(&y, h, w)?;
            rows.push(MetricRow {
                run_id: config.run_id.clone(),
                strategy,
                beta: plan.beta,
                iter: done,
                psnr_db: psnr(&render, &img)?,
                ssim: ssim(&render, &img)?,
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
            last_good = encode_mlp(&net, Some(&adam));
        }
    }

    let final_render = to_image(&predict(&net, coords.view(), EVAL_CHUNK)?, h, w)?;
    Ok(TrainReport {
        run_id: config.run_id.clone(),
        config_snapshot: config.snapshot(),
        rows,
        resource: resource_report(&counters, None)?,
        counters,
        checkpoint: last_good,
        checkpoint_path: None,
        renders: vec![final_render],
        anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::Strategy;

    fn small_config(strategy: Strategy, iters: usize) -> TrainConfig {
        TrainConfig {
            plan: SupervisionPlan {
                strategy,
                total_iters: iters,
                rng_seed: 3,
                ..SupervisionPlan::default()
            },
            learning_rate: 1e-3,
            eval_interval: 10,
            network: NetworkShape {
                hidden_width: 32,
                hidden_layers: 2,
                omega0: 30.0,
            },
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    fn test_image() -> ImageBuffer {
        ImageBuffer::from_fn_rgb(24, 24, |r, c| {
            let x = c as f64 / 23.0;
            let y = r as f64 / 23.0;
            let disc = if (x - 0.5).powi(2) + (y - 0.4).powi(2) < 0.08 {
                0.4
            } else {
                0.0
            };
            let noise = 0.15 * ((13.0 * x).sin() * (11.0 * y + 3.0 * x * x).sin() + 1.0);
            [0.2 + 0.5 * x, 0.3 + disc + noise, 0.8 - 0.5 * y]
        })
    }

    #[test]
    fn training_improves_and_counts_rays() {
        let img = test_image();
        let report = fit_image(&img, &small_config(Strategy::Standard, 60)).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.rows.windows(2).all(|w| w[0].iter < w[1].iter));
        let first = report.rows[0].psnr_db;
        assert!(
            report.final_psnr() > first + 3.0,
            "{first} -> {}",
            report.final_psnr()
        );
        // Standard: floor(0.5 * 576) pixels per step.
        assert_eq!(report.counters.rendered_rays, 60 * 288);
        assert_eq!(report.counters.field_queries, report.counters.rendered_rays);
        assert!((report.resource.rendered_ray_fraction - 0.5).abs() < 1e-12);
    }

    #[test]
    fn expansive_batches_match_anchor_plus_source() {
        let img = test_image();
        let report = fit_image(&img, &small_config(Strategy::Expansive, 20)).unwrap();
        let per_step = report.anchor.anchor_indices.len() as u64 + 144;
        assert_eq!(report.counters.rendered_rays, 20 * per_step);
        assert!(report.rows[0].weight_t > 1.0);
    }

    #[test]
    fn deterministic_runs_are_identical() {
        let img = test_image();
        let cfg = small_config(Strategy::Expansive, 20);
        let a = fit_image(&img, &cfg).unwrap();
        let b = fit_image(&img, &cfg).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn divergence_reports_last_good_checkpoint() {
        let img = test_image();
        let mut cfg = small_config(Strategy::Standard, 30);
        cfg.learning_rate = 1e38;
        match fit_image(&img, &cfg) {
            Err(Error::Divergence { last_good, .. }) => assert!(last_good.is_some()),
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|r| r.final_psnr())
            ),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_config(Strategy::Standard, 10);
        cfg.eval_interval = 0;
        assert!(fit_image(&test_image(), &cfg).is_err());
    }
}
