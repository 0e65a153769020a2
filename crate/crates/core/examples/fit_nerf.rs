//! Train the voxel radiance field on the two-sphere scene and report
//! held-out PSNR for expansive and standard supervision.
//!
//! cargo run --release --example fit_nerf -- [iterations]

use expansive::cli::{load_scene, scene_views, RunConfig};
use expansive::nerf::fit_nerf;
use expansive::selection::Strategy;

fn main() -> anyhow::Result<()> {
    let iters: usize = std::env::args().nth(1).map_or(Ok(2000), |s| s.parse())?;
    let mut c = RunConfig::nerf_defaults();
    c.scene = "two-spheres".into();
    c.train_views = 8;
    c.held_out_views = 2;
    c.view_size = 32;
    c.focal_factor = 1.2;
    c.total_iters = iters;
    c.eval_interval = (iters / 4).max(1);

    let scene = load_scene(&c.scene)?;
    let (train, held) = scene_views(&scene, &c)?;
    for strategy in [Strategy::Expansive, Strategy::Standard] {
        c.strategy = strategy;
        let report = fit_nerf(&train, &held, scene.background, &c.nerf_config())?;
        let curve: Vec<String> = report
            .rows
            .iter()
            .map(|r| format!("{}:{:.2}", r.iter, r.psnr_db))
            .collect();
        println!(
            "{:<10} rays/iter {:>4}  held-out PSNR {}",
            strategy.name(),
            report.counters.rendered_rays / report.counters.iterations as u64,
            curve.join("  ")
        );
    }
    Ok(())
}
