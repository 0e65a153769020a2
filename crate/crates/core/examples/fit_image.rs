//! Fit the sine network to a small image with expansive supervision and
//! with uniform sampling at the same pixel budget.
//!
//! cargo run --release --example fit_image -- [image.png] [iterations]

use std::path::PathBuf;

use expansive::image::{load_image, save_png};
use expansive::inr::{fit_image_with_anchor, TrainConfig};
use expansive::selection::{extract_anchor, AnchorMask, Strategy, SupervisionPlan};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/fit/chelsea_32.png"));
    let iters: usize = args.next().map_or(Ok(1000), |s| s.parse())?;
    let img = load_image(&path)?.to_rgb();

    let es = TrainConfig {
        plan: SupervisionPlan {
            total_iters: iters,
            ..SupervisionPlan::default()
        },
        eval_interval: (iters / 5).max(1),
        ..TrainConfig::default()
    };
    let anchor = extract_anchor(&img, es.plan.xi_a, &es.threshold, &es.edge)?;
    println!(
        "{}: {}x{}, anchor {} px ({:.1}%)",
        path.display(),
        img.width(),
        img.height(),
        anchor.anchor_indices.len(),
        100.0 * anchor.anchor_indices.len() as f64 / img.pixel_count() as f64
    );
    let es_report = fit_image_with_anchor(&img, anchor, &es)?;
    let per_iter = es_report.counters.rendered_rays as usize / iters;

    let standard = TrainConfig {
        plan: SupervisionPlan {
            strategy: Strategy::Standard,
            ..es.plan.clone()
        },
        batch: Some(per_iter),
        ..es.clone()
    };
    let std_report = fit_image_with_anchor(&img, AnchorMask::none(img.pixel_count()), &standard)?;

    println!("{:>6} {:>10} {:>10}", "iter", "expansive", "standard");
    for (a, b) in es_report.rows.iter().zip(&std_report.rows) {
        println!("{:>6} {:>10.2} {:>10.2}", a.iter, a.psnr_db, b.psnr_db);
    }
    println!("{per_iter} pixels per iteration for both runs");

    let out = std::env::temp_dir().join("expansive_fit_image.png");
    save_png(es_report.renders.last().expect("final render"), &out)?;
    println!("expansive render written to {}", out.display());
    Ok(())
}
