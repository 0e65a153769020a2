//! Train with full-image supervision for a while, then show how the loss
//! is spread over pixels: most pixels carry very little of it.
//!
//! cargo run --release --example long_tail -- [iterations]

use expansive::image::{load_image, save_field_pgm};
use expansive::inr::{fit_image_with_anchor, TrainConfig};
use expansive::metrics::{error_map, tail_stats};
use expansive::selection::{AnchorMask, Strategy, SupervisionPlan};

fn main() -> anyhow::Result<()> {
    let iters: usize = std::env::args().nth(1).map_or(Ok(300), |s| s.parse())?;
    let img = load_image(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/fit/chelsea_64.png"))?.to_rgb();
    let cfg = TrainConfig {
        plan: SupervisionPlan {
            strategy: Strategy::Standard,
            total_iters: iters,
            ..SupervisionPlan::default()
        },
        eval_interval: iters,
        ..TrainConfig::default()
    };
    let report = fit_image_with_anchor(&img, AnchorMask::none(img.pixel_count()), &cfg)?;
    let pred = report.renders.last().expect("final render");
    let errors = error_map(pred, &img)?;
    let stats = tail_stats(errors.data())?;
    println!("PSNR after {iters} iterations: {:.2} dB", report.final_psnr());
    for (q, f) in stats.summary() {
        println!("smallest {:>5.1}% of pixels carry {:>5.1}% of the loss", 100.0 * q, 100.0 * f);
    }
    let out = std::env::temp_dir().join("expansive_error_map.pgm");
    save_field_pgm(&errors, 0.0, errors.max(), &out)?;
    println!("error map written to {}", out.display());
    Ok(())
}
