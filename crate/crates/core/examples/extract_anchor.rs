//! Size anchor areas on a photo at several ratios and dump the masks.
//!
//! cargo run --release --example extract_anchor -- [image.png]

use std::path::PathBuf;

use expansive::edge::{EdgeDetectorParams, ThresholdSchedule};
use expansive::image::load_image;
use expansive::selection::{extract_anchor, save_anchor_pgm};

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/corpus/camera.png"));
    let img = load_image(&path)?;
    let sched = ThresholdSchedule::default();
    let params = EdgeDetectorParams::default();
    let n = img.pixel_count() as f64;
    for xi_a in [0.025, 0.075, 0.125, 0.25] {
        match extract_anchor(&img, xi_a, &sched, &params) {
            Ok(a) => {
                let out = std::env::temp_dir().join(format!("anchor_{xi_a}.pgm"));
                save_anchor_pgm(&a, &out)?;
                println!(
                    "xi_a {xi_a:<6} threshold {:.4} after {} steps, {:.1}% of pixels -> {}",
                    a.threshold().unwrap_or(0.0),
                    a.iterations,
                    100.0 * a.anchor_indices.len() as f64 / n,
                    out.display()
                );
            }
            Err(e) => println!("xi_a {xi_a:<6} {e}"),
        }
    }
    Ok(())
}
