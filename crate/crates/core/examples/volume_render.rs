//! Render the analytic cluster scene from an orbit camera, compare the
//! quadrature against the closed form for a homogeneous slab, and print the
//! sample weights of one ray.

use expansive::image::save_png;
use expansive::nerf::{composite, generate_rays, orbit_cameras, AnalyticScene};

fn main() -> anyhow::Result<()> {
    let (tau, len, c) = (1.7, 2.0, [0.2, 0.6, 0.9]);
    for n in [1, 4, 64] {
        let (rgb, _) = composite(vec![tau; n], vec![c; n], vec![len / n as f64; n], [0.0; 3])?;
        let exact = c[1] * (1.0 - f64::exp(-tau * len));
        println!("slab with {n:>2} samples: green {:.12} (closed form {exact:.12})", rgb[1]);
    }

    let scene = AnalyticScene::cluster(11, 30, 1.0);
    let cam = &orbit_cameras(1, 4.0, 25.0, 30.0, 96.0, 64, 1.0)?[0];
    let img = scene.render_view(cam, 256)?;
    let out = std::env::temp_dir().join("expansive_cluster.png");
    save_png(&img, &out)?;
    println!("cluster view written to {}", out.display());

    let rays = generate_rays(cam)?;
    let center = &rays[32 * 64 + 32];
    let (rgb, cache) = scene.render_ray(center, 16)?;
    let w = cache.weights();
    println!("center ray color {rgb:.3?}, opacity {:.3}", cache.opacity());
    println!("weights {:.3?}", w);
    Ok(())
}
