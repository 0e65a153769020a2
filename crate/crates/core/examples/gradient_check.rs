//! Compare the analytic backward passes of the sine network and the
//! compositing step against finite differences.

use expansive::inr::{backward, forward, siren_init, SineMlp};
use expansive::nerf::{composite, render_ray_backward};
use expansive::selection::batch_rng;
use ndarray::Array2;
use rand::Rng;

fn central(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn main() -> anyhow::Result<()> {
    let mut rng = batch_rng(1, 0);
    let net: SineMlp<f64> = siren_init(&mut rng, &[2, 16, 16, 3], 30.0)?;
    let x = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
    let g = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
    let cache = forward(&net, x.view())?;
    let analytic = backward(&net, &cache, g.view())?.slots().concat();
    let mut probe = net.clone();
    let (mut k, mut worst) = (0, 0.0f64);
    for (slot, len) in net.slot_sizes().into_iter().enumerate() {
        for i in 0..len {
            let orig = probe.slots_mut()[slot][i];
            let fd = central(1e-4, |d| {
                probe.slots_mut()[slot][i] = orig + d;
                (forward(&probe, x.view()).unwrap().output() * &g).sum()
            });
            probe.slots_mut()[slot][i] = orig;
            worst = worst.max(rel(analytic[k], fd));
            k += 1;
        }
    }
    println!("sine network: {k} parameters, worst relative error {worst:.2e}");

    let n = 8;
    let tau: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
    let color: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let delta = vec![0.15; n];
    let gc = [0.3, -0.7, 0.5];
    let loss = |t: &[f64]| {
        let c = composite(t.to_vec(), color.clone(), delta.clone(), [0.1; 3]).unwrap().0;
        gc[0] * c[0] + gc[1] * c[1] + gc[2] * c[2]
    };
    let (_, rc) = composite(tau.clone(), color.clone(), delta.clone(), [0.1; 3])?;
    let (d_tau, _) = render_ray_backward(&rc, gc)?;
    let mut t = tau.clone();
    let mut worst = 0.0f64;
    for i in 0..n {
        let fd = central(1e-5, |d| {
            t[i] = tau[i] + d;
            loss(&t)
        });
        t[i] = tau[i];
        worst = worst.max(rel(d_tau[i], fd));
    }
    println!("compositing: {n} densities, worst relative error {worst:.2e}");
    Ok(())
}
