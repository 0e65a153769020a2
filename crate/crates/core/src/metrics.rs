//! Image quality metrics, error tail statistics and resource accounting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{to_luma, ImageBuffer, ScalarField};

/// Reported instead of infinity when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::arg(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window() -> Vec<f64> {
    let w: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let x = i as f64 - SSIM_RADIUS as f64;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn filter(f: &ScalarField, k: &[f64]) -> ScalarField {
    let r = (k.len() / 2) as isize;
    let (h, w) = (f.height(), f.width());
    let rows = ScalarField::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, wt)| wt * f.get_clamped(y as isize, x as isize + i as isize - r))
            .sum()
    });
    ScalarField::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, wt)| wt * rows.get_clamped(y as isize + i as isize - r, x as isize))
            .sum()
    })
}

/// Mean structural similarity of the luma channels: 11x11 Gaussian window
/// (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`, dynamic range 1. Statistics use
/// edge clamping so every pixel contributes a local value.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::arg("ssim needs images of equal size"));
    }
    let (x, y) = (to_luma(a), to_luma(b));
    let k = ssim_window();
    let mx = filter(&x, &k);
    let my = filter(&y, &k);
    let xx = filter(&x.map(|v| v * v), &k);
    let yy = filter(&y.map(|v| v * v), &k);
    let xy_raw = ScalarField::new(
        x.height(),
        x.width(),
        x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
    )?;
    let xy = filter(&xy_raw, &k);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = x.len();
    let mut sum = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx.data()[i], my.data()[i]);
        let vx = xx.data()[i] - ux * ux;
        let vy = yy.data()[i] - uy * uy;
        let cov = xy.data()[i] - ux * uy;
        sum +=
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(sum / n as f64)
}

/// Per-pixel squared error summed over channels.
pub fn error_map(pred: &ImageBuffer, truth: &ImageBuffer) -> Result<ScalarField> {
    if !pred.same_shape(truth) {
        return Err(Error::arg("error map needs images of equal shape"));
    }
    let c = pred.channels();
    let data = pred
        .data()
        .chunks_exact(c)
        .zip(truth.data().chunks_exact(c))
        .map(|(p, q)| p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    ScalarField::new(pred.height(), pred.width(), data)
}

/// Distribution of per-pixel errors, sorted ascending, with the share of the
/// total carried by the smallest ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TailStats {
    sorted: Vec<f64>,
    /// `prefix[k]` = sum of the `k` smallest errors.
    prefix: Vec<f64>,
}

pub const TAIL_QUANTILES: [f64; 5] = [0.5, 0.9, 0.99, 0.994, 1.0];

impl TailStats {
    pub fn sorted_errors(&self) -> &[f64] {
        &self.sorted
    }

    pub fn total(&self) -> f64 {
        *self.prefix.last().expect("non-empty")
    }

    /// Share of the total loss carried by the smallest `floor(q n)` errors.
    pub fn loss_fraction(&self, q: f64) -> f64 {
        let n = self.sorted.len();
        let k = ((q.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
        let total = self.total();
        if total == 0.0 {
            return k as f64 / n as f64;
        }
        self.prefix[k] / total
    }

    /// `(q, F(q))` at [`TAIL_QUANTILES`].
    pub fn summary(&self) -> Vec<(f64, f64)> {
        TAIL_QUANTILES
            .iter()
            .map(|&q| (q, self.loss_fraction(q)))
            .collect()
    }
}

pub fn tail_stats(errors: &[f64]) -> Result<TailStats> {
    if errors.is_empty() {
        return Err(Error::arg("tail statistics need at least one error"));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(Error::arg(format!(
            "errors must be finite and non-negative, got {e}"
        )));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for e in &sorted {
        acc += e;
        prefix.push(acc);
    }
    Ok(TailStats { sorted, prefix })
}

/// Raw counters collected during a run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResourceCounters {
    pub iterations: usize,
    /// Rays a full-supervision iteration would render (`|R|`).
    pub full_rays: usize,
    pub rendered_rays: u64,
    pub field_queries: u64,
    /// Seconds spent rendering / in forward passes, over sampled iterations.
    pub render_secs: f64,
    /// Seconds spent in whole training steps, over the same iterations.
    pub step_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceModel {
    /// `|R'| / |R|`.
    pub rendered_ray_fraction: f64,
    /// Measured share of step time spent rendering.
    pub v: f64,
    /// `(1 - rho) v`.
    pub predicted_savings: f64,
    /// `1 - step_time / baseline_step_time`, when a baseline run exists.
    pub measured_savings: Option<f64>,
}

impl ResourceModel {
    pub fn new(rendered_ray_fraction: f64, v: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rendered_ray_fraction) || !(0.0..=1.0).contains(&v) {
            return Err(Error::arg("rho and v must lie in [0, 1]"));
        }
        Ok(Self {
            rendered_ray_fraction,
            v,
            predicted_savings: (1.0 - rendered_ray_fraction) * v,
            measured_savings: None,
        })
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "rho={:.4} v={:.4} predicted_savings={:.4}",
            self.rendered_ray_fraction, self.v, self.predicted_savings
        );
        match self.measured_savings {
            Some(m) => {
                let _ = write!(s, " measured_savings={m:.4}");
            }
            None => s.push_str(" measured_savings=not comparable"),
        }
        s
    }
}

pub fn resource_report(
    run: &ResourceCounters,
    baseline: Option<&ResourceCounters>,
) -> Result<ResourceModel> {
    if run.iterations == 0 || run.full_rays == 0 {
        return Err(Error::arg("resource report needs a completed run"));
    }
    let rho = run.rendered_rays as f64 / (run.iterations as f64 * run.full_rays as f64);
    let v = if run.step_secs > 0.0 {
        (run.render_secs / run.step_secs).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut model = ResourceModel::new(rho.clamp(0.0, 1.0), v)?;
    model.measured_savings = baseline
        .filter(|b| b.iterations > 0 && b.step_secs > 0.0 && run.step_secs > 0.0)
        .map(|b| {
            let per_run = run.step_secs / run.iterations as f64;
            let per_base = b.step_secs / b.iterations as f64;
            1.0 - per_run / per_base
        });
    Ok(model)
}

/// Least-squares line through `(xs, ys)`: `(slope, intercept, r_squared)`.
/// A perfectly flat `ys` gives `r_squared = 1`.
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::arg("affine fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::arg("affine fit needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageBuffer {
        let mut d = Vec::new();
        for r in 0..h {
            for c in 0..w {
                d.push(f(r, c));
            }
        }
        ImageBuffer::new(h, w, 1, d).unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = ImageBuffer::filled(4, 4, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = ImageBuffer::filled(4, 4, &[0.6, 0.6, 0.6]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = ImageBuffer::filled(4, 4, &[0.51, 0.51, 0.51]).unwrap();
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
        let d = ImageBuffer::filled(4, 5, &[0.5, 0.5, 0.5]).unwrap();
        assert!(psnr(&a, &d).is_err());
    }

    #[test]
    fn ssim_values() {
        let a = gray(16, 16, |r, c| ((r * 5 + c * 3) % 7) as f64 / 6.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let check = gray(16, 16, |r, c| ((r + c) % 2) as f64);
        let neg = gray(16, 16, |r, c| 1.0 - ((r + c) % 2) as f64);
        assert!(ssim(&check, &neg).unwrap() < 0.0);
        let k = gray(12, 12, |_, _| 0.3);
        assert_eq!(ssim(&k, &k).unwrap(), 1.0);
        assert!(ssim(&k, &gray(12, 11, |_, _| 0.3)).is_err());
    }

    #[test]
    fn tail_fractions() {
        let mut e = vec![0.001; 99];
        e.push(10.0);
        let t = tail_stats(&e).unwrap();
        assert!((t.loss_fraction(0.99) - 0.099 / 10.099).abs() < 1e-12);
        assert_eq!(t.loss_fraction(1.0), 1.0);
        let flat = tail_stats(&[2.0; 200]).unwrap();
        for q in [0.1, 0.25, 0.5, 0.9] {
            assert!((flat.loss_fraction(q) - q).abs() < 1e-2);
        }
        assert!(tail_stats(&[]).is_err());
        assert!(tail_stats(&[-1.0]).is_err());
    }

    #[test]
    fn savings_model() {
        let m = ResourceModel::new(0.5, 1.0).unwrap();
        assert_eq!(m.predicted_savings, 0.5);
        assert_eq!(ResourceModel::new(1.0, 0.7).unwrap().predicted_savings, 0.0);
        // beta 0.5 with xi_a = xi_s = 0.25 renders a quarter of all rays,
        // half of what beta 1 renders.
        let run = |beta: f64| ResourceCounters {
            iterations: 10,
            full_rays: 1000,
            rendered_rays: (10.0 * 1000.0 * beta * 0.5) as u64,
            ..Default::default()
        };
        let half = resource_report(&run(0.5), None).unwrap();
        let full = resource_report(&run(1.0), None).unwrap();
        assert_eq!(half.rendered_ray_fraction, 0.25);
        assert_eq!(full.rendered_ray_fraction, 0.5);
        assert_eq!(half.measured_savings, None);
        assert!(half.describe().contains("not comparable"));
    }

    #[test]
    fn measured_savings_against_baseline() {
        let base = ResourceCounters {
            iterations: 10,
            full_rays: 100,
            rendered_rays: 1000,
            field_queries: 1000,
            render_secs: 0.8,
            step_secs: 1.0,
        };
        let run = ResourceCounters {
            rendered_rays: 500,
            render_secs: 0.4,
            step_secs: 0.6,
            ..base
        };
        let m = resource_report(&run, Some(&base)).unwrap();
        assert!((m.measured_savings.unwrap() - 0.4).abs() < 1e-12);
        assert!((m.v - 0.4 / 0.6).abs() < 1e-12);
        assert!(resource_report(&ResourceCounters::default(), None).is_err());
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(a in proptest::collection::vec(0.0f64..=1.0, 12), b in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let a = ImageBuffer::new(2, 2, 3, a).unwrap();
            let b = ImageBuffer::new(2, 2, 3, b).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }

        #[test]
        fn ssim_self_is_one(a in proptest::collection::vec(0.0f64..=1.0, 81)) {
            let a = ImageBuffer::new(9, 9, 1, a).unwrap();
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cumulative_fraction_monotone(e in proptest::collection::vec(0.0f64..5.0, 1..60)) {
            let t = tail_stats(&e).unwrap();
            let mut prev = 0.0;
            for k in 0..=20 {
                let f = t.loss_fraction(k as f64 / 20.0);
                prop_assert!(f + 1e-12 >= prev && (0.0..=1.0 + 1e-12).contains(&f));
                prev = f;
            }
        }

        #[test]
        fn dropping_the_largest_error_never_lowers_fractions(e in proptest::collection::vec(0.01f64..5.0, 2..60), q in 0.0f64..0.99) {
            let full = tail_stats(&e).unwrap();
            let mut rest = full.sorted_errors().to_vec();
            rest.pop();
            let reduced = tail_stats(&rest).unwrap();
            // Same number of smallest errors, smaller total.
            let k = (q * e.len() as f64).floor() as usize;
            let q_reduced = k as f64 / rest.len() as f64;
            if q_reduced <= 1.0 {
                prop_assert!(reduced.loss_fraction(q_reduced + 1e-12) + 1e-12 >= full.loss_fraction(q));
            }
        }
    }

    #[test]
    fn affine_fit_recovers_line() {
        let xs = [0.1, 0.2, 0.5, 0.9];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        let (m, b, r2) = affine_fit(&xs, &ys).unwrap();
        assert!((m - 3.0).abs() < 1e-12 && (b + 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = affine_fit(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!(r2.abs() < 1e-12);
        assert!(affine_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }
}
