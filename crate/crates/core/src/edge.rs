//! Canny edge detection and the progressive threshold loop that sizes the
//! anchor area.
//!
//! Thresholds are expressed on gradient magnitudes normalized so that the
//! strongest gradient in the image equals 1. The threshold loop only reruns
//! hysteresis; blur, gradients and non-maximum suppression are computed once.

use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::ScalarField;

/// Row-major binary mask.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, {} set)",
            self.height,
            self.width,
            self.count()
        )
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::arg("mask length does not match dimensions"));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Flat indices of set pixels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn to_field(&self) -> ScalarField {
        ScalarField::from_fn(self.height, self.width, |r, c| {
            if self.bits[r * self.width + c] {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeDetectorParams {
    pub blur_sigma: f64,
    /// Low hysteresis threshold as a fraction of the high one.
    pub low_high_ratio: f64,
}

impl Default for EdgeDetectorParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.4,
            low_high_ratio: 0.4,
        }
    }
}

impl EdgeDetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0) {
            return Err(Error::arg("blur_sigma must be positive"));
        }
        if !(self.low_high_ratio > 0.0 && self.low_high_ratio < 1.0) {
            return Err(Error::arg("low_high_ratio must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSchedule {
    /// Step rate of the threshold update.
    pub mu: f64,
    pub max_iters: usize,
    /// Accepted range of `E(T) / (xi_a |I|)`.
    pub band: (f64, f64),
    /// Starting threshold on the normalized magnitude scale.
    pub initial_threshold: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            mu: 15.0,
            max_iters: 50,
            band: (0.8, 1.2),
            initial_threshold: 0.5,
        }
    }
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::arg("mu must be positive"));
        }
        if self.max_iters < 1 {
            return Err(Error::arg("max_iters must be at least 1"));
        }
        let (lo, hi) = self.band;
        if !(lo < 1.0 && 1.0 < hi) {
            return Err(Error::arg("band must straddle 1"));
        }
        if !(self.initial_threshold > 0.0) {
            return Err(Error::arg("initial_threshold must be positive"));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and edge clamping.
pub fn gaussian_blur(f: &ScalarField, sigma: f64) -> Result<ScalarField> {
    if !(sigma > 0.0) {
        return Err(Error::arg("sigma must be positive"));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (f.height(), f.width());
    let horizontal = ScalarField::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| wt * f.get_clamped(r as isize, c as isize + k as isize - radius))
            .sum()
    });
    Ok(ScalarField::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| {
                wt * horizontal.get_clamped(r as isize + k as isize - radius, c as isize)
            })
            .sum()
    }))
}

/// 3x3 Sobel gradients (unnormalized) with edge clamping. Returns the
/// magnitude and the direction `atan2(gy, gx)`, `y` pointing down the rows.
pub fn sobel_gradients(f: &ScalarField) -> Result<(ScalarField, ScalarField)> {
    let (h, w) = (f.height(), f.width());
    if h < 3 || w < 3 {
        return Err(Error::arg(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    let mut mag = Vec::with_capacity(h * w);
    let mut dir = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let p = |dr: isize, dc: isize| f.get_clamped(r + dr, c + dc);
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            mag.push(gx.hypot(gy));
            dir.push(gy.atan2(gx));
        }
    }
    Ok((ScalarField::new(h, w, mag)?, ScalarField::new(h, w, dir)?))
}

/// Neighbor offsets `(forward, backward)` along the quantized gradient.
fn nms_neighbors(direction: f64) -> ((isize, isize), (isize, isize)) {
    let mut deg = direction.to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if !(22.5..157.5).contains(&deg) {
        ((0, 1), (0, -1))
    } else if deg < 67.5 {
        ((1, 1), (-1, -1))
    } else if deg < 112.5 {
        ((1, 0), (-1, 0))
    } else {
        ((1, -1), (-1, 1))
    }
}

/// Thinned, normalized edge strengths: the part of the detector that does
/// not depend on the hysteresis thresholds.
#[derive(Debug, Clone)]
pub struct EdgeStrength {
    suppressed: ScalarField,
}

impl EdgeStrength {
    pub fn compute(f: &ScalarField, params: &EdgeDetectorParams) -> Result<Self> {
        params.validate()?;
        // Shift to zero minimum so adding a constant to the input is a no-op.
        let min = f.data().iter().copied().fold(f64::INFINITY, f64::min);
        let shifted = f.map(|v| v - min);
        let blurred = gaussian_blur(&shifted, params.blur_sigma)?;
        let (mag, dir) = sobel_gradients(&blurred)?;
        let peak = mag.max();
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        let (h, w) = (mag.height(), mag.width());
        let suppressed = ScalarField::from_fn(h, w, |r, c| {
            let m = mag.get(r, c);
            if m == 0.0 {
                return 0.0;
            }
            let ((fr, fc), (br, bc)) = nms_neighbors(dir.get(r, c));
            let (r, c) = (r as isize, c as isize);
            let fwd = mag.get_clamped(r + fr, c + fc);
            let back = mag.get_clamped(r + br, c + bc);
            // Asymmetric comparison keeps exactly one pixel of a plateau.
            if m >= fwd && m > back {
                m * scale
            } else {
                0.0
            }
        });
        Ok(Self { suppressed })
    }

    pub fn field(&self) -> &ScalarField {
        &self.suppressed
    }

    /// 8-connected hysteresis with thresholds `(ratio * high, high)`.
    pub fn hysteresis(&self, high: f64, low_high_ratio: f64) -> BinaryMask {
        let s = &self.suppressed;
        let (h, w) = (s.height(), s.width());
        let low = low_high_ratio * high;
        let mut bits = vec![false; h * w];
        let mut queue = VecDeque::new();
        for (i, &v) in s.data().iter().enumerate() {
            if v >= high && v > 0.0 {
                bits[i] = true;
                queue.push_back(i);
            }
        }
        while let Some(i) = queue.pop_front() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !bits[j] && s.data()[j] >= low && s.data()[j] > 0.0 {
                        bits[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        BinaryMask {
            height: h,
            width: w,
            bits,
        }
    }
}

/// Blur, Sobel, non-maximum suppression and hysteresis. `high` is on the
/// normalized magnitude scale.
pub fn canny(f: &ScalarField, high: f64, params: &EdgeDetectorParams) -> Result<BinaryMask> {
    if !(high > 0.0) {
        return Err(Error::arg("high threshold must be positive"));
    }
    Ok(EdgeStrength::compute(f, params)?.hysteresis(high, params.low_high_ratio))
}

#[derive(Debug, Clone)]
pub struct AdaptedThreshold {
    pub threshold: f64,
    pub mask: BinaryMask,
    /// Number of threshold updates performed (0 when the initial guess fit).
    pub iterations: usize,
}

const MIN_STEP: f64 = 0.25;
const MAX_STEP: f64 = 4.0;

/// Adjusts the Canny threshold until the edge count lands within
/// `band * xi_a * |I|`.
///
/// Update: `T <- T * (1 + mu * (E(T) - xi_a |I|) / |I|)`, with the factor
/// clamped to `[1/4, 4]`, the step kept inside the bracket of thresholds
/// already known to over- and under-shoot, and `mu` halved after the
/// discrepancy changes sign twice.
pub fn adapt_threshold(
    f: &ScalarField,
    xi_a: f64,
    sched: &ThresholdSchedule,
    params: &EdgeDetectorParams,
) -> Result<AdaptedThreshold> {
    if !(xi_a > 0.0 && xi_a < 1.0) {
        return Err(Error::arg(format!("xi_a must lie in (0, 1), got {xi_a}")));
    }
    sched.validate()?;
    let strength = EdgeStrength::compute(f, params)?;
    let total = f.len() as f64;
    let target = xi_a * total;
    let (band_lo, band_hi) = sched.band;

    let mut mu = sched.mu;
    let mut threshold = sched.initial_threshold;
    // Largest threshold seen with too many pixels / smallest with too few.
    let mut too_low: Option<f64> = None;
    let mut too_high: Option<f64> = None;
    let mut last_sign = 0i8;
    let mut flips = 0;
    let mut best: Option<(f64, f64, BinaryMask)> = None;

    for iteration in 0..=sched.max_iters {
        let mask = strength.hysteresis(threshold, params.low_high_ratio);
        let count = mask.count() as f64;
        let ratio = count / target;
        if (band_lo..=band_hi).contains(&ratio) {
            return Ok(AdaptedThreshold {
                threshold,
                mask,
                iterations: iteration,
            });
        }
        let miss = if ratio > 0.0 {
            ratio.ln().abs()
        } else {
            f64::INFINITY
        };
        if best.as_ref().is_none_or(|(m, _, _)| miss < *m) {
            best = Some((miss, threshold, mask));
        }
        if iteration == sched.max_iters {
            break;
        }

        let sign = if count > target { 1 } else { -1 };
        if sign > 0 {
            too_low = Some(too_low.map_or(threshold, |t: f64| t.max(threshold)));
        } else {
            too_high = Some(too_high.map_or(threshold, |t: f64| t.min(threshold)));
        }
        if last_sign != 0 && sign != last_sign {
            flips += 1;
            if flips == 2 {
                mu *= 0.5;
                flips = 0;
            }
        }
        last_sign = sign;

        let step = (1.0 + mu * (count - target) / total).clamp(MIN_STEP, MAX_STEP);
        let mut next = threshold * step;
        if let (Some(lo), Some(hi)) = (too_low, too_high) {
            if next <= lo || next >= hi {
                next = (lo * hi).sqrt();
            }
        }
        threshold = next;
    }

    let (_, best_threshold, best_mask) = best.expect("at least one evaluation");
    Err(Error::Convergence {
        iterations: sched.max_iters,
        best_ratio: best_mask.count() as f64 / target,
        best_threshold,
        best: Box::new(best_mask),
    })
}

/// Angle difference folded into `[0, pi/2]`, for direction comparisons mod pi.
pub fn angle_distance_mod_pi(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}
