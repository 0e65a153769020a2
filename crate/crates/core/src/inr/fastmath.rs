//! Branch-free single-precision sine and cosine for the hidden activations.
//!
//! Cody-Waite reduction to `[-pi/4, pi/4]` followed by minimax polynomials.
//! Absolute error stays below 1e-6 for `|x| < 1e4`, well inside f32 training
//! noise, and the loop auto-vectorises.

const FRAC_2_PI: f32 = std::f32::consts::FRAC_2_PI;
const ROUND_MAGIC: f32 = 12_582_912.0;
const DP1: f32 = 1.570_312_5;
const DP2: f32 = 4.837_513e-4;
const DP3: f32 = 7.549_79e-8;

#[inline(always)]
fn sin_cos_one(x: f32) -> (f32, f32) {
    // Round to nearest via the 1.5 * 2^23 trick; the low mantissa bits of
    // `shifted` then hold the quadrant. Valid while |x| < 2^21.
    let shifted = x * FRAC_2_PI + ROUND_MAGIC;
    let q = shifted.to_bits();
    let j = shifted - ROUND_MAGIC;
    let y = ((x - j * DP1) - j * DP2) - j * DP3;
    let z = y * y;
    let s = y + y * z * (-1.666_665_5e-1 + z * (8.332_161e-3 + z * -1.951_529_6e-4));
    let c = 1.0 - 0.5 * z + z * z * (4.166_664_6e-2 + z * (-1.388_731_6e-3 + z * 2.443_315_7e-5));
    let swap = q & 1 == 1;
    let sv = if swap { c } else { s };
    let cv = if swap { s } else { c };
    let sin = f32::from_bits(sv.to_bits() ^ ((q & 2) << 30));
    let cos = f32::from_bits(cv.to_bits() ^ ((q.wrapping_add(1) & 2) << 30));
    (sin, cos)
}

/// Replaces each `z` by `sin(z)` and writes `cos(z)` to `cos`.
pub fn sin_cos_in_place(z: &mut [f32], cos: &mut [f32]) {
    for (zv, cv) in z.iter_mut().zip(cos.iter_mut()) {
        let (s, c) = sin_cos_one(*zv);
        *zv = s;
        *cv = c;
    }
}
