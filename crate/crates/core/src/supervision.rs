//! The expansive loss estimate and its per-ray gradient multipliers.
//!
//! For a batch with anchor rays `A*` and source rays `S*` at iteration `t`
//! of `T`:
//!
//! ```text
//! L_t = sum_{A*} |C^ - C|^2 + w(t) sum_{S*} |C^ - C|^2
//! w(t) = gamma + (t / T) (1 - gamma),   gamma = (1 - xi_a) / xi_a
//! ```

use crate::edge::{gaussian_blur, sobel_gradients, EdgeDetectorParams};
use crate::error::{Error, Result};
use crate::image::{to_luma, ImageBuffer};
use crate::selection::{Strategy, TrainBatch};

/// `(1 - xi_a) / xi_a`.
pub fn gamma_sa(xi_a_eff: f64) -> Result<f64> {
    if !(xi_a_eff > 0.0 && xi_a_eff < 1.0) {
        return Err(Error::arg(format!(
            "xi_a must lie in (0, 1), got {xi_a_eff}"
        )));
    }
    Ok((1.0 - xi_a_eff) / xi_a_eff)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansiveSchedule {
    pub gamma_sa: f64,
    pub total_iters: usize,
}

impl ExpansiveSchedule {
    pub fn new(xi_a_eff: f64, total_iters: usize) -> Result<Self> {
        if total_iters == 0 {
            return Err(Error::arg("total_iters must be positive"));
        }
        Ok(Self {
            gamma_sa: gamma_sa(xi_a_eff)?,
            total_iters,
        })
    }
}

/// Linear decay from `gamma` at `t = 0` to exactly 1 at `t = T`.
pub fn expansive_weight(t: usize, sched: &ExpansiveSchedule) -> Result<f64> {
    if t > sched.total_iters {
        return Err(Error::arg(format!(
            "iteration {t} beyond schedule length {}",
            sched.total_iters
        )));
    }
    let s = t as f64 / sched.total_iters as f64;
    // Same line as gamma + s (1 - gamma), written so both endpoints are exact.
    Ok(sched.gamma_sa * (1.0 - s) + s)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub anchor_term: f64,
    pub source_term: f64,
    pub weight_t: f64,
    pub total: f64,
}

/// Multipliers applied to the anchor and source sums for a strategy, plus
/// the weight reported in the breakdown.
fn multipliers(strategy: Strategy, t: usize, sched: &ExpansiveSchedule) -> Result<(f64, f64, f64)> {
    let w = expansive_weight(t, sched)?;
    Ok(match strategy {
        Strategy::Standard | Strategy::EdgeResample => (1.0, 1.0, 1.0),
        Strategy::Expansive | Strategy::NoAnchorArea | Strategy::NoSourceArea => (1.0, w, w),
        Strategy::NoAnchorSup => (0.0, w, w),
        Strategy::NoSourceSup => (1.0, 0.0, w),
        Strategy::NoExpansive => (1.0, 1.0, 1.0),
    })
}

fn sq_err(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
}

/// Loss for one batch. `pred` and `truth` follow `batch.ids()` order:
/// anchor rays first, then source rays.
pub fn expansive_loss(
    pred: &[[f64; 3]],
    truth: &[[f64; 3]],
    batch: &TrainBatch,
    sched: &ExpansiveSchedule,
    strategy: Strategy,
) -> Result<LossBreakdown> {
    if pred.len() != batch.len() || truth.len() != batch.len() {
        return Err(Error::arg(format!(
            "batch of {} rays but {} predictions and {} targets",
            batch.len(),
            pred.len(),
            truth.len()
        )));
    }
    let na = batch.anchor_ids.len();
    let anchor: f64 = pred[..na]
        .iter()
        .zip(&truth[..na])
        .map(|(p, q)| sq_err(p, q))
        .sum();
    let source: f64 = pred[na..]
        .iter()
        .zip(&truth[na..])
        .map(|(p, q)| sq_err(p, q))
        .sum();
    let (ma, ms, weight_t) = multipliers(strategy, batch.iteration, sched)?;
    let anchor_term = if ma == 0.0 { 0.0 } else { anchor };
    let source_term = if ms == 0.0 { 0.0 } else { source };
    // Uniform strategies report their whole batch under the source term.
    let total = ma * anchor_term + ms * source_term;
    Ok(LossBreakdown {
        anchor_term,
        source_term,
        weight_t,
        total,
    })
}

/// Coefficient on `2 (C^ - C)` for every ray of the batch, in `ids()` order,
/// so that backpropagating `sum m_r |C^_r - C_r|^2` gives the gradient of
/// [`expansive_loss`].
pub fn loss_gradient_weights(
    batch: &TrainBatch,
    sched: &ExpansiveSchedule,
    strategy: Strategy,
) -> Result<Vec<f64>> {
    let (ma, ms, _) = multipliers(strategy, batch.iteration, sched)?;
    let mut w = vec![ma; batch.anchor_ids.len()];
    w.resize(batch.len(), ms);
    Ok(w)
}

/// Per-pixel sampling distribution proportional to Sobel magnitude of the
/// blurred luma plus a floor of 1% of the mean magnitude.
pub fn edge_resample_weights(img: &ImageBuffer, params: &EdgeDetectorParams) -> Result<Vec<f64>> {
    params.validate()?;
    let blurred = gaussian_blur(&to_luma(img), params.blur_sigma)?;
    let (mag, _) = sobel_gradients(&blurred)?;
    let n = mag.len() as f64;
    let mean = mag.data().iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Ok(vec![1.0 / n; mag.len()]);
    }
    let eps = 0.01 * mean;
    let total: f64 = mag.data().iter().map(|m| m + eps).sum();
    Ok(mag.data().iter().map(|m| (m + eps) / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::BinaryMask;
    use crate::selection::{batch_rng, sample_source, AnchorMask};
    use proptest::{prop_assert, proptest};

    fn batch(t: usize, na: usize, ns: usize) -> TrainBatch {
        TrainBatch {
            iteration: t,
            anchor_ids: (0..na).collect(),
            source_ids: (na..na + ns).collect(),
        }
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_sa(0.25).unwrap(), 3.0);
        assert_eq!(gamma_sa(0.5).unwrap(), 1.0);
        assert_eq!(gamma_sa(0.125).unwrap(), 7.0);
        assert!(gamma_sa(0.0).is_err());
        assert!(gamma_sa(1.0).is_err());
    }

    #[test]
    fn weight_endpoints_and_midpoint() {
        let s = ExpansiveSchedule::new(0.25, 1000).unwrap();
        assert_eq!(expansive_weight(0, &s).unwrap(), 3.0);
        assert_eq!(expansive_weight(500, &s).unwrap(), 2.0);
        assert_eq!(expansive_weight(1000, &s).unwrap(), 1.0);
        assert!(expansive_weight(1001, &s).is_err());
        for xi in [0.01, 0.075, 0.3, 0.7, 0.99] {
            let s = ExpansiveSchedule::new(xi, 777).unwrap();
            assert_eq!(expansive_weight(777, &s).unwrap(), 1.0);
            assert_eq!(expansive_weight(0, &s).unwrap(), (1.0 - xi) / xi);
        }
    }

    #[test]
    fn substitution_into_loss() {
        let s = ExpansiveSchedule::new(0.25, 100).unwrap();
        // Anchor errors sum to 2, source errors to 1.
        let b = batch(0, 2, 1);
        let pred = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let truth = [[0.0; 3]; 3];
        let l = expansive_loss(&pred, &truth, &b, &s, Strategy::Expansive).unwrap();
        assert_eq!(
            (l.anchor_term, l.source_term, l.weight_t, l.total),
            (2.0, 1.0, 3.0, 5.0)
        );
        let l = expansive_loss(&pred, &truth, &b, &s, Strategy::NoExpansive).unwrap();
        assert_eq!(l.total, 3.0);
        let l = expansive_loss(&pred, &truth, &b, &s, Strategy::NoAnchorSup).unwrap();
        assert_eq!((l.anchor_term, l.total), (0.0, 3.0));
        let l = expansive_loss(&pred, &truth, &b, &s, Strategy::NoSourceSup).unwrap();
        assert_eq!((l.source_term, l.total), (0.0, 2.0));
        assert!(expansive_loss(&pred[..2], &truth, &b, &s, Strategy::Expansive).is_err());
    }

    #[test]
    fn zero_error_gives_zero_loss() {
        let s = ExpansiveSchedule::new(0.25, 10).unwrap();
        let b = batch(3, 2, 2);
        let p = [[0.3, 0.2, 0.9]; 4];
        for st in Strategy::ALL {
            assert_eq!(expansive_loss(&p, &p, &b, &s, st).unwrap().total, 0.0);
        }
    }

    #[test]
    fn gradient_multipliers() {
        let s = ExpansiveSchedule::new(0.25, 10).unwrap();
        assert_eq!(
            loss_gradient_weights(&batch(0, 2, 2), &s, Strategy::Expansive).unwrap(),
            vec![1.0, 1.0, 3.0, 3.0]
        );
        assert_eq!(
            loss_gradient_weights(&batch(10, 2, 2), &s, Strategy::Expansive).unwrap(),
            vec![1.0; 4]
        );
        assert_eq!(
            loss_gradient_weights(&batch(0, 0, 3), &s, Strategy::Standard).unwrap(),
            vec![1.0; 3]
        );
    }

    #[test]
    fn edge_distribution() {
        let flat = ImageBuffer::filled(8, 8, &[0.5, 0.5, 0.5]).unwrap();
        let p = edge_resample_weights(&flat, &EdgeDetectorParams::default()).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));

        let step =
            ImageBuffer::from_fn_rgb(16, 16, |_, c| if c >= 8 { [1.0; 3] } else { [0.0; 3] });
        let params = EdgeDetectorParams::default();
        let p = edge_resample_weights(&step, &params).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Direct Sobel on the blurred luma ranks the same pixels.
        let blurred = gaussian_blur(&to_luma(&step), params.blur_sigma).unwrap();
        let (mag, _) = sobel_gradients(&blurred).unwrap();
        for r in 0..16 {
            let boundary = p[r * 16 + 7];
            let interior = p[r * 16];
            assert!(boundary > interior);
            assert!(mag.get(r, 7) > mag.get(r, 0));
        }
    }

    #[test]
    fn reduces_to_standard_with_empty_anchor_and_unit_weight() {
        let s = ExpansiveSchedule::new(0.25, 10).unwrap();
        let b = batch(4, 0, 3);
        let pred = [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.9, 0.0, 0.4]];
        let truth = [[0.0, 0.2, 0.6], [0.4, 0.1, 0.5], [1.0, 0.3, 0.2]];
        let std = expansive_loss(&pred, &truth, &b, &s, Strategy::Standard).unwrap();
        let nox = expansive_loss(&pred, &truth, &b, &s, Strategy::NoExpansive).unwrap();
        assert_eq!(std.total, nox.total);
    }

    #[test]
    fn unbiased_at_schedule_start() {
        // 40x40 field, anchor = first 10 rows (xi_a = 0.25), xi_s = 0.25.
        let n = 1600;
        let bits: Vec<bool> = (0..n).map(|i| i < 400).collect();
        let anchor = AnchorMask::from_mask(BinaryMask::new(40, 40, bits).unwrap(), vec![0.1], 0);
        let errors: Vec<f64> = (0..n)
            .map(|i| ((i * 7919) % 1000) as f64 / 1000.0)
            .collect();
        let full: f64 = errors.iter().sum();
        let s = ExpansiveSchedule::new(anchor.xi_a_effective, 100).unwrap();
        let anchor_sum: f64 = anchor.anchor_indices.iter().map(|&i| errors[i]).sum();
        let w0 = expansive_weight(0, &s).unwrap();
        let draws = 10_000;
        let samples: Vec<f64> = (0..draws)
            .map(|k| {
                let src = sample_source(&anchor, 0.25, n, &mut batch_rng(5, k)).unwrap();
                anchor_sum + w0 * src.iter().map(|&i| errors[i]).sum::<f64>()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!(
            (mean - full).abs() < 3.0 * se,
            "mean {mean} full {full} se {se}"
        );
    }

    proptest! {
        #[test]
        fn total_matches_fields(
            errs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..12),
            na in 0usize..6,
            t in 0usize..=50,
        ) {
            let na = na.min(errs.len());
            let b = batch(t, na, errs.len() - na);
            let pred: Vec<[f64; 3]> = errs.iter().map(|e| [e.0, 0.0, 0.0]).collect();
            let truth: Vec<[f64; 3]> = errs.iter().map(|e| [e.1, 0.0, 0.0]).collect();
            let s = ExpansiveSchedule::new(0.2, 50).unwrap();
            for st in Strategy::ALL {
                let l = expansive_loss(&pred, &truth, &b, &s, st).unwrap();
                prop_assert!(l.anchor_term >= 0.0 && l.source_term >= 0.0);
                let (ma, ms, _) = multipliers(st, t, &s).unwrap();
                let expect = ma * l.anchor_term + ms * l.source_term;
                prop_assert!((l.total - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
            }
        }

        #[test]
        fn gradient_weights_match_finite_differences(
            vals in proptest::collection::vec((0.05f64..0.95, 0.0f64..1.0), 2..8),
            t in 0usize..=20,
            which in 0usize..8,
        ) {
            let strategy = Strategy::ALL[which];
            let na = vals.len() / 2;
            let b = batch(t, na, vals.len() - na);
            let s = ExpansiveSchedule::new(0.25, 20).unwrap();
            let truth: Vec<[f64; 3]> = vals.iter().map(|v| [v.1, 1.0 - v.1, 0.5]).collect();
            let pred: Vec<[f64; 3]> = vals.iter().map(|v| [v.0, v.0 * 0.5, 0.25]).collect();
            let w = loss_gradient_weights(&b, &s, strategy).unwrap();
            let h = 1e-6;
            for r in 0..pred.len() {
                for ch in 0..3 {
                    let mut plus = pred.clone();
                    let mut minus = pred.clone();
                    plus[r][ch] += h;
                    minus[r][ch] -= h;
                    let lp = expansive_loss(&plus, &truth, &b, &s, strategy).unwrap().total;
                    let lm = expansive_loss(&minus, &truth, &b, &s, strategy).unwrap().total;
                    let fd = (lp - lm) / (2.0 * h);
                    let analytic = w[r] * 2.0 * (pred[r][ch] - truth[r][ch]);
                    prop_assert!((fd - analytic).abs() <= 1e-6 * analytic.abs().max(1.0));
                }
            }
        }

        #[test]
        fn weight_decreases_strictly(xi in 0.01f64..0.49, a in 0usize..100, b in 0usize..100) {
            let s = ExpansiveSchedule::new(xi, 100).unwrap();
            if a < b {
                prop_assert!(expansive_weight(a, &s).unwrap() > expansive_weight(b, &s).unwrap());
            }
        }
    }
}
