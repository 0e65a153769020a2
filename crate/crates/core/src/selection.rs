//! Supervised pixel sets: the fixed anchor area, the per-iteration source
//! sample, and the batches built from them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::edge::{
    adapt_threshold, gaussian_blur, sobel_gradients, BinaryMask, EdgeDetectorParams,
    ThresholdSchedule,
};
use crate::error::{Error, Result};
use crate::image::{self, to_luma, ImageBuffer};

/// Supervision strategy, including the ablated variants of the expansive
/// estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Standard,
    Expansive,
    /// Edge-weighted resampling baseline ("EGRA-like").
    EdgeResample,
    NoAnchorArea,
    NoSourceArea,
    NoAnchorSup,
    NoSourceSup,
    NoExpansive,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Standard,
        Strategy::Expansive,
        Strategy::EdgeResample,
        Strategy::NoAnchorArea,
        Strategy::NoSourceArea,
        Strategy::NoAnchorSup,
        Strategy::NoSourceSup,
        Strategy::NoExpansive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Expansive => "expansive",
            Strategy::EdgeResample => "edge-resample",
            Strategy::NoAnchorArea => "es-no-anchor-area",
            Strategy::NoSourceArea => "es-no-source-area",
            Strategy::NoAnchorSup => "es-no-anchor-sup",
            Strategy::NoSourceSup => "es-no-source-sup",
            Strategy::NoExpansive => "es-no-expansive",
        }
    }

    /// Whether the strategy needs an extracted anchor area.
    pub fn uses_anchor(self) -> bool {
        !matches!(self, Strategy::Standard | Strategy::EdgeResample)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionPlan {
    pub strategy: Strategy,
    pub xi_a: f64,
    pub xi_s: f64,
    pub beta: f64,
    pub total_iters: usize,
    pub rng_seed: u64,
}

impl Default for SupervisionPlan {
    fn default() -> Self {
        Self {
            strategy: Strategy::Expansive,
            xi_a: 0.25,
            xi_s: 0.25,
            beta: 1.0,
            total_iters: 5000,
            rng_seed: 0,
        }
    }
}

impl SupervisionPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi_a > 0.0 && self.xi_a < 1.0) || !(self.xi_s >= 0.0 && self.xi_s < 1.0) {
            return Err(Error::arg("xi_a must lie in (0, 1) and xi_s in [0, 1)"));
        }
        if self.xi_a + self.xi_s > 1.0 {
            return Err(Error::arg("xi_a + xi_s must not exceed 1"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::arg("beta must lie in (0, 1]"));
        }
        if self.total_iters == 0 {
            return Err(Error::arg("total_iters must be positive"));
        }
        Ok(())
    }

    /// Fraction of pixels rendered per iteration, `beta (xi_a + xi_s)`.
    pub fn supervised_fraction(&self) -> f64 {
        let (a, s) = apply_beta(self);
        a + s
    }
}

/// `(beta xi_a, beta xi_s)`.
pub fn apply_beta(plan: &SupervisionPlan) -> (f64, f64) {
    (plan.beta * plan.xi_a, plan.beta * plan.xi_s)
}

/// The anchor area over a flat pixel index space. Multi-view anchors are
/// stacked vertically, so view `v` pixel `p` has index `v * h * w + p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMask {
    pub mask: BinaryMask,
    pub anchor_indices: Vec<usize>,
    /// Converged detector threshold per view.
    pub thresholds: Vec<f64>,
    /// `|A| / |I|`.
    pub xi_a_effective: f64,
    /// Threshold updates used, summed over views.
    pub iterations: usize,
    complement: Vec<usize>,
}

impl AnchorMask {
    pub fn from_mask(mask: BinaryMask, thresholds: Vec<f64>, iterations: usize) -> Self {
        let anchor_indices = mask.indices();
        let complement = (0..mask.len()).filter(|&i| !mask.get(i)).collect();
        let xi_a_effective = anchor_indices.len() as f64 / mask.len().max(1) as f64;
        Self {
            mask,
            anchor_indices,
            thresholds,
            xi_a_effective,
            iterations,
            complement,
        }
    }

    /// An empty anchor area over `total` pixels (one row).
    pub fn none(total: usize) -> Self {
        Self::from_mask(BinaryMask::empty(1, total), Vec::new(), 0)
    }

    /// Stacks per-view anchors (all of equal width) into one index space.
    pub fn stack(views: &[AnchorMask]) -> Result<Self> {
        let width = views
            .first()
            .map(|v| v.mask.width())
            .ok_or_else(|| Error::arg("no views to stack"))?;
        if views.iter().any(|v| v.mask.width() != width) {
            return Err(Error::arg("stacked anchors must share a width"));
        }
        let height = views.iter().map(|v| v.mask.height()).sum();
        let bits = views
            .iter()
            .flat_map(|v| v.mask.bits().iter().copied())
            .collect();
        Ok(Self::from_mask(
            BinaryMask::new(height, width, bits)?,
            views
                .iter()
                .flat_map(|v| v.thresholds.iter().copied())
                .collect(),
            views.iter().map(|v| v.iterations).sum(),
        ))
    }

    pub fn total_pixels(&self) -> usize {
        self.mask.len()
    }

    pub fn threshold(&self) -> Option<f64> {
        self.thresholds.first().copied()
    }

    /// Pixels outside the anchor area, ascending.
    pub fn complement(&self) -> &[usize] {
        &self.complement
    }
}

/// Runs the adaptive edge detector on the luma of `img`.
pub fn extract_anchor(
    img: &ImageBuffer,
    xi_a: f64,
    sched: &ThresholdSchedule,
    params: &EdgeDetectorParams,
) -> Result<AnchorMask> {
    let out = adapt_threshold(&to_luma(img), xi_a, sched, params)?;
    Ok(AnchorMask::from_mask(
        out.mask,
        vec![out.threshold],
        out.iterations,
    ))
}

/// [`extract_anchor`] that still yields an anchor when no threshold puts
/// the edge count inside the band, as happens on small renders of synthetic
/// scenes: their edges are either too few or share one magnitude, so the
/// count jumps over the band.
///
/// In that case the pixels of the closest edge mask come first, ranked by
/// blurred gradient magnitude, followed by the remaining pixels in the same
/// order, and the first `round(xi_a |I|)` form the anchor. Images with fewer
/// than `band.0 * xi_a |I|` non-flat pixels still fail with the original
/// convergence error.
pub fn extract_anchor_or_rank(
    img: &ImageBuffer,
    xi_a: f64,
    sched: &ThresholdSchedule,
    params: &EdgeDetectorParams,
) -> Result<AnchorMask> {
    let err = match extract_anchor(img, xi_a, sched, params) {
        Err(e @ Error::Convergence { .. }) => e,
        other => return other,
    };
    let Error::Convergence {
        best_ratio,
        best,
        iterations,
        ..
    } = &err
    else {
        unreachable!()
    };
    let luma = to_luma(img);
    let (mag, _) = sobel_gradients(&gaussian_blur(&luma, params.blur_sigma)?)?;
    let n = mag.len();
    let mut order: Vec<usize> = (0..n)
        .filter(|&i| best.get(i) || mag.data()[i] > 0.0)
        .collect();
    let min_count = (sched.band.0 * xi_a * n as f64).ceil() as usize;
    if order.len() < min_count {
        return Err(err);
    }
    order.sort_by(|&a, &b| {
        best.get(b)
            .cmp(&best.get(a))
            .then(mag.data()[b].total_cmp(&mag.data()[a]))
            .then(a.cmp(&b))
    });
    order.truncate(((xi_a * n as f64).round() as usize).max(min_count));
    let cutoff = order.last().map_or(0.0, |&i| mag.data()[i] / mag.max());
    let mut bits = vec![false; n];
    for &i in &order {
        bits[i] = true;
    }
    log::info!(
        "edge count missed the band (best ratio {best_ratio:.3}); anchor taken by gradient rank ({} px)",
        order.len()
    );
    Ok(AnchorMask::from_mask(
        BinaryMask::new(mag.height(), mag.width(), bits)?,
        vec![cutoff],
        *iterations,
    ))
}

/// Cache file for an anchor mask: next to the source image, keyed by a
/// content hash and the effective anchor ratio.
pub fn anchor_cache_path(image_path: &Path, img: &ImageBuffer, xi_a: f64) -> PathBuf {
    let digest = Sha256::digest(image::encode_pnm(img));
    let hash: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    image_path.with_file_name(format!("{stem}.anchor-{hash}-{xi_a:.4}.pgm"))
}

/// Writes the mask as a binary PGM with the threshold and iteration count
/// in a header comment.
pub fn save_anchor_pgm(anchor: &AnchorMask, path: &Path) -> Result<()> {
    let m = &anchor.mask;
    let mut bytes = format!(
        "P5\n# threshold={} iterations={}\n{} {}\n255\n",
        anchor.threshold().unwrap_or(0.0),
        anchor.iterations,
        m.width(),
        m.height()
    )
    .into_bytes();
    bytes.extend(m.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    image::write_bytes(path, &bytes)
}

fn load_anchor(path: &Path) -> Option<AnchorMask> {
    let bytes = fs::read(path).ok()?;
    let header = std::str::from_utf8(bytes.get(..bytes.len().min(256))?)
        .unwrap_or_else(|e| std::str::from_utf8(&bytes[..e.valid_up_to()]).unwrap_or(""));
    let comment = header.lines().find(|l| l.starts_with("# threshold="))?;
    let mut threshold = None;
    let mut iterations = None;
    for kv in comment.trim_start_matches('#').split_whitespace() {
        match kv.split_once('=') {
            Some(("threshold", v)) => threshold = v.parse().ok(),
            Some(("iterations", v)) => iterations = v.parse().ok(),
            _ => {}
        }
    }
    let img = image::decode_image(&bytes).ok()?;
    let bits = img.data().iter().map(|&v| v > 0.5).collect();
    let mask = BinaryMask::new(img.height(), img.width(), bits).ok()?;
    Some(AnchorMask::from_mask(mask, vec![threshold?], iterations?))
}

/// [`extract_anchor`] backed by an on-disk PGM cache beside `image_path`.
pub fn extract_anchor_cached(
    image_path: &Path,
    img: &ImageBuffer,
    xi_a: f64,
    sched: &ThresholdSchedule,
    params: &EdgeDetectorParams,
    use_cache: bool,
) -> Result<AnchorMask> {
    let cache = anchor_cache_path(image_path, img, xi_a);
    if use_cache {
        if let Some(anchor) = load_anchor(&cache).filter(|a| a.total_pixels() == img.pixel_count())
        {
            log::debug!("anchor cache hit: {}", cache.display());
            return Ok(anchor);
        }
    }
    let anchor = extract_anchor(img, xi_a, sched, params)?;
    if use_cache {
        if let Err(e) = save_anchor_pgm(&anchor, &cache) {
            log::warn!("could not write anchor cache {}: {e}", cache.display());
        }
    }
    Ok(anchor)
}

/// Counter-based RNG for iteration `t`: same `(seed, t)`, same stream,
/// regardless of which iterations were drawn before.
pub fn batch_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// Uniform sample without replacement of `floor(xi_s_eff * total_pixels)`
/// pixels outside the anchor area.
pub fn sample_source<R: Rng + ?Sized>(
    anchor: &AnchorMask,
    xi_s_eff: f64,
    total_pixels: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let count = (xi_s_eff * total_pixels as f64).floor() as usize;
    sample_from(anchor.complement(), count, rng)
}

fn sample_from<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count > pool.len() {
        return Err(Error::arg(format!(
            "requested {count} samples from a pool of {}",
            pool.len()
        )));
    }
    Ok(index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// How many rays a batch may render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchBudget {
    /// Supervise the whole selected set: every anchor pixel plus a fresh
    /// source sample. Uniform strategies draw `beta (xi_a + xi_s) |I|`.
    Full,
    /// A fixed number of rays, split between anchor and source in the
    /// ratio `xi_a : xi_s`.
    Rays(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub iteration: usize,
    pub anchor_ids: Vec<usize>,
    pub source_ids: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.anchor_ids.len() + self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Anchor ids followed by source ids.
    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.anchor_ids.iter().chain(&self.source_ids).copied()
    }
}

/// Draws a [`TrainBatch`] per iteration for one plan and anchor area.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    plan: SupervisionPlan,
    anchor: AnchorMask,
    edge_sampler: Option<WeightedIndex<f64>>,
}

impl BatchSampler {
    pub fn new(plan: SupervisionPlan, anchor: AnchorMask) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            plan,
            anchor,
            edge_sampler: None,
        })
    }

    /// Sampling distribution for [`Strategy::EdgeResample`].
    pub fn with_edge_distribution(mut self, probabilities: &[f64]) -> Result<Self> {
        if probabilities.len() != self.anchor.total_pixels() {
            return Err(Error::arg(
                "edge distribution length does not match pixel count",
            ));
        }
        self.edge_sampler = Some(
            WeightedIndex::new(probabilities)
                .map_err(|e| Error::arg(format!("edge distribution: {e}")))?,
        );
        Ok(self)
    }

    pub fn plan(&self) -> &SupervisionPlan {
        &self.plan
    }

    pub fn anchor(&self) -> &AnchorMask {
        &self.anchor
    }

    pub fn total_pixels(&self) -> usize {
        self.anchor.total_pixels()
    }

    /// Batch for iteration `t`, reproducible from `(plan.rng_seed, t)`.
    pub fn make_batch(&self, t: usize, budget: BatchBudget) -> Result<TrainBatch> {
        if t >= self.plan.total_iters {
            return Err(Error::arg(format!(
                "iteration {t} outside schedule of {}",
                self.plan.total_iters
            )));
        }
        let mut rng = batch_rng(self.plan.rng_seed, t);
        self.draw(t, budget, &mut rng)
    }

    fn draw<R: Rng + ?Sized>(
        &self,
        t: usize,
        budget: BatchBudget,
        rng: &mut R,
    ) -> Result<TrainBatch> {
        let n = self.total_pixels();
        let (xa, xs) = apply_beta(&self.plan);
        let anchors = &self.anchor.anchor_indices;
        let complement = self.anchor.complement();
        let uniform_count = ((xa + xs) * n as f64).floor() as usize;

        if let BatchBudget::Rays(b) = budget {
            if b > n {
                return Err(Error::arg(format!("budget {b} exceeds {n} available rays")));
            }
        }
        // Anchor/source split of a finite budget. A side whose pool is too
        // small hands its excess to the other side.
        let split = |b: usize| {
            let na = (((b as f64) * xa / (xa + xs)).round() as usize).min(b);
            let na = na.min(anchors.len()).max(b.saturating_sub(complement.len()));
            (na, b - na)
        };

        let (mut anchor_ids, mut source_ids) = match self.plan.strategy {
            Strategy::Standard => {
                let b = match budget {
                    BatchBudget::Full => uniform_count,
                    BatchBudget::Rays(b) => b,
                };
                (Vec::new(), index::sample(rng, n, b).into_vec())
            }
            Strategy::EdgeResample => {
                let b = match budget {
                    BatchBudget::Full => uniform_count,
                    BatchBudget::Rays(b) => b,
                };
                let dist = self
                    .edge_sampler
                    .as_ref()
                    .ok_or_else(|| Error::arg("edge-resample needs an edge distribution"))?;
                (Vec::new(), (0..b).map(|_| dist.sample(rng)).collect())
            }
            Strategy::Expansive
            | Strategy::NoAnchorSup
            | Strategy::NoSourceSup
            | Strategy::NoExpansive => match budget {
                BatchBudget::Full => (anchors.clone(), sample_source(&self.anchor, xs, n, rng)?),
                BatchBudget::Rays(b) => {
                    let (na, ns) = split(b);
                    (
                        sample_from(anchors, na, rng)?,
                        sample_from(complement, ns, rng)?,
                    )
                }
            },
            Strategy::NoAnchorArea => {
                let count = match budget {
                    BatchBudget::Full => anchors.len() + (xs * n as f64).floor() as usize,
                    BatchBudget::Rays(b) => b,
                };
                (Vec::new(), sample_from(complement, count, rng)?)
            }
            Strategy::NoSourceArea => match budget {
                BatchBudget::Full => (anchors.clone(), Vec::new()),
                BatchBudget::Rays(b) => {
                    let (na, _) = split(b);
                    let mut drawn = sample_from(anchors, b, rng)?;
                    let source = drawn.split_off(na);
                    (drawn, source)
                }
            },
        };
        anchor_ids.shuffle(rng);
        source_ids.shuffle(rng);
        Ok(TrainBatch {
            iteration: t,
            anchor_ids,
            source_ids,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::EdgeStrength;
    use std::collections::HashSet;

    /// 64x64 anchor with the first quarter of pixels set.
    fn quarter_anchor() -> AnchorMask {
        let bits = (0..4096).map(|i| i < 1024).collect();
        AnchorMask::from_mask(BinaryMask::new(64, 64, bits).unwrap(), vec![0.1], 0)
    }

    fn plan(strategy: Strategy) -> SupervisionPlan {
        SupervisionPlan {
            strategy,
            total_iters: 100,
            rng_seed: 7,
            ..SupervisionPlan::default()
        }
    }

    fn textured(n: usize) -> ImageBuffer {
        ImageBuffer::from_fn_rgb(n, n, |r, c| {
            let (y, x) = (r as f64, c as f64);
            let noise = ((r * 7919 + c * 104_729) % 997) as f64 / 997.0;
            let v = 0.5 + 0.3 * (0.37 * y + 0.016 * x * x).sin() + 0.15 * (noise - 0.5);
            [v, 1.0 - v, 0.5 * v]
        })
    }

    #[test]
    fn beta_scaling() {
        let mut p = SupervisionPlan::default();
        assert_eq!(apply_beta(&p), (0.25, 0.25));
        p.beta = 0.5;
        assert_eq!(apply_beta(&p), (0.125, 0.125));
        assert_eq!(p.supervised_fraction(), 0.25);
        p.beta = 0.3;
        let (a, s) = apply_beta(&p);
        assert!((a - 0.075).abs() < 1e-15 && (s - 0.075).abs() < 1e-15);
    }

    #[test]
    fn plan_validation() {
        let mut p = SupervisionPlan::default();
        assert!(p.validate().is_ok());
        p.xi_a = 0.8;
        assert!(p.validate().is_err());
        p.xi_a = 0.25;
        p.beta = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }

    #[test]
    fn extracted_anchor_lands_in_band() {
        let img = textured(64);
        let a = extract_anchor(
            &img,
            0.25,
            &ThresholdSchedule::default(),
            &EdgeDetectorParams::default(),
        )
        .unwrap();
        assert!(
            (0.2..=0.3).contains(&a.xi_a_effective),
            "{}",
            a.xi_a_effective
        );
        assert_eq!(a.anchor_indices, a.mask.indices());
        assert!(a.anchor_indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.anchor_indices.len() + a.complement().len(), 4096);
    }

    #[test]
    fn beta_halves_the_extraction_target() {
        let img = textured(64);
        let p = SupervisionPlan {
            beta: 0.5,
            ..SupervisionPlan::default()
        };
        let (xa, _) = apply_beta(&p);
        assert_eq!(xa, 0.125);
        let a = extract_anchor(
            &img,
            xa,
            &ThresholdSchedule::default(),
            &EdgeDetectorParams::default(),
        )
        .unwrap();
        assert!((0.1..=0.15).contains(&a.xi_a_effective));
    }

    #[test]
    fn constant_image_has_no_anchor() {
        let img = ImageBuffer::filled(16, 16, &[0.4, 0.4, 0.4]).unwrap();
        let err = extract_anchor(
            &img,
            0.25,
            &ThresholdSchedule::default(),
            &EdgeDetectorParams::default(),
        );
        assert!(matches!(err, Err(Error::Convergence { .. })));
    }

    #[test]
    fn source_sample_contract() {
        let a = quarter_anchor();
        let mut rng = batch_rng(3, 0);
        let s = sample_source(&a, 0.25, 4096, &mut rng).unwrap();
        assert_eq!(s.len(), 1024);
        assert!(s.iter().all(|&i| i >= 1024));
        assert_eq!(s.iter().collect::<HashSet<_>>().len(), 1024);

        let again = sample_source(&a, 0.25, 4096, &mut batch_rng(3, 0)).unwrap();
        assert_eq!(s, again);
        assert!(sample_source(&a, 0.8, 4096, &mut rng).is_err());
    }

    #[test]
    fn full_expansive_batch() {
        let sampler = BatchSampler::new(plan(Strategy::Expansive), quarter_anchor()).unwrap();
        let b = sampler.make_batch(0, BatchBudget::Full).unwrap();
        assert_eq!(b.anchor_ids.len(), 1024);
        assert_eq!(b.source_ids.len(), 1024);
        assert_eq!(b.len(), 2048);
        let anchors: HashSet<_> = b.anchor_ids.iter().collect();
        assert!(b
            .source_ids
            .iter()
            .all(|i| !anchors.contains(i) && *i >= 1024));
        // A fresh source sample every iteration.
        let b1 = sampler.make_batch(1, BatchBudget::Full).unwrap();
        assert_ne!(b.source_ids, b1.source_ids);
        assert!(sampler.make_batch(100, BatchBudget::Full).is_err());
    }

    #[test]
    fn standard_batch_ignores_anchor() {
        let sampler = BatchSampler::new(plan(Strategy::Standard), quarter_anchor()).unwrap();
        let b = sampler.make_batch(5, BatchBudget::Rays(256)).unwrap();
        assert!(b.anchor_ids.is_empty());
        assert_eq!(b.source_ids.len(), 256);
        assert_eq!(b.source_ids.iter().collect::<HashSet<_>>().len(), 256);
        assert!(sampler.make_batch(5, BatchBudget::Rays(5000)).is_err());
    }

    #[test]
    fn finite_budget_keeps_proportions() {
        let sampler = BatchSampler::new(plan(Strategy::Expansive), quarter_anchor()).unwrap();
        let b = sampler.make_batch(2, BatchBudget::Rays(300)).unwrap();
        assert_eq!((b.anchor_ids.len(), b.source_ids.len()), (150, 150));
        assert!(b.anchor_ids.iter().all(|&i| i < 1024));
        assert!(b.source_ids.iter().all(|&i| i >= 1024));

        // 1024 anchors cannot supply half of 2400 rays.
        let b = sampler.make_batch(2, BatchBudget::Rays(2400)).unwrap();
        assert_eq!((b.anchor_ids.len(), b.source_ids.len()), (1024, 1376));
        assert!(sampler.make_batch(2, BatchBudget::Rays(4097)).is_err());
    }

    #[test]
    fn no_source_area_draws_only_anchor_pixels() {
        let sampler = BatchSampler::new(plan(Strategy::NoSourceArea), quarter_anchor()).unwrap();
        let b = sampler.make_batch(0, BatchBudget::Rays(300)).unwrap();
        assert_eq!(b.len(), 300);
        assert!(b.ids().all(|i| i < 1024));
        let a: HashSet<_> = b.anchor_ids.iter().collect();
        assert!(b.source_ids.iter().all(|i| !a.contains(i)));
    }

    #[test]
    fn no_anchor_area_draws_only_complement() {
        let sampler = BatchSampler::new(plan(Strategy::NoAnchorArea), quarter_anchor()).unwrap();
        let b = sampler.make_batch(0, BatchBudget::Full).unwrap();
        assert!(b.anchor_ids.is_empty());
        assert_eq!(b.source_ids.len(), 2048);
        assert!(b.source_ids.iter().all(|&i| i >= 1024));
    }

    #[test]
    fn edge_resample_requires_distribution() {
        let img = textured(32);
        let sampler =
            BatchSampler::new(plan(Strategy::EdgeResample), AnchorMask::none(1024)).unwrap();
        assert!(sampler.make_batch(0, BatchBudget::Rays(10)).is_err());
        let mag = EdgeStrength::compute(&to_luma(&img), &EdgeDetectorParams::default()).unwrap();
        let w: Vec<f64> = mag.field().data().iter().map(|v| v + 0.01).collect();
        let sampler = sampler.with_edge_distribution(&w).unwrap();
        assert_eq!(
            sampler.make_batch(0, BatchBudget::Rays(100)).unwrap().len(),
            100
        );
    }

    #[test]
    fn batches_are_order_independent() {
        let sampler = BatchSampler::new(plan(Strategy::Expansive), quarter_anchor()).unwrap();
        let late = sampler.make_batch(9, BatchBudget::Rays(64)).unwrap();
        for t in 0..9 {
            sampler.make_batch(t, BatchBudget::Rays(64)).unwrap();
        }
        assert_eq!(sampler.make_batch(9, BatchBudget::Rays(64)).unwrap(), late);
    }

    #[test]
    fn source_selection_is_uniform() {
        // 64 pixels, 16 anchors, 16 of the remaining 48 drawn per call.
        let bits = (0..64).map(|i| i % 4 == 0).collect();
        let anchor = AnchorMask::from_mask(BinaryMask::new(8, 8, bits).unwrap(), vec![0.1], 0);
        let draws = 10_000;
        let mut counts = [0usize; 64];
        for t in 0..draws {
            for i in sample_source(&anchor, 0.25, 64, &mut batch_rng(11, t)).unwrap() {
                counts[i] += 1;
            }
        }
        let p = 16.0 / 48.0;
        let expect = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            if i % 4 == 0 {
                assert_eq!(c, 0);
                continue;
            }
            assert!((c as f64 - expect).abs() < 5.0 * sd);
            chi2 += (c as f64 - expect).powi(2) / expect;
        }
        // 47 degrees of freedom, alpha = 0.001 critical value.
        assert!(chi2 < 82.72, "chi2 {chi2}");
    }

    #[test]
    fn stacked_views_share_index_space() {
        let a = quarter_anchor();
        let s = AnchorMask::stack(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(s.total_pixels(), 8192);
        assert_eq!(s.anchor_indices.len(), 2048);
        assert!(s.anchor_indices.contains(&4096));
        assert!(!s.anchor_indices.contains(&5120));
    }

    #[test]
    fn anchor_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tex.png");
        let img = textured(32);
        let s = ThresholdSchedule::default();
        let p = EdgeDetectorParams::default();
        let a = extract_anchor_cached(&path, &img, 0.2, &s, &p, true).unwrap();
        let cache = anchor_cache_path(&path, &img, 0.2);
        assert!(cache.exists());
        let b = extract_anchor_cached(&path, &img, 0.2, &s, &p, true).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.iterations, b.iterations);
        assert!((a.threshold().unwrap() - b.threshold().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rank_fallback_fills_sparse_edge_images() {
        // A single disc: too few edge pixels for a quarter of the image.
        let img = ImageBuffer::from_fn_rgb(40, 40, |r, c| {
            let d = ((r as f64 - 20.0).powi(2) + (c as f64 - 18.0).powi(2)).sqrt();
            let v = if d < 9.0 { 0.8 } else { 0.1 };
            [v, v, v]
        });
        let sched = ThresholdSchedule::default();
        let params = EdgeDetectorParams::default();
        assert!(matches!(
            extract_anchor(&img, 0.25, &sched, &params),
            Err(Error::Convergence { .. })
        ));
        let a = extract_anchor_or_rank(&img, 0.25, &sched, &params).unwrap();
        assert_eq!(a.anchor_indices.len(), 400);
        // Every pixel of the ranked area lies near the disc boundary.
        for &i in &a.anchor_indices {
            let (r, c) = ((i / 40) as f64, (i % 40) as f64);
            let d = ((r - 20.0).powi(2) + (c - 18.0).powi(2)).sqrt();
            assert!((d - 9.0).abs() < 7.0, "pixel {i} at distance {d}");
        }
        // Ten identical discs: every edge pixel has one of few magnitudes, so a
        // small target cannot be met by thresholding alone.
        let spots = ImageBuffer::from_fn_rgb(60, 60, |r, c| {
            let (dr, dc) = ((r % 20) as f64 - 10.0, (c % 20) as f64 - 10.0);
            let v = if dr * dr + dc * dc < 25.0 { 0.9 } else { 0.0 };
            [v, v, v]
        });
        let Err(Error::Convergence { best_ratio, best, .. }) =
            extract_anchor(&spots, 0.01, &sched, &params)
        else {
            panic!("uniform discs should not converge");
        };
        assert!(best_ratio > sched.band.1);
        let a = extract_anchor_or_rank(&spots, 0.01, &sched, &params).unwrap();
        assert_eq!(a.anchor_indices.len(), 36);
        assert!(a.anchor_indices.iter().all(|&i| best.get(i)));
        let flat = ImageBuffer::filled(20, 20, &[0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(
            extract_anchor_or_rank(&flat, 0.25, &sched, &params),
            Err(Error::Convergence { .. })
        ));
    }
}
