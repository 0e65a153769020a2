use super::{Field, Vec3};
use crate::checkpoint::GridCheckpoint;
use crate::error::{Error, Result};

/// Dense voxel grid over the cube `[-half_extent, half_extent]^3`, storing
/// raw parameters at voxel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceGrid {
    pub resolution: [usize; 3],
    pub half_extent: f64,
    /// Raw density per voxel; `sigma = softplus(raw)`.
    pub density: Vec<f64>,
    /// Raw color per voxel, 3 values each; `c = sigmoid(raw)`.
    pub color: Vec<f64>,
}

/// Interpolation stencil of one in-bounds query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSampleCache {
    pub corners: [usize; 8],
    pub weights: [f64; 8],
    /// Interpolated raw density and color, before activation.
    pub raw_density: f64,
    pub raw_color: [f64; 3],
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RadianceGrid {
    pub fn new(
        resolution: [usize; 3],
        half_extent: f64,
        raw_density: f64,
        raw_color: f64,
    ) -> Result<Self> {
        if resolution.contains(&0) {
            return Err(Error::arg("grid resolution must be positive"));
        }
        if !(half_extent > 0.0 && half_extent.is_finite()) {
            return Err(Error::arg("grid extent must be positive"));
        }
        let n = resolution.iter().product();
        Ok(Self {
            resolution,
            half_extent,
            density: vec![raw_density; n],
            color: vec![raw_color; 3 * n],
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.density.len()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution[1] + j) * self.resolution[2] + k
    }

    /// World position of voxel `(i, j, k)`'s center.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = |idx: usize, axis: usize| {
            let size = 2.0 * self.half_extent / self.resolution[axis] as f64;
            -self.half_extent + (idx as f64 + 0.5) * size
        };
        [c(i, 0), c(j, 1), c(k, 2)]
    }

    /// Trilinear stencil, or `None` outside the bounds. Positions between the
    /// outermost centers and the boundary clamp to the edge voxels.
    pub fn stencil(&self, p: Vec3) -> Option<([usize; 8], [f64; 8])> {
        let b = self.half_extent;
        if p.iter().any(|&x| !(-b..=b).contains(&x)) {
            return None;
        }
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let u = (p[a] + b) / (2.0 * b) * n as f64 - 0.5;
            let u = u.clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n - 1);
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            frac[a] = u - i0 as f64;
        }
        let mut corners = [0usize; 8];
        let mut weights = [0.0; 8];
        for c in 0..8 {
            let pick = |a: usize| (c >> (2 - a)) & 1 == 1;
            let idx = |a: usize| if pick(a) { hi[a] } else { lo[a] };
            let wgt = |a: usize| if pick(a) { frac[a] } else { 1.0 - frac[a] };
            corners[c] = self.index(idx(0), idx(1), idx(2));
            weights[c] = wgt(0) * wgt(1) * wgt(2);
        }
        Some((corners, weights))
    }

    /// Activated `(sigma, color)` at `p` and the stencil used.
    pub fn grid_query(&self, p: Vec3) -> (f64, [f64; 3], Option<GridSampleCache>) {
        let Some((corners, weights)) = self.stencil(p) else {
            return (0.0, [0.0; 3], None);
        };
        let mut raw_density = 0.0;
        let mut raw_color = [0.0; 3];
        for (&v, &w) in corners.iter().zip(&weights) {
            raw_density += w * self.density[v];
            for k in 0..3 {
                raw_color[k] += w * self.color[3 * v + k];
            }
        }
        (
            softplus(raw_density),
            raw_color.map(sigmoid),
            Some(GridSampleCache {
                corners,
                weights,
                raw_density,
                raw_color,
            }),
        )
    }

    pub fn zeros_like(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.density.len()], vec![0.0; self.color.len()])
    }

    /// Scatters `dL/dsigma` and `dL/dc` of one sample into raw-parameter
    /// gradient buffers.
    pub fn accumulate(
        cache: &GridSampleCache,
        d_sigma: f64,
        d_color: [f64; 3],
        g_density: &mut [f64],
        g_color: &mut [f64],
    ) {
        // softplus' = sigmoid, sigmoid' = s (1 - s).
        let dr = d_sigma * sigmoid(cache.raw_density);
        let dc: [f64; 3] = std::array::from_fn(|k| {
            let s = sigmoid(cache.raw_color[k]);
            d_color[k] * s * (1.0 - s)
        });
        for (&v, &w) in cache.corners.iter().zip(&cache.weights) {
            g_density[v] += w * dr;
            for k in 0..3 {
                g_color[3 * v + k] += w * dc[k];
            }
        }
    }

    pub fn to_checkpoint(&self, adam: Option<&crate::adam::AdamState<f64>>) -> GridCheckpoint {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        GridCheckpoint {
            resolution: self.resolution,
            half_extent: self.half_extent as f32,
            density: f(&self.density),
            color: f(&self.color),
            adam: adam.map(|s| (s.step, [f(&s.m[0]), f(&s.m[1])], [f(&s.v[0]), f(&s.v[1])])),
        }
    }

    pub fn from_checkpoint(c: &GridCheckpoint) -> Result<Self> {
        let mut g = Self::new(c.resolution, c.half_extent as f64, 0.0, 0.0)?;
        g.density = c.density.iter().map(|&x| x as f64).collect();
        g.color = c.color.iter().map(|&x| x as f64).collect();
        Ok(g)
    }
}

impl Field for RadianceGrid {
    type Cache = Option<GridSampleCache>;

    fn query(&self, p: Vec3) -> (f64, [f64; 3], Self::Cache) {
        self.grid_query(p)
    }
}
