//! Toy radiance field: pinhole rays, quadrature volume rendering with an
//! analytic backward pass, a dense voxel grid as the field, and an analytic
//! sphere scene for ground truth.

mod grid;
mod scene;
mod train;

pub use grid::{GridSampleCache, RadianceGrid};
pub use scene::{AnalyticScene, Sphere};
pub use train::{fit_nerf, orbit_cameras, orbit_views, NerfConfig, View};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub type Vec3 = [f64; 3];

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: Vec3) -> Result<Vec3> {
    let n = dot(a, a).sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::arg("cannot normalize a zero or non-finite vector"));
    }
    Ok(scale(a, 1.0 / n))
}

/// `r(t) = origin + t dir` for `t` in `[near, far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, near: f64, far: f64) -> Result<Self> {
        if !(near < far) || !near.is_finite() || !far.is_finite() {
            return Err(Error::arg(format!("ray interval [{near}, {far}] is empty")));
        }
        Ok(Self {
            origin,
            dir: normalize(dir)?,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }

    /// Midpoints of `n` equal bins over `[near, far]` and the bin width.
    pub fn midpoints(&self, n: usize) -> (Vec<f64>, f64) {
        let delta = (self.far - self.near) / n as f64;
        (
            (0..n)
                .map(|i| self.near + (i as f64 + 0.5) * delta)
                .collect(),
            delta,
        )
    }
}

/// Pinhole camera looking down its local `-z` axis, `+y` up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    /// World-from-camera rotation, columns are the camera right, up and back
    /// axes.
    pub rotation: [[f64; 3]; 3],
    pub position: Vec3,
    /// Focal length in pixels.
    pub focal: f64,
    pub height: usize,
    pub width: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up_hint: Vec3,
        focal: f64,
        height: usize,
        width: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let back = normalize(sub(eye, target))?;
        let right = normalize(cross(up_hint, back))
            .map_err(|_| Error::arg("up vector is parallel to the viewing direction"))?;
        let up = cross(back, right);
        let cam = Self {
            rotation: [
                [right[0], up[0], back[0]],
                [right[1], up[1], back[1]],
                [right[2], up[2], back[2]],
            ],
            position: eye,
            focal,
            height,
            width,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::arg("camera image size must be positive"));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::arg("focal length must be positive"));
        }
        if !(0.0 <= self.near && self.near < self.far) {
            return Err(Error::arg("camera needs 0 <= near < far"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-9 {
                    return Err(Error::arg("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    fn to_world(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

/// One ray per pixel through the pixel centers, row-major.
pub fn generate_rays(cam: &Camera) -> Result<Vec<Ray>> {
    cam.validate()?;
    let (h, w) = (cam.height as f64, cam.width as f64);
    let mut rays = Vec::with_capacity(cam.pixel_count());
    for row in 0..cam.height {
        for col in 0..cam.width {
            let local = [
                (col as f64 + 0.5 - 0.5 * w) / cam.focal,
                -(row as f64 + 0.5 - 0.5 * h) / cam.focal,
                -1.0,
            ];
            rays.push(Ray::new(
                cam.position,
                cam.to_world(local),
                cam.near,
                cam.far,
            )?);
        }
    }
    Ok(rays)
}

/// Per-sample quantities kept for the backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderCache {
    pub tau: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub delta: Vec<f64>,
    /// `T_i` for `i = 1..=n` followed by the transmittance past the last
    /// sample, so `trans.len() == n + 1`.
    pub trans: Vec<f64>,
    pub background: [f64; 3],
}

impl RenderCache {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// `T_i (1 - exp(-tau_i delta_i))`.
    pub fn weights(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.trans[i] - self.trans[i + 1])
            .collect()
    }

    pub fn opacity(&self) -> f64 {
        1.0 - self.trans[self.len()]
    }
}

/// Quadrature `C = sum_i T_i (1 - exp(-tau_i delta_i)) c_i + T_{n+1} bg`
/// with `T_i = exp(-sum_{j<i} tau_j delta_j)`.
pub fn composite(
    tau: Vec<f64>,
    color: Vec<[f64; 3]>,
    delta: Vec<f64>,
    background: [f64; 3],
) -> Result<([f64; 3], RenderCache)> {
    if tau.len() != color.len() || tau.len() != delta.len() || tau.is_empty() {
        return Err(Error::arg("composite needs equal, non-empty sample arrays"));
    }
    let mut trans = Vec::with_capacity(tau.len() + 1);
    let mut depth = 0.0;
    trans.push(1.0);
    let mut out = [0.0; 3];
    for i in 0..tau.len() {
        let t_i = trans[i];
        depth += tau[i] * delta[i];
        let next = (-depth).exp();
        // T_i (1 - e^{-tau delta}) == T_i - T_{i+1}.
        let w = t_i * -(-tau[i] * delta[i]).exp_m1();
        for k in 0..3 {
            out[k] += w * color[i][k];
        }
        trans.push(next);
    }
    let t_end = trans[tau.len()];
    for k in 0..3 {
        out[k] += t_end * background[k];
    }
    Ok((
        out,
        RenderCache {
            tau,
            color,
            delta,
            trans,
            background,
        },
    ))
}

/// A density/color field queried at world positions.
pub trait Field {
    type Cache;
    fn query(&self, p: Vec3) -> (f64, [f64; 3], Self::Cache);
}

/// Renders `ray` through `field` with `n_samples` stratified midpoints.
pub fn render_ray<F: Field>(
    field: &F,
    ray: &Ray,
    n_samples: usize,
    background: [f64; 3],
) -> Result<([f64; 3], RenderCache, Vec<F::Cache>)> {
    if n_samples == 0 {
        return Err(Error::arg("n_samples must be at least 1"));
    }
    let (ts, delta) = ray.midpoints(n_samples);
    let mut tau = Vec::with_capacity(n_samples);
    let mut color = Vec::with_capacity(n_samples);
    let mut caches = Vec::with_capacity(n_samples);
    for &t in &ts {
        let (s, c, cache) = field.query(ray.at(t));
        tau.push(s);
        color.push(c);
        caches.push(cache);
    }
    let (out, cache) = composite(tau, color, vec![delta; n_samples], background)?;
    Ok((out, cache, caches))
}

/// Gradients of `g . C` with respect to every `tau_i` and `c_i`.
pub fn render_ray_backward(
    cache: &RenderCache,
    grad_color: [f64; 3],
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let n = cache.len();
    if cache.trans.len() != n + 1 || cache.color.len() != n || cache.delta.len() != n {
        return Err(Error::arg("render cache is inconsistent"));
    }
    let g = grad_color;
    let mut d_tau = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    // suffix = g . (sum_{j>i} T_j alpha_j c_j + T_{n+1} bg)
    let mut suffix = cache.trans[n] * dot(g, cache.background);
    for i in (0..n).rev() {
        let t_i = cache.trans[i];
        let w = t_i * -(-cache.tau[i] * cache.delta[i]).exp_m1();
        let gc = dot(g, cache.color[i]);
        d_color[i] = scale(g, w);
        d_tau[i] = cache.delta[i] * (cache.trans[i + 1] * gc - suffix);
        suffix += w * gc;
    }
    Ok((d_tau, d_color))
}

/// Renders every pixel of `cam` through `field`.
pub fn render_view<F: Field>(
    field: &F,
    cam: &Camera,
    n_samples: usize,
    background: [f64; 3],
) -> Result<ImageBuffer> {
    let rays = generate_rays(cam)?;
    let mut data = Vec::with_capacity(3 * rays.len());
    for ray in &rays {
        let (c, _, _) = render_ray(field, ray, n_samples, background)?;
        data.extend_from_slice(&c);
    }
    ImageBuffer::new(cam.height, cam.width, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Constant(f64, [f64; 3]);

    impl Field for Constant {
        type Cache = ();
        fn query(&self, _: Vec3) -> (f64, [f64; 3], ()) {
            (self.0, self.1, ())
        }
    }

    fn ray(len: f64) -> Ray {
        Ray::new([0.0; 3], [0.0, 0.0, -1.0], 1.0, 1.0 + len).unwrap()
    }

    #[test]
    fn two_sample_hand_case() {
        let ln2 = std::f64::consts::LN_2;
        let (c, cache) = composite(
            vec![ln2, ln2],
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![1.0, 1.0],
            [0.0; 3],
        )
        .unwrap();
        for (got, want) in c.iter().zip([0.5, 0.25, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(cache.trans[0], 1.0);
        assert!((cache.trans[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_medium_is_black() {
        let (c, cache, _) =
            render_ray(&Constant(0.0, [1.0, 1.0, 1.0]), &ray(2.0), 16, [0.0; 3]).unwrap();
        assert_eq!(c, [0.0; 3]);
        let (_, dc) = render_ray_backward(&cache, [1.0, -1.0, 2.0]).unwrap();
        assert!(dc.iter().all(|d| *d == [0.0; 3]));
    }

    #[test]
    fn single_sample_color_gradient() {
        let (_, cache) = composite(vec![0.7], vec![[0.2, 0.4, 0.6]], vec![1.5], [0.0; 3]).unwrap();
        let (_, dc) = render_ray_backward(&cache, [1.0, 0.0, 0.0]).unwrap();
        assert!((dc[0][0] - (1.0 - (-1.05f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn background_shows_through() {
        let (c, _, _) = render_ray(
            &Constant(0.5, [1.0, 0.0, 0.0]),
            &ray(2.0),
            8,
            [0.0, 0.0, 1.0],
        )
        .unwrap();
        let a = 1.0 - (-1.0f64).exp();
        assert!((c[0] - a).abs() < 1e-12 && (c[2] - (1.0 - a)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn homogeneous_closed_form(tau in 0.0f64..20.0, len in 0.01f64..5.0, n in 1usize..200, c in 0.0f64..1.0) {
            let (out, _, _) = render_ray(&Constant(tau, [c, c * 0.5, 1.0 - c]), &ray(len), n, [0.0; 3]).unwrap();
            let a = -(-tau * len).exp_m1();
            prop_assert!((out[0] - c * a).abs() < 1e-9);
            prop_assert!((out[2] - (1.0 - c) * a).abs() < 1e-9);
        }

        #[test]
        fn transmittance_monotone_and_alpha_bounded(taus in proptest::collection::vec(0.0f64..50.0, 1..40)) {
            let n = taus.len();
            let (_, cache) = composite(taus, vec![[0.5; 3]; n], vec![0.1; n], [0.0; 3]).unwrap();
            prop_assert_eq!(cache.trans[0], 1.0);
            prop_assert!(cache.trans.windows(2).all(|w| w[1] <= w[0]));
            let total: f64 = cache.weights().iter().sum();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&total));
        }
    }

    #[test]
    fn backward_rejects_bad_cache() {
        let mut cache = RenderCache {
            tau: vec![1.0],
            color: vec![[0.0; 3]],
            delta: vec![1.0],
            trans: vec![1.0],
            background: [0.0; 3],
        };
        assert!(render_ray_backward(&cache, [1.0; 3]).is_err());
        cache.trans.push(0.3);
        assert!(render_ray_backward(&cache, [1.0; 3]).is_ok());
    }

    #[test]
    fn center_and_corner_rays() {
        let cam = Camera::look_at(
            [0.0, 0.0, 4.0],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            10.0,
            5,
            7,
            1.0,
            8.0,
        )
        .unwrap();
        let rays = generate_rays(&cam).unwrap();
        let center = rays[2 * 7 + 3];
        for (got, want) in center.dir.iter().zip([0.0, 0.0, -1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        // Top-left pixel center sits at (-3, +2) pixels from the optical axis.
        let n = (9.0f64 + 4.0 + 100.0).sqrt();
        let want = [-3.0 / n, 2.0 / n, -10.0 / n];
        for (got, w) in rays[0].dir.iter().zip(want) {
            assert!((got - w).abs() < 1e-12);
        }
        assert!(rays
            .iter()
            .all(|r| (dot(r.dir, r.dir).sqrt() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn camera_validation() {
        let mut cam = Camera::look_at(
            [1.0, 2.0, 3.0],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            20.0,
            4,
            4,
            0.5,
            6.0,
        )
        .unwrap();
        assert!(cam.validate().is_ok());
        cam.rotation[0][0] = 2.0;
        assert!(cam.validate().is_err());
        assert!(Camera::look_at(
            [0.0, 3.0, 0.0],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            20.0,
            4,
            4,
            0.5,
            6.0
        )
        .is_err());
        assert!(Ray::new([0.0; 3], [1.0, 0.0, 0.0], 2.0, 2.0).is_err());
    }
}
