use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use super::{composite, dot, generate_rays, sub, Camera, Ray, RenderCache, Vec3};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::selection::batch_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub density: f64,
    pub color: [f64; 3],
}

impl Sphere {
    /// Parameter interval where `ray` is inside the sphere, if any.
    pub fn chord(&self, ray: &Ray) -> Option<(f64, f64)> {
        let oc = sub(ray.origin, self.center);
        let b = dot(oc, ray.dir);
        let disc = b * b - (dot(oc, oc) - self.radius * self.radius);
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        Some((-b - s, -b + s))
    }
}

/// Constant-density, constant-color spheres over a background color.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub spheres: Vec<Sphere>,
    pub background: [f64; 3],
}

impl AnalyticScene {
    pub fn new(spheres: Vec<Sphere>, background: [f64; 3]) -> Result<Self> {
        let s = Self {
            spheres,
            background,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, sp) in self.spheres.iter().enumerate() {
            if !(sp.radius > 0.0) || !(sp.density >= 0.0) || !sp.density.is_finite() {
                return Err(Error::arg(format!(
                    "sphere {i}: radius must be > 0 and density >= 0"
                )));
            }
            if sp.center.iter().chain(&sp.color).any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("sphere {i}: non-finite value")));
            }
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("background must be finite"));
        }
        Ok(())
    }

    /// Two overlapping-in-view spheres, the smallest useful scene.
    pub fn two_spheres() -> Self {
        Self {
            spheres: vec![
                Sphere {
                    center: [-0.3, 0.0, -0.1],
                    radius: 0.45,
                    density: 25.0,
                    color: [0.9, 0.35, 0.2],
                },
                Sphere {
                    center: [0.4, 0.15, 0.25],
                    radius: 0.3,
                    density: 25.0,
                    color: [0.2, 0.55, 0.9],
                },
            ],
            background: [0.0; 3],
        }
    }

    /// `count` random spheres inside the cube of half-width `half_extent`,
    /// reproducible from `seed`. Many small silhouettes give the views
    /// plenty of edge structure.
    pub fn cluster(seed: u64, count: usize, half_extent: f64) -> Self {
        let mut rng = batch_rng(seed, 0);
        let spheres = (0..count)
            .map(|_| {
                let radius = rng.random_range(0.08..0.22) * half_extent;
                let reach = 0.75 * half_extent - radius;
                let center = std::array::from_fn(|_| rng.random_range(-reach..reach));
                Sphere {
                    center,
                    radius,
                    density: rng.random_range(8.0..40.0),
                    color: std::array::from_fn(|_| rng.random_range(0.05..0.95)),
                }
            })
            .collect();
        Self {
            spheres,
            background: [0.0; 3],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        std::fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .parse()
    }

    /// Per-bin optical depth and color along `ray` using exact chord lengths
    /// of every sphere inside each of the `n` bins.
    pub fn bin_samples(&self, ray: &Ray, n: usize) -> Result<(Vec<f64>, Vec<[f64; 3]>, f64)> {
        if n == 0 {
            return Err(Error::arg("n_samples must be at least 1"));
        }
        let delta = (ray.far - ray.near) / n as f64;
        let chords: Vec<(f64, f64, &Sphere)> = self
            .spheres
            .iter()
            .filter_map(|s| s.chord(ray).map(|(a, b)| (a, b, s)))
            .filter(|&(a, b, _)| b > ray.near && a < ray.far)
            .collect();
        let mut tau = vec![0.0; n];
        let mut color = vec![[0.0; 3]; n];
        for (i, (t, c)) in tau.iter_mut().zip(color.iter_mut()).enumerate() {
            let lo = ray.near + i as f64 * delta;
            let hi = lo + delta;
            let mut depth = 0.0;
            let mut tint = [0.0; 3];
            for &(a, b, s) in &chords {
                let len = b.min(hi) - a.max(lo);
                if len > 0.0 {
                    let d = s.density * len;
                    depth += d;
                    for k in 0..3 {
                        tint[k] += d * s.color[k];
                    }
                }
            }
            if depth > 0.0 {
                *t = depth / delta;
                *c = tint.map(|v| v / depth);
            }
        }
        Ok((tau, color, delta))
    }

    pub fn render_ray(&self, ray: &Ray, n: usize) -> Result<([f64; 3], RenderCache)> {
        let (tau, color, delta) = self.bin_samples(ray, n)?;
        composite(tau, color, vec![delta; n], self.background)
    }

    /// Ground-truth view with `n` quadrature bins per ray.
    pub fn render_view(&self, cam: &Camera, n: usize) -> Result<ImageBuffer> {
        let mut data = Vec::with_capacity(3 * cam.pixel_count());
        for ray in generate_rays(cam)? {
            data.extend_from_slice(&self.render_ray(&ray, n)?.0);
        }
        ImageBuffer::new(cam.height, cam.width, 3, data)
    }

    /// Accumulated opacity per pixel.
    pub fn opacity_view(&self, cam: &Camera, n: usize) -> Result<Vec<f64>> {
        generate_rays(cam)?
            .iter()
            .map(|r| Ok(self.render_ray(r, n)?.1.opacity()))
            .collect()
    }
}

impl fmt::Display for AnalyticScene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# cx cy cz r density cr cg cb")?;
        for s in &self.spheres {
            writeln!(
                f,
                "{} {} {} {} {} {} {} {}",
                s.center[0],
                s.center[1],
                s.center[2],
                s.radius,
                s.density,
                s.color[0],
                s.color[1],
                s.color[2]
            )?;
        }
        let b = self.background;
        writeln!(f, "bg {} {} {}", b[0], b[1], b[2])
    }
}

impl FromStr for AnalyticScene {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut spheres = Vec::new();
        let mut background = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad =
                |what: &str| Error::Format(format!("scene line {}: {what}: {raw:?}", lineno + 1));
            let mut fields = line.split_whitespace().peekable();
            let is_bg = fields.peek() == Some(&"bg");
            if is_bg {
                fields.next();
            }
            let nums: Vec<f64> = fields
                .map(|s| s.parse::<f64>().map_err(|_| bad("not a number")))
                .collect::<Result<_>>()?;
            if is_bg {
                if nums.len() != 3 {
                    return Err(bad("background needs 3 values"));
                }
                if background.replace([nums[0], nums[1], nums[2]]).is_some() {
                    return Err(bad("duplicate background line"));
                }
            } else {
                if nums.len() != 8 {
                    return Err(bad("sphere needs 8 values"));
                }
                spheres.push(Sphere {
                    center: [nums[0], nums[1], nums[2]],
                    radius: nums[3],
                    density: nums[4],
                    color: [nums[5], nums[6], nums[7]],
                });
            }
        }
        Self::new(spheres, background.unwrap_or([0.0; 3]))
    }
}
