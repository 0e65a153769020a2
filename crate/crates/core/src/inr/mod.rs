//! Sinusoidal MLP mapping pixel coordinates to RGB, with hand-written
//! reverse-mode gradients.
//!
//! Hidden layers compute `sin(omega0 (W x + b))`; the output layer is affine
//! followed by a sigmoid.

mod fastmath;
mod train;

pub use train::{fit_image, fit_image_with_anchor, NetworkShape, TrainConfig};

use std::fmt::{Debug, Display};
use std::ops::AddAssign;

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};

/// Scalar type the network runs in: `f32` for training, `f64` for gradient
/// checks.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    /// Replaces each `z` by `sin(z)` and writes `cos(z)` to `cos`.
    fn sin_cos_in_place(z: &mut [Self], cos: &mut [Self]) {
        for (zv, cv) in z.iter_mut().zip(cos.iter_mut()) {
            let (s, c) = zv.sin_cos();
            *zv = s;
            *cv = c;
        }
    }
}

impl Real for f32 {
    fn sin_cos_in_place(z: &mut [f32], cos: &mut [f32]) {
        fastmath::sin_cos_in_place(z, cos);
    }
}

impl Real for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `out x in`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Dense<F> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SineMlp<F> {
    pub omega0: F,
    pub layers: Vec<Dense<F>>,
}

/// Default sinusoidal frequency scale.
pub const DEFAULT_OMEGA0: f64 = 30.0;

impl<F: Real> SineMlp<F> {
    /// All-zero network with layer widths `dims` (input first, output last).
    pub fn zeros(dims: &[usize], omega0: f64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::arg(
                "network needs at least an input and an output width",
            ));
        }
        Ok(Self {
            omega0: F::of(omega0),
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs()];
        d.extend(self.layers.iter().map(Dense::outputs));
        d
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Weight and bias buffers in slot order `w0, b0, w1, b1, ...`.
    pub fn slots_mut(&mut self) -> Vec<&mut [F]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn slot_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect()
    }

    pub fn adam(&self, config: AdamConfig) -> AdamState<F> {
        AdamState::new(config, &self.slot_sizes())
    }

    pub fn cast<G: Real>(&self) -> SineMlp<G> {
        SineMlp {
            omega0: G::of(self.omega0.to_f64().expect("finite")),
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.mapv(|v| G::of(v.to_f64().expect("finite"))),
                    bias: l.bias.mapv(|v| G::of(v.to_f64().expect("finite"))),
                })
                .collect(),
        }
    }
}

/// Standard sinusoidal-network initialization: first layer weights
/// `U(-1/fan_in, 1/fan_in)`, later layers `U(-sqrt(6/fan_in)/omega0, +...)`,
/// zero biases.
pub fn siren_init<F: Real, R: Rng + ?Sized>(
    rng: &mut R,
    dims: &[usize],
    omega0: f64,
) -> Result<SineMlp<F>> {
    let mut net = SineMlp::<F>::zeros(dims, omega0)?;
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let fan_in = layer.inputs() as f64;
        let bound = if i == 0 {
            1.0 / fan_in
        } else {
            (6.0 / fan_in).sqrt() / omega0
        };
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::arg(e.to_string()))?;
        layer.weight.mapv_inplace(|_| F::of(dist.sample(rng)));
    }
    Ok(net)
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    /// Input to every layer; `inputs[0]` are the coordinates.
    inputs: Vec<Array2<F>>,
    /// `cos(omega0 (W x + b))` for each hidden layer.
    cos: Vec<Array2<F>>,
    output: Array2<F>,
}

impl<F: Real> ForwardCache<F> {
    /// Sigmoid outputs, `n x out`.
    pub fn output(&self) -> &Array2<F> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Evaluates the network on `coords` (`n x 2`).
pub fn forward<F: Real>(net: &SineMlp<F>, coords: ArrayView2<F>) -> Result<ForwardCache<F>> {
    if !net.is_finite() {
        return Err(Error::Numeric(
            "network parameters contain NaN or infinity".into(),
        ));
    }
    if coords.ncols() != net.layers[0].inputs() {
        return Err(Error::arg(format!(
            "expected {} input columns, got {}",
            net.layers[0].inputs(),
            coords.ncols()
        )));
    }
    let last = net.layers.len() - 1;
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut cos = Vec::with_capacity(last);
    let mut a = coords.to_owned();
    for layer in &net.layers[..last] {
        let mut z = a.dot(&layer.weight.t());
        let w0 = net.omega0;
        z += &layer.bias;
        z.mapv_inplace(|v| v * w0);
        let mut c = Array2::zeros(z.raw_dim());
        F::sin_cos_in_place(
            z.as_slice_mut().expect("standard layout"),
            c.as_slice_mut().expect("standard layout"),
        );
        inputs.push(a);
        cos.push(c);
        a = z;
    }
    let out_layer = &net.layers[last];
    let mut z = a.dot(&out_layer.weight.t());
    z += &out_layer.bias;
    z.mapv_inplace(sigmoid);
    inputs.push(a);
    Ok(ForwardCache {
        inputs,
        cos,
        output: z,
    })
}

/// Convenience: outputs only, evaluated in chunks of `chunk` rows.
pub fn predict<F: Real>(
    net: &SineMlp<F>,
    coords: ArrayView2<F>,
    chunk: usize,
) -> Result<Array2<F>> {
    let mut out = Array2::zeros((coords.nrows(), net.layers.last().expect("layers").outputs()));
    for (i, part) in coords.axis_chunks_iter(Axis(0), chunk.max(1)).enumerate() {
        let y = forward(net, part)?.output;
        let start = i * chunk.max(1);
        out.slice_mut(ndarray::s![start..start + y.nrows(), ..])
            .assign(&y);
    }
    Ok(out)
}

/// Parameter gradients in the same shapes as the network layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn slots(&self) -> Vec<&[F]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

/// Reverse pass. `grad_out` is `dL/dy` for the sigmoid outputs (`n x out`).
pub fn backward<F: Real>(
    net: &SineMlp<F>,
    cache: &ForwardCache<F>,
    grad_out: ArrayView2<F>,
) -> Result<Gradients<F>> {
    if grad_out.dim() != cache.output.dim() || cache.inputs.len() != net.layers.len() {
        return Err(Error::arg(format!(
            "gradient shape {:?} does not match forward output {:?}",
            grad_out.dim(),
            cache.output.dim()
        )));
    }
    let one = F::one();
    let mut dz = Array2::zeros(grad_out.raw_dim());
    ndarray::Zip::from(&mut dz)
        .and(&grad_out)
        .and(&cache.output)
        .for_each(|d, &g, &y| *d = g * y * (one - y));

    let mut grads: Vec<Dense<F>> = Vec::with_capacity(net.layers.len());
    for l in (0..net.layers.len()).rev() {
        let weight = dz.t().dot(&cache.inputs[l]);
        let bias = dz.sum_axis(Axis(0));
        if l > 0 {
            let mut da = dz.dot(&net.layers[l].weight);
            let w0 = net.omega0;
            ndarray::Zip::from(&mut da)
                .and(&cache.cos[l - 1])
                .for_each(|d, &c| *d = *d * c * w0);
            dz = da;
        }
        grads.push(Dense { weight, bias });
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

pub fn adam_step<F: Real>(
    net: &mut SineMlp<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
) -> Result<()> {
    let g = grads.slots();
    state.step(&mut net.slots_mut(), &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::batch_rng;
    use ndarray::array;

    #[test]
    fn init_bounds_and_determinism() {
        let dims = [2, 16, 16, 3];
        let a: SineMlp<f64> = siren_init(&mut batch_rng(1, 0), &dims, 30.0).unwrap();
        let b: SineMlp<f64> = siren_init(&mut batch_rng(1, 0), &dims, 30.0).unwrap();
        assert_eq!(a, b);
        assert!(a.layers[0].weight.iter().all(|w| w.abs() <= 0.5));
        let bound = (6.0f64 / 16.0).sqrt() / 30.0;
        for l in &a.layers[1..] {
            assert!(l.weight.iter().all(|w| w.abs() <= bound));
        }
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_network_outputs_half() {
        let net = SineMlp::<f64>::zeros(&[2, 4, 4, 3], 30.0).unwrap();
        let c = forward(&net, array![[0.3, -0.7], [1.0, 1.0]].view()).unwrap();
        assert!(c.output().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_computed_single_unit() {
        // 2 -> 1 -> 3 with w = (0.2, -0.1), b = 0.05, omega0 = 30.
        let mut net = SineMlp::<f64>::zeros(&[2, 1, 3], 30.0).unwrap();
        net.layers[0].weight = array![[0.2, -0.1]];
        net.layers[0].bias = array![0.05];
        net.layers[1].weight = array![[1.0], [-2.0], [0.5]];
        net.layers[1].bias = array![0.0, 0.1, -0.3];
        let y = forward(&net, array![[0.0, 0.0]].view()).unwrap();
        let h = (30.0f64 * 0.05).sin();
        let expect = [h, -2.0 * h + 0.1, 0.5 * h - 0.3].map(|z| 1.0 / (1.0 + (-z).exp()));
        for (got, want) in y.output().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let net: SineMlp<f32> = siren_init(&mut batch_rng(2, 0), &[2, 32, 32, 3], 30.0).unwrap();
        let coords = Array2::from_shape_fn((64, 2), |(i, j)| {
            ((i * 7 + j * 13) % 21) as f32 / 10.0 - 1.0
        });
        let y = forward(&net, coords.view()).unwrap();
        assert!(y.output().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let mut net = SineMlp::<f64>::zeros(&[2, 2, 3], 30.0).unwrap();
        net.layers[1].bias[0] = f64::NAN;
        assert!(matches!(
            forward(&net, array![[0.0, 0.0]].view()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn backward_linearity_and_shapes() {
        let net: SineMlp<f64> = siren_init(&mut batch_rng(3, 0), &[2, 8, 3], 30.0).unwrap();
        let coords = array![[0.1, -0.2], [0.5, 0.9], [-1.0, 0.0]];
        let cache = forward(&net, coords.view()).unwrap();
        let zero = backward(&net, &cache, Array2::zeros((3, 3)).view()).unwrap();
        assert!(zero.slots().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        let g = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let g1 = backward(&net, &cache, g.view()).unwrap();
        let g2 = backward(&net, &cache, (&g * 2.0).view()).unwrap();
        for (a, b) in g1.slots().iter().zip(g2.slots()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
        assert!(backward(&net, &cache, Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn predict_matches_forward_in_chunks() {
        let net: SineMlp<f64> = siren_init(&mut batch_rng(4, 0), &[2, 8, 8, 3], 30.0).unwrap();
        let coords = Array2::from_shape_fn((10, 2), |(i, j)| {
            (i as f64 - 5.0) / 5.0 * if j == 0 { 1.0 } else { -0.5 }
        });
        let all = forward(&net, coords.view()).unwrap();
        assert_eq!(&predict(&net, coords.view(), 3).unwrap(), all.output());
    }

    /// Weighted squared error `sum_r m_r |y_r - t_r|^2` and its gradient in y.
    fn weighted_loss(y: &Array2<f64>, target: &Array2<f64>, m: &[f64]) -> (f64, Array2<f64>) {
        let mut loss = 0.0;
        let mut g = Array2::zeros(y.raw_dim());
        for r in 0..y.nrows() {
            for c in 0..y.ncols() {
                let d = y[[r, c]] - target[[r, c]];
                loss += m[r] * d * d;
                g[[r, c]] = 2.0 * m[r] * d;
            }
        }
        (loss, g)
    }

    #[test]
    fn gradients_match_central_differences() {
        use rand::Rng;
        let h = 1e-4;
        let mut worst = 0.0f64;
        for trial in 0..20u64 {
            let mut rng = batch_rng(100 + trial, 0);
            let net: SineMlp<f64> = siren_init(&mut rng, &[2, 8, 3], 30.0).unwrap();
            let coords = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
            let target = Array2::from_shape_fn((5, 3), |_| rng.random_range(0.0..1.0));
            let m: Vec<f64> = (0..5).map(|i| if i < 2 { 1.0 } else { 3.0 }).collect();
            let cache = forward(&net, coords.view()).unwrap();
            let (_, g) = weighted_loss(cache.output(), &target, &m);
            let grads = backward(&net, &cache, g.view()).unwrap();
            let analytic: Vec<f64> = grads.slots().concat();
            let mut probe = net.clone();
            let mut k = 0;
            for slot in 0..probe.slot_sizes().len() {
                for i in 0..probe.slot_sizes()[slot] {
                    let eval = |p: &SineMlp<f64>| {
                        let y = forward(p, coords.view()).unwrap();
                        weighted_loss(y.output(), &target, &m).0
                    };
                    let orig = probe.slots_mut()[slot][i];
                    let mut at = |offset: f64| {
                        probe.slots_mut()[slot][i] = orig + offset;
                        eval(&probe)
                    };
                    // Fourth-order central stencil: with omega0 = 30 the
                    // three-point rule's h^2 truncation term alone reaches
                    // ~5e-5 relative on first-layer weights.
                    let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                    probe.slots_mut()[slot][i] = orig;
                    let a = analytic[k];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                    worst = worst.max(rel);
                    k += 1;
                }
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst:e}");
    }
}
