//! Minimal CPU convolution stack with hand-written backward passes and Adam.
//!
//! Activations use a channel-major batch layout `[C][B][H][W]` so that each
//! convolution over a whole mini-batch is a single GEMM.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

const LEAKY_SLOPE: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    LeakyRelu,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    fn derivative(self, pre: f32) -> f32 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

/// One convolution layer: `out_ch` filters of `in_ch × kernel × kernel`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl ConvSpec {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn weight_len(&self) -> usize {
        self.out_ch * self.patch_len()
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + if self.bias { self.out_ch } else { 0 }
    }
}

/// Tensor shape in the batch layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.b * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct LayerTrace {
    cols: Vec<f32>,
    pre: Vec<f32>,
    in_shape: Shape,
}

/// Cached intermediates from a forward pass, consumed by `backward`.
pub struct Trace {
    layers: Vec<LayerTrace>,
    out_shape: Shape,
}

/// `C = alpha * A * B + beta * C` over row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index `i*rs + j*cs` visited by sgemm stays inside the
    // slices for the given m/k/n and strides; the callers pass matching dims.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(spec: &ConvSpec, x: &[f32], s: Shape, ho: usize, wo: usize) -> Vec<f32> {
    let k = spec.kernel;
    let ncols = s.b * ho * wo;
    let mut cols = vec![0.0f32; spec.patch_len() * ncols];
    for c in 0..s.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..s.b {
                    let src = &x[(c * s.b + b) * s.h * s.w..(c * s.b + b + 1) * s.h * s.w];
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let drow = &mut dst[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix >= 0 && ix < s.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(spec: &ConvSpec, cols: &[f32], s: Shape, ho: usize, wo: usize) -> Vec<f32> {
    let k = spec.kernel;
    let ncols = s.b * ho * wo;
    let mut x = vec![0.0f32; s.len()];
    for c in 0..s.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..s.b {
                    let base = (c * s.b + b) * s.h * s.w;
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let srow = &src[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, v) in srow.iter().enumerate() {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix >= 0 && ix < s.w as isize {
                                x[base + iy as usize * s.w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// A feed-forward stack of convolutions sharing one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    specs: Vec<ConvSpec>,
    params: Vec<f32>,
}

impl ConvStack {
    /// He-normal weights, zero biases.
    pub fn new(specs: Vec<ConvSpec>, rng: &mut Rng) -> Self {
        let mut params = Vec::with_capacity(specs.iter().map(ConvSpec::param_len).sum());
        for spec in &specs {
            let std = (2.0 / spec.patch_len() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            params.extend((0..spec.weight_len()).map(|_| normal.sample(rng) as f32));
            if spec.bias {
                params.extend(std::iter::repeat_n(0.0, spec.out_ch));
            }
        }
        Self { specs, params }
    }

    pub fn from_parts(specs: Vec<ConvSpec>, params: Vec<f32>) -> Option<Self> {
        let need: usize = specs.iter().map(ConvSpec::param_len).sum();
        (need == params.len()).then_some(Self { specs, params })
    }

    pub fn specs(&self) -> &[ConvSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        self.specs.iter().fold(input, |s, spec| {
            let (h, w) = spec.out_size(s.h, s.w);
            Shape {
                c: spec.out_ch,
                b: s.b,
                h,
                w,
            }
        })
    }

    /// Receptive-field geometry `(stride, offset)`: output cell `j` is
    /// centered on input coordinate `stride * j + offset`.
    pub fn geometry(&self) -> (f64, f64) {
        self.specs.iter().rev().fold((1.0, 0.0), |(stride, offset), spec| {
            let s = spec.stride as f64;
            let shift = (spec.kernel as f64 - 1.0) / 2.0 - spec.pad as f64;
            (stride * s, offset * s + shift)
        })
    }

    fn layer_forward(&self, spec: &ConvSpec, offset: usize, x: &[f32], s: Shape) -> (Vec<f32>, Vec<f32>, Shape) {
        let (ho, wo) = spec.out_size(s.h, s.w);
        let cols = im2col(spec, x, s, ho, wo);
        let ncols = s.b * ho * wo;
        let mut out = vec![0.0f32; spec.out_ch * ncols];
        let w = &self.params[offset..offset + spec.weight_len()];
        let p = spec.patch_len();
        gemm(spec.out_ch, p, ncols, w, (p as isize, 1), &cols, (ncols as isize, 1), 0.0, &mut out);
        if spec.bias {
            let bias = &self.params[offset + spec.weight_len()..offset + spec.param_len()];
            for (row, b) in out.chunks_exact_mut(ncols).zip(bias) {
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        let shape = Shape {
            c: spec.out_ch,
            b: s.b,
            h: ho,
            w: wo,
        };
        (cols, out, shape)
    }

    /// Inference pass.
    pub fn forward(&self, x: &[f32], shape: Shape) -> (Vec<f32>, Shape) {
        let mut cur = x.to_vec();
        let mut s = shape;
        let mut offset = 0;
        for spec in &self.specs {
            let (_, mut out, next) = self.layer_forward(spec, offset, &cur, s);
            out.iter_mut().for_each(|v| *v = spec.activation.apply(*v));
            cur = out;
            s = next;
            offset += spec.param_len();
        }
        (cur, s)
    }

    /// Forward pass keeping what `backward` needs.
    pub fn forward_trace(&self, x: &[f32], shape: Shape) -> (Vec<f32>, Trace) {
        let mut cur = x.to_vec();
        let mut s = shape;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let (cols, pre, next) = self.layer_forward(spec, offset, &cur, s);
            cur = pre.iter().map(|v| spec.activation.apply(*v)).collect();
            layers.push(LayerTrace { cols, pre, in_shape: s });
            s = next;
            offset += spec.param_len();
        }
        (cur, Trace { layers, out_shape: s })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, trace: &Trace, grad_out: &[f32], grads: &mut [f32]) -> Vec<f32> {
        self.backward_impl(trace, grad_out, grads, true)
    }

    /// Like `backward` but skips the input gradient of the first layer.
    pub fn backward_params(&self, trace: &Trace, grad_out: &[f32], grads: &mut [f32]) {
        self.backward_impl(trace, grad_out, grads, false);
    }

    fn backward_impl(&self, trace: &Trace, grad_out: &[f32], grads: &mut [f32], input_grad: bool) -> Vec<f32> {
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(grad_out.len(), trace.out_shape.len());
        let mut offsets = Vec::with_capacity(self.specs.len());
        let mut acc = 0;
        for spec in &self.specs {
            offsets.push(acc);
            acc += spec.param_len();
        }
        let mut delta = grad_out.to_vec();
        for (li, spec) in self.specs.iter().enumerate().rev() {
            let t = &trace.layers[li];
            let (ho, wo) = spec.out_size(t.in_shape.h, t.in_shape.w);
            let ncols = t.in_shape.b * ho * wo;
            let p = spec.patch_len();
            for (d, pre) in delta.iter_mut().zip(&t.pre) {
                *d *= spec.activation.derivative(*pre);
            }
            let off = offsets[li];
            {
                let gw = &mut grads[off..off + spec.weight_len()];
                gemm(spec.out_ch, ncols, p, &delta, (ncols as isize, 1), &t.cols, (1, ncols as isize), 1.0, gw);
            }
            if spec.bias {
                let gb = &mut grads[off + spec.weight_len()..off + spec.param_len()];
                for (g, row) in gb.iter_mut().zip(delta.chunks_exact(ncols)) {
                    *g += row.iter().sum::<f32>();
                }
            }
            if li == 0 && !input_grad {
                return Vec::new();
            }
            let w = &self.params[off..off + spec.weight_len()];
            let mut dcols = vec![0.0f32; p * ncols];
            gemm(p, spec.out_ch, ncols, w, (1, p as isize), &delta, (ncols as isize, 1), 0.0, &mut dcols);
            delta = col2im(spec, &dcols, t.in_shape, ho, wo);
        }
        delta
    }
}

/// Dense layer `y = W x + b` over a batch stored row-major `[B][in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / inputs as f32).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn param_len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let mut y = vec![0.0f32; batch * self.outputs];
        gemm(
            batch,
            self.inputs,
            self.outputs,
            x,
            (self.inputs as isize, 1),
            &self.weight,
            (1, self.inputs as isize),
            0.0,
            &mut y,
        );
        for row in y.chunks_exact_mut(self.outputs) {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        y
    }

    /// Adds `dW`, `db` into `grads` (weights first) and returns `dx`.
    pub fn backward(&self, x: &[f32], dy: &[f32], batch: usize, grads: &mut [f32]) -> Vec<f32> {
        let (gw, gb) = grads.split_at_mut(self.weight.len());
        gemm(
            self.outputs,
            batch,
            self.inputs,
            dy,
            (1, self.outputs as isize),
            x,
            (self.inputs as isize, 1),
            1.0,
            gw,
        );
        for row in dy.chunks_exact(self.outputs) {
            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let mut dx = vec![0.0f32; batch * self.inputs];
        gemm(
            batch,
            self.outputs,
            self.inputs,
            dy,
            (self.outputs as isize, 1),
            &self.weight,
            (self.inputs as isize, 1),
            0.0,
            &mut dx,
        );
        dx
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Gradient decay factor.
    pub beta1: f64,
    /// Squared-gradient decay factor.
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = *g as f64;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            *p = (*p as f64 - update) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_stack() -> ConvStack {
        let specs = vec![
            ConvSpec {
                in_ch: 2,
                out_ch: 3,
                kernel: 4,
                stride: 2,
                pad: 1,
                activation: Activation::LeakyRelu,
                bias: true,
            },
            ConvSpec {
                in_ch: 3,
                out_ch: 1,
                kernel: 1,
                stride: 1,
                pad: 0,
                activation: Activation::Identity,
                bias: false,
            },
        ];
        ConvStack::new(specs, &mut seeded(5))
    }

    fn objective(stack: &ConvStack, x: &[f32], s: Shape, coef: &[f32]) -> f64 {
        let (y, _) = stack.forward(x, s);
        y.iter().zip(coef).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = seeded(11);
        let mut stack = small_stack();
        let s = Shape { c: 2, b: 2, h: 6, w: 6 };
        let x: Vec<f32> = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = stack.output_shape(s);
        assert_eq!((out.c, out.h, out.w), (1, 3, 3));
        let coef: Vec<f32> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

        let (_, trace) = stack.forward_trace(&x, s);
        let mut grads = vec![0.0f32; stack.params().len()];
        let dx = stack.backward(&trace, &coef, &mut grads);

        let h = 1e-2f32;
        for i in (0..stack.params().len()).step_by(3) {
            let orig = stack.params()[i];
            stack.params_mut()[i] = orig + h;
            let up = objective(&stack, &x, s, &coef);
            stack.params_mut()[i] = orig - h;
            let down = objective(&stack, &x, s, &coef);
            stack.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            assert!((fd - grads[i] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp[i] += h;
            let up = objective(&stack, &xp, s, &coef);
            xp[i] -= 2.0 * h;
            let down = objective(&stack, &xp, s, &coef);
            let fd = (up - down) / (2.0 * h as f64);
            assert!((fd - dx[i] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = seeded(2);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |lin: &Linear, x: &[f32]| -> f64 {
            lin.forward(x, 2).iter().zip(&dy).map(|(a, b)| (*a * *b) as f64).sum()
        };
        let mut grads = vec![0.0; lin.param_len()];
        let dx = lin.backward(&x, &dy, 2, &mut grads);
        let h = 1e-2;
        for i in 0..lin.weight.len() {
            let o = lin.weight[i];
            lin.weight[i] = o + h;
            let up = f(&lin, &x);
            lin.weight[i] = o - h;
            let down = f(&lin, &x);
            lin.weight[i] = o;
            assert!(((up - down) / (2.0 * h as f64) - grads[i] as f64).abs() < 1e-3);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = f(&lin, &xp);
            xp[i] -= 2.0 * h;
            let down = f(&lin, &xp);
            assert!(((up - down) / (2.0 * h as f64) - dx[i] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn geometry_of_stride_two_stack() {
        let spec = |i, o| ConvSpec {
            in_ch: i,
            out_ch: o,
            kernel: 4,
            stride: 2,
            pad: 1,
            activation: Activation::LeakyRelu,
            bias: false,
        };
        let mut specs = vec![spec(3, 4), spec(4, 4), spec(4, 4)];
        specs.push(ConvSpec {
            kernel: 1,
            stride: 1,
            pad: 0,
            out_ch: 1,
            activation: Activation::Identity,
            ..spec(4, 1)
        });
        let stack = ConvStack::new(specs, &mut seeded(0));
        assert_eq!(stack.geometry(), (8.0, 3.5));
        let out = stack.output_shape(Shape { c: 3, b: 1, h: 224, w: 224 });
        assert_eq!((out.h, out.w), (28, 28));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, 2);
        let mut p = vec![1.0f32, -1.0];
        adam.step(&mut p, &[1.0, -1.0]);
        assert!((p[0] - 0.9).abs() < 1e-5 && (p[1] + 0.9).abs() < 1e-5);
    }
}
