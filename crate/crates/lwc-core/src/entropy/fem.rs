//! Factorized entropy model: a small monotone network parameterizes a CDF
//! per subband, shared by every coefficient of that subband.
//!
//! Each stage computes `u <- softplus(H_k) u + b_k`, optionally gated by
//! `u <- u + tanh(a_k) * tanh(u)`, and the last stage applies a sigmoid.
//! Softplus keeps the matrix entries positive and `|tanh(a)| < 1` keeps the
//! gate residual-dominated, so the map is increasing in its input for any
//! parameter values and the implied mass `cdf(v + 1/2) - cdf(v - 1/2)` is
//! nonnegative.

use rand::Rng;

use crate::constants::P_FLOOR;
use crate::nn::ParamList;
use crate::tensor::{Real, Shape, Tensor};

/// Hidden width of the per-subband CDF network.
pub const FEM_HIDDEN: usize = 3;

/// Values outside this magnitude are never given a dedicated table slot.
pub const SUPPORT_CLAMP: i32 = 4096;

/// Tail mass below which the support scan stops widening.
pub const SUPPORT_TAIL: f64 = 1.0 / (1u64 << 20) as f64;

pub struct FactorizedModel<R: Real> {
    h: [Tensor<R>; 4],
    b: [Tensor<R>; 4],
    a: [Tensor<R>; 3],
}

impl<R: Real> FactorizedModel<R> {
    pub fn new(hidden: usize, rng: &mut impl Rng) -> Self {
        // Uniform-weight init behaves like a logistic CDF whose slope is
        // gain^4 times the fan-in product (hidden^3). Solving for scale ~64
        // keeps low-pass coefficients (hundreds) inside the coded support.
        let scale = 64.0;
        let gain = (1.0 / (hidden.pow(3) as f64 * scale)).powf(0.25);
        let h_init = R::from_f64((gain.exp() - 1.0).ln());
        let shapes = [
            Shape::new(hidden, 1, 1, 1),
            Shape::new(hidden, hidden, 1, 1),
            Shape::new(hidden, hidden, 1, 1),
            Shape::new(1, hidden, 1, 1),
        ];
        let h = shapes.map(|s| Tensor::full_param(s, h_init));
        let bias_shape = Shape::new(1, hidden, 1, 1);
        let b = [
            Tensor::param(bias_shape, uniform_half(hidden, rng)),
            Tensor::param(bias_shape, uniform_half(hidden, rng)),
            Tensor::param(bias_shape, uniform_half(hidden, rng)),
            Tensor::zeros_param(Shape::new(1, 1, 1, 1)),
        ];
        let a = [(); 3].map(|_| Tensor::zeros_param(bias_shape));
        Self { h, b, a }
    }

    /// Monotone CDF evaluated elementwise on a single-channel tensor.
    pub fn cdf(&self, x: &Tensor<R>) -> Tensor<R> {
        let mut u = x.clone();
        for k in 0..4 {
            u = u.conv2d(&self.h[k].softplus(), Some(&self.b[k]), (1, 1), (0, 0));
            if k < 3 {
                u = u.add(&u.tanh().mul_channels(&self.a[k].tanh()));
            }
        }
        u.sigmoid()
    }

    /// Probability mass of each integer value in `v`, floored away from zero.
    pub fn pmf(&self, v: &Tensor<R>) -> Tensor<R> {
        let half = R::from_f64(0.5);
        let up = self.cdf(&v.add_scalar(half));
        let dn = self.cdf(&v.add_scalar(-half));
        up.sub(&dn).clamp_min(R::from_f64(P_FLOOR))
    }

    /// Scalar CDF in f64, reading the current parameter values. The coder
    /// builds its frequency tables through this path on both sides of the
    /// stream, so it must not depend on tensor-graph evaluation order.
    pub fn cdf_scalar(&self, x: f64) -> f64 {
        let hidden = self.h[0].shape().n;
        let mut u = vec![x];
        for k in 0..4 {
            let h = self.h[k].data();
            let b = self.b[k].data();
            let rows = self.h[k].shape().n;
            let cols = self.h[k].shape().c;
            let mut next = vec![0.0f64; rows];
            for (r, out) in next.iter_mut().enumerate() {
                let mut acc = b[r].to_f64();
                for c in 0..cols {
                    acc += softplus_f64(h[r * cols + c].to_f64()) * u[c];
                }
                *out = acc;
            }
            if k < 3 {
                let a = self.a[k].data();
                for (r, val) in next.iter_mut().enumerate().take(hidden) {
                    *val += a[r].to_f64().tanh() * val.tanh();
                }
            }
            u = next;
        }
        sigmoid_f64(u[0])
    }

    /// Mass of integer `v` through the scalar path.
    pub fn pmf_scalar(&self, v: f64) -> f64 {
        (self.cdf_scalar(v + 0.5) - self.cdf_scalar(v - 0.5)).max(P_FLOOR)
    }

    /// Smallest integer range `[lo, hi]` containing 0 whose tails fall below
    /// [`SUPPORT_TAIL`], clamped to `±`[`SUPPORT_CLAMP`]. Values outside the
    /// range are coded through the escape path.
    pub fn integer_support(&self) -> (i32, i32) {
        let mut lo = 0i32;
        while lo > -SUPPORT_CLAMP && self.cdf_scalar(lo as f64 - 0.5) > SUPPORT_TAIL {
            lo -= 1;
        }
        let mut hi = 0i32;
        while hi < SUPPORT_CLAMP && 1.0 - self.cdf_scalar(hi as f64 + 0.5) > SUPPORT_TAIL {
            hi += 1;
        }
        (lo, hi)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        for (k, t) in self.h.iter().enumerate() {
            out.push((format!("{prefix}.h{k}"), t.clone()));
        }
        for (k, t) in self.b.iter().enumerate() {
            out.push((format!("{prefix}.b{k}"), t.clone()));
        }
        for (k, t) in self.a.iter().enumerate() {
            out.push((format!("{prefix}.a{k}"), t.clone()));
        }
    }
}

fn uniform_half<R: Real>(n: usize, rng: &mut impl Rng) -> Vec<R> {
    (0..n).map(|_| R::from_f64(rng.gen_range(-0.5..0.5))).collect()
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
