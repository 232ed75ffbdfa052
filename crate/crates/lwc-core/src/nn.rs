//! Network building blocks on top of the tensor engine: convolution layers
//! (optionally with a causal mask), GDN normalization with its algebraic
//! inverse, and weight initializers.

use crate::tensor::{Real, Shape, Tensor};
use rand::Rng;

/// Named parameter list. Names are stable and form the checkpoint schema.
pub type ParamList<R> = Vec<(String, Tensor<R>)>;

pub fn push_param<R: Real>(out: &mut ParamList<R>, prefix: &str, name: &str, t: &Tensor<R>) {
    out.push((format!("{prefix}.{name}"), t.clone()));
}

/// Standard normal draws via Box-Muller, deterministic given the generator.
pub fn randn_vec(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(1e-300);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Uniform Glorot range for a conv kernel of the given shape.
pub fn glorot_limit(ks: Shape) -> f64 {
    let fan_in = (ks.c * ks.h * ks.w) as f64;
    let fan_out = (ks.n * ks.h * ks.w) as f64;
    (6.0 / (fan_in + fan_out)).sqrt()
}

pub fn glorot_vec(ks: Shape, rng: &mut impl Rng) -> Vec<f64> {
    let lim = glorot_limit(ks);
    (0..ks.numel()).map(|_| rng.gen_range(-lim..lim)).collect()
}

fn to_r<R: Real>(v: Vec<f64>) -> Vec<R> {
    v.into_iter().map(R::from_f64).collect()
}

/// Convolution layer. When `mask` is set, the effective kernel is
/// `kernel * mask` recomputed on every forward call, so masked positions
/// stay zero no matter what the optimizer writes into them.
pub struct Conv<R: Real> {
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
    pub mask: Option<Tensor<R>>,
    pub pad: (usize, usize),
}

impl<R: Real> Conv<R> {
    /// Glorot-uniform weights, zero bias, same-size padding.
    pub fn glorot(in_ch: usize, out_ch: usize, kh: usize, kw: usize, rng: &mut impl Rng) -> Self {
        let ks = Shape::new(out_ch, in_ch, kh, kw);
        Conv {
            kernel: Tensor::param(ks, to_r(glorot_vec(ks, rng))),
            bias: Tensor::param(Shape::new(1, out_ch, 1, 1), vec![R::ZERO; out_ch]),
            mask: None,
            pad: (kh / 2, kw / 2),
        }
    }

    /// Layer with explicitly provided weights.
    pub fn from_values(in_ch: usize, out_ch: usize, kh: usize, kw: usize, k: Vec<f64>, b: Vec<f64>) -> Self {
        let ks = Shape::new(out_ch, in_ch, kh, kw);
        assert_eq!(k.len(), ks.numel());
        assert_eq!(b.len(), out_ch);
        Conv {
            kernel: Tensor::param(ks, to_r(k)),
            bias: Tensor::param(Shape::new(1, out_ch, 1, 1), to_r(b)),
            mask: None,
            pad: (kh / 2, kw / 2),
        }
    }

    pub fn with_mask(mut self, mask: Vec<f64>) -> Self {
        let ks = self.kernel.shape();
        assert_eq!(mask.len(), ks.numel());
        self.mask = Some(Tensor::constant(ks, to_r(mask)));
        self
    }

    pub fn with_pad(mut self, pad: (usize, usize)) -> Self {
        self.pad = pad;
        self
    }

    /// Kernel actually applied: raw weights, mask-zeroed where a mask exists.
    pub fn effective_kernel(&self) -> Tensor<R> {
        match &self.mask {
            Some(m) => self.kernel.mul(m),
            None => self.kernel.clone(),
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        x.conv2d(&self.effective_kernel(), Some(&self.bias), (1, 1), self.pad)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        push_param(out, prefix, "kernel", &self.kernel);
        push_param(out, prefix, "bias", &self.bias);
    }
}

/// Causal mask over a k x k window in raster order. `include_center` selects
/// between the strict mask (used for the first layer, which must not see the
/// current coefficient) and the center-inclusive mask (used for deeper
/// layers, where the center column of features is already causal).
pub fn causal_mask(in_ch: usize, out_ch: usize, k: usize, include_center: bool) -> Vec<f64> {
    assert!(k % 2 == 1);
    let mut win = vec![0.0; k * k];
    let mid = k / 2;
    for r in 0..k {
        for c in 0..k {
            let before_center = r < mid || (r == mid && (c < mid || (c == mid && include_center)));
            if before_center {
                win[r * k + c] = 1.0;
            }
        }
    }
    let mut out = Vec::with_capacity(in_ch * out_ch * k * k);
    for _ in 0..in_ch * out_ch {
        out.extend_from_slice(&win);
    }
    out
}

/// Generalized divisive normalization:
/// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2)`.
///
/// `beta` and `gamma` are stored through square reparameterizations so they
/// stay nonnegative under unconstrained optimization; `beta` keeps a small
/// positive floor.
pub struct Gdn<R: Real> {
    pub beta_raw: Tensor<R>,
    pub gamma_raw: Tensor<R>,
    ch: usize,
}

const BETA_FLOOR: f64 = 1e-6;
/// Fixed-point sweeps for the inverse. GDN couples channels through the
/// denominator, so inversion solves z = u * sqrt(beta + Gamma z^2) iteratively.
const IGDN_ITERS: usize = 16;

impl<R: Real> Gdn<R> {
    /// Near-identity start: beta = 1, gamma ~ 1e-6. Inputs here are subband
    /// amplitudes up to a few hundred, so gamma must start tiny for the
    /// denominator to stay near one; the square reparameterization still
    /// leaves it a usable gradient.
    pub fn near_identity(ch: usize) -> Self {
        Gdn {
            beta_raw: Tensor::param(
                Shape::new(1, ch, 1, 1),
                vec![R::from_f64((1.0 - BETA_FLOOR).sqrt()); ch],
            ),
            gamma_raw: Tensor::param(Shape::new(ch, ch, 1, 1), vec![R::from_f64(1e-3); ch * ch]),
            ch,
        }
    }

    /// Exact identity: gamma = 0 (dead under gradients; test use only).
    pub fn identity(ch: usize) -> Self {
        Gdn {
            beta_raw: Tensor::param(
                Shape::new(1, ch, 1, 1),
                vec![R::from_f64((1.0 - BETA_FLOOR).sqrt()); ch],
            ),
            gamma_raw: Tensor::param(Shape::new(ch, ch, 1, 1), vec![R::ZERO; ch * ch]),
            ch,
        }
    }

    pub fn channels(&self) -> usize {
        self.ch
    }

    fn beta(&self) -> Tensor<R> {
        self.beta_raw.mul(&self.beta_raw).add_scalar(R::from_f64(BETA_FLOOR))
    }

    fn gamma(&self) -> Tensor<R> {
        self.gamma_raw.mul(&self.gamma_raw)
    }

    /// `beta + Gamma * (x^2)` via a 1x1 convolution.
    fn pool(&self, x2: &Tensor<R>, gamma: &Tensor<R>, beta: &Tensor<R>) -> Tensor<R> {
        x2.conv2d(gamma, Some(beta), (1, 1), (0, 0))
    }

    pub fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        let gamma = self.gamma();
        let beta = self.beta();
        let x2 = x.mul(x);
        x.div(&self.pool(&x2, &gamma, &beta).sqrt())
    }

    /// Algebraic inverse by fixed-point iteration on the squared denominator:
    /// `d2 <- beta + Gamma * (u^2 * d2)`, then `z = u * sqrt(d2)`.
    pub fn inverse(&self, u: &Tensor<R>) -> Tensor<R> {
        let gamma = self.gamma();
        let beta = self.beta();
        let u2 = u.mul(u);
        let mut d2 = self.pool(&u2, &gamma, &beta);
        for _ in 0..IGDN_ITERS {
            d2 = self.pool(&u2.mul(&d2), &gamma, &beta);
        }
        u.mul(&d2.sqrt())
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        push_param(out, prefix, "beta", &self.beta_raw);
        push_param(out, prefix, "gamma", &self.gamma_raw);
    }
}
