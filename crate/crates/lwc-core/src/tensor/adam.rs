use super::{Real, Tensor};

/// Adam with bias-corrected moment estimates. Parameters are leaf tensors;
/// their accumulated gradients are consumed (and cleared) by [`Adam::step`].
pub struct Adam<R: Real> {
    params: Vec<Tensor<R>>,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
    lr: R,
    beta1: R,
    beta2: R,
    eps: R,
    t: u64,
}

impl<R: Real> Adam<R> {
    pub fn new(params: Vec<Tensor<R>>, lr: f64) -> Self {
        let m = params.iter().map(|p| vec![R::ZERO; p.shape().numel()]).collect();
        let v = params.iter().map(|p| vec![R::ZERO; p.shape().numel()]).collect();
        Adam {
            params,
            m,
            v,
            lr: R::from_f64(lr),
            beta1: R::from_f64(0.9),
            beta2: R::from_f64(0.999),
            eps: R::from_f64(1e-8),
            t: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.to_f64()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = R::from_f64(lr);
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update. Parameters without an accumulated gradient are untouched
    /// (their moments do not advance either).
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = R::ONE - pow_int(self.beta1, self.t);
        let bc2 = R::ONE - pow_int(self.beta2, self.t);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let mut data = p.copy_data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (R::ONE - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (R::ONE - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(data);
            p.zero_grad();
        }
    }
}

fn pow_int<R: Real>(base: R, mut e: u64) -> R {
    let mut acc = R::ONE;
    let mut b = base;
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    acc
}
