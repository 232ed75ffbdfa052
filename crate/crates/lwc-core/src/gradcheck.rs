//! Finite-difference gradient verification.
//!
//! Runs a scalar-producing closure twice per probed parameter entry with the
//! entry nudged up and down, and compares the centered difference against the
//! gradient from one reverse-mode sweep. Everything runs in `f64`; `f32`
//! would leave no headroom between truncation error and roundoff.

use crate::tensor::Tensor;
use rand::Rng;

pub struct GradCheck {
    /// Perturbation size for the centered difference.
    pub eps: f64,
    /// Maximum allowed relative error between analytic and numeric values.
    pub rel_tol: f64,
    /// Disagreements below this absolute size are ignored; both estimates
    /// are then dominated by roundoff.
    pub abs_floor: f64,
    /// Entries probed per parameter tensor (sampled without replacement when
    /// the tensor is larger).
    pub samples_per_param: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-7,
            samples_per_param: 8,
        }
    }
}

#[derive(Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl GradCheck {
    /// Checks d(loss)/d(param) for every named parameter. The closure must
    /// rebuild the graph from the parameters' current values on every call.
    pub fn run(
        &self,
        params: &[(String, Tensor<f64>)],
        rng: &mut impl Rng,
        loss_fn: impl Fn() -> Tensor<f64>,
    ) -> Result<usize, GradMismatch> {
        for (_, p) in params {
            p.zero_grad();
        }
        let loss = loss_fn();
        loss.backward();
        let analytic: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad()).collect();

        let mut checked = 0;
        for (pi, (name, p)) in params.iter().enumerate() {
            let n = p.shape().numel();
            let indices: Vec<usize> = if n <= self.samples_per_param {
                (0..n).collect()
            } else {
                let mut idx: Vec<usize> = Vec::with_capacity(self.samples_per_param);
                while idx.len() < self.samples_per_param {
                    let i = rng.gen_range(0..n);
                    if !idx.contains(&i) {
                        idx.push(i);
                    }
                }
                idx
            };
            for i in indices {
                let a = analytic[pi].as_ref().map_or(0.0, |g| g[i]);
                let orig = p.data_at(i);
                p.set_data_at(i, orig + self.eps);
                let up = loss_fn().item();
                p.set_data_at(i, orig - self.eps);
                let dn = loss_fn().item();
                p.set_data_at(i, orig);
                let d = (up - dn) / (2.0 * self.eps);
                let diff = (a - d).abs();
                if diff > self.abs_floor {
                    let rel = diff / a.abs().max(d.abs()).max(1e-12);
                    if rel > self.rel_tol {
                        return Err(GradMismatch {
                            param: name.clone(),
                            index: i,
                            analytic: a,
                            numeric: d,
                            rel_err: rel,
                        });
                    }
                }
                checked += 1;
            }
        }
        Ok(checked)
    }
}
