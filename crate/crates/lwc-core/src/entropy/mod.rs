//! Probability models over quantized subband pyramids.
//!
//! Four interchangeable models cover one color channel each:
//! - factorized: every subband gets its own learned scalar CDF;
//! - inter-subband: children are Gaussian, conditioned on the parent level;
//! - inter+intra: adds raster-causal masked self-conditioning (sequential
//!   decode);
//! - inter + parallel intra: adds four-phase self-conditioning that decodes
//!   in four waves.
//!
//! Top-level subbands (the low-pass band and the coarsest detail triple)
//! have no parent: the factorized model covers them, except in the
//! inter+intra variant where a masked self-model codes them too.

pub mod conditional;
pub mod fem;
pub mod gaussian;

use rand::Rng;

pub use conditional::GaussianParams;
pub use fem::FactorizedModel;

use conditional::{InterIntraNet, InterSubbandNet, MaskedSelfNet, PhaseCondNets};

use crate::lifting::{DetailBands, Orient, Pyramid, SubbandRef};
use crate::nn::ParamList;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EntropyKind {
    Fem,
    Iscem,
    Iiscem,
    Ipiscem,
}

/// How a decoder may parallelize within one subband.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParallelismClass {
    /// Every coefficient's table is known before the subband starts.
    FullyParallel,
    /// Four sequential waves, parallel within each wave.
    PhaseWaves,
    /// One coefficient at a time in raster order.
    Sequential,
}

impl EntropyKind {
    pub const ALL: [EntropyKind; 4] =
        [EntropyKind::Fem, EntropyKind::Iscem, EntropyKind::Iiscem, EntropyKind::Ipiscem];

    pub fn as_str(self) -> &'static str {
        match self {
            EntropyKind::Fem => "fem",
            EntropyKind::Iscem => "iscem",
            EntropyKind::Iiscem => "iiscem",
            EntropyKind::Ipiscem => "ipiscem",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn decode_parallelism(self) -> ParallelismClass {
        match self {
            EntropyKind::Fem | EntropyKind::Iscem => ParallelismClass::FullyParallel,
            EntropyKind::Ipiscem => ParallelismClass::PhaseWaves,
            EntropyKind::Iiscem => ParallelismClass::Sequential,
        }
    }
}

/// Stacks a detail triple channel-wise in LH, HL, HH order.
pub fn orient_stack<R: Real>(bands: &DetailBands<R>) -> Tensor<R> {
    Tensor::concat_ch(&[bands.lh.clone(), bands.hl.clone(), bands.hh.clone()])
}

/// The four parentless subbands, in coding order.
pub fn top_refs(coarsest: usize) -> [SubbandRef; 4] {
    [
        SubbandRef::Ll,
        SubbandRef::Detail { level: coarsest, orient: Orient::Lh },
        SubbandRef::Detail { level: coarsest, orient: Orient::Hl },
        SubbandRef::Detail { level: coarsest, orient: Orient::Hh },
    ]
}

/// Entropy model for one color channel's pyramid.
pub struct ChannelEntropy<R: Real> {
    levels: usize,
    pub model: ChannelModel<R>,
}

pub enum ChannelModel<R: Real> {
    Fem {
        /// One model per subband, in coding order.
        bands: Vec<(SubbandRef, FactorizedModel<R>)>,
    },
    Iscem {
        top: [FactorizedModel<R>; 4],
        /// `cond[lv]` produces params for `details[lv]` from `details[lv+1]`.
        cond: Vec<InterSubbandNet<R>>,
    },
    Iiscem {
        top: [MaskedSelfNet<R>; 4],
        cond: Vec<InterIntraNet<R>>,
    },
    Ipiscem {
        top: [FactorizedModel<R>; 4],
        cond: Vec<PhaseCondNets<R>>,
    },
}

impl<R: Real> ChannelEntropy<R> {
    pub fn new(kind: EntropyKind, levels: usize, rng: &mut impl Rng) -> Self {
        assert!(levels >= 1);
        let model = match kind {
            EntropyKind::Fem => ChannelModel::Fem {
                bands: SubbandRef::coding_order(levels)
                    .into_iter()
                    .map(|r| (r, FactorizedModel::new(fem::FEM_HIDDEN, rng)))
                    .collect(),
            },
            EntropyKind::Iscem => ChannelModel::Iscem {
                top: [(); 4].map(|_| FactorizedModel::new(fem::FEM_HIDDEN, rng)),
                cond: (1..levels).map(|_| InterSubbandNet::new(rng)).collect(),
            },
            EntropyKind::Iiscem => ChannelModel::Iiscem {
                top: [(); 4].map(|_| MaskedSelfNet::new(rng)),
                cond: (1..levels).map(|_| InterIntraNet::new(rng)).collect(),
            },
            EntropyKind::Ipiscem => ChannelModel::Ipiscem {
                top: [(); 4].map(|_| FactorizedModel::new(fem::FEM_HIDDEN, rng)),
                cond: (1..levels).map(|_| PhaseCondNets::new(rng)).collect(),
            },
        };
        ChannelEntropy { levels, model }
    }

    pub fn kind(&self) -> EntropyKind {
        match &self.model {
            ChannelModel::Fem { .. } => EntropyKind::Fem,
            ChannelModel::Iscem { .. } => EntropyKind::Iscem,
            ChannelModel::Iiscem { .. } => EntropyKind::Iiscem,
            ChannelModel::Ipiscem { .. } => EntropyKind::Ipiscem,
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Model bit cost of every subband, in coding order. Differentiable
    /// through both the model parameters and the pyramid values.
    pub fn subband_rates(&self, pyr: &Pyramid<R>) -> Vec<(SubbandRef, Tensor<R>)> {
        assert_eq!(pyr.levels(), self.levels, "pyramid depth mismatch");
        let coarsest = self.levels - 1;
        let mut out = Vec::with_capacity(1 + 3 * self.levels);
        match &self.model {
            ChannelModel::Fem { bands } => {
                for (r, m) in bands {
                    out.push((*r, gaussian::rate_bits(&m.pmf(pyr.get(*r)))));
                }
            }
            ChannelModel::Iscem { top, cond } => {
                push_fem_top(&mut out, top, pyr, coarsest);
                for lv in (0..coarsest).rev() {
                    let params = cond[lv].forward(&orient_stack(&pyr.details[lv + 1]));
                    push_joint_rates(&mut out, lv, &pyr.details[lv], &params);
                }
            }
            ChannelModel::Iiscem { top, cond } => {
                for (i, r) in top_refs(coarsest).into_iter().enumerate() {
                    let band = pyr.get(r);
                    let p = top[i].forward(band);
                    out.push((r, gaussian::rate_bits(&gaussian::pmf(band, &p.mu, &p.sigma))));
                }
                for lv in (0..coarsest).rev() {
                    let child = &pyr.details[lv];
                    let right = cond[lv].right_features(&orient_stack(&pyr.details[lv + 1]));
                    for o in Orient::ALL {
                        let p = cond[lv].orient_params(&right, o, child.get(o));
                        let pmf = gaussian::pmf(child.get(o), &p.mu, &p.sigma);
                        out.push((
                            SubbandRef::Detail { level: lv, orient: o },
                            gaussian::rate_bits(&pmf),
                        ));
                    }
                }
            }
            ChannelModel::Ipiscem { top, cond } => {
                push_fem_top(&mut out, top, pyr, coarsest);
                for lv in (0..coarsest).rev() {
                    let parent = orient_stack(&pyr.details[lv + 1]);
                    let phases = cond[lv].forward(&parent, &pyr.details[lv]);
                    let mut per_orient: [Option<Tensor<R>>; 3] = [None, None, None];
                    for (params, values) in &phases {
                        let pmf = gaussian::pmf(values, &params.mu, &params.sigma);
                        for o in Orient::ALL {
                            let r = gaussian::rate_bits(&pmf.narrow_ch(o.index(), 1));
                            let slot = &mut per_orient[o.index()];
                            *slot = Some(match slot.take() {
                                Some(acc) => acc.add(&r),
                                None => r,
                            });
                        }
                    }
                    for o in Orient::ALL {
                        out.push((
                            SubbandRef::Detail { level: lv, orient: o },
                            per_orient[o.index()].take().expect("four phases seen"),
                        ));
                    }
                }
            }
        }
        out
    }

    /// Total bit cost of the pyramid under this model.
    pub fn rate_bits(&self, pyr: &Pyramid<R>) -> Tensor<R> {
        let mut total: Option<Tensor<R>> = None;
        for (_, r) in self.subband_rates(pyr) {
            total = Some(match total.take() {
                Some(acc) => acc.add(&r),
                None => r,
            });
        }
        total.expect("at least one subband")
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        let coarsest = self.levels - 1;
        match &self.model {
            ChannelModel::Fem { bands } => {
                for (r, m) in bands {
                    m.params(&format!("{prefix}.{}", r.label()), out);
                }
            }
            ChannelModel::Iscem { top, cond } => {
                for (i, r) in top_refs(coarsest).into_iter().enumerate() {
                    top[i].params(&format!("{prefix}.{}", r.label()), out);
                }
                push_cond_params(cond, prefix, out, InterSubbandNet::params);
            }
            ChannelModel::Iiscem { top, cond } => {
                for (i, r) in top_refs(coarsest).into_iter().enumerate() {
                    top[i].params(&format!("{prefix}.{}", r.label()), out);
                }
                push_cond_params(cond, prefix, out, InterIntraNet::params);
            }
            ChannelModel::Ipiscem { top, cond } => {
                for (i, r) in top_refs(coarsest).into_iter().enumerate() {
                    top[i].params(&format!("{prefix}.{}", r.label()), out);
                }
                push_cond_params(cond, prefix, out, PhaseCondNets::params);
            }
        }
    }
}

fn push_fem_top<R: Real>(
    out: &mut Vec<(SubbandRef, Tensor<R>)>,
    top: &[FactorizedModel<R>; 4],
    pyr: &Pyramid<R>,
    coarsest: usize,
) {
    for (i, r) in top_refs(coarsest).into_iter().enumerate() {
        out.push((r, gaussian::rate_bits(&top[i].pmf(pyr.get(r)))));
    }
}

fn push_joint_rates<R: Real>(
    out: &mut Vec<(SubbandRef, Tensor<R>)>,
    lv: usize,
    child: &DetailBands<R>,
    params: &GaussianParams<R>,
) {
    let pmf = gaussian::pmf(&orient_stack(child), &params.mu, &params.sigma);
    for o in Orient::ALL {
        out.push((
            SubbandRef::Detail { level: lv, orient: o },
            gaussian::rate_bits(&pmf.narrow_ch(o.index(), 1)),
        ));
    }
}

fn push_cond_params<R: Real, N>(
    cond: &[N],
    prefix: &str,
    out: &mut ParamList<R>,
    f: impl Fn(&N, &str, &mut ParamList<R>),
) {
    for (lv, net) in cond.iter().enumerate() {
        f(net, &format!("{prefix}.cond{}", lv + 1), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn band(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let shape = Shape::new(1, 1, h, w);
        Tensor::constant(
            shape,
            (0..h * w).map(|_| rng.gen_range(-20.0..20.0_f64).round()).collect(),
        )
    }

    fn pyramid(levels: usize, top: usize, seed: u64) -> Pyramid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ll = band(top, top, &mut rng);
        let details = (0..levels)
            .map(|lv| {
                let s = top << (levels - 1 - lv);
                DetailBands {
                    lh: band(s, s, &mut rng),
                    hl: band(s, s, &mut rng),
                    hh: band(s, s, &mut rng),
                }
            })
            .collect();
        Pyramid { ll, details }
    }

    #[test]
    fn every_model_rates_every_subband_in_coding_order() {
        let pyr = pyramid(2, 4, 1);
        for kind in EntropyKind::ALL {
            let em = ChannelEntropy::new(kind, 2, &mut ChaCha8Rng::seed_from_u64(2));
            let rates = em.subband_rates(&pyr);
            let labels: Vec<String> = rates.iter().map(|(r, _)| r.label()).collect();
            assert_eq!(
                labels,
                ["ll", "lh2", "hl2", "hh2", "lh1", "hl1", "hh1"],
                "{kind:?}"
            );
            let total = em.rate_bits(&pyr).item();
            let sum: f64 = rates.iter().map(|(_, t)| t.item()).sum();
            assert!((total - sum).abs() < 1e-9);
            assert!(total.is_finite() && total > 0.0, "{kind:?}: {total}");
        }
    }

    #[test]
    fn parameter_names_are_unique_and_prefixed() {
        for kind in EntropyKind::ALL {
            let em = ChannelEntropy::<f64>::new(kind, 3, &mut ChaCha8Rng::seed_from_u64(3));
            let mut params = ParamList::new();
            em.params("em.x", &mut params);
            let names: HashSet<&String> = params.iter().map(|(n, _)| n).collect();
            assert_eq!(names.len(), params.len(), "{kind:?}: duplicate names");
            assert!(params.iter().all(|(n, _)| n.starts_with("em.x.")));
        }
    }

    #[test]
    fn rate_gradients_reach_model_parameters_and_coefficients() {
        for kind in EntropyKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let em = ChannelEntropy::new(kind, 2, &mut rng);
            let ll = Tensor::param(Shape::new(1, 1, 4, 4), (0..16).map(|i| (i % 5) as f64).collect());
            let mk = |h: usize, rng: &mut ChaCha8Rng| {
                let shape = Shape::new(1, 1, h, h);
                Tensor::param(shape, (0..h * h).map(|_| rng.gen_range(-9.0..9.0_f64).round()).collect())
            };
            let details = vec![
                DetailBands { lh: mk(8, &mut rng), hl: mk(8, &mut rng), hh: mk(8, &mut rng) },
                DetailBands { lh: mk(4, &mut rng), hl: mk(4, &mut rng), hh: mk(4, &mut rng) },
            ];
            let pyr = Pyramid { ll: ll.clone(), details };
            em.rate_bits(&pyr).backward();
            assert!(
                ll.grad().expect("ll grad").iter().any(|&g| g != 0.0),
                "{kind:?}: no gradient into the low-pass band"
            );
            let mut params = ParamList::new();
            em.params("em", &mut params);
            let with_grad = params
                .iter()
                .filter(|(_, t)| t.grad().map_or(false, |g| g.iter().any(|&v| v != 0.0)))
                .count();
            assert!(
                with_grad * 10 >= params.len() * 9,
                "{kind:?}: only {with_grad}/{} params received gradient",
                params.len()
            );
        }
    }

    #[test]
    fn rates_are_deterministic_across_calls() {
        let pyr = pyramid(3, 2, 9);
        let em = ChannelEntropy::new(EntropyKind::Ipiscem, 3, &mut ChaCha8Rng::seed_from_u64(10));
        let a = em.rate_bits(&pyr).item();
        let b = em.rate_bits(&pyr).item();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
