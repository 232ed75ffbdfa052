//! Subband scaling: maps transform coefficients into the domain where
//! unit-step rounding happens, and back.
//!
//! Two variants, matched to the transform:
//! - `simple` (paired with the fixed 9/7 filters): one map per subband,
//!   a trainable scalar gain plus a small pointwise CNN correction that
//!   starts at zero.
//! - `llb` (paired with the learned lifting operators): one net for the
//!   low-pass band and one shared net for the detail triple of every level,
//!   built from 3x3/1x1 convolutions with GDN between them. The synthesis
//!   side runs GDN's algebraic inverse.
//!
//! Analysis and synthesis are independently parameterized networks; nothing
//! forces them to be inverses except training (and the identity
//! initialization they start from).

use crate::lifting::{DetailBands, Orient, Pyramid, SubbandRef};
use crate::nn::{randn_vec, Conv, Gdn, ParamList};
use crate::tensor::{Real, Shape, Tensor};
use rand::Rng;

/// Hidden width of the simple per-subband correction CNN.
pub const SIMPLE_WIDTH: usize = 32;
/// Hidden width of the llb low-pass net.
pub const LLB_LL_WIDTH: usize = 32;
/// Hidden width of the llb detail net.
pub const LLB_DETAIL_WIDTH: usize = 96;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    /// Encoder side: plain GDN.
    Analysis,
    /// Decoder side: inverse GDN.
    Synthesis,
}

/// Scalar gain plus a zero-initialized pointwise correction:
/// `y = g * x + c3(tanh(c2(tanh(c1(x)))))`.
pub struct SimpleSubbandMap<R: Real> {
    pub gain: Tensor<R>,
    pub c1: Conv<R>,
    pub c2: Conv<R>,
    pub c3: Conv<R>,
}

impl<R: Real> SimpleSubbandMap<R> {
    pub fn new(width: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let c3 = Conv::glorot(width, 1, 1, 1, rng);
        c3.kernel.set_data(vec![R::ZERO; width]);
        SimpleSubbandMap {
            gain: Tensor::param(Shape::scalar(), vec![R::from_f64(gain)]),
            c1: Conv::glorot(1, width, 1, 1, rng),
            c2: Conv::glorot(width, width, 1, 1, rng),
            c3,
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        let h = self.c2.forward(&self.c1.forward(x).tanh()).tanh();
        x.scale_by(&self.gain).add(&self.c3.forward(&h))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        self.c1.params(&format!("{prefix}.c1"), out);
        self.c2.params(&format!("{prefix}.c2"), out);
        self.c3.params(&format!("{prefix}.c3"), out);
    }
}

/// Conv/GDN/Conv/GDN/Conv stack used by the llb variant. `ch` is the number
/// of subband channels passing through (1 for the low-pass net, 3 for the
/// detail net).
pub struct BandNet<R: Real> {
    pub c1: Conv<R>,
    pub g1: Gdn<R>,
    pub c2: Conv<R>,
    pub g2: Gdn<R>,
    pub c3: Conv<R>,
    pub dir: Direction,
}

impl<R: Real> BandNet<R> {
    /// Identity data path plus `noise`-scaled random perturbation on the
    /// weights. With `noise = 0` and identity GDN the net is exactly the
    /// identity map.
    pub fn near_identity(ch: usize, width: usize, dir: Direction, noise: f64, rng: &mut impl Rng) -> Self {
        assert!(width >= ch);
        let mk = |in_ch: usize, out_ch: usize, k: usize, rng: &mut dyn FnMut() -> f64| {
            let ks = Shape::new(out_ch, in_ch, k, k);
            let mut w = vec![0.0f64; ks.numel()];
            for o in 0..out_ch.min(in_ch).max(0) {
                // Center tap of the matching channel carries the signal.
                w[ks.idx(o, o, k / 2, k / 2)] = 1.0;
            }
            for v in w.iter_mut() {
                *v += rng();
            }
            w
        };
        let mut noise_fn = {
            let mut vals = randn_vec(
                (width * ch + width * width + ch * width) * 9 + 16,
                noise,
                rng,
            )
            .into_iter();
            move || vals.next().unwrap_or(0.0)
        };
        // Passthrough wiring: c1 copies channel i of the input into hidden
        // channel i, c3 reads it back out.
        let c1 = Conv::from_values(ch, width, 3, 3, mk(ch, width, 3, &mut noise_fn), vec![0.0; width]);
        let c2 = Conv::from_values(width, width, 3, 3, mk(width, width, 3, &mut noise_fn), vec![0.0; width]);
        let c3 = Conv::from_values(width, ch, 1, 1, mk(width, ch, 1, &mut noise_fn), vec![0.0; ch]);
        let (g1, g2) = if noise == 0.0 {
            (Gdn::identity(width), Gdn::identity(width))
        } else {
            (Gdn::near_identity(width), Gdn::near_identity(width))
        };
        BandNet { c1, g1, c2, g2, c3, dir }
    }

    fn norm(&self, g: &Gdn<R>, x: &Tensor<R>) -> Tensor<R> {
        match self.dir {
            Direction::Analysis => g.forward(x),
            Direction::Synthesis => g.inverse(x),
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        let h = self.norm(&self.g1, &self.c1.forward(x));
        let h = self.norm(&self.g2, &self.c2.forward(&h));
        self.c3.forward(&h)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.c1.params(&format!("{prefix}.c1"), out);
        self.g1.params(&format!("{prefix}.g1"), out);
        self.c2.params(&format!("{prefix}.c2"), out);
        self.g2.params(&format!("{prefix}.g2"), out);
        self.c3.params(&format!("{prefix}.c3"), out);
    }
}

/// Scaling for one color channel's pyramid.
pub enum ChannelScaler<R: Real> {
    Simple {
        ll: SimpleSubbandMap<R>,
        /// `details[level][orient]`, level 0 = finest.
        details: Vec<[SimpleSubbandMap<R>; 3]>,
    },
    Llb {
        ll: BandNet<R>,
        detail: BandNet<R>,
    },
}

impl<R: Real> ChannelScaler<R> {
    pub fn new_simple(levels: usize, width: usize, rng: &mut impl Rng) -> Self {
        ChannelScaler::Simple {
            ll: SimpleSubbandMap::new(width, 1.0, rng),
            details: (0..levels)
                .map(|_| {
                    [
                        SimpleSubbandMap::new(width, 1.0, rng),
                        SimpleSubbandMap::new(width, 1.0, rng),
                        SimpleSubbandMap::new(width, 1.0, rng),
                    ]
                })
                .collect(),
        }
    }

    pub fn new_llb(
        dir: Direction,
        ll_width: usize,
        detail_width: usize,
        noise: f64,
        rng: &mut impl Rng,
    ) -> Self {
        ChannelScaler::Llb {
            ll: BandNet::near_identity(1, ll_width, dir, noise, rng),
            detail: BandNet::near_identity(3, detail_width, dir, noise, rng),
        }
    }

    pub fn apply(&self, pyr: &Pyramid<R>) -> Pyramid<R> {
        match self {
            ChannelScaler::Simple { ll, details } => Pyramid {
                ll: ll.forward(&pyr.ll),
                details: pyr
                    .details
                    .iter()
                    .enumerate()
                    .map(|(lv, d)| d.map(|o, t| details[lv][o.index()].forward(t)))
                    .collect(),
            },
            ChannelScaler::Llb { ll, detail } => Pyramid {
                ll: ll.forward(&pyr.ll),
                details: pyr
                    .details
                    .iter()
                    .map(|d| {
                        let stacked = Tensor::concat_ch(&[d.lh.clone(), d.hl.clone(), d.hh.clone()]);
                        let y = detail.forward(&stacked);
                        DetailBands {
                            lh: y.narrow_ch(0, 1),
                            hl: y.narrow_ch(1, 1),
                            hh: y.narrow_ch(2, 1),
                        }
                    })
                    .collect(),
            },
        }
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        match self {
            ChannelScaler::Simple { ll, details } => {
                ll.params(&format!("{prefix}.ll"), out);
                for (lv, d) in details.iter().enumerate() {
                    for o in Orient::ALL {
                        let band = SubbandRef::Detail { level: lv, orient: o }.label();
                        d[o.index()].params(&format!("{prefix}.{band}"), out);
                    }
                }
            }
            ChannelScaler::Llb { ll, detail } => {
                ll.params(&format!("{prefix}.ll"), out);
                detail.params(&format!("{prefix}.detail"), out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::{ChannelDwt, FilterKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_pyramid(rng: &mut ChaCha8Rng) -> Pyramid<f32> {
        let dwt = ChannelDwt::<f32>::new(FilterKind::Cdf97, 2, 0, rng);
        let data: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(-128.0..128.0f32)).collect();
        dwt.forward(&Tensor::constant(Shape::new(1, 1, 32, 32), data))
    }

    #[test]
    fn simple_map_starts_as_pure_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = SimpleSubbandMap::<f32>::new(8, 0.25, &mut rng);
        let x = Tensor::constant(Shape::new(1, 1, 4, 4), (0..16).map(|v| v as f32 - 8.0).collect());
        let y = m.forward(&x).copy_data();
        for (a, b) in y.iter().zip(x.copy_data()) {
            assert_eq!(*a, b * 0.25);
        }
    }

    #[test]
    fn simple_pair_roundtrips_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ChannelScaler::<f32>::new_simple(2, 8, &mut rng);
        let dec = ChannelScaler::<f32>::new_simple(2, 8, &mut rng);
        let pyr = test_pyramid(&mut rng);
        let back = dec.apply(&enc.apply(&pyr));
        for r in [
            SubbandRef::Ll,
            SubbandRef::Detail { level: 0, orient: Orient::Hh },
            SubbandRef::Detail { level: 1, orient: Orient::Lh },
        ] {
            for (a, b) in back.get(r).data().iter().zip(pyr.get(r).data().iter()) {
                assert_eq!(a, b, "{r:?}");
            }
        }
    }

    #[test]
    fn llb_identity_init_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ChannelScaler::<f32>::new_llb(Direction::Analysis, 8, 12, 0.0, &mut rng);
        let dec = ChannelScaler::<f32>::new_llb(Direction::Synthesis, 8, 12, 0.0, &mut rng);
        let pyr = test_pyramid(&mut rng);
        let mid = enc.apply(&pyr);
        let back = dec.apply(&mid);
        for r in [
            SubbandRef::Ll,
            SubbandRef::Detail { level: 0, orient: Orient::Lh },
            SubbandRef::Detail { level: 1, orient: Orient::Hh },
        ] {
            let orig = pyr.get(r).copy_data();
            for (a, b) in mid.get(r).data().iter().zip(&orig) {
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "analysis {r:?}: {a} vs {b}");
            }
            for (a, b) in back.get(r).data().iter().zip(&orig) {
                assert!((a - b).abs() <= 2e-4 * b.abs().max(1.0), "roundtrip {r:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn llb_default_init_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ChannelScaler::<f32>::new_llb(Direction::Analysis, 8, 12, 1e-2, &mut rng);
        let pyr = test_pyramid(&mut rng);
        let mid = enc.apply(&pyr);
        // Not exact, but close enough that early training is stable.
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for r in SubbandRef::coding_order(2) {
            for (a, b) in mid.get(r).data().iter().zip(pyr.get(r).data().iter()) {
                num += ((a - b) as f64).powi(2);
                den += (*b as f64).powi(2);
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.25, "relative distortion {rel}");
    }

    #[test]
    fn llb_near_identity_gradients_reach_all_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = ChannelScaler::<f64>::new_llb(Direction::Analysis, 4, 6, 1e-2, &mut rng);
        let x = Tensor::constant(
            Shape::new(1, 1, 8, 8),
            (0..64).map(|v| (v as f64 * 0.7).sin() * 20.0).collect(),
        );
        let dwt = ChannelDwt::<f64>::new(FilterKind::Cdf97, 1, 0, &mut rng);
        let pyr = dwt.forward(&x);
        let out = enc.apply(&pyr);
        let mut loss = out.ll.mul(&out.ll).sum_all();
        for d in &out.details {
            loss = loss.add(&d.lh.mul(&d.lh).sum_all());
            loss = loss.add(&d.hl.mul(&d.hl).sum_all());
            loss = loss.add(&d.hh.mul(&d.hh).sum_all());
        }
        loss.backward();
        let mut params = Vec::new();
        enc.params("s", &mut params);
        assert_eq!(params.len(), 2 * (3 * 2 + 2 * 2));
        for (name, p) in &params {
            let g = p.grad().unwrap_or_else(|| panic!("{name} got no gradient"));
            assert!(g.iter().any(|&v| v != 0.0), "{name} gradient is all zero");
        }
    }

    #[test]
    fn param_names_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = ChannelScaler::<f32>::new_simple(2, 4, &mut rng);
        let mut params = Vec::new();
        s.params("scale.enc.y", &mut params);
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"scale.enc.y.ll.gain"));
        assert!(names.contains(&"scale.enc.y.lh1.c3.kernel"));
        assert!(names.contains(&"scale.enc.y.hh2.c1.bias"));
        // 7 maps x (gain + 3 convs x 2)
        assert_eq!(params.len(), 7 * 7);
    }
}
