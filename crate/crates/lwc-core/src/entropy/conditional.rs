//! Conditional Gaussian parameter networks: inter-subband conditioning from
//! the parent level, masked-convolution self-conditioning within a subband,
//! their fusion, and the four-phase parallel variant.

use rand::Rng;

use crate::entropy::gaussian::sigma_from_raw;
use crate::lifting::{DetailBands, Orient};
use crate::nn::{causal_mask, Conv, ParamList};
use crate::tensor::{Parity, Real, Tensor};

/// Joint-orientation feature width of the parent-conditioning branch.
pub const JOINT_CH: usize = 243;
/// Per-orientation feature width of masked convolution stacks.
pub const MASKED_CH: usize = 81;
/// Feature width of the parameter estimator applied after fusion.
pub const FUSED_CH: usize = 162;
/// Feature width of the phase dependency extractors.
pub const PHASE_CH: usize = 32;

/// Raw-scale bias giving sigma = 10 at initialization: wide enough that an
/// untrained model assigns sane mass to typical detail coefficients.
const SIGMA_RAW_INIT: f64 = std::f64::consts::LN_10;

/// Mean/scale maps for a Gaussian coefficient model. `sigma` is already
/// mapped through exp and the [1e-3, 1e3] clamp.
pub struct GaussianParams<R: Real> {
    pub mu: Tensor<R>,
    pub sigma: Tensor<R>,
}

impl<R: Real> GaussianParams<R> {
    pub fn from_raw(mu: Tensor<R>, sigma_raw: Tensor<R>) -> Self {
        GaussianParams { mu, sigma: sigma_from_raw(&sigma_raw) }
    }
}

/// Splits a joint 6-channel net output into `ch` mean channels followed by
/// `ch` raw-scale channels.
fn split_params<R: Real>(out: &Tensor<R>, ch: usize) -> GaussianParams<R> {
    GaussianParams::from_raw(out.narrow_ch(0, ch), out.narrow_ch(ch, ch))
}

/// Parent-only conditioning: the three same-orientation parent subbands are
/// ZOH-upsampled to the child resolution and processed jointly; the output
/// holds mean and scale for the three child orientations.
pub struct InterSubbandNet<R: Real> {
    pub(crate) c1: Conv<R>,
    pub(crate) c2: Conv<R>,
}

impl<R: Real> InterSubbandNet<R> {
    pub fn new(rng: &mut impl Rng) -> Self {
        let c1 = Conv::glorot(3, JOINT_CH, 3, 3, rng);
        let c2 = Conv::glorot(JOINT_CH, 6, 3, 3, rng);
        let s = SIGMA_RAW_INIT;
        c2.bias.set_data(to_r(&[0.0, 0.0, 0.0, s, s, s]));
        InterSubbandNet { c1, c2 }
    }

    /// `parent`: (N,3,hp,wp) quantized parent triple in LH,HL,HH order.
    /// Returns 3-channel maps at the child resolution (2hp, 2wp).
    pub fn forward(&self, parent: &Tensor<R>) -> GaussianParams<R> {
        let h = self.c1.forward(&parent.zoh_upsample2()).tanh();
        split_params(&self.c2.forward(&h), 3)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.c1.params(&format!("{prefix}.c1"), out);
        self.c2.params(&format!("{prefix}.c2"), out);
    }
}

/// Self-conditioning for subbands with no parent: a strict causal masked
/// layer, a center-inclusive masked layer, and a 1x1 head. Initialized as a
/// smooth DPCM: mu approximates the mean of the upper and left neighbors and
/// sigma starts at the escape-free half-range, so an untrained model already
/// codes top-level bands at a sane rate.
pub struct MaskedSelfNet<R: Real> {
    pub(crate) a: Conv<R>,
    pub(crate) b: Conv<R>,
    pub(crate) head: Conv<R>,
}

/// Input gain of the DPCM path; the head undoes it with 1/(2*DPCM_GAIN), so
/// both tanh stages stay near their linear region for 8-bit-scale values.
const DPCM_GAIN: f64 = 1.0 / 1024.0;

impl<R: Real> MaskedSelfNet<R> {
    pub fn new(rng: &mut impl Rng) -> Self {
        let a = Conv::glorot(1, MASKED_CH, 5, 5, rng)
            .with_mask(causal_mask(1, MASKED_CH, 5, false));
        let mut k = a.kernel.copy_data();
        for v in k.iter_mut().take(25) {
            *v = R::ZERO;
        }
        k[1 * 5 + 2] = R::from_f64(DPCM_GAIN); // neighbor above
        k[2 * 5 + 1] = R::from_f64(DPCM_GAIN); // neighbor to the left
        a.kernel.set_data(k);

        let b = Conv::glorot(MASKED_CH, MASKED_CH, 3, 3, rng)
            .with_mask(causal_mask(MASKED_CH, MASKED_CH, 3, true));
        let mut k = b.kernel.copy_data();
        for v in k.iter_mut().take(MASKED_CH * 9) {
            *v = R::ZERO;
        }
        k[4] = R::ONE; // feature 0 passes itself through the center tap
        b.kernel.set_data(k);

        let head = Conv::glorot(MASKED_CH, 2, 1, 1, rng);
        let mut k = vec![R::ZERO; 2 * MASKED_CH];
        k[0] = R::from_f64(0.5 / DPCM_GAIN);
        head.kernel.set_data(k);
        head.bias.set_data(to_r(&[0.0, (crate::constants::ALPHABET_HALF as f64).ln()]));

        MaskedSelfNet { a, b, head }
    }

    /// `x`: (N,1,h,w) quantized subband. Params at (i,j) depend only on
    /// values strictly before (i,j) in raster order.
    pub fn forward(&self, x: &Tensor<R>) -> GaussianParams<R> {
        let t = self.b.forward(&self.a.forward(x).tanh()).tanh();
        split_params(&self.head.forward(&t), 1)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.a.params(&format!("{prefix}.a"), out);
        self.b.params(&format!("{prefix}.b"), out);
        self.head.params(&format!("{prefix}.head"), out);
    }
}

/// Fusion of parent conditioning and in-subband causal conditioning. The
/// right branch processes the upsampled parent triple jointly; the left
/// branch runs a masked stack per orientation; a per-orientation 1x1
/// parameter estimator fuses its 81-channel slice of the right branch with
/// the orientation's own 81 masked features.
pub struct InterIntraNet<R: Real> {
    pub(crate) right1: Conv<R>,
    pub(crate) right2: Conv<R>,
    pub(crate) left: [MaskedPair<R>; 3],
    pub(crate) pen: [ParamEstimator<R>; 3],
}

pub(crate) struct MaskedPair<R: Real> {
    pub(crate) a: Conv<R>,
    pub(crate) b: Conv<R>,
}

impl<R: Real> MaskedPair<R> {
    fn new(rng: &mut impl Rng) -> Self {
        MaskedPair {
            a: Conv::glorot(1, MASKED_CH, 5, 5, rng)
                .with_mask(causal_mask(1, MASKED_CH, 5, false)),
            b: Conv::glorot(MASKED_CH, MASKED_CH, 3, 3, rng)
                .with_mask(causal_mask(MASKED_CH, MASKED_CH, 3, true)),
        }
    }

    fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        self.b.forward(&self.a.forward(x).tanh())
    }

    fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.a.params(&format!("{prefix}.a"), out);
        self.b.params(&format!("{prefix}.b"), out);
    }
}

pub(crate) struct ParamEstimator<R: Real> {
    pub(crate) c1: Conv<R>,
    pub(crate) c2: Conv<R>,
    pub(crate) c3: Conv<R>,
}

impl<R: Real> ParamEstimator<R> {
    fn new(rng: &mut impl Rng) -> Self {
        let c3 = Conv::glorot(FUSED_CH, 2, 1, 1, rng);
        c3.bias.set_data(to_r(&[0.0, SIGMA_RAW_INIT]));
        ParamEstimator {
            c1: Conv::glorot(FUSED_CH, FUSED_CH, 1, 1, rng),
            c2: Conv::glorot(FUSED_CH, FUSED_CH, 1, 1, rng),
            c3,
        }
    }

    fn forward(&self, fused: &Tensor<R>) -> Tensor<R> {
        self.c3.forward(&self.c2.forward(&self.c1.forward(fused).tanh()).tanh())
    }

    fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.c1.params(&format!("{prefix}.c1"), out);
        self.c2.params(&format!("{prefix}.c2"), out);
        self.c3.params(&format!("{prefix}.c3"), out);
    }
}

impl<R: Real> InterIntraNet<R> {
    pub fn new(rng: &mut impl Rng) -> Self {
        InterIntraNet {
            right1: Conv::glorot(3, JOINT_CH, 3, 3, rng),
            right2: Conv::glorot(JOINT_CH, JOINT_CH, 3, 3, rng),
            left: [(); 3].map(|_| MaskedPair::new(rng)),
            pen: [(); 3].map(|_| ParamEstimator::new(rng)),
        }
    }

    /// Parent-branch features shared by all three orientations.
    pub fn right_features(&self, parent: &Tensor<R>) -> Tensor<R> {
        self.right2.forward(&self.right1.forward(&parent.zoh_upsample2()).tanh())
    }

    /// Params for one orientation given precomputed right-branch features.
    pub fn orient_params(
        &self,
        right: &Tensor<R>,
        orient: Orient,
        child: &Tensor<R>,
    ) -> GaussianParams<R> {
        let i = orient.index();
        let l = self.left[i].forward(child);
        let fused = Tensor::concat_ch(&[right.narrow_ch(MASKED_CH * i, MASKED_CH), l]);
        split_params(&self.pen[i].forward(&fused), 1)
    }

    /// `parent`: (N,3,hp,wp); `child`: the three subbands being modeled,
    /// each (N,1,2hp,2wp). Causality: params for orientation o at (i,j)
    /// depend on the parent and on child o strictly before (i,j) only.
    pub fn forward(&self, parent: &Tensor<R>, child: &DetailBands<R>) -> [GaussianParams<R>; 3] {
        let right = self.right_features(parent);
        Orient::ALL.map(|o| self.orient_params(&right, o, child.get(o)))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.right1.params(&format!("{prefix}.right1"), out);
        self.right2.params(&format!("{prefix}.right2"), out);
        for o in Orient::ALL {
            self.left[o.index()].params(&format!("{prefix}.left.{}", o.name()), out);
            self.pen[o.index()].params(&format!("{prefix}.pen.{}", o.name()), out);
        }
    }
}

/// Decode order of the four polyphase subimages: (row parity, col parity).
pub const PHASE_ORDER: [(Parity, Parity); 4] = [
    (Parity::Even, Parity::Even),
    (Parity::Even, Parity::Odd),
    (Parity::Odd, Parity::Even),
    (Parity::Odd, Parity::Odd),
];

/// Splits (N,C,2h,2w) into its four phase subimages in [`PHASE_ORDER`].
pub fn phase_split<R: Real>(x: &Tensor<R>) -> [Tensor<R>; 4] {
    PHASE_ORDER.map(|(pr, pc)| x.take_rows(pr).take_cols(pc))
}

/// Exact inverse of [`phase_split`].
pub fn phase_merge<R: Real>(phases: &[Tensor<R>; 4]) -> Tensor<R> {
    let even_rows = Tensor::interleave_cols(&phases[0], &phases[1]);
    let odd_rows = Tensor::interleave_cols(&phases[2], &phases[3]);
    Tensor::interleave_rows(&even_rows, &odd_rows)
}

/// Four dependency extractors for phase-parallel conditioning. Extractor k
/// consumes the parent triple concatenated with the k already-decoded phase
/// triples; all run at the parent resolution, which equals the phase
/// resolution exactly.
pub struct PhaseCondNets<R: Real> {
    pub(crate) nets: [PhaseNet<R>; 4],
}

pub(crate) struct PhaseNet<R: Real> {
    pub(crate) c1: Conv<R>,
    pub(crate) c2: Conv<R>,
    pub(crate) c3: Conv<R>,
}

impl<R: Real> PhaseNet<R> {
    fn new(in_ch: usize, rng: &mut impl Rng) -> Self {
        let c3 = Conv::glorot(PHASE_CH, 6, 3, 3, rng);
        let s = SIGMA_RAW_INIT;
        c3.bias.set_data(to_r(&[0.0, 0.0, 0.0, s, s, s]));
        PhaseNet {
            c1: Conv::glorot(in_ch, PHASE_CH, 3, 3, rng),
            c2: Conv::glorot(PHASE_CH, PHASE_CH, 3, 3, rng),
            c3,
        }
    }

    fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        self.c3.forward(&self.c2.forward(&self.c1.forward(x).tanh()).tanh())
    }

    fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.c1.params(&format!("{prefix}.c1"), out);
        self.c2.params(&format!("{prefix}.c2"), out);
        self.c3.params(&format!("{prefix}.c3"), out);
    }
}

impl<R: Real> PhaseCondNets<R> {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut k = 0;
        PhaseCondNets {
            nets: [(); 4].map(|_| {
                let net = PhaseNet::new(3 + 3 * k, rng);
                k += 1;
                net
            }),
        }
    }

    /// Params for phase `k` of the child triple. `prior` holds the phase
    /// triples already decoded, in order; exactly `k` of them.
    pub fn phase_params(
        &self,
        k: usize,
        parent: &Tensor<R>,
        prior: &[Tensor<R>],
    ) -> GaussianParams<R> {
        assert_eq!(prior.len(), k, "phase {k} conditions on exactly {k} prior phases");
        let mut inputs = vec![parent.clone()];
        inputs.extend_from_slice(prior);
        split_params(&self.nets[k].forward(&Tensor::concat_ch(&inputs)), 3)
    }

    /// All four phases' params for a fully known child triple (training and
    /// encoding). Phase k's params only see phases before k.
    pub fn forward(
        &self,
        parent: &Tensor<R>,
        child: &DetailBands<R>,
    ) -> [(GaussianParams<R>, Tensor<R>); 4] {
        let joint = Tensor::concat_ch(&[child.lh.clone(), child.hl.clone(), child.hh.clone()]);
        let phases = phase_split(&joint);
        let mut prior: Vec<Tensor<R>> = Vec::new();
        let mut out = Vec::new();
        for k in 0..4 {
            out.push((self.phase_params(k, parent, &prior), phases[k].clone()));
            prior.push(phases[k].clone());
        }
        out.try_into().ok().expect("four phases")
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        for (k, net) in self.nets.iter().enumerate() {
            net.params(&format!("{prefix}.p{}", k + 1), out);
        }
    }
}

fn to_r<R: Real>(v: &[f64]) -> Vec<R> {
    v.iter().map(|&x| R::from_f64(x)).collect()
}
