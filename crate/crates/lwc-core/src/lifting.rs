//! Lifting wavelet transform.
//!
//! One stage, along one axis: split into even/odd polyphase halves, then
//!
//! ```text
//! d1 = odd  - P1(even)    s1 = even + U1(d1)
//! d2 = d1   - P2(s1)      s2 = s1   + U2(d2)
//! low = g_low * s2        high = g_high * d2
//! ```
//!
//! The predict/update operators are either fixed two-tap filters (the
//! classical 9/7 factorization) or small CNNs initialized to those filters.
//! Inversion replays the steps in reverse order with flipped signs and works
//! for any operators, linear or not.
//!
//! Boundary rule everywhere: half-sample symmetric extension of the
//! polyphase half-signals (index -1 maps to 0). This is exactly what
//! whole-sample symmetric extension of the full-resolution signal induces on
//! its polyphase components, so the stage agrees with the convolution filter
//! bank on every sample, boundaries included.

use crate::nn::{Conv, ParamList};
use crate::tensor::{Parity, Real, Shape, Tensor};
use rand::Rng;

/// 9/7 lifting step constants and the low-pass normalization.
pub const ALPHA: f64 = -1.586_134_342_059_924;
pub const BETA: f64 = -0.052_980_118_572_961;
pub const GAMMA: f64 = 0.882_911_075_530_934;
pub const DELTA: f64 = 0.443_506_852_043_971;
pub const KAPPA: f64 = 1.230_174_104_914_001;

/// Detail-band orientation. First letter is the vertical filtering, second
/// the horizontal: `Lh` = vertically low-passed, horizontally high-passed.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Orient {
    Lh,
    Hl,
    Hh,
}

impl Orient {
    pub const ALL: [Orient; 3] = [Orient::Lh, Orient::Hl, Orient::Hh];

    pub fn index(self) -> usize {
        match self {
            Orient::Lh => 0,
            Orient::Hl => 1,
            Orient::Hh => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orient::Lh => "lh",
            Orient::Hl => "hl",
            Orient::Hh => "hh",
        }
    }
}

/// Which transform the codec runs.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FilterKind {
    /// Fixed 9/7 two-tap lifting filters.
    Cdf97,
    /// CNN predict/update operators trained end to end; pairs with the
    /// GDN-based subband scaling stack.
    Llb,
}

impl FilterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::Cdf97 => "cdf97",
            FilterKind::Llb => "llb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cdf97" => Some(FilterKind::Cdf97),
            "llb" => Some(FilterKind::Llb),
            _ => None,
        }
    }
}

/// CNN predict/update operator: a 1x3 linear tap layer along the lifting
/// axis plus a residual branch of 3x3 convolutions with tanh activations.
/// The tap layer is initialized to the 9/7 pair and the branch output layer
/// to zero, so a fresh operator is numerically the classical filter.
pub struct LiftCnn<R: Real> {
    pub taps: Conv<R>,
    pub hidden: Vec<Conv<R>>,
    pub out: Conv<R>,
}

/// Receptive radius along the lifting axis: 1 (taps) + 4 (branch).
const EXT_ALONG: usize = 5;
/// Receptive radius across: branch only.
const EXT_ACROSS: usize = 4;

impl<R: Real> LiftCnn<R> {
    pub fn new(init_taps: [f64; 3], width: usize, rng: &mut impl Rng) -> Self {
        let taps = Conv::from_values(1, 1, 1, 3, init_taps.to_vec(), vec![0.0]);
        let hidden = vec![
            Conv::glorot(1, width, 3, 3, rng),
            Conv::glorot(width, width, 3, 3, rng),
            Conv::glorot(width, width, 3, 3, rng),
        ];
        let out = Conv::glorot(width, 1, 3, 3, rng);
        out.kernel.set_data(vec![R::ZERO; out.kernel.shape().numel()]);
        LiftCnn { taps, hidden, out }
    }

    /// Applies the operator to a half-signal laid out along the width axis.
    /// The input is mirror-extended by the full receptive radius once, every
    /// convolution inside runs with plain zero padding, and the margins are
    /// cropped off afterwards. Within the kept region this reproduces
    /// mirror-extended convolution at every layer.
    pub fn apply(&self, x: &Tensor<R>) -> Tensor<R> {
        let ext = x.pad_mirror(EXT_ACROSS, EXT_ACROSS, EXT_ALONG, EXT_ALONG);
        let lin = self.taps.forward(&ext);
        // The tap layer consumes one ring of the along-axis margin and each
        // branch convolution one more all around; cropping as the valid
        // region shrinks skips dead margin work without touching any value
        // that survives to the output.
        let mut h = lin.crop(0, 0, 1, 1);
        for conv in &self.hidden {
            h = conv.forward(&h).crop(1, 1, 1, 1).tanh();
        }
        let r = self.out.forward(&h).crop(1, 1, 1, 1);
        lin.crop(EXT_ACROSS, EXT_ACROSS, EXT_ALONG, EXT_ALONG).add(&r)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.taps.params(&format!("{prefix}.c1"), out);
        for (i, conv) in self.hidden.iter().enumerate() {
            conv.params(&format!("{prefix}.c{}", i + 2), out);
        }
        self.out.params(&format!("{prefix}.c5"), out);
    }
}

/// A predict or update operator.
pub enum LiftOp<R: Real> {
    /// Fixed 3-tap filter (offsets -1, 0, +1 along the lifting axis),
    /// applied under mirror extension. Not trainable.
    Linear { kernel: Tensor<R> },
    Cnn(LiftCnn<R>),
}

impl<R: Real> LiftOp<R> {
    pub fn linear(taps: [f64; 3]) -> Self {
        LiftOp::Linear {
            kernel: Tensor::constant(
                Shape::new(1, 1, 1, 3),
                taps.iter().map(|&t| R::from_f64(t)).collect(),
            ),
        }
    }

    pub fn apply(&self, x: &Tensor<R>) -> Tensor<R> {
        match self {
            LiftOp::Linear { kernel } => {
                x.pad_mirror(0, 0, 1, 1).conv2d(kernel, None, (1, 1), (0, 0))
            }
            LiftOp::Cnn(net) => net.apply(x),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        if let LiftOp::Cnn(net) = self {
            net.params(prefix, out);
        }
    }
}

/// Predict taps read the current and next even sample; update taps read the
/// previous and current detail. `c` is the shared coefficient.
fn predict_taps(c: f64) -> [f64; 3] {
    [0.0, c, c]
}

fn update_taps(c: f64) -> [f64; 3] {
    [c, c, 0.0]
}

/// One complete lifting stage along the width axis.
pub struct WaveletStage<R: Real> {
    pub p1: LiftOp<R>,
    pub u1: LiftOp<R>,
    pub p2: LiftOp<R>,
    pub u2: LiftOp<R>,
    pub g_low: f64,
    pub g_high: f64,
}

impl<R: Real> WaveletStage<R> {
    /// Classical 9/7 stage. Gains make the low band DC-gain 1 and match the
    /// standard analysis filter bank.
    pub fn cdf97() -> Self {
        WaveletStage {
            p1: LiftOp::linear(predict_taps(-ALPHA)),
            u1: LiftOp::linear(update_taps(BETA)),
            p2: LiftOp::linear(predict_taps(-GAMMA)),
            u2: LiftOp::linear(update_taps(DELTA)),
            g_low: 1.0 / KAPPA,
            g_high: KAPPA,
        }
    }

    /// 9/7 lifting steps with unit gains; scaling is someone else's job.
    /// This is what a freshly initialized learned stage must reproduce.
    pub fn cdf97_unit_gain() -> Self {
        let mut s = Self::cdf97();
        s.g_low = 1.0;
        s.g_high = 1.0;
        s
    }

    /// CNN operators initialized to the 9/7 steps, unit gains.
    pub fn learned(width: usize, rng: &mut impl Rng) -> Self {
        WaveletStage {
            p1: LiftOp::Cnn(LiftCnn::new(predict_taps(-ALPHA), width, rng)),
            u1: LiftOp::Cnn(LiftCnn::new(update_taps(BETA), width, rng)),
            p2: LiftOp::Cnn(LiftCnn::new(predict_taps(-GAMMA), width, rng)),
            u2: LiftOp::Cnn(LiftCnn::new(update_taps(DELTA), width, rng)),
            g_low: 1.0,
            g_high: 1.0,
        }
    }

    /// Forward transform along the width axis. Width must be even.
    pub fn forward_1d(&self, x: &Tensor<R>) -> (Tensor<R>, Tensor<R>) {
        let xe = x.take_cols(Parity::Even);
        let xo = x.take_cols(Parity::Odd);
        let d1 = xo.sub(&self.p1.apply(&xe));
        let s1 = xe.add(&self.u1.apply(&d1));
        let d2 = d1.sub(&self.p2.apply(&s1));
        let s2 = s1.add(&self.u2.apply(&d2));
        (scale(&s2, self.g_low), scale(&d2, self.g_high))
    }

    /// Exact step-by-step inverse of [`WaveletStage::forward_1d`].
    pub fn inverse_1d(&self, low: &Tensor<R>, high: &Tensor<R>) -> Tensor<R> {
        let s2 = scale(low, 1.0 / self.g_low);
        let d2 = scale(high, 1.0 / self.g_high);
        let s1 = s2.sub(&self.u2.apply(&d2));
        let d1 = d2.add(&self.p2.apply(&s1));
        let xe = s1.sub(&self.u1.apply(&d1));
        let xo = d1.add(&self.p1.apply(&xe));
        Tensor::interleave_cols(&xe, &xo)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.p1.params(&format!("{prefix}.p1"), out);
        self.u1.params(&format!("{prefix}.u1"), out);
        self.p2.params(&format!("{prefix}.p2"), out);
        self.u2.params(&format!("{prefix}.u2"), out);
    }
}

fn scale<R: Real>(x: &Tensor<R>, g: f64) -> Tensor<R> {
    if g == 1.0 {
        x.clone()
    } else {
        x.mul_scalar(R::from_f64(g))
    }
}

/// The four subbands produced by one 2-d stage.
pub struct StageBands<R: Real> {
    pub ll: Tensor<R>,
    pub lh: Tensor<R>,
    pub hl: Tensor<R>,
    pub hh: Tensor<R>,
}

/// One 2-d transform level: the vertical stage runs first (via transposes),
/// then the horizontal stage splits each result.
pub struct Wt2d<R: Real> {
    pub vertical: WaveletStage<R>,
    pub horizontal: WaveletStage<R>,
}

impl<R: Real> Wt2d<R> {
    pub fn cdf97() -> Self {
        Wt2d {
            vertical: WaveletStage::cdf97(),
            horizontal: WaveletStage::cdf97(),
        }
    }

    pub fn learned(width: usize, rng: &mut impl Rng) -> Self {
        Wt2d {
            vertical: WaveletStage::learned(width, rng),
            horizontal: WaveletStage::learned(width, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> StageBands<R> {
        let xt = x.transpose_hw();
        let (lt, ht) = self.vertical.forward_1d(&xt);
        let l = lt.transpose_hw();
        let h = ht.transpose_hw();
        let (ll, lh) = self.horizontal.forward_1d(&l);
        let (hl, hh) = self.horizontal.forward_1d(&h);
        StageBands { ll, lh, hl, hh }
    }

    pub fn inverse(&self, bands: &StageBands<R>) -> Tensor<R> {
        let l = self.horizontal.inverse_1d(&bands.ll, &bands.lh);
        let h = self.horizontal.inverse_1d(&bands.hl, &bands.hh);
        let xt = self
            .vertical
            .inverse_1d(&l.transpose_hw(), &h.transpose_hw());
        xt.transpose_hw()
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.vertical.params(&format!("{prefix}.v"), out);
        self.horizontal.params(&format!("{prefix}.h"), out);
    }
}

/// Detail bands of one pyramid level.
pub struct DetailBands<R: Real> {
    pub lh: Tensor<R>,
    pub hl: Tensor<R>,
    pub hh: Tensor<R>,
}

impl<R: Real> DetailBands<R> {
    pub fn get(&self, o: Orient) -> &Tensor<R> {
        match o {
            Orient::Lh => &self.lh,
            Orient::Hl => &self.hl,
            Orient::Hh => &self.hh,
        }
    }

    pub fn map(&self, mut f: impl FnMut(Orient, &Tensor<R>) -> Tensor<R>) -> DetailBands<R> {
        DetailBands {
            lh: f(Orient::Lh, &self.lh),
            hl: f(Orient::Hl, &self.hl),
            hh: f(Orient::Hh, &self.hh),
        }
    }
}

/// Multi-level subband decomposition of one image plane.
/// `details[0]` is the finest level; `details.last()` sits next to `ll`.
pub struct Pyramid<R: Real> {
    pub ll: Tensor<R>,
    pub details: Vec<DetailBands<R>>,
}

impl<R: Real> Pyramid<R> {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Applies `f` to every subband, preserving structure.
    pub fn map(&self, mut f: impl FnMut(SubbandRef, &Tensor<R>) -> Tensor<R>) -> Pyramid<R> {
        Pyramid {
            ll: f(SubbandRef::Ll, &self.ll),
            details: self
                .details
                .iter()
                .enumerate()
                .map(|(lv, d)| d.map(|o, t| f(SubbandRef::Detail { level: lv, orient: o }, t)))
                .collect(),
        }
    }

    pub fn get(&self, r: SubbandRef) -> &Tensor<R> {
        match r {
            SubbandRef::Ll => &self.ll,
            SubbandRef::Detail { level, orient } => self.details[level].get(orient),
        }
    }
}

/// Names one subband of a pyramid. `level` indexes `details` (0 = finest).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SubbandRef {
    Ll,
    Detail { level: usize, orient: Orient },
}

impl SubbandRef {
    /// Coding order: low-pass first, then detail levels coarse to fine.
    pub fn coding_order(levels: usize) -> Vec<SubbandRef> {
        let mut out = vec![SubbandRef::Ll];
        for level in (0..levels).rev() {
            for orient in Orient::ALL {
                out.push(SubbandRef::Detail { level, orient });
            }
        }
        out
    }

    /// Stable lowercase label, e.g. `ll`, `lh3` (level is 1-based, 1 = finest).
    pub fn label(self) -> String {
        match self {
            SubbandRef::Ll => "ll".to_string(),
            SubbandRef::Detail { level, orient } => format!("{}{}", orient.name(), level + 1),
        }
    }
}

/// The full transform for one color plane: one trainable 2-d stage applied
/// recursively to the low-pass band.
pub struct ChannelDwt<R: Real> {
    pub stage: Wt2d<R>,
    pub levels: usize,
}

impl<R: Real> ChannelDwt<R> {
    pub fn new(kind: FilterKind, levels: usize, width: usize, rng: &mut impl Rng) -> Self {
        let stage = match kind {
            FilterKind::Cdf97 => Wt2d::cdf97(),
            FilterKind::Llb => Wt2d::learned(width, rng),
        };
        ChannelDwt { stage, levels }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Pyramid<R> {
        let mut cur = x.clone();
        let mut details = Vec::with_capacity(self.levels);
        for _ in 0..self.levels {
            let bands = self.stage.forward(&cur);
            details.push(DetailBands {
                lh: bands.lh,
                hl: bands.hl,
                hh: bands.hh,
            });
            cur = bands.ll;
        }
        Pyramid { ll: cur, details }
    }

    pub fn inverse(&self, pyr: &Pyramid<R>) -> Tensor<R> {
        let mut cur = pyr.ll.clone();
        for d in pyr.details.iter().rev() {
            cur = self.stage.inverse(&StageBands {
                ll: cur,
                lh: d.lh.clone(),
                hl: d.hl.clone(),
                hh: d.hh.clone(),
            });
        }
        cur
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.stage.params(prefix, out);
    }
}

/// Default hidden width of the learned operators' residual branch.
pub const LIFT_CNN_WIDTH: usize = 16;
