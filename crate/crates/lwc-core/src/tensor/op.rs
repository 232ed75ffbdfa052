//! Forward operations and their reverse-mode rules.
//!
//! One invariant matters beyond correctness of the math: `conv2d` adds the
//! taps of every output position in a fixed (channel, row, column) order, and
//! skipped taps (zero padding) contribute nothing. The sequential decoder in
//! the codec recomputes single positions with [`conv::conv_point`] and relies
//! on bitwise agreement with the full-tensor forward here.

use super::conv;
use super::{Real, Shape, Tensor};
use std::collections::HashMap;

/// Row/column parity selector for polyphase splits.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    #[inline]
    pub fn offset(self) -> usize {
        match self {
            Parity::Even => 0,
            Parity::Odd => 1,
        }
    }
}

pub(crate) enum OpKind<R: Real> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(R),
    MulScalar(R),
    /// inputs: [x, s] where s is a one-element tensor.
    ScaleBy,
    Tanh,
    Relu,
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Softplus,
    NormalCdf,
    ClampMin(R),
    Clamp(R, R),
    /// inputs: [x (N,C,H,W), s (1,C,1,1)].
    MulChannels,
    SumAll,
    MeanAll,
    /// inputs: [x, kernel, bias?].
    Conv2d {
        stride: (usize, usize),
        pad: (usize, usize),
        has_bias: bool,
    },
    ZohUp2,
    AvgPool2,
    TakeRows(Parity),
    TakeCols(Parity),
    /// inputs: [even, odd].
    InterleaveRows,
    InterleaveCols,
    /// Half-sample symmetric extension. Bottom/right amounts are implied by
    /// the output shape.
    PadMirror {
        t: usize,
        l: usize,
    },
    Crop {
        t: usize,
        l: usize,
    },
    TransposeHw,
    ConcatCh,
    NarrowCh {
        start: usize,
    },
}

/// Index into a mirrored (half-sample symmetric) extension of `0..len`.
/// Reflects repeatedly, so pads wider than the signal still resolve.
#[inline]
pub(crate) fn mirror(mut i: isize, len: usize) -> usize {
    debug_assert!(len > 0);
    let l = len as isize;
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= l {
            i = 2 * l - 1 - i;
        } else {
            return i as usize;
        }
    }
}

impl<R: Real> Tensor<R> {
    fn unary(&self, op: OpKind<R>, f: impl Fn(R) -> R) -> Tensor<R> {
        let data: Vec<R> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.shape(), data, vec![self.clone()], op)
    }

    fn binary(&self, other: &Tensor<R>, op: OpKind<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "elementwise op on mismatched shapes {} vs {}",
            self.shape(),
            other.shape()
        );
        let a = self.data();
        let b = other.data();
        let data: Vec<R> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        drop((a, b));
        Tensor::from_op(self.shape(), data, vec![self.clone(), other.clone()], op)
    }

    pub fn add(&self, o: &Tensor<R>) -> Tensor<R> {
        self.binary(o, OpKind::Add, |a, b| a + b)
    }

    pub fn sub(&self, o: &Tensor<R>) -> Tensor<R> {
        self.binary(o, OpKind::Sub, |a, b| a - b)
    }

    pub fn mul(&self, o: &Tensor<R>) -> Tensor<R> {
        self.binary(o, OpKind::Mul, |a, b| a * b)
    }

    pub fn div(&self, o: &Tensor<R>) -> Tensor<R> {
        self.binary(o, OpKind::Div, |a, b| a / b)
    }

    pub fn add_scalar(&self, s: R) -> Tensor<R> {
        self.unary(OpKind::AddScalar(s), |v| v + s)
    }

    pub fn mul_scalar(&self, s: R) -> Tensor<R> {
        self.unary(OpKind::MulScalar(s), |v| v * s)
    }

    /// Multiply by a one-element tensor (a trainable global gain).
    pub fn scale_by(&self, s: &Tensor<R>) -> Tensor<R> {
        assert_eq!(s.shape().numel(), 1, "scale_by expects a one-element tensor");
        let sv = s.item();
        let data: Vec<R> = self.data().iter().map(|&v| v * sv).collect();
        Tensor::from_op(self.shape(), data, vec![self.clone(), s.clone()], OpKind::ScaleBy)
    }

    pub fn tanh(&self) -> Tensor<R> {
        self.unary(OpKind::Tanh, |v| v.tanh())
    }

    pub fn relu(&self) -> Tensor<R> {
        self.unary(OpKind::Relu, |v| v.maxv(R::ZERO))
    }

    pub fn exp(&self) -> Tensor<R> {
        self.unary(OpKind::Exp, |v| v.exp())
    }

    pub fn ln(&self) -> Tensor<R> {
        self.unary(OpKind::Ln, |v| v.ln())
    }

    pub fn sqrt(&self) -> Tensor<R> {
        self.unary(OpKind::Sqrt, |v| v.sqrt())
    }

    pub fn sigmoid(&self) -> Tensor<R> {
        self.unary(OpKind::Sigmoid, |v| R::ONE / (R::ONE + (-v).exp()))
    }

    /// `ln(1 + e^x)`, computed stably for large |x|.
    pub fn softplus(&self) -> Tensor<R> {
        self.unary(OpKind::Softplus, softplus_val)
    }

    pub fn normal_cdf(&self) -> Tensor<R> {
        self.unary(OpKind::NormalCdf, |v| v.normal_cdf())
    }

    pub fn clamp_min(&self, lo: R) -> Tensor<R> {
        self.unary(OpKind::ClampMin(lo), |v| v.maxv(lo))
    }

    pub fn clamp(&self, lo: R, hi: R) -> Tensor<R> {
        self.unary(OpKind::Clamp(lo, hi), |v| v.maxv(lo).minv(hi))
    }

    /// Per-channel scale: `out[n,c,h,w] = x[n,c,h,w] * s[0,c,0,0]`.
    pub fn mul_channels(&self, s: &Tensor<R>) -> Tensor<R> {
        let xs = self.shape();
        assert_eq!(s.shape(), Shape::new(1, xs.c, 1, 1), "mul_channels scale shape");
        let xd = self.data();
        let sd = s.data();
        let plane = xs.plane();
        let mut out = Vec::with_capacity(xs.numel());
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = (n * xs.c + c) * plane;
                let sv = sd[c];
                out.extend(xd[base..base + plane].iter().map(|&v| v * sv));
            }
        }
        drop((xd, sd));
        Tensor::from_op(xs, out, vec![self.clone(), s.clone()], OpKind::MulChannels)
    }

    pub fn sum_all(&self) -> Tensor<R> {
        let mut acc = R::ZERO;
        for &v in self.data().iter() {
            acc += v;
        }
        Tensor::from_op(Shape::scalar(), vec![acc], vec![self.clone()], OpKind::SumAll)
    }

    pub fn mean_all(&self) -> Tensor<R> {
        let n = self.shape().numel();
        let mut acc = R::ZERO;
        for &v in self.data().iter() {
            acc += v;
        }
        let m = acc * (R::ONE / R::from_f64(n as f64));
        Tensor::from_op(Shape::scalar(), vec![m], vec![self.clone()], OpKind::MeanAll)
    }

    /// 2-d cross-correlation with zero padding. Kernel shape is
    /// (out_ch, in_ch, kh, kw); bias, when present, is (1, out_ch, 1, 1).
    pub fn conv2d(
        &self,
        kernel: &Tensor<R>,
        bias: Option<&Tensor<R>>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<R> {
        let xs = self.shape();
        let ks = kernel.shape();
        assert_eq!(xs.c, ks.c, "conv2d: {} input channels vs kernel expecting {}", xs.c, ks.c);
        if let Some(b) = bias {
            assert_eq!(b.shape(), Shape::new(1, ks.n, 1, 1), "conv2d bias shape");
        }
        let os = conv::out_shape(xs, ks, stride, pad);
        let mut out = vec![R::ZERO; os.numel()];
        {
            let xd = self.data();
            let kd = kernel.data();
            let bd = bias.map(|b| b.data());
            conv::forward(
                &xd,
                xs,
                &kd,
                ks,
                bd.as_deref().map(|v| v.as_slice()),
                stride,
                pad,
                &mut out,
                os,
            );
        }
        let mut inputs = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Tensor::from_op(
            os,
            out,
            inputs,
            OpKind::Conv2d {
                stride,
                pad,
                has_bias: bias.is_some(),
            },
        )
    }

    /// Zero-order-hold 2x upsampling: each value becomes a 2x2 block.
    pub fn zoh_upsample2(&self) -> Tensor<R> {
        let xs = self.shape();
        let os = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
        let xd = self.data();
        let mut out = vec![R::ZERO; os.numel()];
        for nc in 0..xs.n * xs.c {
            let src = &xd[nc * xs.plane()..(nc + 1) * xs.plane()];
            let dst = &mut out[nc * os.plane()..(nc + 1) * os.plane()];
            for i in 0..xs.h {
                for j in 0..xs.w {
                    let v = src[i * xs.w + j];
                    dst[(2 * i) * os.w + 2 * j] = v;
                    dst[(2 * i) * os.w + 2 * j + 1] = v;
                    dst[(2 * i + 1) * os.w + 2 * j] = v;
                    dst[(2 * i + 1) * os.w + 2 * j + 1] = v;
                }
            }
        }
        drop(xd);
        Tensor::from_op(os, out, vec![self.clone()], OpKind::ZohUp2)
    }

    /// 2x2 mean pooling with stride 2; both spatial dims must be even.
    pub fn avg_pool2(&self) -> Tensor<R> {
        let xs = self.shape();
        assert!(xs.h % 2 == 0 && xs.w % 2 == 0, "avg_pool2 needs even dims, got {}", xs);
        let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        let xd = self.data();
        let quarter = R::from_f64(0.25);
        let mut out = vec![R::ZERO; os.numel()];
        for nc in 0..xs.n * xs.c {
            let src = &xd[nc * xs.plane()..(nc + 1) * xs.plane()];
            let dst = &mut out[nc * os.plane()..(nc + 1) * os.plane()];
            for i in 0..os.h {
                for j in 0..os.w {
                    let s = src[(2 * i) * xs.w + 2 * j]
                        + src[(2 * i) * xs.w + 2 * j + 1]
                        + src[(2 * i + 1) * xs.w + 2 * j]
                        + src[(2 * i + 1) * xs.w + 2 * j + 1];
                    dst[i * os.w + j] = s * quarter;
                }
            }
        }
        drop(xd);
        Tensor::from_op(os, out, vec![self.clone()], OpKind::AvgPool2)
    }

    /// Keeps rows of one parity; height must be even.
    pub fn take_rows(&self, p: Parity) -> Tensor<R> {
        let xs = self.shape();
        assert!(xs.h % 2 == 0, "take_rows needs even height, got {}", xs);
        let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w);
        let xd = self.data();
        let off = p.offset();
        let mut out = Vec::with_capacity(os.numel());
        for nc in 0..xs.n * xs.c {
            let src = &xd[nc * xs.plane()..(nc + 1) * xs.plane()];
            for i in 0..os.h {
                let row = (2 * i + off) * xs.w;
                out.extend_from_slice(&src[row..row + xs.w]);
            }
        }
        drop(xd);
        Tensor::from_op(os, out, vec![self.clone()], OpKind::TakeRows(p))
    }

    /// Keeps columns of one parity; width must be even.
    pub fn take_cols(&self, p: Parity) -> Tensor<R> {
        let xs = self.shape();
        assert!(xs.w % 2 == 0, "take_cols needs even width, got {}", xs);
        let os = Shape::new(xs.n, xs.c, xs.h, xs.w / 2);
        let xd = self.data();
        let off = p.offset();
        let mut out = Vec::with_capacity(os.numel());
        for nc in 0..xs.n * xs.c {
            let src = &xd[nc * xs.plane()..(nc + 1) * xs.plane()];
            for i in 0..xs.h {
                let row = &src[i * xs.w..(i + 1) * xs.w];
                for j in 0..os.w {
                    out.push(row[2 * j + off]);
                }
            }
        }
        drop(xd);
        Tensor::from_op(os, out, vec![self.clone()], OpKind::TakeCols(p))
    }

    /// Inverse of the row polyphase split.
    pub fn interleave_rows(even: &Tensor<R>, odd: &Tensor<R>) -> Tensor<R> {
        let es = even.shape();
        assert_eq!(es, odd.shape(), "interleave_rows shape mismatch");
        let os = Shape::new(es.n, es.c, es.h * 2, es.w);
        let ed = even.data();
        let od = odd.data();
        let mut out = vec![R::ZERO; os.numel()];
        for nc in 0..es.n * es.c {
            let e = &ed[nc * es.plane()..(nc + 1) * es.plane()];
            let o = &od[nc * es.plane()..(nc + 1) * es.plane()];
            let dst = &mut out[nc * os.plane()..(nc + 1) * os.plane()];
            for i in 0..es.h {
                dst[(2 * i) * os.w..(2 * i) * os.w + os.w].copy_from_slice(&e[i * es.w..(i + 1) * es.w]);
                dst[(2 * i + 1) * os.w..(2 * i + 1) * os.w + os.w]
                    .copy_from_slice(&o[i * es.w..(i + 1) * es.w]);
            }
        }
        drop((ed, od));
        Tensor::from_op(os, out, vec![even.clone(), odd.clone()], OpKind::InterleaveRows)
    }

    /// Inverse of the column polyphase split.
    pub fn interleave_cols(even: &Tensor<R>, odd: &Tensor<R>) -> Tensor<R> {
        let es = even.shape();
        assert_eq!(es, odd.shape(), "interleave_cols shape mismatch");
        let os = Shape::new(es.n, es.c, es.h, es.w * 2);
        let ed = even.data();
        let od = odd.data();
        let mut out = vec![R::ZERO; os.numel()];
        for nc in 0..es.n * es.c {
            let e = &ed[nc * es.plane()..(nc + 1) * es.plane()];
            let o = &od[nc * es.plane()..(nc + 1) * es.plane()];
            let dst = &mut out[nc * os.plane()..(nc + 1) * os.plane()];
            for i in 0..es.h {
                for j in 0..es.w {
                    dst[i * os.w + 2 * j] = e[i * es.w + j];
                    dst[i * os.w + 2 * j + 1] = o[i * es.w + j];
                }
            }
        }
        drop((ed, od));
        Tensor::from_op(os, out, vec![even.clone(), odd.clone()], OpKind::InterleaveCols)
    }

    /// Half-sample symmetric padding: index -1 maps to 0, index H to H-1.
    pub fn pad_mirror(&self, t: usize, b: usize, l: usize, r: usize) -> Tensor<R> {
        let xs = self.shape();
        let os = Shape::new(xs.n, xs.c, xs.h + t + b, xs.w + l + r);
        let xd = self.data();
        let mut out = vec![R::ZERO; os.numel()];
        // Column mapping is shared by every row; precompute it.
        let col_map: Vec<usize> = (0..os.w).map(|ow| mirror(ow as isize - l as isize, xs.w)).collect();
        for nc in 0..xs.n * xs.c {
            let src = &xd[nc * xs.plane()..(nc + 1) * xs.plane()];
            let dst = &mut out[nc * os.plane()..(nc + 1) * os.plane()];
            for oh in 0..os.h {
                let ih = mirror(oh as isize - t as isize, xs.h);
                let srow = &src[ih * xs.w..(ih + 1) * xs.w];
                let drow = &mut dst[oh * os.w..(oh + 1) * os.w];
                for (ow, &iw) in col_map.iter().enumerate() {
                    drow[ow] = srow[iw];
                }
            }
        }
        drop(xd);
        Tensor::from_op(os, out, vec![self.clone()], OpKind::PadMirror { t, l })
    }

    /// Removes `t`/`b` rows and `l`/`r` columns from the borders.
    pub fn crop(&self, t: usize, b: usize, l: usize, r: usize) -> Tensor<R> {
        let xs = self.shape();
        assert!(xs.h > t + b && xs.w > l + r, "crop larger than tensor {}", xs);
        let os = Shape::new(xs.n, xs.c, xs.h - t - b, xs.w - l - r);
        let xd = self.data();
        let mut out = Vec::with_capacity(os.numel());
        for nc in 0..xs.n * xs.c {
            let src = &xd[nc * xs.plane()..(nc + 1) * xs.plane()];
            for i in 0..os.h {
                let row = (i + t) * xs.w + l;
                out.extend_from_slice(&src[row..row + os.w]);
            }
        }
        drop(xd);
        Tensor::from_op(os, out, vec![self.clone()], OpKind::Crop { t, l })
    }

    /// Swaps the two spatial axes.
    pub fn transpose_hw(&self) -> Tensor<R> {
        let xs = self.shape();
        let os = Shape::new(xs.n, xs.c, xs.w, xs.h);
        let xd = self.data();
        let mut out = vec![R::ZERO; os.numel()];
        for nc in 0..xs.n * xs.c {
            let src = &xd[nc * xs.plane()..(nc + 1) * xs.plane()];
            let dst = &mut out[nc * os.plane()..(nc + 1) * os.plane()];
            for i in 0..xs.h {
                for j in 0..xs.w {
                    dst[j * os.w + i] = src[i * xs.w + j];
                }
            }
        }
        drop(xd);
        Tensor::from_op(os, out, vec![self.clone()], OpKind::TransposeHw)
    }

    /// Concatenates along the channel axis.
    pub fn concat_ch(parts: &[Tensor<R>]) -> Tensor<R> {
        assert!(!parts.is_empty(), "concat_ch of nothing");
        let first = parts[0].shape();
        let mut c_total = 0;
        for p in parts {
            let s = p.shape();
            assert!(
                s.n == first.n && s.h == first.h && s.w == first.w,
                "concat_ch mismatched spatial dims {} vs {}",
                s,
                first
            );
            c_total += s.c;
        }
        let os = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..first.n {
            for p in parts {
                let s = p.shape();
                let d = p.data();
                let base = n * s.c * s.plane();
                out.extend_from_slice(&d[base..base + s.c * s.plane()]);
            }
        }
        Tensor::from_op(os, out, parts.to_vec(), OpKind::ConcatCh)
    }

    /// Keeps channels `start..start+len`.
    pub fn narrow_ch(&self, start: usize, len: usize) -> Tensor<R> {
        let xs = self.shape();
        assert!(start + len <= xs.c, "narrow_ch {}..{} out of {} channels", start, start + len, xs.c);
        let os = Shape::new(xs.n, len, xs.h, xs.w);
        let xd = self.data();
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..xs.n {
            let base = (n * xs.c + start) * xs.plane();
            out.extend_from_slice(&xd[base..base + len * xs.plane()]);
        }
        drop(xd);
        Tensor::from_op(os, out, vec![self.clone()], OpKind::NarrowCh { start })
    }
}

#[inline]
fn softplus_val<R: Real>(v: R) -> R {
    // ln(1+e^x) = max(x,0) + ln(1+e^-|x|)
    let ax = -v.abs();
    v.maxv(R::ZERO) + (R::ONE + ax.exp()).ln()
}

#[inline]
fn sigmoid_val<R: Real>(v: R) -> R {
    R::ONE / (R::ONE + (-v).exp())
}

/// Gradient slot for `t`, created zero-filled on first touch. `None` when the
/// input does not participate in differentiation.
fn slot<'a, R: Real>(grads: &'a mut HashMap<u64, Vec<R>>, t: &Tensor<R>) -> Option<&'a mut Vec<R>> {
    if !t.requires_grad() {
        return None;
    }
    Some(grads.entry(t.id()).or_insert_with(|| vec![R::ZERO; t.shape().numel()]))
}

/// Routes `g` (gradient at `node`'s output) backwards into `node`'s inputs.
pub(crate) fn backward<R: Real>(node: &Tensor<R>, g: &[R], grads: &mut HashMap<u64, Vec<R>>) {
    let inputs = node.inputs();
    match node.op() {
        OpKind::Leaf => {}
        OpKind::Add => {
            if let Some(ga) = slot(grads, &inputs[0]) {
                for (a, &gv) in ga.iter_mut().zip(g) {
                    *a += gv;
                }
            }
            if let Some(gb) = slot(grads, &inputs[1]) {
                for (b, &gv) in gb.iter_mut().zip(g) {
                    *b += gv;
                }
            }
        }
        OpKind::Sub => {
            if let Some(ga) = slot(grads, &inputs[0]) {
                for (a, &gv) in ga.iter_mut().zip(g) {
                    *a += gv;
                }
            }
            if let Some(gb) = slot(grads, &inputs[1]) {
                for (b, &gv) in gb.iter_mut().zip(g) {
                    *b -= gv;
                }
            }
        }
        OpKind::Mul => {
            if inputs[0].requires_grad() {
                let bd = inputs[1].data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * bd[i];
                }
            }
            if inputs[1].requires_grad() {
                let ad = inputs[0].data();
                let gb = slot(grads, &inputs[1]).unwrap();
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
        }
        OpKind::Div => {
            if inputs[0].requires_grad() {
                let bd = inputs[1].data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] / bd[i];
                }
            }
            if inputs[1].requires_grad() {
                let yd = node.data();
                let bd = inputs[1].data();
                let gb = slot(grads, &inputs[1]).unwrap();
                for i in 0..g.len() {
                    gb[i] -= g[i] * yd[i] / bd[i];
                }
            }
        }
        OpKind::AddScalar(_) => {
            if let Some(ga) = slot(grads, &inputs[0]) {
                for (a, &gv) in ga.iter_mut().zip(g) {
                    *a += gv;
                }
            }
        }
        OpKind::MulScalar(s) => {
            let s = *s;
            if let Some(ga) = slot(grads, &inputs[0]) {
                for (a, &gv) in ga.iter_mut().zip(g) {
                    *a += gv * s;
                }
            }
        }
        OpKind::ScaleBy => {
            let sv = inputs[1].item();
            if inputs[0].requires_grad() {
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * sv;
                }
            }
            if inputs[1].requires_grad() {
                let ad = inputs[0].data();
                let mut acc = R::ZERO;
                for i in 0..g.len() {
                    acc += g[i] * ad[i];
                }
                drop(ad);
                slot(grads, &inputs[1]).unwrap()[0] += acc;
            }
        }
        OpKind::Tanh => {
            if inputs[0].requires_grad() {
                let yd = node.data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * (R::ONE - yd[i] * yd[i]);
                }
            }
        }
        OpKind::Relu => {
            if inputs[0].requires_grad() {
                let xd = inputs[0].data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    if xd[i] > R::ZERO {
                        ga[i] += g[i];
                    }
                }
            }
        }
        OpKind::Exp => {
            if inputs[0].requires_grad() {
                let yd = node.data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * yd[i];
                }
            }
        }
        OpKind::Ln => {
            if inputs[0].requires_grad() {
                let xd = inputs[0].data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] / xd[i];
                }
            }
        }
        OpKind::Sqrt => {
            if inputs[0].requires_grad() {
                let yd = node.data();
                let half = R::from_f64(0.5);
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * half / yd[i];
                }
            }
        }
        OpKind::Sigmoid => {
            if inputs[0].requires_grad() {
                let yd = node.data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * yd[i] * (R::ONE - yd[i]);
                }
            }
        }
        OpKind::Softplus => {
            if inputs[0].requires_grad() {
                let xd = inputs[0].data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid_val(xd[i]);
                }
            }
        }
        OpKind::NormalCdf => {
            if inputs[0].requires_grad() {
                let xd = inputs[0].data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * xd[i].normal_pdf();
                }
            }
        }
        OpKind::ClampMin(lo) => {
            let lo = *lo;
            if inputs[0].requires_grad() {
                let xd = inputs[0].data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    if xd[i] > lo {
                        ga[i] += g[i];
                    }
                }
            }
        }
        OpKind::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            if inputs[0].requires_grad() {
                let xd = inputs[0].data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for i in 0..g.len() {
                    if xd[i] > lo && xd[i] < hi {
                        ga[i] += g[i];
                    }
                }
            }
        }
        OpKind::MulChannels => {
            let xs = inputs[0].shape();
            let plane = xs.plane();
            if inputs[0].requires_grad() {
                let sd = inputs[1].data();
                let ga = slot(grads, &inputs[0]).unwrap();
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let base = (n * xs.c + c) * plane;
                        let sv = sd[c];
                        for i in 0..plane {
                            ga[base + i] += g[base + i] * sv;
                        }
                    }
                }
            }
            if inputs[1].requires_grad() {
                let xd = inputs[0].data();
                let mut acc = vec![R::ZERO; xs.c];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let base = (n * xs.c + c) * plane;
                        let mut s = R::ZERO;
                        for i in 0..plane {
                            s += g[base + i] * xd[base + i];
                        }
                        acc[c] += s;
                    }
                }
                drop(xd);
                let gs = slot(grads, &inputs[1]).unwrap();
                for c in 0..xs.c {
                    gs[c] += acc[c];
                }
            }
        }
        OpKind::SumAll => {
            if let Some(ga) = slot(grads, &inputs[0]) {
                let gv = g[0];
                for a in ga.iter_mut() {
                    *a += gv;
                }
            }
        }
        OpKind::MeanAll => {
            if let Some(ga) = slot(grads, &inputs[0]) {
                let gv = g[0] * (R::ONE / R::from_f64(inputs[0].shape().numel() as f64));
                for a in ga.iter_mut() {
                    *a += gv;
                }
            }
        }
        OpKind::Conv2d { stride, pad, has_bias } => {
            let (stride, pad) = (*stride, *pad);
            let x = &inputs[0];
            let k = &inputs[1];
            let (xs, ks, os) = (x.shape(), k.shape(), node.shape());
            if x.requires_grad() {
                let kd = k.data();
                let gx = slot(grads, x).unwrap();
                conv::backward_x(g, os, &kd, ks, stride, pad, gx, xs);
            }
            if k.requires_grad() {
                let xd = x.data();
                let gk = slot(grads, k).unwrap();
                conv::backward_k(g, os, &xd, xs, stride, pad, gk, ks);
            }
            if *has_bias {
                if let Some(gb) = slot(grads, &inputs[2]) {
                    conv::backward_b(g, os, gb);
                }
            }
        }
        OpKind::ZohUp2 => {
            if let Some(gx) = slot(grads, &inputs[0]) {
                let xs = inputs[0].shape();
                let ow = xs.w * 2;
                for nc in 0..xs.n * xs.c {
                    let gsrc = &g[nc * xs.plane() * 4..(nc + 1) * xs.plane() * 4];
                    let dst = &mut gx[nc * xs.plane()..(nc + 1) * xs.plane()];
                    for i in 0..xs.h {
                        for j in 0..xs.w {
                            dst[i * xs.w + j] += gsrc[(2 * i) * ow + 2 * j]
                                + gsrc[(2 * i) * ow + 2 * j + 1]
                                + gsrc[(2 * i + 1) * ow + 2 * j]
                                + gsrc[(2 * i + 1) * ow + 2 * j + 1];
                        }
                    }
                }
            }
        }
        OpKind::AvgPool2 => {
            if let Some(gx) = slot(grads, &inputs[0]) {
                let xs = inputs[0].shape();
                let os = node.shape();
                let quarter = R::from_f64(0.25);
                for nc in 0..xs.n * xs.c {
                    let gsrc = &g[nc * os.plane()..(nc + 1) * os.plane()];
                    let dst = &mut gx[nc * xs.plane()..(nc + 1) * xs.plane()];
                    for i in 0..os.h {
                        for j in 0..os.w {
                            let gv = gsrc[i * os.w + j] * quarter;
                            dst[(2 * i) * xs.w + 2 * j] += gv;
                            dst[(2 * i) * xs.w + 2 * j + 1] += gv;
                            dst[(2 * i + 1) * xs.w + 2 * j] += gv;
                            dst[(2 * i + 1) * xs.w + 2 * j + 1] += gv;
                        }
                    }
                }
            }
        }
        OpKind::TakeRows(p) => {
            let off = p.offset();
            if let Some(gx) = slot(grads, &inputs[0]) {
                let xs = inputs[0].shape();
                let os = node.shape();
                for nc in 0..xs.n * xs.c {
                    let gsrc = &g[nc * os.plane()..(nc + 1) * os.plane()];
                    let dst = &mut gx[nc * xs.plane()..(nc + 1) * xs.plane()];
                    for i in 0..os.h {
                        let drow = (2 * i + off) * xs.w;
                        for j in 0..xs.w {
                            dst[drow + j] += gsrc[i * os.w + j];
                        }
                    }
                }
            }
        }
        OpKind::TakeCols(p) => {
            let off = p.offset();
            if let Some(gx) = slot(grads, &inputs[0]) {
                let xs = inputs[0].shape();
                let os = node.shape();
                for nc in 0..xs.n * xs.c {
                    let gsrc = &g[nc * os.plane()..(nc + 1) * os.plane()];
                    let dst = &mut gx[nc * xs.plane()..(nc + 1) * xs.plane()];
                    for i in 0..xs.h {
                        for j in 0..os.w {
                            dst[i * xs.w + 2 * j + off] += gsrc[i * os.w + j];
                        }
                    }
                }
            }
        }
        OpKind::InterleaveRows => {
            let es = inputs[0].shape();
            let ow = es.w;
            for (idx, inp) in inputs.iter().enumerate() {
                if let Some(gi) = slot(grads, inp) {
                    for nc in 0..es.n * es.c {
                        let gsrc = &g[nc * es.plane() * 2..(nc + 1) * es.plane() * 2];
                        let dst = &mut gi[nc * es.plane()..(nc + 1) * es.plane()];
                        for i in 0..es.h {
                            let srow = (2 * i + idx) * ow;
                            for j in 0..ow {
                                dst[i * es.w + j] += gsrc[srow + j];
                            }
                        }
                    }
                }
            }
        }
        OpKind::InterleaveCols => {
            let es = inputs[0].shape();
            let ow = es.w * 2;
            for (idx, inp) in inputs.iter().enumerate() {
                if let Some(gi) = slot(grads, inp) {
                    for nc in 0..es.n * es.c {
                        let gsrc = &g[nc * es.plane() * 2..(nc + 1) * es.plane() * 2];
                        let dst = &mut gi[nc * es.plane()..(nc + 1) * es.plane()];
                        for i in 0..es.h {
                            for j in 0..es.w {
                                dst[i * es.w + j] += gsrc[i * ow + 2 * j + idx];
                            }
                        }
                    }
                }
            }
        }
        OpKind::PadMirror { t, l } => {
            let (t, l) = (*t, *l);
            if let Some(gx) = slot(grads, &inputs[0]) {
                let xs = inputs[0].shape();
                let os = node.shape();
                let col_map: Vec<usize> =
                    (0..os.w).map(|ow| mirror(ow as isize - l as isize, xs.w)).collect();
                for nc in 0..xs.n * xs.c {
                    let gsrc = &g[nc * os.plane()..(nc + 1) * os.plane()];
                    let dst = &mut gx[nc * xs.plane()..(nc + 1) * xs.plane()];
                    for oh in 0..os.h {
                        let ih = mirror(oh as isize - t as isize, xs.h);
                        let drow = ih * xs.w;
                        let srow = oh * os.w;
                        for (ow, &iw) in col_map.iter().enumerate() {
                            dst[drow + iw] += gsrc[srow + ow];
                        }
                    }
                }
            }
        }
        OpKind::Crop { t, l } => {
            let (t, l) = (*t, *l);
            if let Some(gx) = slot(grads, &inputs[0]) {
                let xs = inputs[0].shape();
                let os = node.shape();
                for nc in 0..xs.n * xs.c {
                    let gsrc = &g[nc * os.plane()..(nc + 1) * os.plane()];
                    let dst = &mut gx[nc * xs.plane()..(nc + 1) * xs.plane()];
                    for i in 0..os.h {
                        let drow = (i + t) * xs.w + l;
                        for j in 0..os.w {
                            dst[drow + j] += gsrc[i * os.w + j];
                        }
                    }
                }
            }
        }
        OpKind::TransposeHw => {
            if let Some(gx) = slot(grads, &inputs[0]) {
                let xs = inputs[0].shape();
                let os = node.shape();
                for nc in 0..xs.n * xs.c {
                    let gsrc = &g[nc * os.plane()..(nc + 1) * os.plane()];
                    let dst = &mut gx[nc * xs.plane()..(nc + 1) * xs.plane()];
                    for i in 0..os.h {
                        for j in 0..os.w {
                            dst[j * xs.w + i] += gsrc[i * os.w + j];
                        }
                    }
                }
            }
        }
        OpKind::ConcatCh => {
            let os = node.shape();
            let mut c_off = 0;
            for inp in &inputs {
                let s = inp.shape();
                if let Some(gi) = slot(grads, inp) {
                    for n in 0..s.n {
                        let src = (n * os.c + c_off) * os.plane();
                        let dst = n * s.c * s.plane();
                        for i in 0..s.c * s.plane() {
                            gi[dst + i] += g[src + i];
                        }
                    }
                }
                c_off += s.c;
            }
        }
        OpKind::NarrowCh { start } => {
            let start = *start;
            if let Some(gx) = slot(grads, &inputs[0]) {
                let xs = inputs[0].shape();
                let os = node.shape();
                for n in 0..os.n {
                    let dst = (n * xs.c + start) * xs.plane();
                    let src = n * os.c * os.plane();
                    for i in 0..os.c * os.plane() {
                        gx[dst + i] += g[src + i];
                    }
                }
            }
        }
    }
}

impl<R: Real> Tensor<R> {
    pub(crate) fn op(&self) -> &OpKind<R> {
        &self.inner.op
    }

    pub(crate) fn inputs(&self) -> Vec<Tensor<R>> {
        self.inner.inputs.clone()
    }
}
