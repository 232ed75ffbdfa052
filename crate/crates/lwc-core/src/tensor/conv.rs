//! Convolution kernels.
//!
//! Accumulation order contract: for any single output position, taps are
//! added in ascending (in_channel, kernel_row, kernel_col) order, starting
//! from the bias, and out-of-bounds taps are skipped. [`forward`] sweeps rows
//! for speed but performs exactly that per-position sequence, and
//! [`conv_point`] reproduces it one position at a time. The sequential
//! decoder depends on the two producing bitwise-equal results.

use super::{Real, Shape};

pub fn out_shape(xs: Shape, ks: Shape, stride: (usize, usize), pad: (usize, usize)) -> Shape {
    assert!(
        xs.h + 2 * pad.0 >= ks.h && xs.w + 2 * pad.1 >= ks.w,
        "conv2d kernel {}x{} larger than padded input {}x{}",
        ks.h,
        ks.w,
        xs.h + 2 * pad.0,
        xs.w + 2 * pad.1
    );
    Shape::new(
        xs.n,
        ks.n,
        (xs.h + 2 * pad.0 - ks.h) / stride.0 + 1,
        (xs.w + 2 * pad.1 - ks.w) / stride.1 + 1,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn forward<R: Real>(
    x: &[R],
    xs: Shape,
    k: &[R],
    ks: Shape,
    bias: Option<&[R]>,
    stride: (usize, usize),
    pad: (usize, usize),
    out: &mut [R],
    os: Shape,
) {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    for n in 0..os.n {
        for co in 0..os.c {
            let b = bias.map_or(R::ZERO, |bv| bv[co]);
            let obase = (n * os.c + co) * os.plane();
            // The caller hands in fresh zeros; only a nonzero bias pattern
            // (including -0.0) needs the extra pass.
            if b.to_f64().to_bits() != 0 {
                out[obase..obase + os.plane()].fill(b);
            }
            for ci in 0..ks.c {
                let xbase = (n * xs.c + ci) * xs.plane();
                if sh == 1 && sw == 1 {
                    let kbase = (co * ks.c + ci) * ks.h * ks.w;
                    let taps = &k[kbase..kbase + ks.h * ks.w];
                    // Rows where the whole kernel column fits vertically.
                    let oy_lo = ph.min(os.h);
                    let oy_hi = (xs.h + ph + 1).saturating_sub(ks.h).min(os.h).max(oy_lo);
                    for oy in 0..os.h {
                        let orow = obase + oy * os.w;
                        if ks.h == 3 && (oy_lo..oy_hi).contains(&oy) {
                            let r = xbase + (oy - ph) * xs.w;
                            row_taps3x3(
                                &mut out[orow..orow + os.w],
                                &x[r..r + xs.w],
                                &x[r + xs.w..r + 2 * xs.w],
                                &x[r + 2 * xs.w..r + 3 * xs.w],
                                taps,
                                pw,
                            );
                            continue;
                        }
                        for kh in 0..ks.h {
                            let iy = (oy + kh) as isize - ph as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            row_taps(
                                &mut out[orow..orow + os.w],
                                &x[xrow..xrow + xs.w],
                                &taps[kh * ks.w..(kh + 1) * ks.w],
                                pw,
                            );
                        }
                    }
                    continue;
                }
                for kh in 0..ks.h {
                    for kw in 0..ks.w {
                        let kv = k[((co * ks.c + ci) * ks.h + kh) * ks.w + kw];
                        for oy in 0..os.h {
                            let iy = (oy * sh + kh) as isize - ph as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            let orow = obase + oy * os.w;
                            let dx = kw as isize - pw as isize;
                            for ox in 0..os.w {
                                let ix = (ox * sw) as isize + dx;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                out[orow + ox] += kv * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds a full 3x3 kernel's contribution to one output row from three
/// consecutive input rows (stride 1), additions in ascending `(kh, kw)`
/// order at every position, out-of-bounds columns skipped.
fn row_taps3x3<R: Real>(dst: &mut [R], r0: &[R], r1: &[R], r2: &[R], t: &[R], pw: usize) {
    let ow = dst.len();
    let xw = r0.len();
    let lo = pw.min(ow);
    let hi = (xw + pw + 1).saturating_sub(3).min(ow).max(lo);
    let edge = |dst: &mut [R], range: core::ops::Range<usize>| {
        for ox in range {
            let mut a = dst[ox];
            for (kh, row) in [r0, r1, r2].into_iter().enumerate() {
                for kw in 0..3 {
                    let ix = (ox + kw) as isize - pw as isize;
                    if ix >= 0 && ix < xw as isize {
                        a = a + t[kh * 3 + kw] * row[ix as usize];
                    }
                }
            }
            dst[ox] = a;
        }
    };
    edge(dst, 0..lo);
    if hi > lo {
        let s0 = &r0[lo - pw..hi + 2 - pw];
        let s1 = &r1[lo - pw..hi + 2 - pw];
        let s2 = &r2[lo - pw..hi + 2 - pw];
        let d = &mut dst[lo..hi];
        for i in 0..d.len() {
            let a = ((d[i] + t[0] * s0[i]) + t[1] * s0[i + 1]) + t[2] * s0[i + 2];
            let a = ((a + t[3] * s1[i]) + t[4] * s1[i + 1]) + t[5] * s1[i + 2];
            d[i] = ((a + t[6] * s2[i]) + t[7] * s2[i + 1]) + t[8] * s2[i + 2];
        }
    }
    edge(dst, hi..ow);
}

/// Adds one kernel row's contribution to one output row (stride 1):
/// `dst[ox] += sum_kw taps[kw] * src[ox + kw - pw]`, out-of-bounds taps
/// skipped, additions in ascending `kw` order at every position.
fn row_taps<R: Real>(dst: &mut [R], src: &[R], taps: &[R], pw: usize) {
    let ow = dst.len();
    let xw = src.len();
    let kn = taps.len();
    // Positions where every tap lands in bounds.
    let lo = pw.min(ow);
    let hi = (xw + pw + 1).saturating_sub(kn).min(ow).max(lo);
    let edge = |dst: &mut [R], range: core::ops::Range<usize>| {
        for ox in range {
            let mut a = dst[ox];
            for (t, &kv) in taps.iter().enumerate() {
                let ix = (ox + t) as isize - pw as isize;
                if ix >= 0 && ix < xw as isize {
                    a = a + kv * src[ix as usize];
                }
            }
            dst[ox] = a;
        }
    };
    edge(dst, 0..lo);
    if hi > lo && kn == 3 {
        let (k0, k1, k2) = (taps[0], taps[1], taps[2]);
        let s = &src[lo - pw..hi + 2 - pw];
        let d = &mut dst[lo..hi];
        for i in 0..d.len() {
            d[i] = ((d[i] + k0 * s[i]) + k1 * s[i + 1]) + k2 * s[i + 2];
        }
    } else {
        for ox in lo..hi {
            let base = ox - pw;
            let mut a = dst[ox];
            for (t, &kv) in taps.iter().enumerate() {
                a = a + kv * src[base + t];
            }
            dst[ox] = a;
        }
    }
    edge(dst, hi..ow);
}

/// One output value of [`forward`], with the identical floating-point
/// accumulation sequence.
#[allow(clippy::too_many_arguments)]
pub fn conv_point<R: Real>(
    x: &[R],
    xs: Shape,
    n: usize,
    k: &[R],
    ks: Shape,
    bias_co: R,
    co: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oy: usize,
    ox: usize,
) -> R {
    let mut acc = bias_co;
    for ci in 0..ks.c {
        let xbase = (n * xs.c + ci) * xs.plane();
        for kh in 0..ks.h {
            let iy = (oy * stride.0 + kh) as isize - pad.0 as isize;
            if iy < 0 || iy >= xs.h as isize {
                continue;
            }
            let xrow = xbase + iy as usize * xs.w;
            for kw in 0..ks.w {
                let ix = (ox * stride.1 + kw) as isize - pad.1 as isize;
                if ix < 0 || ix >= xs.w as isize {
                    continue;
                }
                acc += k[((co * ks.c + ci) * ks.h + kh) * ks.w + kw] * x[xrow + ix as usize];
            }
        }
    }
    acc
}

/// Gradient with respect to the input (transposed convolution of `gout`).
pub fn backward_x<R: Real>(
    gout: &[R],
    os: Shape,
    k: &[R],
    ks: Shape,
    stride: (usize, usize),
    pad: (usize, usize),
    gx: &mut [R],
    xs: Shape,
) {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    for n in 0..os.n {
        for co in 0..os.c {
            let obase = (n * os.c + co) * os.plane();
            for ci in 0..ks.c {
                let xbase = (n * xs.c + ci) * xs.plane();
                for kh in 0..ks.h {
                    for kw in 0..ks.w {
                        let kv = k[((co * ks.c + ci) * ks.h + kh) * ks.w + kw];
                        for oy in 0..os.h {
                            let iy = (oy * sh + kh) as isize - ph as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            let orow = obase + oy * os.w;
                            let dx = kw as isize - pw as isize;
                            if sw == 1 {
                                let lo = (-dx).max(0) as usize;
                                let hi = ((xs.w as isize - dx).min(os.w as isize)).max(0) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let src = &gout[orow + lo..orow + hi];
                                let dst = &mut gx[(xrow as isize + lo as isize + dx) as usize
                                    ..(xrow as isize + hi as isize + dx) as usize];
                                for i in 0..src.len() {
                                    dst[i] += kv * src[i];
                                }
                            } else {
                                for ox in 0..os.w {
                                    let ix = (ox * sw) as isize + dx;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    gx[xrow + ix as usize] += kv * gout[orow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the kernel.
pub fn backward_k<R: Real>(
    gout: &[R],
    os: Shape,
    x: &[R],
    xs: Shape,
    stride: (usize, usize),
    pad: (usize, usize),
    gk: &mut [R],
    ks: Shape,
) {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    for co in 0..ks.n {
        for ci in 0..ks.c {
            for kh in 0..ks.h {
                for kw in 0..ks.w {
                    let mut acc = R::ZERO;
                    for n in 0..os.n {
                        let obase = (n * os.c + co) * os.plane();
                        let xbase = (n * xs.c + ci) * xs.plane();
                        for oy in 0..os.h {
                            let iy = (oy * sh + kh) as isize - ph as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            let orow = obase + oy * os.w;
                            let dx = kw as isize - pw as isize;
                            if sw == 1 {
                                let lo = (-dx).max(0) as usize;
                                let hi = ((xs.w as isize - dx).min(os.w as isize)).max(0) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let go = &gout[orow + lo..orow + hi];
                                let xr = &x[(xrow as isize + lo as isize + dx) as usize
                                    ..(xrow as isize + hi as isize + dx) as usize];
                                for i in 0..go.len() {
                                    acc += go[i] * xr[i];
                                }
                            } else {
                                for ox in 0..os.w {
                                    let ix = (ox * sw) as isize + dx;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += gout[orow + ox] * x[xrow + ix as usize];
                                }
                            }
                        }
                    }
                    gk[((co * ks.c + ci) * ks.h + kh) * ks.w + kw] += acc;
                }
            }
        }
    }
}

/// Gradient with respect to the bias: sum of `gout` over batch and space.
pub fn backward_b<R: Real>(gout: &[R], os: Shape, gb: &mut [R]) {
    for n in 0..os.n {
        for co in 0..os.c {
            let obase = (n * os.c + co) * os.plane();
            let mut acc = R::ZERO;
            for &v in &gout[obase..obase + os.plane()] {
                acc += v;
            }
            gb[co] += acc;
        }
    }
}
