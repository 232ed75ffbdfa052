//! Acceptance suite: one test per numbered criterion, each printing a single
//! PASS line with its measured numbers. Run it with
//!
//! ```text
//! cargo test -p lwc-core --test acceptance -- --nocapture --test-threads=1
//! ```
//!
//! Tolerances are pinned in the assertions; a failure panics with the same
//! `criterion NN:` prefix so the checklist stays readable either way.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use lwc_core::codec::{
    decode_image, decode_pyramids, encode_image, image_to_padded_rgb, reconstruct, CodecConfig,
    CodecSystem, ColorPlane,
};
use lwc_core::constants::LEVELS;
use lwc_core::entropy::conditional::{InterIntraNet, MaskedSelfNet, PhaseCondNets, PHASE_ORDER};
use lwc_core::entropy::GaussianParams;
use lwc_core::gradcheck::GradCheck;
use lwc_core::lifting::{
    ChannelDwt, DetailBands, FilterKind, Pyramid, WaveletStage, Wt2d, LIFT_CNN_WIDTH,
};
use lwc_core::nn::{causal_mask, ParamList};
use lwc_core::ppm::Image;
use lwc_core::rans::{
    decode_gaussian, encode_gaussian, round_mu, CdfTable, EscapeTable, RansDecoder, RansEncoder,
    SigmaTableCache, TOTAL_FREQ,
};
use lwc_core::synth::synth_image;
use lwc_core::tensor::{no_grad, Adam, Parity, Shape, Tensor};
use lwc_core::train::{
    evaluate, forward_loss, run_training, Corpus, PatchSampler, QuantMode, TrainConfig,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pass(n: usize, msg: &str) {
    println!("criterion {n:2}: PASS  {msg}");
}

fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::constant(shape, data)
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let (av, bv) = (a.copy_data(), b.copy_data());
    av.iter().zip(&bv).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn jitter_params(params: &ParamList<f64>, rng: &mut ChaCha8Rng, amp: f64) {
    for (_, p) in params {
        let v = p.copy_data().into_iter().map(|x| x + rng.gen_range(-amp..amp)).collect();
        p.set_data(v);
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: learned lifting stages invert

#[test]
fn criterion_01_learned_lifting_inverts_within_tolerance() {
    let _g = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0101);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dwt = ChannelDwt::<f64>::new(FilterKind::Llb, LEVELS, LIFT_CNN_WIDTH, &mut rng);
        let mut params = Vec::new();
        dwt.params("s", &mut params);
        jitter_params(&params, &mut rng, 0.1);
        let x = rand_tensor(Shape::new(3, 1, 64, 64), &mut rng, 0.0, 255.0);
        let err = max_abs_diff(&x, &dwt.inverse(&dwt.forward(&x)));
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    assert!(
        worst < 1e-3,
        "criterion  1: FAIL  max reconstruction error {worst:.3e} is not below 1e-3"
    );
    assert!(
        elapsed < Duration::from_secs(30),
        "criterion  1: FAIL  {:.1} s exceeds the 30 s budget",
        elapsed.as_secs_f64()
    );
    pass(
        1,
        &format!(
            "100 random learned transforms invert, max error {worst:.2e}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: the fixed 9/7 lifting path matches a direct filter-bank oracle

/// Standard unit-DC 9/7 analysis taps (symmetric halves, center first).
const ORACLE_LO: [f64; 5] = [
    0.602949018236360,
    0.266864118442875,
    -0.078223266528990,
    -0.016864118442875,
    0.026748757410810,
];
const ORACLE_HI: [f64; 4] = [
    1.115087052457000,
    -0.591271763114250,
    -0.057543526228500,
    0.091271763114250,
];

/// Whole-sample symmetric extension index.
fn wss(mut i: isize, len: usize) -> usize {
    let l = len as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= l {
            i = 2 * (l - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// One-dimensional analysis by direct convolution: low channel centered on
/// even samples, high channel on odd samples.
fn oracle_split_1d(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let mut low = Vec::with_capacity(half);
    let mut high = Vec::with_capacity(half);
    for m in 0..half {
        let c = 2 * m as isize;
        let mut l = ORACLE_LO[0] * x[wss(c, n)];
        for (k, &t) in ORACLE_LO.iter().enumerate().skip(1) {
            l += t * (x[wss(c - k as isize, n)] + x[wss(c + k as isize, n)]);
        }
        low.push(l);
        let c = c + 1;
        let mut h = ORACLE_HI[0] * x[wss(c, n)];
        for (k, &t) in ORACLE_HI.iter().enumerate().skip(1) {
            h += t * (x[wss(c - k as isize, n)] + x[wss(c + k as isize, n)]);
        }
        high.push(h);
    }
    (low, high)
}

/// Column-wise analysis of a row-major h x w grid.
fn oracle_split_cols(v: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let hh = h / 2;
    let mut low = vec![0.0; hh * w];
    let mut high = vec![0.0; hh * w];
    for c in 0..w {
        let col: Vec<f64> = (0..h).map(|r| v[r * w + c]).collect();
        let (l, hi) = oracle_split_1d(&col);
        for m in 0..hh {
            low[m * w + c] = l[m];
            high[m * w + c] = hi[m];
        }
    }
    (low, high)
}

/// Row-wise analysis of a row-major h x w grid.
fn oracle_split_rows(v: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let hw = w / 2;
    let mut low = vec![0.0; h * hw];
    let mut high = vec![0.0; h * hw];
    for r in 0..h {
        let (l, hi) = oracle_split_1d(&v[r * w..(r + 1) * w]);
        low[r * hw..(r + 1) * hw].copy_from_slice(&l);
        high[r * hw..(r + 1) * hw].copy_from_slice(&hi);
    }
    (low, high)
}

/// One 2-d stage, vertical analysis first: returns (ll, lh, hl, hh), each
/// h/2 x w/2. `lh` is vertically low-passed, horizontally high-passed.
fn oracle_stage(v: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let (vl, vh) = oracle_split_cols(v, h, w);
    let (ll, lh) = oracle_split_rows(&vl, h / 2, w);
    let (hl, hh) = oracle_split_rows(&vh, h / 2, w);
    [ll, lh, hl, hh]
}

fn band_diff(t: &Tensor<f64>, want: &[f64]) -> f64 {
    let got = t.copy_data();
    assert_eq!(got.len(), want.len(), "oracle band size mismatch");
    got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_02_cdf97_matches_filter_bank_oracle() {
    let _g = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0202);
    let levels = 3;
    let dwt = ChannelDwt::<f64>::new(FilterKind::Cdf97, levels, LIFT_CNN_WIDTH, &mut rng);

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = rand_tensor(Shape::new(1, 1, 64, 64), &mut rng, -100.0, 100.0);
        let pyr = dwt.forward(&x);
        let mut cur = x.copy_data();
        let (mut h, mut w) = (64usize, 64usize);
        for lv in 0..levels {
            let [ll, lh, hl, hh] = oracle_stage(&cur, h, w);
            worst = worst.max(band_diff(&pyr.details[lv].lh, &lh));
            worst = worst.max(band_diff(&pyr.details[lv].hl, &hl));
            worst = worst.max(band_diff(&pyr.details[lv].hh, &hh));
            cur = ll;
            h /= 2;
            w /= 2;
        }
        worst = worst.max(band_diff(&pyr.ll, &cur));
    }
    assert!(
        worst < 1e-5,
        "criterion  2: FAIL  lifting vs filter-bank oracle differs by {worst:.3e}"
    );

    let flat = Tensor::full(Shape::new(1, 1, 64, 64), 77.0f64);
    let pyr = dwt.forward(&flat);
    let mut detail_peak = 0.0f64;
    for d in &pyr.details {
        for t in [&d.lh, &d.hl, &d.hh] {
            detail_peak = t.copy_data().iter().map(|v| v.abs()).fold(detail_peak, f64::max);
        }
    }
    assert!(
        detail_peak < 1e-3,
        "criterion  2: FAIL  constant image leaves detail energy {detail_peak:.3e}"
    );
    pass(
        2,
        &format!(
            "20 images match the convolution oracle to {worst:.2e}; constant-image detail peak {detail_peak:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: a freshly built learned stage reproduces the 9/7 stage

#[test]
fn criterion_03_fresh_learned_stage_reproduces_cdf97() {
    let _g = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0303);
    let mut worst = 0.0f64;

    for &(n, h, w) in &[(1usize, 3usize, 40usize), (2, 4, 8), (1, 2, 6)] {
        let learned = WaveletStage::<f64>::learned(LIFT_CNN_WIDTH, &mut rng);
        let fixed = WaveletStage::<f64>::cdf97_unit_gain();
        let x = rand_tensor(Shape::new(n, 1, h, w), &mut rng, -200.0, 200.0);
        let (ll, lh) = learned.forward_1d(&x);
        let (fl, fh) = fixed.forward_1d(&x);
        worst = worst.max(max_abs_diff(&ll, &fl));
        worst = worst.max(max_abs_diff(&lh, &fh));
    }

    let learned = ChannelDwt::<f64>::new(FilterKind::Llb, 3, LIFT_CNN_WIDTH, &mut rng);
    let fixed = ChannelDwt::<f64> {
        stage: Wt2d {
            vertical: WaveletStage::cdf97_unit_gain(),
            horizontal: WaveletStage::cdf97_unit_gain(),
        },
        levels: 3,
    };
    for &(h, w) in &[(64usize, 64usize), (32, 48)] {
        let x = rand_tensor(Shape::new(1, 1, h, w), &mut rng, -200.0, 200.0);
        let lp = learned.forward(&x);
        let fp = fixed.forward(&x);
        worst = worst.max(max_abs_diff(&lp.ll, &fp.ll));
        for lv in 0..3 {
            worst = worst.max(max_abs_diff(&lp.details[lv].lh, &fp.details[lv].lh));
            worst = worst.max(max_abs_diff(&lp.details[lv].hl, &fp.details[lv].hl));
            worst = worst.max(max_abs_diff(&lp.details[lv].hh, &fp.details[lv].hh));
        }
        worst = worst.max(max_abs_diff(&learned.inverse(&fp), &fixed.inverse(&fp)));
    }
    assert!(
        worst < 1e-5,
        "criterion  3: FAIL  fresh learned stage deviates from unit-gain 9/7 by {worst:.3e}"
    );
    pass(3, &format!("fresh learned stages match unit-gain 9/7 within {worst:.2e}"));
}

// ---------------------------------------------------------------------------
// Criterion 4: autodiff vs central finite differences

fn fd_case(
    name: &str,
    params: ParamList<f64>,
    checked: &mut usize,
    f: impl Fn() -> Tensor<f64>,
) {
    let gc = GradCheck::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0404);
    match gc.run(&params, &mut rng, f) {
        Ok(n) => *checked += n,
        Err(m) => panic!(
            "criterion  4: FAIL  {name}: d/d {}[{}] analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            m.param, m.index, m.analytic, m.numeric, m.rel_err
        ),
    }
}

/// Parameter tensor with entries kept `margin` away from every kink.
fn safe_param(
    shape: Shape,
    rng: &mut ChaCha8Rng,
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                return v;
            }
        })
        .collect();
    Tensor::param(shape, data)
}

#[test]
fn criterion_04_autodiff_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0440);
    let s = Shape::new(1, 2, 4, 5);
    let mut checked = 0usize;

    let probe_for = |t: &Tensor<f64>, rng: &mut ChaCha8Rng| {
        let sh = t.shape();
        let data = (0..sh.numel())
            .map(|_| {
                let v: f64 = rng.gen_range(0.25..1.25);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::<f64>::constant(sh, data)
    };
    // Weighted sum turns any output into a scalar with nontrivial cotangents.
    macro_rules! reduce {
        ($rng:expr, $e:expr) => {{
            let out = $e;
            let probe = probe_for(&out, $rng);
            move || ($e).mul(&probe).sum_all()
        }};
    }

    let a = safe_param(s, &mut rng, -2.0, 2.0, &[], 0.0);
    let b = safe_param(s, &mut rng, -2.0, 2.0, &[], 0.0);
    let pair = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
    {
        let (a, b) = (a.clone(), b.clone());
        fd_case("add", pair.clone(), &mut checked, reduce!(&mut rng, a.add(&b)));
    }
    {
        let (a, b) = (a.clone(), b.clone());
        fd_case("sub", pair.clone(), &mut checked, reduce!(&mut rng, a.sub(&b)));
    }
    {
        let (a, b) = (a.clone(), b.clone());
        fd_case("mul", pair.clone(), &mut checked, reduce!(&mut rng, a.mul(&b)));
    }
    {
        let denom = safe_param(s, &mut rng, -2.0, 2.0, &[0.0], 0.5);
        let params = vec![("a".to_string(), a.clone()), ("d".to_string(), denom.clone())];
        let a = a.clone();
        fd_case("div", params, &mut checked, reduce!(&mut rng, a.div(&denom)));
    }
    {
        let a = a.clone();
        let params = vec![("a".to_string(), a.clone())];
        fd_case("add_scalar", params, &mut checked, reduce!(&mut rng, a.add_scalar(0.37)));
    }
    {
        let a = a.clone();
        let params = vec![("a".to_string(), a.clone())];
        fd_case("mul_scalar", params, &mut checked, reduce!(&mut rng, a.mul_scalar(-1.3)));
    }
    {
        let g = Tensor::<f64>::param(Shape::new(1, 1, 1, 1), vec![1.3]);
        let params = vec![("a".to_string(), a.clone()), ("g".to_string(), g.clone())];
        let a = a.clone();
        fd_case("scale_by", params, &mut checked, reduce!(&mut rng, a.scale_by(&g)));
    }
    {
        let g = safe_param(Shape::new(1, 2, 1, 1), &mut rng, 0.5, 1.5, &[], 0.0);
        let params = vec![("a".to_string(), a.clone()), ("g".to_string(), g.clone())];
        let a = a.clone();
        fd_case("mul_channels", params, &mut checked, reduce!(&mut rng, a.mul_channels(&g)));
    }
    for (name, f) in [
        ("tanh", (|x: &Tensor<f64>| x.tanh()) as fn(&Tensor<f64>) -> Tensor<f64>),
        ("exp", |x| x.exp()),
        ("sigmoid", |x| x.sigmoid()),
        ("softplus", |x| x.softplus()),
        ("normal_cdf", |x| x.normal_cdf()),
    ] {
        let x = safe_param(s, &mut rng, -2.0, 2.0, &[], 0.0);
        let params = vec![("x".to_string(), x.clone())];
        fd_case(name, params, &mut checked, reduce!(&mut rng, f(&x)));
    }
    {
        let x = safe_param(s, &mut rng, 0.4, 3.0, &[], 0.0);
        let params = vec![("x".to_string(), x.clone())];
        let x2 = x.clone();
        fd_case("ln", params.clone(), &mut checked, reduce!(&mut rng, x2.ln()));
        fd_case("sqrt", params, &mut checked, reduce!(&mut rng, x.sqrt()));
    }
    {
        let x = safe_param(s, &mut rng, -2.0, 2.0, &[0.0], 0.05);
        let params = vec![("x".to_string(), x.clone())];
        fd_case("relu", params, &mut checked, reduce!(&mut rng, x.relu()));
    }
    {
        let x = safe_param(s, &mut rng, -2.0, 2.0, &[-0.3], 0.05);
        let params = vec![("x".to_string(), x.clone())];
        fd_case("clamp_min", params, &mut checked, reduce!(&mut rng, x.clamp_min(-0.3)));
    }
    {
        let x = safe_param(s, &mut rng, -2.0, 2.0, &[-0.8, 0.9], 0.05);
        let params = vec![("x".to_string(), x.clone())];
        fd_case("clamp", params, &mut checked, reduce!(&mut rng, x.clamp(-0.8, 0.9)));
    }
    {
        let x = safe_param(s, &mut rng, -2.0, 2.0, &[], 0.0);
        let params = vec![("x".to_string(), x.clone())];
        let x2 = x.clone();
        fd_case("sum_all", params.clone(), &mut checked, move || x2.sum_all().tanh());
        fd_case("mean_all", params, &mut checked, move || x.mean_all().exp());
    }
    {
        let x = safe_param(Shape::new(1, 2, 6, 7), &mut rng, -1.0, 1.0, &[], 0.0);
        let k = safe_param(Shape::new(3, 2, 3, 3), &mut rng, -0.6, 0.6, &[], 0.0);
        let bias = safe_param(Shape::new(1, 3, 1, 1), &mut rng, -0.5, 0.5, &[], 0.0);
        let params = vec![
            ("x".to_string(), x.clone()),
            ("k".to_string(), k.clone()),
            ("b".to_string(), bias.clone()),
        ];
        let (x2, k2, b2) = (x.clone(), k.clone(), bias.clone());
        fd_case(
            "conv2d stride 1",
            params.clone(),
            &mut checked,
            reduce!(&mut rng, x2.conv2d(&k2, Some(&b2), (1, 1), (1, 1))),
        );
        fd_case(
            "conv2d stride 2",
            params,
            &mut checked,
            reduce!(&mut rng, x.conv2d(&k, None, (2, 2), (0, 1))),
        );
    }
    for (name, f) in [
        ("zoh_upsample2", (|x: &Tensor<f64>| x.zoh_upsample2()) as fn(&Tensor<f64>) -> Tensor<f64>),
        ("avg_pool2", |x| x.avg_pool2()),
        ("take_rows even", |x| x.take_rows(Parity::Even)),
        ("take_rows odd", |x| x.take_rows(Parity::Odd)),
        ("take_cols even", |x| x.take_cols(Parity::Even)),
        ("take_cols odd", |x| x.take_cols(Parity::Odd)),
        ("pad_mirror", |x| x.pad_mirror(2, 1, 3, 2)),
        ("crop", |x| x.crop(1, 0, 2, 1)),
        ("transpose_hw", |x| x.transpose_hw()),
        ("narrow_ch", |x| x.narrow_ch(1, 2)),
    ] {
        let x = safe_param(Shape::new(1, 4, 4, 6), &mut rng, -2.0, 2.0, &[], 0.0);
        let params = vec![("x".to_string(), x.clone())];
        fd_case(name, params, &mut checked, reduce!(&mut rng, f(&x)));
    }
    {
        let a = safe_param(Shape::new(1, 2, 3, 5), &mut rng, -2.0, 2.0, &[], 0.0);
        let b = safe_param(Shape::new(1, 2, 3, 5), &mut rng, -2.0, 2.0, &[], 0.0);
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let (a2, b2) = (a.clone(), b.clone());
        fd_case(
            "interleave_rows",
            params.clone(),
            &mut checked,
            reduce!(&mut rng, Tensor::interleave_rows(&a2, &b2)),
        );
        let (a2, b2) = (a.clone(), b.clone());
        fd_case(
            "interleave_cols",
            params.clone(),
            &mut checked,
            reduce!(&mut rng, Tensor::interleave_cols(&a2, &b2)),
        );
        fd_case(
            "concat_ch",
            params,
            &mut checked,
            reduce!(&mut rng, Tensor::concat_ch(&[a.clone(), b.clone()])),
        );
    }
    let op_checked = checked;

    // End-to-end spot check: the full rate-distortion objective of a small
    // learned-filter codec, with the quantizer noise held fixed across calls.
    let mut cfg = CodecConfig::parse("llb+iscem").unwrap();
    cfg.levels = 2;
    let sys = CodecSystem::<f64>::new(cfg, 0x0411);
    let rgb = image_to_padded_rgb::<f64>(&synth_image(32, 32, 0x0412), 4);
    let all = sys.params();
    let mut picked: ParamList<f64> = Vec::new();
    for prefix in ["y.dwt.", "y.ana.", "y.syn.", "y.em.", "cb.em."] {
        let group: Vec<_> = all.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        assert!(!group.is_empty(), "no parameters under {prefix}");
        for idx in [0, group.len() / 2, group.len() - 1] {
            let (n, t) = group[idx];
            if !picked.iter().any(|(pn, _)| pn == n) {
                picked.push((n.clone(), t.clone()));
            }
        }
    }
    let gc = GradCheck { eps: 1e-4, rel_tol: 1e-2, abs_floor: 1e-7, samples_per_param: 2 };
    let mut gc_rng = ChaCha8Rng::seed_from_u64(0x0413);
    let n_params = picked.len();
    let e2e_checked = match gc.run(&picked, &mut gc_rng, || {
        let mut noise = ChaCha8Rng::seed_from_u64(0x0414);
        forward_loss(&sys, &rgb, 0.01, QuantMode::Noise, &mut noise).loss
    }) {
        Ok(n) => n,
        Err(m) => panic!(
            "criterion  4: FAIL  rd_loss: d/d {}[{}] analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            m.param, m.index, m.analytic, m.numeric, m.rel_err
        ),
    };
    pass(
        4,
        &format!(
            "{op_checked} op-level derivatives within 1e-3; {e2e_checked} rd_loss derivatives over {n_params} tensors within 1e-2"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: rANS round-trips and code length

#[test]
fn criterion_05_rans_roundtrips_and_code_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0505);
    let mut total = 0u64;
    // Fraction of the per-stream allowance (2% of ideal plus 16 bytes) that
    // the worst stream actually consumed.
    let mut worst_ratio = 0.0f64;

    // Plain cumulative tables, symbols drawn from each table's own
    // quantized distribution via the decoder's slot map.
    for _ in 0..300 {
        let n_sym = rng.gen_range(2..=40);
        let pmf: Vec<f64> = (0..n_sym).map(|_| rng.gen_range(0.01..1.0f64).powi(3)).collect();
        let table = CdfTable::from_pmf(&pmf);
        let syms: Vec<usize> =
            (0..200).map(|_| table.find(rng.gen_range(0..TOTAL_FREQ))).collect();
        let mut enc = RansEncoder::new();
        for &s in &syms {
            enc.push_symbol(&table, s);
        }
        let bytes = enc.finish();
        let mut dec = RansDecoder::new(&bytes).unwrap();
        for &s in &syms {
            assert_eq!(dec.read_symbol(&table).unwrap(), s, "criterion  5: FAIL  symbol mismatch");
        }
        dec.finish().unwrap();
        let ideal: f64 = syms.iter().map(|&s| table.ideal_bits(s)).sum();
        let bits = 8.0 * bytes.len() as f64;
        assert!(
            bits <= ideal * 1.02 + 128.0,
            "criterion  5: FAIL  {bits} coded bits vs {ideal:.1} ideal"
        );
        worst_ratio = worst_ratio.max(bits / (ideal * 1.02 + 128.0));
        total += syms.len() as u64;
    }

    // Escape-augmented integer tables, with deliberate out-of-range values.
    for _ in 0..120 {
        let n = rng.gen_range(21..160usize);
        let lo = -((n / 2) as i64);
        let mut pmf: Vec<f64> = (0..n)
            .map(|i| {
                let t = (i as f64 - n as f64 / 2.0) / (n as f64 / 5.0);
                (-0.5 * t * t).exp() + 1e-4
            })
            .collect();
        pmf.push(0.03);
        let table = EscapeTable::new(&pmf, lo);
        let vals: Vec<i64> = (0..200)
            .map(|_| {
                if rng.gen_bool(0.06) {
                    let d = rng.gen_range(1..1_000_000i64);
                    if rng.gen_bool(0.5) {
                        lo - d
                    } else {
                        lo + n as i64 + d
                    }
                } else {
                    lo + rng.gen_range(0..n as i64)
                }
            })
            .collect();
        let mut enc = RansEncoder::new();
        for &v in &vals {
            table.encode_value(&mut enc, v);
        }
        let bytes = enc.finish();
        let mut dec = RansDecoder::new(&bytes).unwrap();
        for &v in &vals {
            assert_eq!(
                table.decode_value(&mut dec).unwrap(),
                v,
                "criterion  5: FAIL  escape value mismatch"
            );
        }
        dec.finish().unwrap();
        let ideal: f64 = vals.iter().map(|&v| table.ideal_bits(v)).sum();
        let bits = 8.0 * bytes.len() as f64;
        assert!(
            bits <= ideal * 1.02 + 128.0,
            "criterion  5: FAIL  escape stream {bits} bits vs {ideal:.1} ideal"
        );
        worst_ratio = worst_ratio.max(bits / (ideal * 1.02 + 128.0));
        total += vals.len() as u64;
    }

    // Gaussian coding through the shared sigma-binned tables.
    let cache = SigmaTableCache::new();
    for _ in 0..100 {
        let triples: Vec<(i64, f32, f32)> = (0..200)
            .map(|i| {
                let mu = rng.gen_range(-300.0..300.0f32);
                let sigma = (rng.gen_range(0.01f64.ln()..150.0f64.ln())).exp() as f32;
                let v = if i % 37 == 0 {
                    round_mu(mu) + 3_000_000
                } else {
                    round_mu(mu) + (rng.gen_range(-4.0..4.0) * sigma as f64).round() as i64
                };
                (v, mu, sigma)
            })
            .collect();
        let mut enc = RansEncoder::new();
        for &(v, mu, sigma) in &triples {
            encode_gaussian(&mut enc, &cache, v, mu, sigma);
        }
        let bytes = enc.finish();
        let mut dec = RansDecoder::new(&bytes).unwrap();
        for &(v, mu, sigma) in &triples {
            assert_eq!(
                decode_gaussian(&mut dec, &cache, mu, sigma).unwrap(),
                v,
                "criterion  5: FAIL  gaussian value mismatch"
            );
        }
        dec.finish().unwrap();
        total += triples.len() as u64;
    }

    assert!(total >= 100_000, "criterion  5: FAIL  only {total} round-trips exercised");
    pass(
        5,
        &format!(
            "{total} symbols round-trip bit-exactly; worst stream at {:.0}% of its size bound",
            worst_ratio * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: every configuration round-trips bit-exactly

fn tensors_bit_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape()
        && a.copy_data().iter().zip(b.copy_data().iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn pyramids_bit_equal(a: &Pyramid<f32>, b: &Pyramid<f32>) -> bool {
    tensors_bit_equal(&a.ll, &b.ll)
        && a.details.len() == b.details.len()
        && a.details.iter().zip(&b.details).all(|(x, y)| {
            tensors_bit_equal(&x.lh, &y.lh)
                && tensors_bit_equal(&x.hl, &y.hl)
                && tensors_bit_equal(&x.hh, &y.hh)
        })
}

#[test]
fn criterion_06_all_configs_roundtrip_bit_exact() {
    let sizes = [(48usize, 48usize), (64, 48), (37, 29), (80, 64), (50, 75)];
    let start = Instant::now();
    let mut cases = 0;
    for cfg in CodecConfig::all() {
        let name = cfg.name();
        let sys = CodecSystem::<f32>::new(cfg, 7);
        for (i, &(w, h)) in sizes.iter().enumerate() {
            let img = synth_image(w, h, 0x0600 + i as u64);
            let enc = encode_image(&sys, &img).unwrap();
            let (pyrs, info) = decode_pyramids(&sys, &enc.bytes).unwrap();
            for p in 0..3 {
                assert!(
                    pyramids_bit_equal(&enc.quantized[p], &pyrs[p]),
                    "criterion  6: FAIL  {name} {w}x{h}: decoded pyramid differs in plane {p}"
                );
            }
            assert_eq!((info.width, info.height), (w, h));
            let dec = decode_image(&sys, &enc.bytes).unwrap();
            let preview = reconstruct(&sys, &enc.quantized, w, h);
            assert!(
                dec == preview,
                "criterion  6: FAIL  {name} {w}x{h}: decoder image differs from encoder preview"
            );
            assert_eq!((dec.w, dec.h), (w, h));
            cases += 1;
        }
    }
    pass(
        6,
        &format!(
            "{cases} encode/decode cases (8 configs x 5 sizes) bit-exact, {:.1} s",
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: causality of the conditioning networks

fn params_bits(p: &GaussianParams<f64>) -> (Vec<u64>, Vec<u64>) {
    (
        p.mu.copy_data().iter().map(|v| v.to_bits()).collect(),
        p.sigma.copy_data().iter().map(|v| v.to_bits()).collect(),
    )
}

fn changed_positions(a: &(Vec<u64>, Vec<u64>), b: &(Vec<u64>, Vec<u64>)) -> Vec<usize> {
    (0..a.0.len()).filter(|&i| a.0[i] != b.0[i] || a.1[i] != b.1[i]).collect()
}

fn bumped(t: &Tensor<f64>, idx: usize, delta: f64) -> Tensor<f64> {
    let mut v = t.copy_data();
    v[idx] += delta;
    Tensor::constant(t.shape(), v)
}

#[test]
fn criterion_07_conditioning_networks_are_causal() {
    let _g = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0707);

    // Mask structure: strict raster window for the first layer, center
    // included for deeper layers, replicated across channel pairs.
    let strict = causal_mask(2, 3, 5, false);
    assert_eq!(strict.len(), 2 * 3 * 25);
    for block in strict.chunks(25) {
        for r in 0..5 {
            for c in 0..5 {
                let want = if r < 2 || (r == 2 && c < 2) { 1.0 } else { 0.0 };
                assert_eq!(block[r * 5 + c], want, "criterion  7: FAIL  strict mask at {r},{c}");
            }
        }
    }
    let incl = causal_mask(1, 1, 3, true);
    let want_incl = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(incl, want_incl, "criterion  7: FAIL  inclusive mask window");

    // Masked self-model on an 8x8 band: bumping position q must leave every
    // output at raster order <= q bit-identical.
    let net = MaskedSelfNet::<f64>::new(&mut rng);
    let mut ps = Vec::new();
    net.params("t", &mut ps);
    jitter_params(&ps, &mut rng, 0.05);
    let x0 = rand_tensor(Shape::new(1, 1, 8, 8), &mut rng, -30.0, 30.0);
    let base = params_bits(&net.forward(&x0));
    let mut self_sensitive = 0usize;
    for q in 0..64 {
        let out = params_bits(&net.forward(&bumped(&x0, q, 8.0)));
        for p in changed_positions(&base, &out) {
            assert!(
                p > q,
                "criterion  7: FAIL  masked self-model: bump at {q} changed params at {p}"
            );
            self_sensitive += 1;
        }
    }
    assert!(self_sensitive > 0, "criterion  7: FAIL  masked self-model never reacts");

    // Joint parent+sibling model: orientation o may only see the parent and
    // child o strictly before the current position.
    let net = InterIntraNet::<f64>::new(&mut rng);
    let mut ps = Vec::new();
    net.params("t", &mut ps);
    jitter_params(&ps, &mut rng, 0.05);
    let parent = rand_tensor(Shape::new(1, 3, 4, 4), &mut rng, -20.0, 20.0);
    let child = DetailBands {
        lh: rand_tensor(Shape::new(1, 1, 8, 8), &mut rng, -20.0, 20.0),
        hl: rand_tensor(Shape::new(1, 1, 8, 8), &mut rng, -20.0, 20.0),
        hh: rand_tensor(Shape::new(1, 1, 8, 8), &mut rng, -20.0, 20.0),
    };
    let base: Vec<_> = net.forward(&parent, &child).iter().map(params_bits).collect();
    let mut fusion_sensitive = 0usize;
    for o in 0..3 {
        for q in 0..64 {
            let bands = [&child.lh, &child.hl, &child.hh];
            let mut alt = DetailBands {
                lh: child.lh.clone(),
                hl: child.hl.clone(),
                hh: child.hh.clone(),
            };
            let slot = match o {
                0 => &mut alt.lh,
                1 => &mut alt.hl,
                _ => &mut alt.hh,
            };
            *slot = bumped(bands[o], q, 8.0);
            let out: Vec<_> = net.forward(&parent, &alt).iter().map(params_bits).collect();
            for o2 in 0..3 {
                let diffs = changed_positions(&base[o2], &out[o2]);
                if o2 != o {
                    assert!(
                        diffs.is_empty(),
                        "criterion  7: FAIL  fusion: bump in orientation {o} leaked into {o2}"
                    );
                } else {
                    for p in diffs {
                        assert!(
                            p > q,
                            "criterion  7: FAIL  fusion: bump at {q} changed own params at {p}"
                        );
                        fusion_sensitive += 1;
                    }
                }
            }
        }
    }
    assert!(fusion_sensitive > 0, "criterion  7: FAIL  fusion model never reacts");

    // Phase-conditioned model: a bump landing in phase k0 may only move the
    // parameters of strictly later phases.
    let net = PhaseCondNets::<f64>::new(&mut rng);
    let mut ps = Vec::new();
    net.params("t", &mut ps);
    jitter_params(&ps, &mut rng, 0.05);
    let parent = rand_tensor(Shape::new(1, 3, 4, 4), &mut rng, -20.0, 20.0);
    let child = DetailBands {
        lh: rand_tensor(Shape::new(1, 1, 8, 8), &mut rng, -20.0, 20.0),
        hl: rand_tensor(Shape::new(1, 1, 8, 8), &mut rng, -20.0, 20.0),
        hh: rand_tensor(Shape::new(1, 1, 8, 8), &mut rng, -20.0, 20.0),
    };
    let base: Vec<_> = net.forward(&parent, &child).iter().map(|(p, _)| params_bits(p)).collect();
    let mut phase_sensitive = 0usize;
    for b in 0..3 {
        for q in 0..64 {
            let (r, c) = (q / 8, q % 8);
            let par = (
                if r % 2 == 0 { Parity::Even } else { Parity::Odd },
                if c % 2 == 0 { Parity::Even } else { Parity::Odd },
            );
            let k0 = PHASE_ORDER.iter().position(|&p| p == par).unwrap();
            let bands = [&child.lh, &child.hl, &child.hh];
            let mut alt = DetailBands {
                lh: child.lh.clone(),
                hl: child.hl.clone(),
                hh: child.hh.clone(),
            };
            let slot = match b {
                0 => &mut alt.lh,
                1 => &mut alt.hl,
                _ => &mut alt.hh,
            };
            *slot = bumped(bands[b], q, 8.0);
            let out: Vec<_> =
                net.forward(&parent, &alt).iter().map(|(p, _)| params_bits(p)).collect();
            for k in 0..4 {
                let diffs = changed_positions(&base[k], &out[k]);
                if k <= k0 {
                    assert!(
                        diffs.is_empty(),
                        "criterion  7: FAIL  phase model: bump in phase {k0} changed phase {k}"
                    );
                } else {
                    phase_sensitive += diffs.len();
                }
            }
        }
    }
    assert!(phase_sensitive > 0, "criterion  7: FAIL  phase model never reacts");

    pass(
        7,
        &format!(
            "masks, self-model, fusion, and phase sweeps all causal ({self_sensitive}/{fusion_sensitive}/{phase_sensitive} forward sensitivities)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: desk-scale training makes progress

#[test]
fn criterion_08_desk_scale_training_improves() {
    // Part A: fixed filters, factorized entropy model, 200 steps.
    let images: Vec<(String, Image)> =
        (0..8).map(|i| (format!("train{i}"), synth_image(96, 96, 0x0800 + i))).collect();
    let corpus = Corpus::from_images(images).unwrap();
    let cfg = TrainConfig {
        codec: "cdf97+fem".into(),
        levels: LEVELS,
        lambda: 0.01,
        learning_rate: 1e-3,
        batch_size: 4,
        patch_size: 64,
        steps: 200,
        seed: 0x0801,
        smooth_window: 25,
        ..TrainConfig::default()
    };
    let sys = CodecSystem::<f32>::new(cfg.codec_config().unwrap(), cfg.seed);
    let dir = tempfile::tempdir().unwrap();
    let report = run_training(&cfg, &sys, &corpus, dir.path()).unwrap();
    let w = cfg.smooth_window;
    let mean = |rows: &[lwc_core::train::TraceRow]| {
        rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
    };
    let first = mean(&report.trace[..w]);
    let last = mean(&report.trace[cfg.steps - w..]);
    let drop = (first - last) / first;
    assert!(
        drop >= 0.10,
        "criterion  8: FAIL  smoothed loss fell only {:.1}% ({first:.3} to {last:.3})",
        drop * 100.0
    );

    // Part B: learned filters from the 9/7 start, 500 steps at fixed lambda,
    // judged on held-out images in round (deployment) quantization.
    let images: Vec<(String, Image)> =
        (0..6).map(|i| (format!("train{i}"), synth_image(64, 64, 0x0810 + i))).collect();
    let corpus_b = Corpus::from_images(images).unwrap();
    let held: Vec<Image> = (0..2).map(|i| synth_image(48, 48, 0x0820 + i)).collect();
    let cfg_b = TrainConfig {
        codec: "llb+fem".into(),
        levels: 2,
        lambda: 0.01,
        learning_rate: 1e-4,
        batch_size: 1,
        patch_size: 16,
        steps: 500,
        seed: 0x0802,
        smooth_window: 50,
        ..TrainConfig::default()
    };
    let sys_b = CodecSystem::<f32>::new(cfg_b.codec_config().unwrap(), cfg_b.seed);
    let eval = |sys: &CodecSystem<f32>| -> f64 {
        let _g = no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        held.iter()
            .map(|img| {
                let rgb = image_to_padded_rgb::<f32>(img, 4);
                forward_loss(sys, &rgb, cfg_b.lambda, QuantMode::Round, &mut rng).loss.item()
                    as f64
            })
            .sum::<f64>()
            / held.len() as f64
    };
    let before = eval(&sys_b);
    run_training(&cfg_b, &sys_b, &corpus_b, dir.path()).unwrap();
    let after = eval(&sys_b);
    assert!(
        after <= before,
        "criterion  8: FAIL  held-out rd_loss rose from {before:.4} to {after:.4}"
    );
    pass(
        8,
        &format!(
            "fem training cut smoothed loss {:.1}%; learned-filter held-out rd_loss {before:.3} -> {after:.3}",
            drop * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: conditioning never hurts at matched reconstruction

/// Trains only the entropy model, leaving transform and scaling untouched so
/// every variant codes the exact same quantized pyramids.
fn train_entropy_only(sys: &CodecSystem<f32>, corpus: &Corpus, steps: usize) {
    let em: Vec<Tensor<f32>> = sys
        .params()
        .into_iter()
        .filter(|(n, _)| n.contains(".em."))
        .map(|(_, t)| t)
        .collect();
    assert!(!em.is_empty());
    let mut opt = Adam::new(em, 1e-3);
    let mut sampler = PatchSampler::new(corpus, 32, 0x0909).unwrap();
    let mut noise = ChaCha8Rng::seed_from_u64(0x0910);
    for _ in 0..steps {
        let batch = sampler.next_batch::<f32>(2);
        opt.zero_grad();
        let parts = forward_loss(sys, &batch, 0.01, QuantMode::Noise, &mut noise);
        parts.loss.backward();
        opt.step();
    }
}

#[test]
fn criterion_09_entropy_model_ordering() {
    let images: Vec<(String, Image)> =
        (0..8).map(|i| (format!("train{i}"), synth_image(64, 64, 0x0900 + i))).collect();
    let corpus = Corpus::from_images(images).unwrap();
    let held = Corpus::from_images(
        (0..3).map(|i| (format!("held{i}"), synth_image(64, 64, 0x0920 + i))).collect(),
    )
    .unwrap();

    let build = |name: &str| {
        let mut cfg = CodecConfig::parse(name).unwrap();
        cfg.levels = 3;
        CodecSystem::<f32>::new(cfg, 0x0930)
    };
    let fem = build("cdf97+fem");
    let iscem = build("cdf97+iscem");
    let ipiscem = build("cdf97+ipiscem");

    // The construction RNG advances differently per entropy model, so align
    // the shared transform and scaling weights to the factorized system.
    let shared: HashMap<String, Tensor<f32>> = fem
        .params()
        .into_iter()
        .filter(|(n, _)| !n.contains(".em."))
        .collect();
    for sys in [&iscem, &ipiscem] {
        for (name, t) in sys.params() {
            if !name.contains(".em.") {
                t.set_data(shared[&name].copy_data());
            }
        }
    }

    let steps = 800;
    train_entropy_only(&fem, &corpus, steps);
    train_entropy_only(&iscem, &corpus, steps);
    train_entropy_only(&ipiscem, &corpus, steps);

    let summarize = |sys: &CodecSystem<f32>| {
        let pts = evaluate(sys, &held).unwrap();
        let bpp = pts.iter().map(|p| p.bpp).sum::<f64>() / pts.len() as f64;
        let psnr = pts.iter().map(|p| p.psnr_db).sum::<f64>() / pts.len() as f64;
        (bpp, psnr)
    };
    let (bpp_f, psnr_f) = summarize(&fem);
    let (bpp_is, psnr_is) = summarize(&iscem);
    let (bpp_ip, psnr_ip) = summarize(&ipiscem);
    println!(
        "criterion  9: measured fem {bpp_f:.4} bpp / {psnr_f:.2} dB, iscem {bpp_is:.4} / {psnr_is:.2}, ipiscem {bpp_ip:.4} / {psnr_ip:.2}"
    );

    assert!(
        (psnr_f - psnr_is).abs() <= 0.1 && (psnr_is - psnr_ip).abs() <= 0.1,
        "criterion  9: FAIL  PSNR not matched: {psnr_f:.3} / {psnr_is:.3} / {psnr_ip:.3} dB"
    );

    let mut warned = false;
    for (hi, lo, pair) in [
        (bpp_f, bpp_is, "fem >= iscem"),
        (bpp_is, bpp_ip, "iscem >= ipiscem"),
    ] {
        if hi < lo {
            let violation = (lo - hi) / hi;
            assert!(
                violation <= 0.02,
                "criterion  9: FAIL  {pair} violated by {:.1}% ({hi:.4} vs {lo:.4} bpp)",
                violation * 100.0
            );
            println!(
                "criterion  9: WARN  {pair} violated by {:.2}% ({hi:.4} vs {lo:.4} bpp), within the 2% allowance",
                violation * 100.0
            );
            warned = true;
        }
    }
    pass(
        9,
        &format!(
            "bpp {bpp_f:.4} (fem) >= {bpp_is:.4} (iscem) >= {bpp_ip:.4} (ipiscem) at {psnr_f:.2} dB{}",
            if warned { " (with warnings)" } else { "" }
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: the rate model predicts the real stream size

#[test]
fn criterion_10_rate_accounting_matches_stream_size() {
    let _g = no_grad();
    let img = synth_image(128, 128, 0x1000);
    let mut worst = 0.0f64;
    for cfg in CodecConfig::all() {
        let name = cfg.name();
        let sys = CodecSystem::<f32>::new(cfg, 3);
        let enc = encode_image(&sys, &img).unwrap();
        let payload_bits = 8.0 * enc.chunks.iter().map(|c| c.bytes).sum::<usize>() as f64;
        let model_bits: f64 = ColorPlane::ALL
            .iter()
            .map(|&p| sys.plane(p).em.rate_bits(&enc.quantized[p.index()]).item() as f64)
            .sum();
        let rel = (payload_bits - model_bits).abs() / model_bits;
        assert!(
            rel <= 0.05,
            "criterion 10: FAIL  {name}: payload {payload_bits:.0} bits vs model {model_bits:.0} ({:.1}% apart)",
            rel * 100.0
        );
        worst = worst.max(rel);
    }
    pass(
        10,
        &format!("all 8 configs: coded payload within {:.2}% of the model rate", worst * 100.0),
    );
}
