//! Image-level encoder and decoder: color conversion, padding, quantization,
//! and the coded byte format.
//!
//! Stream layout (all integers little-endian):
//!
//! ```text
//! offset size
//! 0      4   magic "LWC1"
//! 4      2   format version
//! 6      1   filter kind
//! 7      1   entropy model kind
//! 8      1   pyramid levels
//! 9      1   rANS precision bits
//! 10     2   Gaussian alphabet half-width
//! 12     2   sigma bin count
//! 14     4   image width before padding
//! 18     4   image height before padding
//! 22     8   model parameter hash
//! 30     2   chunk count
//! 32     8*n chunk directory: payload length, fnv1a checksum
//! ...        chunk payloads, back to back
//! ```
//!
//! One chunk per (color plane, subband), planes in Y, Cb, Cr order, subbands
//! in coding order: low-pass first, then detail levels coarse to fine. Every
//! chunk is a self-contained rANS stream, so conditional models can decode
//! sibling subbands from interleaved positions of their own chunks.
//!
//! The decoder recomputes coefficient probabilities with the same parameter
//! networks the encoder used. For the masked self-conditioning models this
//! happens one coefficient at a time through [`conv_point`], which
//! accumulates taps in exactly the order of the batch convolution; decoder
//! probabilities therefore match the encoder's bit for bit and the coded
//! integer pyramids round-trip exactly.

use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ckpt;
use crate::constants::{ALPHABET_HALF, LEVELS, PRECISION, SIGMA_BINS, SIGMA_MAX, SIGMA_MIN};
use crate::entropy::conditional::{
    phase_merge, InterIntraNet, MaskedSelfNet, PhaseCondNets, FUSED_CH, MASKED_CH,
};
use crate::entropy::{
    fem, orient_stack, top_refs, ChannelEntropy, ChannelModel, EntropyKind, FactorizedModel,
};
use crate::error::Error;
use crate::lifting::{
    ChannelDwt, DetailBands, FilterKind, Orient, Pyramid, SubbandRef, LIFT_CNN_WIDTH,
};
use crate::nn::{Conv, ParamList};
use crate::ppm::Image;
use crate::rans::{
    decode_gaussian, encode_gaussian, EscapeTable, RansDecoder, RansEncoder, SigmaTableCache,
};
use crate::scaling::{ChannelScaler, Direction, LLB_DETAIL_WIDTH, LLB_LL_WIDTH, SIMPLE_WIDTH};
use crate::tensor::conv::conv_point;
use crate::tensor::{no_grad, Real, Shape, Tensor};
use crate::Result;

const MAGIC: &[u8; 4] = b"LWC1";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 32;

/// Weight perturbation of freshly initialized llb scaling nets: breaks the
/// symmetry between hidden channels while keeping the map close to the
/// identity, so an untrained codec still round-trips at a sane rate.
pub const SCALER_NOISE: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Color conversion

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

fn color_conv<R: Real>(x: &Tensor<R>, m: [[f64; 3]; 3]) -> Tensor<R> {
    let k: Vec<R> = m.iter().flatten().map(|&v| R::from_f64(v)).collect();
    x.conv2d(&Tensor::constant(Shape::new(3, 3, 1, 1), k), None, (1, 1), (0, 0))
}

/// (N,3,h,w) RGB in 0..255 to full-range luma (0..255) plus two chroma
/// planes centered on zero (about -128..128). Differentiable in the input.
pub fn rgb_to_ycbcr<R: Real>(rgb: &Tensor<R>) -> Tensor<R> {
    let cb = 0.5 / (1.0 - KB);
    let cr = 0.5 / (1.0 - KR);
    color_conv(
        rgb,
        [
            [KR, KG, KB],
            [-KR * cb, -KG * cb, 0.5],
            [0.5, -KG * cr, -KB * cr],
        ],
    )
}

/// Exact algebraic inverse of [`rgb_to_ycbcr`], up to float rounding.
pub fn ycbcr_to_rgb<R: Real>(ycc: &Tensor<R>) -> Tensor<R> {
    color_conv(
        ycc,
        [
            [1.0, 0.0, (1.0 - KR) / 0.5],
            [1.0, -KB * (1.0 - KB) / (0.5 * KG), -KR * (1.0 - KR) / (0.5 * KG)],
            [1.0, (1.0 - KB) / 0.5, 0.0],
        ],
    )
}

// ---------------------------------------------------------------------------
// Rasters in and out

/// Next multiple of `m` at or above `v`.
pub fn pad_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Image as a (1,3,hp,wp) tensor with the last row and column replicated out
/// to the padded size. Values keep the raster's 0..255 scale.
pub fn image_to_padded_rgb<R: Real>(img: &Image, multiple: usize) -> Tensor<R> {
    let (h, w) = (img.h, img.w);
    let hp = pad_up(h, multiple);
    let wp = pad_up(w, multiple);
    let mut data = Vec::with_capacity(3 * hp * wp);
    for c in 0..3 {
        for y in 0..hp {
            let sy = y.min(h - 1);
            for x in 0..wp {
                let sx = x.min(w - 1);
                data.push(R::from_f64(img.rgb[(sy * w + sx) * 3 + c] as f64));
            }
        }
    }
    Tensor::constant(Shape::new(1, 3, hp, wp), data)
}

/// Crops padding off a (1,3,hp,wp) RGB tensor and converts to 8-bit,
/// rounding ties away from zero and clamping to 0..255.
pub fn tensor_to_image<R: Real>(rgb: &Tensor<R>, w: usize, h: usize) -> Image {
    let s = rgb.shape();
    assert_eq!((s.n, s.c), (1, 3), "expected a single RGB tensor, got {s}");
    assert!(s.h >= h && s.w >= w, "crop {w}x{h} out of {s}");
    let cropped = if s.h == h && s.w == w {
        rgb.clone()
    } else {
        rgb.crop(0, s.h - h, 0, s.w - w)
    };
    let d = cropped.data();
    let plane = h * w;
    let mut px = vec![0u8; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            px[3 * i + c] = d[c * plane + i].to_f64().round().clamp(0.0, 255.0) as u8;
        }
    }
    drop(d);
    Image::new(w, h, px)
}

/// Unit-step scalar quantization, ties away from zero. The result carries no
/// graph history; coding always runs on these detached integer tensors.
/// Negative zero is normalized to positive zero so the tensors here are
/// bitwise identical to what the decoder rebuilds from integer symbols.
pub fn quantize_pyramid<R: Real>(pyr: &Pyramid<R>) -> Pyramid<R> {
    pyr.map(|_, t| {
        let vals = t
            .data()
            .iter()
            .map(|v| {
                let r = v.round_half_away();
                if r.to_f64() == 0.0 {
                    R::ZERO
                } else {
                    r
                }
            })
            .collect();
        Tensor::constant(t.shape(), vals)
    })
}

// ---------------------------------------------------------------------------
// System assembly

/// One of the eight codec variants: a transform paired with an entropy model.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CodecConfig {
    pub filters: FilterKind,
    pub entropy: EntropyKind,
    pub levels: usize,
}

impl CodecConfig {
    pub fn new(filters: FilterKind, entropy: EntropyKind) -> Self {
        CodecConfig { filters, entropy, levels: LEVELS }
    }

    /// All eight filter/entropy combinations at the default depth.
    pub fn all() -> Vec<CodecConfig> {
        let mut out = Vec::with_capacity(8);
        for f in [FilterKind::Cdf97, FilterKind::Llb] {
            for e in EntropyKind::ALL {
                out.push(CodecConfig::new(f, e));
            }
        }
        out
    }

    /// `"cdf97+fem"`, `"llb+iiscem"`, ...
    pub fn name(&self) -> String {
        format!("{}+{}", self.filters.as_str(), self.entropy.as_str())
    }

    pub fn parse(s: &str) -> Option<CodecConfig> {
        let (f, e) = s.split_once('+')?;
        Some(CodecConfig::new(FilterKind::parse(f)?, EntropyKind::parse(e)?))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ColorPlane {
    Y,
    Cb,
    Cr,
}

impl ColorPlane {
    pub const ALL: [ColorPlane; 3] = [ColorPlane::Y, ColorPlane::Cb, ColorPlane::Cr];

    /// Channel index in the converted (1,3,h,w) tensor.
    pub fn index(self) -> usize {
        match self {
            ColorPlane::Y => 0,
            ColorPlane::Cb => 1,
            ColorPlane::Cr => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ColorPlane::Y => "y",
            ColorPlane::Cb => "cb",
            ColorPlane::Cr => "cr",
        }
    }
}

/// Everything one color plane needs: transform, both scaling directions, and
/// the entropy model. Analysis and synthesis scalers are independent nets.
pub struct PlaneCodec<R: Real> {
    pub dwt: ChannelDwt<R>,
    pub ana: ChannelScaler<R>,
    pub syn: ChannelScaler<R>,
    pub em: ChannelEntropy<R>,
}

impl<R: Real> PlaneCodec<R> {
    fn new(cfg: &CodecConfig, rng: &mut ChaCha8Rng) -> Self {
        let dwt = ChannelDwt::new(cfg.filters, cfg.levels, LIFT_CNN_WIDTH, rng);
        let (ana, syn) = match cfg.filters {
            FilterKind::Cdf97 => (
                ChannelScaler::new_simple(cfg.levels, SIMPLE_WIDTH, rng),
                ChannelScaler::new_simple(cfg.levels, SIMPLE_WIDTH, rng),
            ),
            FilterKind::Llb => (
                ChannelScaler::new_llb(Direction::Analysis, LLB_LL_WIDTH, LLB_DETAIL_WIDTH, SCALER_NOISE, rng),
                ChannelScaler::new_llb(Direction::Synthesis, LLB_LL_WIDTH, LLB_DETAIL_WIDTH, SCALER_NOISE, rng),
            ),
        };
        let em = ChannelEntropy::new(cfg.entropy, cfg.levels, rng);
        PlaneCodec { dwt, ana, syn, em }
    }

    /// Transform plus analysis scaling: the map whose output is quantized.
    pub fn analyze(&self, plane: &Tensor<R>) -> Pyramid<R> {
        self.ana.apply(&self.dwt.forward(plane))
    }

    /// Synthesis scaling plus inverse transform.
    pub fn synthesize(&self, pyr: &Pyramid<R>) -> Tensor<R> {
        self.dwt.inverse(&self.syn.apply(pyr))
    }

    fn params(&self, prefix: &str, out: &mut ParamList<R>) {
        self.dwt.params(&format!("{prefix}.dwt"), out);
        self.ana.params(&format!("{prefix}.ana"), out);
        self.syn.params(&format!("{prefix}.syn"), out);
        self.em.params(&format!("{prefix}.em"), out);
    }
}

/// The full trainable codec: three plane pipelines sharing one configuration.
pub struct CodecSystem<R: Real> {
    pub cfg: CodecConfig,
    pub planes: [PlaneCodec<R>; 3],
}

impl<R: Real> CodecSystem<R> {
    pub fn new(cfg: CodecConfig, seed: u64) -> Self {
        assert!(cfg.levels >= 1 && cfg.levels <= 8, "unreasonable depth {}", cfg.levels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CodecSystem {
            cfg,
            planes: ColorPlane::ALL.map(|_| PlaneCodec::new(&cfg, &mut rng)),
        }
    }

    pub fn plane(&self, p: ColorPlane) -> &PlaneCodec<R> {
        &self.planes[p.index()]
    }

    /// Every trainable tensor, named. Names are the checkpoint schema and
    /// stay stable across runs.
    pub fn params(&self) -> ParamList<R> {
        let mut out = Vec::new();
        for p in ColorPlane::ALL {
            self.planes[p.index()].params(p.name(), &mut out);
        }
        out
    }

    /// Content hash over parameter names and values (rounded to f32, the
    /// checkpoint precision). Written into every stream so decoding with the
    /// wrong weights fails loudly instead of producing garbage.
    pub fn param_hash(&self) -> u64 {
        let mut h = FNV64_OFFSET;
        for (name, t) in self.params() {
            fnv1a64_extend(&mut h, name.as_bytes());
            for &v in t.data().iter() {
                fnv1a64_extend(&mut h, &(v.to_f64() as f32).to_le_bytes());
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ckpt::save(path, &self.params())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        ckpt::load_into(path, &self.params())
    }
}

// ---------------------------------------------------------------------------
// Stream metadata

#[derive(Clone, Debug)]
pub struct StreamInfo {
    pub version: u16,
    pub filters: FilterKind,
    pub entropy: EntropyKind,
    pub levels: usize,
    pub width: usize,
    pub height: usize,
    pub model_hash: u64,
    pub chunks: Vec<ChunkInfo>,
}

#[derive(Clone, Copy, Debug)]
pub struct ChunkInfo {
    pub plane: ColorPlane,
    pub band: SubbandRef,
    pub bytes: usize,
}

impl StreamInfo {
    /// Sum of chunk payload sizes, excluding header and directory.
    pub fn payload_bytes(&self) -> usize {
        self.chunks.iter().map(|c| c.bytes).sum()
    }
}

/// Parses header and directory and verifies every chunk checksum. Needs no
/// model; this is all the structure a stream exposes without decoding.
pub fn inspect(bytes: &[u8]) -> Result<StreamInfo> {
    Ok(parse_stream(bytes)?.0)
}

pub struct EncodeResult<R: Real> {
    /// The complete stream: header, directory, payloads.
    pub bytes: Vec<u8>,
    /// The integer pyramids actually coded, one per color plane. Feeding
    /// them to [`reconstruct`] reproduces the decoder's output exactly.
    pub quantized: [Pyramid<R>; 3],
    pub padded_w: usize,
    pub padded_h: usize,
    pub chunks: Vec<ChunkInfo>,
}

// ---------------------------------------------------------------------------
// Encode

pub fn encode_image<R: Real>(sys: &CodecSystem<R>, img: &Image) -> Result<EncodeResult<R>> {
    if img.w == 0 || img.h == 0 {
        return Err(Error::Config("cannot encode an empty image".into()));
    }
    let _g = no_grad();
    let multiple = 1usize << sys.cfg.levels;
    let rgb = image_to_padded_rgb::<R>(img, multiple);
    let ycc = rgb_to_ycbcr(&rgb);
    let quantized = ColorPlane::ALL.map(|p| {
        quantize_pyramid(&sys.planes[p.index()].analyze(&ycc.narrow_ch(p.index(), 1)))
    });

    let cache = sigma_cache();
    let mut chunks = Vec::new();
    let mut payloads: Vec<Vec<u8>> = Vec::new();
    for p in ColorPlane::ALL {
        for (band, bytes) in encode_plane(&sys.planes[p.index()], &quantized[p.index()], cache) {
            chunks.push(ChunkInfo { plane: p, band, bytes: bytes.len() });
            payloads.push(bytes);
        }
    }

    let mut out = Vec::new();
    write_header(&mut out, &sys.cfg, img.w, img.h, sys.param_hash(), payloads.len());
    for pl in &payloads {
        out.extend_from_slice(&(pl.len() as u32).to_le_bytes());
        out.extend_from_slice(&fnv1a32(pl).to_le_bytes());
    }
    for pl in &payloads {
        out.extend_from_slice(pl);
    }

    let s = rgb.shape();
    Ok(EncodeResult { bytes: out, quantized, padded_w: s.w, padded_h: s.h, chunks })
}

fn encode_plane<R: Real>(
    pc: &PlaneCodec<R>,
    pyr: &Pyramid<R>,
    cache: &SigmaTableCache,
) -> Vec<(SubbandRef, Vec<u8>)> {
    let coarsest = pyr.levels() - 1;
    let mut out = Vec::with_capacity(1 + 3 * pyr.levels());
    match &pc.em.model {
        ChannelModel::Fem { bands } => {
            for (r, m) in bands {
                out.push((*r, encode_fem_band(m, pyr.get(*r))));
            }
        }
        ChannelModel::Iscem { top, cond } => {
            encode_fem_top(&mut out, top, pyr, coarsest);
            for lv in (0..coarsest).rev() {
                let params = cond[lv].forward(&orient_stack(&pyr.details[lv + 1]));
                for o in Orient::ALL {
                    let band = pyr.details[lv].get(o);
                    let mu = params.mu.narrow_ch(o.index(), 1);
                    let sg = params.sigma.narrow_ch(o.index(), 1);
                    let r = SubbandRef::Detail { level: lv, orient: o };
                    out.push((r, encode_gaussian_band(band, &mu, &sg, cache)));
                }
            }
        }
        ChannelModel::Iiscem { top, cond } => {
            for (i, r) in top_refs(coarsest).into_iter().enumerate() {
                let band = pyr.get(r);
                let p = top[i].forward(band);
                out.push((r, encode_gaussian_band(band, &p.mu, &p.sigma, cache)));
            }
            for lv in (0..coarsest).rev() {
                let right = cond[lv].right_features(&orient_stack(&pyr.details[lv + 1]));
                for o in Orient::ALL {
                    let band = pyr.details[lv].get(o);
                    let p = cond[lv].orient_params(&right, o, band);
                    let r = SubbandRef::Detail { level: lv, orient: o };
                    out.push((r, encode_gaussian_band(band, &p.mu, &p.sigma, cache)));
                }
            }
        }
        ChannelModel::Ipiscem { top, cond } => {
            encode_fem_top(&mut out, top, pyr, coarsest);
            for lv in (0..coarsest).rev() {
                let parent = orient_stack(&pyr.details[lv + 1]);
                let phases = cond[lv].forward(&parent, &pyr.details[lv]);
                for o in Orient::ALL {
                    let mut enc = RansEncoder::new();
                    for (p, vals) in &phases {
                        push_gaussian_band(
                            &mut enc,
                            &vals.narrow_ch(o.index(), 1),
                            &p.mu.narrow_ch(o.index(), 1),
                            &p.sigma.narrow_ch(o.index(), 1),
                            cache,
                        );
                    }
                    let r = SubbandRef::Detail { level: lv, orient: o };
                    out.push((r, enc.finish()));
                }
            }
        }
    }
    debug_assert!(out
        .iter()
        .map(|(r, _)| *r)
        .eq(SubbandRef::coding_order(pyr.levels())));
    out
}

fn encode_fem_top<R: Real>(
    out: &mut Vec<(SubbandRef, Vec<u8>)>,
    top: &[FactorizedModel<R>; 4],
    pyr: &Pyramid<R>,
    coarsest: usize,
) {
    for (i, r) in top_refs(coarsest).into_iter().enumerate() {
        out.push((r, encode_fem_band(&top[i], pyr.get(r))));
    }
}

fn encode_fem_band<R: Real>(m: &FactorizedModel<R>, band: &Tensor<R>) -> Vec<u8> {
    let table = fem_table(m);
    let mut enc = RansEncoder::new();
    for v in band_ints(band) {
        table.encode_value(&mut enc, v);
    }
    enc.finish()
}

fn encode_gaussian_band<R: Real>(
    v: &Tensor<R>,
    mu: &Tensor<R>,
    sigma: &Tensor<R>,
    cache: &SigmaTableCache,
) -> Vec<u8> {
    let mut enc = RansEncoder::new();
    push_gaussian_band(&mut enc, v, mu, sigma, cache);
    enc.finish()
}

fn push_gaussian_band<R: Real>(
    enc: &mut RansEncoder,
    v: &Tensor<R>,
    mu: &Tensor<R>,
    sigma: &Tensor<R>,
    cache: &SigmaTableCache,
) {
    let ints = band_ints(v);
    let md = mu.data();
    let sd = sigma.data();
    assert_eq!(ints.len(), md.len(), "parameter maps must cover the band");
    for i in 0..ints.len() {
        encode_gaussian(enc, cache, ints[i], f32_of(md[i]), f32_of(sd[i]));
    }
}

// ---------------------------------------------------------------------------
// Decode

/// Decodes the integer pyramids without synthesizing the image.
pub fn decode_pyramids<R: Real>(
    sys: &CodecSystem<R>,
    bytes: &[u8],
) -> Result<([Pyramid<R>; 3], StreamInfo)> {
    let _g = no_grad();
    let (info, payloads) = parse_stream(bytes)?;
    if info.filters != sys.cfg.filters
        || info.entropy != sys.cfg.entropy
        || info.levels != sys.cfg.levels
    {
        return Err(Error::Bitstream(format!(
            "stream is {}+{} at {} levels, this codec is {} at {} levels",
            info.filters.as_str(),
            info.entropy.as_str(),
            info.levels,
            sys.cfg.name(),
            sys.cfg.levels,
        )));
    }
    let hash = sys.param_hash();
    if info.model_hash != hash {
        return Err(Error::Bitstream(format!(
            "stream was encoded with different model weights ({:016x}, decoder has {:016x})",
            info.model_hash, hash,
        )));
    }
    let hp = pad_up(info.height, 1 << info.levels);
    let wp = pad_up(info.width, 1 << info.levels);
    let per_plane = 1 + 3 * info.levels;
    let cache = sigma_cache();
    let mut pyrs = Vec::with_capacity(3);
    for p in ColorPlane::ALL {
        let slice = &payloads[p.index() * per_plane..(p.index() + 1) * per_plane];
        pyrs.push(decode_plane(&sys.planes[p.index()], slice, hp, wp, cache)?);
    }
    let pyrs: [Pyramid<R>; 3] = match pyrs.try_into() {
        Ok(a) => a,
        Err(_) => unreachable!("three planes collected"),
    };
    Ok((pyrs, info))
}

pub fn decode_image<R: Real>(sys: &CodecSystem<R>, bytes: &[u8]) -> Result<Image> {
    let (pyrs, info) = decode_pyramids(sys, bytes)?;
    Ok(reconstruct(sys, &pyrs, info.width, info.height))
}

/// Synthesis path shared by the decoder and the encoder's own preview:
/// integer pyramids to the final 8-bit raster. Given equal pyramids the
/// output is identical on both sides.
pub fn reconstruct<R: Real>(
    sys: &CodecSystem<R>,
    quantized: &[Pyramid<R>; 3],
    w: usize,
    h: usize,
) -> Image {
    let _g = no_grad();
    let planes =
        ColorPlane::ALL.map(|p| sys.planes[p.index()].synthesize(&quantized[p.index()]));
    let ycc = Tensor::concat_ch(&planes);
    tensor_to_image(&ycbcr_to_rgb(&ycc), w, h)
}

fn decode_plane<R: Real>(
    pc: &PlaneCodec<R>,
    payloads: &[&[u8]],
    hp: usize,
    wp: usize,
    cache: &SigmaTableCache,
) -> Result<Pyramid<R>> {
    let levels = pc.em.levels();
    let coarsest = levels - 1;
    let mut slots = PyramidSlots::new(levels);
    match &pc.em.model {
        ChannelModel::Fem { bands } => {
            for (r, m) in bands {
                let (h, w) = band_dims(hp, wp, levels, *r);
                slots.set(*r, decode_fem_band(m, payloads[order_index(levels, *r)], h, w)?);
            }
        }
        ChannelModel::Iscem { top, cond } => {
            decode_fem_top(&mut slots, top, payloads, hp, wp)?;
            for lv in (0..coarsest).rev() {
                let params = cond[lv].forward(&orient_stack(&slots.bands(lv + 1)));
                for o in Orient::ALL {
                    let r = SubbandRef::Detail { level: lv, orient: o };
                    let (h, w) = band_dims(hp, wp, levels, r);
                    let mu = params.mu.narrow_ch(o.index(), 1);
                    let sg = params.sigma.narrow_ch(o.index(), 1);
                    let t = decode_gaussian_band(
                        payloads[order_index(levels, r)],
                        &mu,
                        &sg,
                        h,
                        w,
                        cache,
                    )?;
                    slots.set(r, t);
                }
            }
        }
        ChannelModel::Iiscem { top, cond } => {
            for (i, r) in top_refs(coarsest).into_iter().enumerate() {
                let (h, w) = band_dims(hp, wp, levels, r);
                let t =
                    decode_masked_self(&top[i], payloads[order_index(levels, r)], h, w, cache)?;
                slots.set(r, t);
            }
            for lv in (0..coarsest).rev() {
                let right = cond[lv].right_features(&orient_stack(&slots.bands(lv + 1)));
                for o in Orient::ALL {
                    let r = SubbandRef::Detail { level: lv, orient: o };
                    let (h, w) = band_dims(hp, wp, levels, r);
                    let t = decode_inter_intra(
                        &cond[lv],
                        o,
                        &right,
                        payloads[order_index(levels, r)],
                        h,
                        w,
                        cache,
                    )?;
                    slots.set(r, t);
                }
            }
        }
        ChannelModel::Ipiscem { top, cond } => {
            decode_fem_top(&mut slots, top, payloads, hp, wp)?;
            for lv in (0..coarsest).rev() {
                let parent = orient_stack(&slots.bands(lv + 1));
                let r0 = SubbandRef::Detail { level: lv, orient: Orient::Lh };
                let (h, w) = band_dims(hp, wp, levels, r0);
                let chunk = |o: Orient| {
                    payloads[order_index(levels, SubbandRef::Detail { level: lv, orient: o })]
                };
                let triple = decode_phase_level(
                    &cond[lv],
                    &parent,
                    [chunk(Orient::Lh), chunk(Orient::Hl), chunk(Orient::Hh)],
                    h,
                    w,
                    cache,
                )?;
                for o in Orient::ALL {
                    slots.set(
                        SubbandRef::Detail { level: lv, orient: o },
                        triple[o.index()].clone(),
                    );
                }
            }
        }
    }
    Ok(slots.finish())
}

fn decode_fem_top<R: Real>(
    slots: &mut PyramidSlots<R>,
    top: &[FactorizedModel<R>; 4],
    payloads: &[&[u8]],
    hp: usize,
    wp: usize,
) -> Result<()> {
    let levels = slots.levels();
    for (i, r) in top_refs(levels - 1).into_iter().enumerate() {
        let (h, w) = band_dims(hp, wp, levels, r);
        slots.set(r, decode_fem_band(&top[i], payloads[order_index(levels, r)], h, w)?);
    }
    Ok(())
}

fn decode_fem_band<R: Real>(
    m: &FactorizedModel<R>,
    bytes: &[u8],
    h: usize,
    w: usize,
) -> Result<Tensor<R>> {
    let table = fem_table(m);
    let mut dec = RansDecoder::new(bytes)?;
    let mut vals = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        vals.push(R::from_f64(table.decode_value(&mut dec)? as f64));
    }
    dec.finish()?;
    Ok(Tensor::constant(Shape::new(1, 1, h, w), vals))
}

fn decode_gaussian_plane<R: Real>(
    dec: &mut RansDecoder,
    mu: &Tensor<R>,
    sigma: &Tensor<R>,
    h: usize,
    w: usize,
    cache: &SigmaTableCache,
) -> Result<Tensor<R>> {
    let md = mu.data();
    let sd = sigma.data();
    assert_eq!(md.len(), h * w, "parameter maps must cover the band");
    let mut vals = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let v = decode_gaussian(dec, cache, f32_of(md[i]), f32_of(sd[i]))?;
        vals.push(R::from_f64(v as f64));
    }
    drop((md, sd));
    Ok(Tensor::constant(Shape::new(1, 1, h, w), vals))
}

fn decode_gaussian_band<R: Real>(
    bytes: &[u8],
    mu: &Tensor<R>,
    sigma: &Tensor<R>,
    h: usize,
    w: usize,
    cache: &SigmaTableCache,
) -> Result<Tensor<R>> {
    let mut dec = RansDecoder::new(bytes)?;
    let t = decode_gaussian_plane(&mut dec, mu, sigma, h, w, cache)?;
    dec.finish()?;
    Ok(t)
}

/// Four decode waves: phase k params come from the parent triple and the
/// k phase triples already decoded, exactly as the encoder computed them.
fn decode_phase_level<R: Real>(
    net: &PhaseCondNets<R>,
    parent: &Tensor<R>,
    payloads: [&[u8]; 3],
    h: usize,
    w: usize,
    cache: &SigmaTableCache,
) -> Result<[Tensor<R>; 3]> {
    let (ph, pw) = (h / 2, w / 2);
    let mut decs = [
        RansDecoder::new(payloads[0])?,
        RansDecoder::new(payloads[1])?,
        RansDecoder::new(payloads[2])?,
    ];
    let mut per_orient: [Vec<Tensor<R>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut prior: Vec<Tensor<R>> = Vec::new();
    for k in 0..4 {
        let params = net.phase_params(k, parent, &prior);
        let mut triple = Vec::with_capacity(3);
        for o in Orient::ALL {
            let mu = params.mu.narrow_ch(o.index(), 1);
            let sg = params.sigma.narrow_ch(o.index(), 1);
            let t = decode_gaussian_plane(&mut decs[o.index()], &mu, &sg, ph, pw, cache)?;
            per_orient[o.index()].push(t.clone());
            triple.push(t);
        }
        prior.push(Tensor::concat_ch(&triple));
    }
    for dec in &decs {
        dec.finish()?;
    }
    Ok(Orient::ALL.map(|o| {
        let phases: [Tensor<R>; 4] = match std::mem::take(&mut per_orient[o.index()]).try_into()
        {
            Ok(a) => a,
            Err(_) => unreachable!("four phases decoded"),
        };
        phase_merge(&phases)
    }))
}

// ---------------------------------------------------------------------------
// Sequential decoding of masked self-conditioned subbands
//
// The encoder computes coefficient parameters with batch convolutions over
// the fully known subband. The decoder cannot, so it evaluates the same
// networks one output position at a time via `conv_point`, which adds taps
// in the batch kernel's exact order over the full (masked) window. Masked
// taps multiply a zero weight, so the not-yet-decoded values they touch
// never influence the result, and each parameter comes out bit-identical to
// the encoder's.

struct SeqConv<R: Real> {
    k: Vec<R>,
    ks: Shape,
    bias: Vec<R>,
    pad: (usize, usize),
}

impl<R: Real> SeqConv<R> {
    fn new(c: &Conv<R>) -> Self {
        SeqConv {
            k: c.effective_kernel().copy_data(),
            ks: c.kernel.shape(),
            bias: c.bias.copy_data(),
            pad: c.pad,
        }
    }

    #[inline]
    fn at(&self, x: &[R], xs: Shape, co: usize, oy: usize, ox: usize) -> R {
        conv_point(x, xs, 0, &self.k, self.ks, self.bias[co], co, (1, 1), self.pad, oy, ox)
    }
}

/// Scalar twin of the tensor chain `exp` then clamp used on raw scales.
fn sigma_r<R: Real>(raw: R) -> R {
    raw.exp()
        .maxv(R::from_f64(SIGMA_MIN as f64))
        .minv(R::from_f64(SIGMA_MAX as f64))
}

fn f32_of<R: Real>(v: R) -> f32 {
    v.to_f64() as f32
}

fn decode_masked_self<R: Real>(
    net: &MaskedSelfNet<R>,
    bytes: &[u8],
    h: usize,
    w: usize,
    cache: &SigmaTableCache,
) -> Result<Tensor<R>> {
    let a = SeqConv::new(&net.a);
    let b = SeqConv::new(&net.b);
    let head = SeqConv::new(&net.head);
    let xs = Shape::new(1, 1, h, w);
    let fs = Shape::new(1, MASKED_CH, h, w);
    let hs = Shape::new(1, MASKED_CH, 1, 1);
    let plane = h * w;
    let mut x = vec![R::ZERO; plane];
    let mut ta = vec![R::ZERO; MASKED_CH * plane];
    let mut tb = vec![R::ZERO; MASKED_CH];
    let mut dec = RansDecoder::new(bytes)?;
    for oy in 0..h {
        for ox in 0..w {
            let p = oy * w + ox;
            for ch in 0..MASKED_CH {
                ta[ch * plane + p] = a.at(&x, xs, ch, oy, ox).tanh();
            }
            for ch in 0..MASKED_CH {
                tb[ch] = b.at(&ta, fs, ch, oy, ox).tanh();
            }
            let mu = head.at(&tb, hs, 0, 0, 0);
            let sigma = sigma_r(head.at(&tb, hs, 1, 0, 0));
            let v = decode_gaussian(&mut dec, cache, f32_of(mu), f32_of(sigma))?;
            x[p] = R::from_f64(v as f64);
        }
    }
    dec.finish()?;
    Ok(Tensor::constant(xs, x))
}

fn decode_inter_intra<R: Real>(
    net: &InterIntraNet<R>,
    orient: Orient,
    right: &Tensor<R>,
    bytes: &[u8],
    h: usize,
    w: usize,
    cache: &SigmaTableCache,
) -> Result<Tensor<R>> {
    let i = orient.index();
    let a = SeqConv::new(&net.left[i].a);
    let b = SeqConv::new(&net.left[i].b);
    let c1 = SeqConv::new(&net.pen[i].c1);
    let c2 = SeqConv::new(&net.pen[i].c2);
    let c3 = SeqConv::new(&net.pen[i].c3);
    let rd = right.narrow_ch(MASKED_CH * i, MASKED_CH).copy_data();
    let xs = Shape::new(1, 1, h, w);
    let fs = Shape::new(1, MASKED_CH, h, w);
    let ps = Shape::new(1, FUSED_CH, 1, 1);
    let plane = h * w;
    let mut x = vec![R::ZERO; plane];
    let mut ta = vec![R::ZERO; MASKED_CH * plane];
    let mut fused = vec![R::ZERO; FUSED_CH];
    let mut t1 = vec![R::ZERO; FUSED_CH];
    let mut t2 = vec![R::ZERO; FUSED_CH];
    let mut dec = RansDecoder::new(bytes)?;
    for oy in 0..h {
        for ox in 0..w {
            let p = oy * w + ox;
            for ch in 0..MASKED_CH {
                ta[ch * plane + p] = a.at(&x, xs, ch, oy, ox).tanh();
            }
            for ch in 0..MASKED_CH {
                fused[ch] = rd[ch * plane + p];
                fused[MASKED_CH + ch] = b.at(&ta, fs, ch, oy, ox);
            }
            for ch in 0..FUSED_CH {
                t1[ch] = c1.at(&fused, ps, ch, 0, 0).tanh();
            }
            for ch in 0..FUSED_CH {
                t2[ch] = c2.at(&t1, ps, ch, 0, 0).tanh();
            }
            let mu = c3.at(&t2, ps, 0, 0, 0);
            let sigma = sigma_r(c3.at(&t2, ps, 1, 0, 0));
            let v = decode_gaussian(&mut dec, cache, f32_of(mu), f32_of(sigma))?;
            x[p] = R::from_f64(v as f64);
        }
    }
    dec.finish()?;
    Ok(Tensor::constant(xs, x))
}

// ---------------------------------------------------------------------------
// Shared pieces

/// Shared zero-mean Gaussian tables; pure math, built once per process.
pub fn sigma_cache() -> &'static SigmaTableCache {
    static CACHE: OnceLock<SigmaTableCache> = OnceLock::new();
    CACHE.get_or_init(SigmaTableCache::new)
}

/// Coding table of one factorized model: its integer support plus an escape
/// carrying the truncated tail mass. Both coder sides derive the table from
/// the model parameters through the same f64 evaluation.
fn fem_table<R: Real>(m: &FactorizedModel<R>) -> EscapeTable {
    let (lo, hi) = m.integer_support();
    let mut pmf: Vec<f64> = (lo..=hi).map(|v| m.pmf_scalar(v as f64).max(0.0)).collect();
    let tail = (1.0 - pmf.iter().sum::<f64>()).max(fem::SUPPORT_TAIL);
    pmf.push(tail);
    EscapeTable::new(&pmf, lo as i64)
}

/// Integer values of a quantized band, raster order.
fn band_ints<R: Real>(t: &Tensor<R>) -> Vec<i64> {
    t.data().iter().map(|v| v.to_f64().round() as i64).collect()
}

fn band_dims(hp: usize, wp: usize, levels: usize, r: SubbandRef) -> (usize, usize) {
    match r {
        SubbandRef::Ll => (hp >> levels, wp >> levels),
        SubbandRef::Detail { level, .. } => (hp >> (level + 1), wp >> (level + 1)),
    }
}

/// Position of a subband in the per-plane chunk sequence (coding order).
fn order_index(levels: usize, r: SubbandRef) -> usize {
    match r {
        SubbandRef::Ll => 0,
        SubbandRef::Detail { level, orient } => 1 + 3 * (levels - 1 - level) + orient.index(),
    }
}

/// Accumulates decoded subbands until the pyramid is complete.
struct PyramidSlots<R: Real> {
    ll: Option<Tensor<R>>,
    details: Vec<[Option<Tensor<R>>; 3]>,
}

impl<R: Real> PyramidSlots<R> {
    fn new(levels: usize) -> Self {
        PyramidSlots { ll: None, details: (0..levels).map(|_| [None, None, None]).collect() }
    }

    fn levels(&self) -> usize {
        self.details.len()
    }

    fn set(&mut self, r: SubbandRef, t: Tensor<R>) {
        match r {
            SubbandRef::Ll => self.ll = Some(t),
            SubbandRef::Detail { level, orient } => {
                self.details[level][orient.index()] = Some(t)
            }
        }
    }

    fn bands(&self, level: usize) -> DetailBands<R> {
        let get = |o: Orient| {
            self.details[level][o.index()].clone().expect("parent level decoded first")
        };
        DetailBands { lh: get(Orient::Lh), hl: get(Orient::Hl), hh: get(Orient::Hh) }
    }

    fn finish(self) -> Pyramid<R> {
        Pyramid {
            ll: self.ll.expect("low-pass band decoded"),
            details: self
                .details
                .into_iter()
                .map(|[lh, hl, hh]| DetailBands {
                    lh: lh.expect("band decoded"),
                    hl: hl.expect("band decoded"),
                    hh: hh.expect("band decoded"),
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Header and checksums

fn filter_code(f: FilterKind) -> u8 {
    match f {
        FilterKind::Cdf97 => 0,
        FilterKind::Llb => 1,
    }
}

fn filter_from(b: u8) -> Option<FilterKind> {
    match b {
        0 => Some(FilterKind::Cdf97),
        1 => Some(FilterKind::Llb),
        _ => None,
    }
}

fn entropy_code(e: EntropyKind) -> u8 {
    EntropyKind::ALL.iter().position(|k| *k == e).unwrap() as u8
}

fn entropy_from(b: u8) -> Option<EntropyKind> {
    EntropyKind::ALL.get(b as usize).copied()
}

fn write_header(out: &mut Vec<u8>, cfg: &CodecConfig, w: usize, h: usize, hash: u64, n: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(filter_code(cfg.filters));
    out.push(entropy_code(cfg.entropy));
    out.push(cfg.levels as u8);
    out.push(PRECISION as u8);
    out.extend_from_slice(&(ALPHABET_HALF as u16).to_le_bytes());
    out.extend_from_slice(&(SIGMA_BINS as u16).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&hash.to_le_bytes());
    out.extend_from_slice(&(n as u16).to_le_bytes());
    debug_assert_eq!(out.len() % HEADER_LEN, 0);
}

fn parse_stream(bytes: &[u8]) -> Result<(StreamInfo, Vec<&[u8]>)> {
    let err = Error::Bitstream;
    if bytes.len() < HEADER_LEN {
        return Err(err(format!("{} bytes cannot hold a {HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err("magic mismatch, not a coded image".into()));
    }
    let u16at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().unwrap());
    let u32at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u16at(4);
    if version != VERSION {
        return Err(err(format!("format version {version}, this build reads {VERSION}")));
    }
    let filters = filter_from(bytes[6])
        .ok_or_else(|| err(format!("unknown filter code {}", bytes[6])))?;
    let entropy = entropy_from(bytes[7])
        .ok_or_else(|| err(format!("unknown entropy model code {}", bytes[7])))?;
    let levels = bytes[8] as usize;
    if levels == 0 || levels > 8 {
        return Err(err(format!("implausible pyramid depth {levels}")));
    }
    if bytes[9] as u32 != PRECISION
        || u16at(10) as i32 != ALPHABET_HALF
        || u16at(12) as usize != SIGMA_BINS
    {
        return Err(err("coder constants differ from this build".into()));
    }
    let width = u32at(14) as usize;
    let height = u32at(18) as usize;
    if width == 0 || height == 0 {
        return Err(err("zero image dimension".into()));
    }
    let model_hash = u64::from_le_bytes(bytes[22..30].try_into().unwrap());
    let n_chunks = u16at(30) as usize;
    let expect = 3 * (1 + 3 * levels);
    if n_chunks != expect {
        return Err(err(format!("{n_chunks} chunks, but {levels} levels imply {expect}")));
    }
    let dir_end = HEADER_LEN + 8 * n_chunks;
    if bytes.len() < dir_end {
        return Err(err("truncated chunk directory".into()));
    }
    let order = SubbandRef::coding_order(levels);
    let mut payloads = Vec::with_capacity(n_chunks);
    let mut chunks = Vec::with_capacity(n_chunks);
    let mut pos = dir_end;
    for i in 0..n_chunks {
        let len = u32at(HEADER_LEN + 8 * i) as usize;
        let sum = u32at(HEADER_LEN + 8 * i + 4);
        let plane = ColorPlane::ALL[i / order.len()];
        let band = order[i % order.len()];
        let payload = bytes.get(pos..pos + len).ok_or_else(|| {
            err(format!("chunk {} {} runs past the end of the stream", plane.name(), band.label()))
        })?;
        if fnv1a32(payload) != sum {
            return Err(err(format!(
                "checksum mismatch in chunk {} {}",
                plane.name(),
                band.label()
            )));
        }
        payloads.push(payload);
        chunks.push(ChunkInfo { plane, band, bytes: len });
        pos += len;
    }
    if pos != bytes.len() {
        return Err(err(format!("{} trailing bytes after the last chunk", bytes.len() - pos)));
    }
    let info = StreamInfo { version, filters, entropy, levels, width, height, model_hash, chunks };
    Ok((info, payloads))
}

fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h = (h ^ b as u32).wrapping_mul(0x0100_0193);
    }
    h
}

const FNV64_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv1a64_extend(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h = (*h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
}
