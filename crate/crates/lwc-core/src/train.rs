//! Rate-distortion training and evaluation.
//!
//! Training minimizes `rate_bits / num_pixels + lambda * MSE` over random
//! image crops. Quantization is replaced by additive uniform noise during
//! training so the whole chain stays differentiable; evaluation always runs
//! the real coder (rounding plus rANS) and measures file bytes and decoded
//! PSNR, never the proxy.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_image, encode_image, quantize_pyramid, rgb_to_ycbcr, ycbcr_to_rgb, CodecConfig,
    CodecSystem, ColorPlane,
};
use crate::constants::LEVELS;
use crate::error::Error;
use crate::lifting::{Pyramid, SubbandRef};
use crate::ppm::{read_raster, Image};
use crate::tensor::{Adam, Real, Shape, Tensor};
use crate::Result;

/// Default distortion weights for rate-distortion curves.
pub const LAMBDA_SWEEP: [f64; 4] = [0.0005, 0.005, 0.05, 0.5];

/// Separates the quantization-noise stream from the patch-sampling stream
/// that shares the run seed.
const NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

// ---------------------------------------------------------------------------
// Configuration

/// A training run, read from a TOML file:
///
/// ```toml
/// codec = "cdf97+fem"
/// levels = 4
/// lambda = 0.005
/// learning_rate = 1e-4
/// batch_size = 8
/// patch_size = 256
/// steps = 1000
/// seed = 7
/// plateau_patience = 10
/// plateau_factor = 0.5
/// min_learning_rate = 1e-6
/// smooth_window = 100
/// corpus = "data/train"
/// ```
///
/// Every field has a default, so a file may set only what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Codec variant to train, e.g. `"cdf97+fem"` or `"llb+iiscem"`.
    pub codec: String,
    pub levels: usize,
    /// Distortion weight in `R + lambda * D`.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Square crop side; must be divisible by `2^levels`.
    pub patch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Smoothed-loss observations without improvement before the rate drops.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
    /// Steps per smoothed-loss observation.
    pub smooth_window: usize,
    pub corpus: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            codec: "cdf97+fem".into(),
            levels: LEVELS,
            lambda: 0.005,
            learning_rate: 1e-4,
            batch_size: 8,
            patch_size: 256,
            steps: 200,
            seed: 0,
            plateau_patience: 10,
            plateau_factor: 0.5,
            min_learning_rate: 1e-6,
            smooth_window: 100,
            corpus: PathBuf::from("corpus"),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validated()
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The codec variant this run trains.
    pub fn codec_config(&self) -> Result<CodecConfig> {
        let mut cfg = CodecConfig::parse(&self.codec)
            .ok_or_else(|| Error::Config(format!("unknown codec \"{}\"", self.codec)))?;
        cfg.levels = self.levels;
        Ok(cfg)
    }

    fn validated(self) -> Result<TrainConfig> {
        self.codec_config()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.levels == 0 || self.levels > 8 {
            return fail(format!("levels = {} out of range 1..=8", self.levels));
        }
        let m = 1usize << self.levels;
        if self.patch_size == 0 || self.patch_size % m != 0 {
            return fail(format!(
                "patch_size = {} is not a positive multiple of 2^levels = {m}",
                self.patch_size
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.lambda < 0.0 {
            return fail(format!("lambda = {} is negative", self.lambda));
        }
        if self.learning_rate <= 0.0 {
            return fail(format!("learning_rate = {} is not positive", self.learning_rate));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor <= 1.0) {
            return fail(format!("plateau_factor = {} outside (0, 1]", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.smooth_window == 0 {
            return fail("plateau_patience and smooth_window must be at least 1".into());
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Corpus and patch sampling

/// An eagerly loaded folder of rasters, sorted by file name.
pub struct Corpus {
    images: Vec<(String, Image)>,
}

impl Corpus {
    /// Loads every readable raster in `dir`. Binary PPM is always read; PNG
    /// when built with the `png` feature. Unreadable image files are errors,
    /// files with other extensions are skipped.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .collect();
        paths.sort();
        let mut images = Vec::new();
        for path in paths {
            if let Some(img) = read_raster(&path)? {
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("image")
                    .to_string();
                images.push((name, img));
            }
        }
        Corpus::from_images(images)
            .map_err(|_| Error::Config(format!("no readable images in {}", dir.display())))
    }

    pub fn from_images(images: Vec<(String, Image)>) -> Result<Corpus> {
        if images.is_empty() {
            return Err(Error::Config("empty image corpus".into()));
        }
        Ok(Corpus { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Image)> {
        self.images.iter().map(|(n, i)| (n.as_str(), i))
    }
}

/// Uniform (image, crop position) sampler over a corpus. Each crop consumes
/// exactly three RNG draws (image index, top y, left x), so a seed pins the
/// whole sequence.
pub struct PatchSampler<'a> {
    corpus: &'a Corpus,
    patch: usize,
    rng: ChaCha8Rng,
}

impl<'a> PatchSampler<'a> {
    pub fn new(corpus: &'a Corpus, patch: usize, seed: u64) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        for (name, img) in corpus.iter() {
            if img.w < patch || img.h < patch {
                return Err(Error::Config(format!(
                    "patch size {patch} exceeds image \"{name}\" ({}x{})",
                    img.w, img.h
                )));
            }
        }
        Ok(PatchSampler { corpus, patch, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Draws the next crop as (image index, left x, top y).
    pub fn next_crop(&mut self) -> (usize, usize, usize) {
        let idx = self.rng.gen_range(0..self.corpus.len());
        let img = &self.corpus.images[idx].1;
        let y = self.rng.gen_range(0..=img.h - self.patch);
        let x = self.rng.gen_range(0..=img.w - self.patch);
        (idx, x, y)
    }

    /// Next batch as an (n,3,p,p) RGB tensor on the 0..255 scale.
    pub fn next_batch<R: Real>(&mut self, n: usize) -> Tensor<R> {
        let p = self.patch;
        let mut data = Vec::with_capacity(n * 3 * p * p);
        for _ in 0..n {
            let (idx, x, y) = self.next_crop();
            let img = &self.corpus.images[idx].1;
            for c in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        data.push(R::from_f64(img.rgb[((y + dy) * img.w + x + dx) * 3 + c] as f64));
                    }
                }
            }
        }
        Tensor::constant(Shape::new(n, 3, p, p), data)
    }
}

// ---------------------------------------------------------------------------
// Loss

/// Quantization stand-in used by the forward pass.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum QuantMode {
    /// Additive uniform noise in [-1/2, 1/2): the differentiable training
    /// proxy for unit-step rounding.
    Noise,
    /// Real rounding, detached from the graph. Deterministic; used when
    /// measuring a model rather than training it.
    Round,
}

/// Adds independent uniform noise in [-1/2, 1/2) to every coefficient. Bands
/// are visited in pyramid order, so a seeded stream reproduces exactly.
pub fn noise_quantize<R: Real>(pyr: &Pyramid<R>, rng: &mut ChaCha8Rng) -> Pyramid<R> {
    pyr.map(|_, t| {
        let noise: Vec<R> =
            (0..t.shape().numel()).map(|_| R::from_f64(rng.gen::<f64>() - 0.5)).collect();
        t.add(&Tensor::constant(t.shape(), noise))
    })
}

/// `rate_bits / num_pixels + lambda * MSE(x, recon)`, where pixels are
/// counted per spatial position (N*H*W) and MSE is on the 0..255 RGB scale.
pub fn rd_loss<R: Real>(
    x: &Tensor<R>,
    recon: &Tensor<R>,
    rate_bits: &Tensor<R>,
    lambda: f64,
) -> Tensor<R> {
    let s = x.shape();
    let px = (s.n * s.h * s.w) as f64;
    let diff = x.sub(recon);
    let mse = diff.mul(&diff).mean_all();
    rate_bits
        .mul_scalar(R::from_f64(1.0 / px))
        .add(&mse.mul_scalar(R::from_f64(lambda)))
}

/// One rate-distortion forward pass over a batch.
pub struct LossParts<R: Real> {
    /// The scalar objective, connected to every trainable parameter when the
    /// mode is [`QuantMode::Noise`].
    pub loss: Tensor<R>,
    /// Model rate over all planes and subbands, in bits.
    pub rate_bits: f64,
    /// Rate divided by batch pixel count.
    pub bpp: f64,
    /// Mean squared reconstruction error on the 0..255 scale.
    pub mse: f64,
}

pub fn forward_loss<R: Real>(
    sys: &CodecSystem<R>,
    rgb: &Tensor<R>,
    lambda: f64,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> LossParts<R> {
    let ycc = rgb_to_ycbcr(rgb);
    let mut rate = Tensor::scalar(R::ZERO);
    let mut planes = Vec::with_capacity(3);
    for p in ColorPlane::ALL {
        let pc = sys.plane(p);
        let pyr = pc.analyze(&ycc.narrow_ch(p.index(), 1));
        let q = match mode {
            QuantMode::Noise => noise_quantize(&pyr, rng),
            QuantMode::Round => quantize_pyramid(&pyr),
        };
        rate = rate.add(&pc.em.rate_bits(&q));
        planes.push(pc.synthesize(&q));
    }
    let recon = ycbcr_to_rgb(&Tensor::concat_ch(&planes));

    let s = rgb.shape();
    let px = (s.n * s.h * s.w) as f64;
    let diff = rgb.sub(&recon);
    let mse = diff.mul(&diff).mean_all();
    let loss = rate
        .mul_scalar(R::from_f64(1.0 / px))
        .add(&mse.mul_scalar(R::from_f64(lambda)));
    let rate_bits = rate.item().to_f64();
    LossParts { loss, rate_bits, bpp: rate_bits / px, mse: mse.item().to_f64() }
}

// ---------------------------------------------------------------------------
// Optimization loop

/// Halves the learning rate when the smoothed loss stops improving.
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler { factor, patience, min_lr, best: f64::INFINITY, stale: 0 }
    }

    /// Feeds one smoothed-loss observation; returns the learning rate to use
    /// next given the current one.
    pub fn observe(&mut self, smoothed: f64, lr: f64) -> f64 {
        if smoothed < self.best {
            self.best = smoothed;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale < self.patience {
            return lr;
        }
        self.stale = 0;
        (lr * self.factor).max(self.min_lr)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
    pub lr: f64,
}

pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub final_lr: f64,
    /// Final weights, `model.lwcp` under the output directory.
    pub checkpoint: PathBuf,
    /// Per-step trace, `loss.csv` under the output directory.
    pub loss_csv: PathBuf,
}

/// Reads the corpus named by the config and trains `sys` in place.
pub fn train<R: Real>(cfg: &TrainConfig, sys: &CodecSystem<R>, out_dir: &Path) -> Result<TrainReport> {
    let corpus = Corpus::load(&cfg.corpus)?;
    run_training(cfg, sys, &corpus, out_dir)
}

/// Training loop on an already loaded corpus. Fixed seeds give bitwise
/// identical traces and checkpoints across runs.
pub fn run_training<R: Real>(
    cfg: &TrainConfig,
    sys: &CodecSystem<R>,
    corpus: &Corpus,
    out_dir: &Path,
) -> Result<TrainReport> {
    let wanted = cfg.codec_config()?;
    if sys.cfg != wanted {
        return Err(Error::Config(format!(
            "config trains {} at {} levels but the system is {} at {} levels",
            wanted.name(),
            wanted.levels,
            sys.cfg.name(),
            sys.cfg.levels
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sampler = PatchSampler::new(corpus, cfg.patch_size, cfg.seed)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let mut opt = Adam::new(
        sys.params().into_iter().map(|(_, t)| t).collect(),
        cfg.learning_rate,
    );
    let mut sched =
        PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience, cfg.min_learning_rate);

    let mut trace = Vec::with_capacity(cfg.steps);
    let mut window_sum = 0.0;
    for step in 0..cfg.steps {
        let batch = sampler.next_batch::<R>(cfg.batch_size);
        let parts = forward_loss(sys, &batch, cfg.lambda, QuantMode::Noise, &mut noise_rng);
        let loss = parts.loss.item().to_f64();
        if !loss.is_finite() {
            return Err(Error::Other(format!("loss diverged at step {step}: {loss}")));
        }
        opt.zero_grad();
        parts.loss.backward();
        opt.step();
        trace.push(TraceRow { step, loss, bpp: parts.bpp, mse: parts.mse, lr: opt.lr() });
        window_sum += loss;
        if (step + 1) % cfg.smooth_window == 0 {
            let mean = window_sum / cfg.smooth_window as f64;
            window_sum = 0.0;
            let next = sched.observe(mean, opt.lr());
            opt.set_lr(next);
        }
    }

    let checkpoint = out_dir.join("model.lwcp");
    sys.save(&checkpoint)?;
    let loss_csv = out_dir.join("loss.csv");
    write_loss_csv(&loss_csv, &trace)?;
    Ok(TrainReport { final_lr: opt.lr(), trace, checkpoint, loss_csv })
}

/// `step,loss,bpp_estimate,mse,learning_rate` rows, one per step.
pub fn write_loss_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut s = String::from("step,loss,bpp_estimate,mse,learning_rate\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss, r.bpp, r.mse, r.lr));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Evaluation with the real coder

/// Measured performance of one model on one image.
#[derive(Clone, Debug)]
pub struct RDPoint {
    pub image: String,
    /// Bits per pixel of the complete emitted stream (header included).
    pub bpp: f64,
    /// PSNR of the decoded raster against the original, in dB. Infinite if
    /// the reconstruction is exact, which lossy settings do not produce.
    pub psnr_db: f64,
    /// Payload bits per subband, color planes aggregated, coding order.
    pub subband_bits: Vec<(SubbandRef, u64)>,
}

/// PSNR between two equally sized rasters, over all RGB samples.
pub fn psnr_db(a: &Image, b: &Image) -> f64 {
    assert_eq!((a.w, a.h), (b.w, b.h), "resolution mismatch");
    let se: f64 = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.rgb.len() as f64;
    10.0 * (255.0f64 * 255.0 / mse).log10()
}

/// Encodes and decodes every corpus image with the real coder and measures
/// actual stream bytes and decoded PSNR.
pub fn evaluate<R: Real>(sys: &CodecSystem<R>, corpus: &Corpus) -> Result<Vec<RDPoint>> {
    let order = SubbandRef::coding_order(sys.cfg.levels);
    let mut points = Vec::with_capacity(corpus.len());
    for (name, img) in corpus.iter() {
        let enc = encode_image(sys, img)?;
        let decoded = decode_image(sys, &enc.bytes)?;
        let mut bits: Vec<(SubbandRef, u64)> = order.iter().map(|r| (*r, 0)).collect();
        for c in &enc.chunks {
            let slot = bits.iter_mut().find(|(r, _)| *r == c.band).expect("band in order");
            slot.1 += 8 * c.bytes as u64;
        }
        points.push(RDPoint {
            image: name.to_string(),
            bpp: (8 * enc.bytes.len()) as f64 / (img.w * img.h) as f64,
            psnr_db: psnr_db(img, &decoded),
            subband_bits: bits,
        });
    }
    Ok(points)
}

/// `image,bpp,psnr_db,bits_ll,bits_lh4,...` rows, subband columns in coding
/// order (low-pass, then detail levels coarse to fine).
pub fn write_rd_csv(path: &Path, points: &[RDPoint]) -> Result<()> {
    let Some(first) = points.first() else {
        return Err(Error::Config("no rate-distortion points to write".into()));
    };
    let mut s = String::from("image,bpp,psnr_db");
    for (r, _) in &first.subband_bits {
        s.push_str(",bits_");
        s.push_str(&r.label());
    }
    s.push('\n');
    for p in points {
        s.push_str(&format!("{},{},{}", p.image, p.bpp, p.psnr_db));
        for (_, b) in &p.subband_bits {
            s.push_str(&format!(",{b}"));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
