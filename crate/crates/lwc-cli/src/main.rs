//! Command line front end: encode/decode/inspect coded streams, train
//! models, and measure rate-distortion performance.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lwc_core::codec::{decode_image, encode_image, inspect, CodecConfig, CodecSystem};
use lwc_core::ppm::{read_raster, write_ppm};
use lwc_core::train::{evaluate, train, write_rd_csv, Corpus, RDPoint, TrainConfig};

#[derive(Parser)]
#[command(name = "lwc", version, about = "Trainable wavelet image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a raster (PPM, or PNG when built in) into a coded stream
    Encode(EncodeArgs),
    /// Decompress a coded stream into a binary PPM raster
    Decode(DecodeArgs),
    /// Print the header and chunk table of a coded stream
    Inspect {
        /// Coded stream file
        bitstream: PathBuf,
    },
    /// Train a codec described by a TOML config file
    Train {
        /// Training configuration (see `lwc_core::train::TrainConfig`)
        #[arg(long)]
        config: PathBuf,
        /// Output directory for model.lwcp and loss.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode and decode an image folder, reporting bpp and PSNR per image
    Eval(EvalArgs),
    /// Evaluate every checkpoint in a folder over one dataset
    Rdcurve(RdcurveArgs),
}

/// Flags shared by every command that needs a model instance.
#[derive(Args)]
struct ModelArgs {
    /// Codec variant: cdf97|llb + fem|iscem|iiscem|ipiscem, e.g. llb+iiscem
    #[arg(long, default_value = "cdf97+fem")]
    codec: String,
    /// Pyramid depth
    #[arg(long, default_value_t = 4)]
    levels: usize,
    /// Weights file; a fresh seeded model is used when omitted
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed for fresh model weights (checkpoints override them all)
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self) -> Result<CodecConfig> {
        let mut cfg = CodecConfig::parse(&self.codec)
            .ok_or_else(|| anyhow!("unknown codec \"{}\"", self.codec))?;
        cfg.levels = self.levels;
        Ok(cfg)
    }

    fn build(&self) -> Result<CodecSystem<f32>> {
        let sys = CodecSystem::new(self.config()?, self.seed);
        if let Some(path) = &self.checkpoint {
            sys.load(path).with_context(|| format!("loading {}", path.display()))?;
        }
        Ok(sys)
    }
}

#[derive(Args)]
struct EncodeArgs {
    /// Raster to compress
    #[arg(long)]
    input: PathBuf,
    /// Coded stream to write
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct DecodeArgs {
    /// Coded stream to read
    #[arg(long)]
    input: PathBuf,
    /// PPM raster to write
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Folder of rasters to measure
    #[arg(long)]
    dataset: PathBuf,
    /// Weights file
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV: image,bpp,psnr_db,bits_<subband>...
    #[arg(long)]
    csv: PathBuf,
    /// Codec variant the checkpoint belongs to
    #[arg(long, default_value = "cdf97+fem")]
    codec: String,
    /// Pyramid depth
    #[arg(long, default_value_t = 4)]
    levels: usize,
}

#[derive(Args)]
struct RdcurveArgs {
    /// Folder of .lwcp checkpoints, all for the same codec variant
    #[arg(long)]
    checkpoints: PathBuf,
    /// Folder of rasters to measure
    #[arg(long)]
    dataset: PathBuf,
    /// Output CSV: checkpoint,image,bpp,psnr_db,bits_<subband>...
    #[arg(long)]
    csv: PathBuf,
    /// Codec variant the checkpoints belong to
    #[arg(long, default_value = "cdf97+fem")]
    codec: String,
    /// Pyramid depth
    #[arg(long, default_value_t = 4)]
    levels: usize,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Encode(args) => encode(args),
        Cmd::Decode(args) => decode(args),
        Cmd::Inspect { bitstream } => inspect_stream(&bitstream),
        Cmd::Train { config, out } => train_cmd(&config, &out),
        Cmd::Eval(args) => eval_cmd(args),
        Cmd::Rdcurve(args) => rdcurve(args),
    }
}

fn encode(args: EncodeArgs) -> Result<()> {
    let img = read_raster(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?
        .ok_or_else(|| anyhow!("{}: unsupported raster format", args.input.display()))?;
    let sys = args.model.build()?;
    let enc = encode_image(&sys, &img)?;
    fs::write(&args.output, &enc.bytes)
        .with_context(|| format!("writing {}", args.output.display()))?;
    let bpp = (8 * enc.bytes.len()) as f64 / (img.w * img.h) as f64;
    println!(
        "{} {}x{} -> {} bytes ({bpp:.4} bpp, {})",
        args.input.display(),
        img.w,
        img.h,
        enc.bytes.len(),
        sys.cfg.name(),
    );
    Ok(())
}

fn decode(args: DecodeArgs) -> Result<()> {
    let bytes = fs::read(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let sys = args.model.build()?;
    let img = decode_image(&sys, &bytes)?;
    write_ppm(&args.output, &img)?;
    println!("{} -> {} ({}x{})", args.input.display(), args.output.display(), img.w, img.h);
    Ok(())
}

fn inspect_stream(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let info = inspect(&bytes)?;
    let px = (info.width * info.height) as f64;
    println!(
        "LWC1 v{}  {}+{}  {} levels  {}x{}  model {:016x}",
        info.version,
        info.filters.as_str(),
        info.entropy.as_str(),
        info.levels,
        info.width,
        info.height,
        info.model_hash,
    );
    println!(
        "{} chunks, {} payload bytes, {} total bytes, {:.4} bpp",
        info.chunks.len(),
        info.payload_bytes(),
        bytes.len(),
        (8 * bytes.len()) as f64 / px,
    );
    for c in &info.chunks {
        println!("  {:2} {:4}  {:>9} bytes", c.plane.name(), c.band.label(), c.bytes);
    }
    Ok(())
}

fn train_cmd(config: &Path, out: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let sys = CodecSystem::<f32>::new(cfg.codec_config()?, cfg.seed);
    let report = train(&cfg, &sys, out)?;
    let last = report.trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "{} steps of {}, final loss {last:.4}, lr {:.2e}",
        report.trace.len(),
        cfg.codec,
        report.final_lr,
    );
    println!("checkpoint: {}", report.checkpoint.display());
    println!("loss trace: {}", report.loss_csv.display());
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let model = ModelArgs {
        codec: args.codec,
        levels: args.levels,
        checkpoint: Some(args.checkpoint),
        seed: 0,
    };
    let sys = model.build()?;
    let corpus = Corpus::load(&args.dataset)?;
    let points = evaluate(&sys, &corpus)?;
    write_rd_csv(&args.csv, &points)?;
    print_summary(&points);
    println!("per-image results: {}", args.csv.display());
    Ok(())
}

fn rdcurve(args: RdcurveArgs) -> Result<()> {
    let mut ckpts: Vec<PathBuf> = fs::read_dir(&args.checkpoints)
        .with_context(|| format!("reading {}", args.checkpoints.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "lwcp"))
        .collect();
    ckpts.sort();
    if ckpts.is_empty() {
        bail!("no .lwcp checkpoints in {}", args.checkpoints.display());
    }
    let corpus = Corpus::load(&args.dataset)?;

    let mut rows = String::new();
    let mut header_done = false;
    for path in &ckpts {
        let model = ModelArgs {
            codec: args.codec.clone(),
            levels: args.levels,
            checkpoint: Some(path.clone()),
            seed: 0,
        };
        let sys = model.build()?;
        let points = evaluate(&sys, &corpus)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        if !header_done {
            rows.push_str("checkpoint,image,bpp,psnr_db");
            for (r, _) in &points[0].subband_bits {
                rows.push_str(",bits_");
                rows.push_str(&r.label());
            }
            rows.push('\n');
            header_done = true;
        }
        for p in &points {
            rows.push_str(&format!("{stem},{},{},{}", p.image, p.bpp, p.psnr_db));
            for (_, b) in &p.subband_bits {
                rows.push_str(&format!(",{b}"));
            }
            rows.push('\n');
        }
        print!("{stem}: ");
        print_summary(&points);
    }
    fs::write(&args.csv, rows).with_context(|| format!("writing {}", args.csv.display()))?;
    println!("merged results: {}", args.csv.display());
    Ok(())
}

fn print_summary(points: &[RDPoint]) {
    let n = points.len() as f64;
    let bpp = points.iter().map(|p| p.bpp).sum::<f64>() / n;
    let psnr = points.iter().map(|p| p.psnr_db).sum::<f64>() / n;
    println!("{} images, mean {bpp:.4} bpp, mean {psnr:.2} dB", points.len());
}
