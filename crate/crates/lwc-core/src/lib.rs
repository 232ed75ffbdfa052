//! Trainable lifting-based wavelet image codec.
//!
//! The pipeline: RGB -> YCbCr -> per-channel 4-level lifting DWT (classical
//! CDF 9/7 taps or learned CNN predict/update operators) -> learned subband
//! scaling -> scalar quantization -> conditional entropy models -> byte
//! oriented rANS coding. Everything runs on a small NCHW tensor engine with
//! reverse-mode autodiff so the whole chain trains end to end against a
//! rate-distortion loss.
//!
//! Crate layout mirrors the pipeline: [`tensor`] (autodiff engine), [`nn`]
//! (conv/GDN layers), [`lifting`] (wavelet stages and pyramids), [`scaling`]
//! (subband gain networks), [`entropy`] (factorized and conditional
//! coefficient models), [`rans`] (entropy coder), [`codec`] (bitstream
//! encode/decode), [`train`] (optimization loop and evaluation).

pub mod ckpt;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod lifting;
pub mod nn;
pub mod ppm;
pub mod rans;
pub mod scaling;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;

/// Coding constants shared by encoder and decoder. They are also recorded in
/// every bitstream header so future format revisions can change them without
/// breaking old streams.
pub mod constants {
    /// Pyramid depth: the low-pass band is split this many times.
    pub const LEVELS: usize = 4;
    /// Probability floor applied to every coefficient probability.
    pub const P_FLOOR: f64 = 1.0 / 65536.0;
    /// Smallest representable Gaussian scale.
    pub const SIGMA_MIN: f32 = 1e-3;
    /// Largest representable Gaussian scale.
    pub const SIGMA_MAX: f32 = 1e3;
    /// Gaussian symbol alphabet is `[-ALPHABET_HALF, ALPHABET_HALF]` plus escape.
    pub const ALPHABET_HALF: i32 = 64;
    /// Number of log-spaced sigma bins in the shared table cache.
    pub const SIGMA_BINS: usize = 64;
    /// rANS cumulative-frequency precision in bits.
    pub const PRECISION: u32 = 16;
    /// Escape payload width in bits (sent as two raw 16-bit pushes).
    pub const ESCAPE_BITS: u32 = 32;
}
