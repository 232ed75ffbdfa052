//! Byte-oriented range asymmetric numeral system coder over 16-bit
//! cumulative frequency tables, plus the escape-augmented integer tables the
//! codec codes coefficients with.
//!
//! The encoder buffers `(freq, cum)` pairs in forward symbol order and
//! processes them in reverse at [`RansEncoder::finish`], as the construction
//! requires; the finished byte vector is reversed once so the decoder reads
//! strictly forward. State is 64-bit, renormalized a byte at a time, and kept
//! in `[2^32, 2^40)` between symbols, so the final flush is exactly 5 bytes
//! and an empty stream costs only those 5 bytes.

use crate::constants::{ALPHABET_HALF, ESCAPE_BITS, PRECISION, SIGMA_BINS, SIGMA_MAX, SIGMA_MIN};
use crate::{Error, Result};

/// Frequencies in every table sum to exactly this.
pub const TOTAL_FREQ: u32 = 1 << PRECISION;

const SLOT_MASK: u64 = TOTAL_FREQ as u64 - 1;
const STATE_LOWER: u64 = 1 << 32;
const STATE_BYTES: usize = 5;

/// Cumulative frequency table. Every symbol has frequency >= 1, so every
/// symbol stays decodable no matter how small its modeled probability.
#[derive(Clone)]
pub struct CdfTable {
    freq: Vec<u32>,
    /// Prefix sums with a final sentinel: `cum[n] == TOTAL_FREQ`.
    cum: Vec<u32>,
}

impl CdfTable {
    /// Quantizes a probability vector to integer frequencies summing to
    /// exactly `TOTAL_FREQ`: one guaranteed count per symbol, the remainder
    /// split proportionally, leftovers assigned by largest remainder with
    /// index order breaking ties. Fully deterministic for identical input.
    pub fn from_pmf(pmf: &[f64]) -> CdfTable {
        let n = pmf.len();
        assert!(n >= 1, "empty probability vector");
        assert!(n as u32 <= TOTAL_FREQ, "alphabet larger than the frequency space");
        let clamped: Vec<f64> = pmf.iter().map(|&p| if p.is_finite() && p > 0.0 { p } else { 0.0 }).collect();
        let total: f64 = clamped.iter().sum();
        let spare = TOTAL_FREQ - n as u32;
        let mut freq = vec![1u32; n];
        let mut rem: Vec<(f64, usize)> = Vec::with_capacity(n);
        let mut assigned = 0u32;
        for (i, &p) in clamped.iter().enumerate() {
            let share = if total > 0.0 { p / total * spare as f64 } else { spare as f64 / n as f64 };
            let fl = share.floor();
            freq[i] += fl as u32;
            assigned += fl as u32;
            rem.push((share - fl, i));
        }
        rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, i) in rem.iter().take((spare - assigned) as usize) {
            freq[i] += 1;
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        for &f in &freq {
            cum.push(acc);
            acc += f;
        }
        cum.push(acc);
        debug_assert_eq!(acc, TOTAL_FREQ);
        CdfTable { freq, cum }
    }

    pub fn n_symbols(&self) -> usize {
        self.freq.len()
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.freq[s]
    }

    pub fn cum(&self, s: usize) -> u32 {
        self.cum[s]
    }

    /// Symbol owning a slot value in `[0, TOTAL_FREQ)`.
    pub fn find(&self, slot: u32) -> usize {
        debug_assert!(slot < TOTAL_FREQ);
        self.cum.partition_point(|&c| c <= slot) - 1
    }

    /// Code length of a symbol under this table, in bits.
    pub fn ideal_bits(&self, s: usize) -> f64 {
        PRECISION as f64 - (self.freq[s] as f64).log2()
    }
}

/// Buffers symbols in forward order; see the module docs for the layout.
#[derive(Default)]
pub struct RansEncoder {
    pending: Vec<(u32, u32)>,
}

impl RansEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues one symbol given its frequency and cumulative frequency.
    pub fn push(&mut self, freq: u32, cum: u32) {
        debug_assert!(freq >= 1 && cum + freq <= TOTAL_FREQ);
        self.pending.push((freq, cum));
    }

    pub fn push_symbol(&mut self, table: &CdfTable, s: usize) {
        self.push(table.freq(s), table.cum(s));
    }

    /// Queues a raw 16-bit value at a flat 16 bits of cost.
    pub fn push_raw16(&mut self, v: u32) {
        debug_assert!(v < TOTAL_FREQ);
        self.push(1, v);
    }

    /// Queues a raw 32-bit value as two 16-bit halves, high half first.
    pub fn push_raw32(&mut self, v: u32) {
        self.push_raw16(v >> 16);
        self.push_raw16(v & 0xFFFF);
    }

    pub fn symbol_count(&self) -> usize {
        self.pending.len()
    }

    pub fn finish(self) -> Vec<u8> {
        let mut bytes = Vec::new();
        let mut x = STATE_LOWER;
        for &(freq, cum) in self.pending.iter().rev() {
            let f = freq as u64;
            while x >= f << 24 {
                bytes.push((x & 0xFF) as u8);
                x >>= 8;
            }
            x = (x / f) << PRECISION | (cum as u64 + x % f);
        }
        for _ in 0..STATE_BYTES {
            bytes.push((x & 0xFF) as u8);
            x >>= 8;
        }
        debug_assert_eq!(x, 0);
        bytes.reverse();
        bytes
    }
}

pub struct RansDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    state: u64,
}

impl<'a> RansDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < STATE_BYTES {
            return Err(Error::Decode(format!(
                "stream holds {} bytes, shorter than the {STATE_BYTES}-byte coder state",
                bytes.len()
            )));
        }
        let mut state = 0u64;
        for &b in &bytes[..STATE_BYTES] {
            state = state << 8 | b as u64;
        }
        if !(STATE_LOWER..1 << 40).contains(&state) {
            return Err(Error::Decode(format!("corrupt initial coder state {state:#x}")));
        }
        Ok(RansDecoder { bytes, pos: STATE_BYTES, state })
    }

    /// Slot value identifying the next symbol; resolve it against the same
    /// table the encoder used, then call [`RansDecoder::advance`].
    pub fn slot(&self) -> u32 {
        (self.state & SLOT_MASK) as u32
    }

    pub fn advance(&mut self, freq: u32, cum: u32) -> Result<()> {
        let slot = self.state & SLOT_MASK;
        if slot < cum as u64 || slot >= (cum + freq) as u64 {
            return Err(Error::Decode(format!(
                "slot {slot} outside symbol range [{cum}, {}) at byte {}",
                cum + freq,
                self.pos
            )));
        }
        self.state = freq as u64 * (self.state >> PRECISION) + slot - cum as u64;
        while self.state < STATE_LOWER {
            if self.pos >= self.bytes.len() {
                return Err(Error::Decode(format!(
                    "stream exhausted at byte {} with symbols still pending",
                    self.pos
                )));
            }
            self.state = self.state << 8 | self.bytes[self.pos] as u64;
            self.pos += 1;
        }
        Ok(())
    }

    /// Decodes a symbol against `table` in one step.
    pub fn read_symbol(&mut self, table: &CdfTable) -> Result<usize> {
        let s = table.find(self.slot());
        self.advance(table.freq(s), table.cum(s))?;
        Ok(s)
    }

    pub fn read_raw16(&mut self) -> Result<u32> {
        let v = self.slot();
        self.advance(1, v)?;
        Ok(v)
    }

    pub fn read_raw32(&mut self) -> Result<u32> {
        let hi = self.read_raw16()?;
        let lo = self.read_raw16()?;
        Ok(hi << 16 | lo)
    }

    /// Verifies the stream was consumed exactly: the state must have returned
    /// to its initial value with no bytes left over.
    pub fn finish(&self) -> Result<()> {
        if self.state != STATE_LOWER {
            return Err(Error::Decode(format!(
                "coder state {:#x} did not return to baseline; wrong tables or corrupt stream",
                self.state
            )));
        }
        if self.pos != self.bytes.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes after the final symbol",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Integer-value table over `[lo, lo + n_regular)` with a final escape
/// symbol; escaped values ride as a raw 32-bit payload after the escape.
pub struct EscapeTable {
    table: CdfTable,
    lo: i64,
}

impl EscapeTable {
    /// `pmf` lists the regular symbols' probabilities followed by the escape
    /// probability; `lo` is the integer value of the first regular symbol.
    pub fn new(pmf_with_escape: &[f64], lo: i64) -> Self {
        assert!(pmf_with_escape.len() >= 2, "need at least one regular symbol plus escape");
        EscapeTable { table: CdfTable::from_pmf(pmf_with_escape), lo }
    }

    pub fn n_regular(&self) -> usize {
        self.table.n_symbols() - 1
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn contains(&self, v: i64) -> bool {
        v >= self.lo && v < self.lo + self.n_regular() as i64
    }

    pub fn encode_value(&self, enc: &mut RansEncoder, v: i64) {
        if self.contains(v) {
            enc.push_symbol(&self.table, (v - self.lo) as usize);
        } else {
            enc.push_symbol(&self.table, self.n_regular());
            enc.push_raw32(v as i32 as u32);
        }
    }

    pub fn decode_value(&self, dec: &mut RansDecoder) -> Result<i64> {
        let s = dec.read_symbol(&self.table)?;
        if s < self.n_regular() {
            Ok(self.lo + s as i64)
        } else {
            Ok(dec.read_raw32()? as i32 as i64)
        }
    }

    /// Table-quantized code length of a value, in bits.
    pub fn ideal_bits(&self, v: i64) -> f64 {
        if self.contains(v) {
            self.table.ideal_bits((v - self.lo) as usize)
        } else {
            self.table.ideal_bits(self.n_regular()) + ESCAPE_BITS as f64
        }
    }
}

/// Zero-mean Gaussian tables, one per log-spaced sigma bin. Encoder and
/// decoder construct bins and tables through this one type, so a sigma value
/// always lands in the same table on both sides.
pub struct SigmaTableCache {
    tables: Vec<EscapeTable>,
}

impl SigmaTableCache {
    pub fn new() -> Self {
        let tables = (0..SIGMA_BINS)
            .map(|bin| {
                let sigma = Self::bin_sigma(bin);
                let half = ALPHABET_HALF as i64;
                let mut pmf: Vec<f64> = (-half..=half)
                    .map(|v| {
                        let up = normal_cdf_f64((v as f64 + 0.5) / sigma);
                        let dn = normal_cdf_f64((v as f64 - 0.5) / sigma);
                        (up - dn).max(0.0)
                    })
                    .collect();
                let tail = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
                pmf.push(tail);
                EscapeTable::new(&pmf, -half)
            })
            .collect();
        SigmaTableCache { tables }
    }

    /// Bin index of a sigma value; pure function shared by both coder sides.
    pub fn bin_of(sigma: f32) -> usize {
        let s = (sigma as f64).clamp(SIGMA_MIN as f64, SIGMA_MAX as f64);
        let t = (s / SIGMA_MIN as f64).ln() / (SIGMA_MAX as f64 / SIGMA_MIN as f64).ln();
        ((t * SIGMA_BINS as f64) as usize).min(SIGMA_BINS - 1)
    }

    /// Geometric center of a bin, the sigma its table is built from.
    pub fn bin_sigma(bin: usize) -> f64 {
        let lo = SIGMA_MIN as f64;
        let hi = SIGMA_MAX as f64;
        lo * (hi / lo).powf((bin as f64 + 0.5) / SIGMA_BINS as f64)
    }

    pub fn table_for(&self, sigma: f32) -> &EscapeTable {
        &self.tables[Self::bin_of(sigma)]
    }
}

impl Default for SigmaTableCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean quantization shared by encode and decode: coefficients are coded as
/// offsets from the rounded mean, with the same tie rule as the quantizer.
pub fn round_mu(mu: f32) -> i64 {
    mu.round() as i64
}

pub fn encode_gaussian(enc: &mut RansEncoder, cache: &SigmaTableCache, v: i64, mu: f32, sigma: f32) {
    cache.table_for(sigma).encode_value(enc, v - round_mu(mu));
}

pub fn decode_gaussian(dec: &mut RansDecoder, cache: &SigmaTableCache, mu: f32, sigma: f32) -> Result<i64> {
    Ok(cache.table_for(sigma).decode_value(dec)? + round_mu(mu))
}

fn normal_cdf_f64(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Appends `[u32 little-endian length][payload]`.
pub fn write_chunk(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Reads the chunk starting at `*pos`, advancing `*pos` past it.
pub fn read_chunk<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    let hdr = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::Decode(format!("truncated chunk length at byte {}", *pos)))?;
    let len = u32::from_le_bytes(hdr.try_into().unwrap()) as usize;
    let start = *pos + 4;
    let payload = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Decode(format!("chunk at byte {} claims {len} bytes past the end", *pos)))?;
    *pos = start + len;
    Ok(payload)
}
