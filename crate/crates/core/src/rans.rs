//! rANS entropy coder with 16-bit frequency tables.
//!
//! The state is a u64 that starts at zero and is renormalized in 32-bit
//! words. Words are emitted only from states of at least 2^48, so the
//! decoder can refill whenever its state drops below 2^32 and words remain.
//!
//! Stream layout: the final encoder state as big-endian bytes with leading
//! zeros stripped, then the emitted words (little-endian) in reverse
//! emission order. A state that had to flush words is at least 2^32 and so
//! takes 5 to 8 bytes; those lengths have distinct residues mod 4, which
//! lets the decoder split the two parts from the total length alone.
//!
//! Overhead against the ideal code length is at most 24 bits per stream:
//! up to 16 for the first symbol pushed onto the empty state and up to 8
//! for byte-aligning the flushed state.

use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
const WORD_BITS: u32 = 32;
const LOWER: u64 = 1 << WORD_BITS;

/// Cumulative frequency table over consecutive integer symbols.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CdfTable {
    pub symbol_offset: i32,
    /// `symbol_count + 1` entries, strictly increasing from 0 to 2^16.
    pub cumulative: Vec<u32>,
}

impl CdfTable {
    pub fn symbol_count(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn min_symbol(&self) -> i32 {
        self.symbol_offset
    }

    pub fn max_symbol(&self) -> i32 {
        self.symbol_offset + self.symbol_count() as i32 - 1
    }

    pub fn frequencies(&self) -> Vec<u32> {
        self.cumulative.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `(start, freq)` of `symbol`.
    pub fn range(&self, symbol: i32) -> Result<(u32, u32)> {
        if symbol < self.min_symbol() || symbol > self.max_symbol() {
            return Err(Error::SymbolOutOfRange {
                symbol: i64::from(symbol),
                min: i64::from(self.min_symbol()),
                max: i64::from(self.max_symbol()),
            });
        }
        let i = (symbol - self.symbol_offset) as usize;
        Ok((self.cumulative[i], self.cumulative[i + 1] - self.cumulative[i]))
    }

    /// Symbol whose slot range contains `slot`, with its `(start, freq)`.
    pub fn lookup(&self, slot: u32) -> (i32, u32, u32) {
        let i = self.cumulative.partition_point(|&c| c <= slot) - 1;
        let start = self.cumulative[i];
        (self.symbol_offset + i as i32, start, self.cumulative[i + 1] - start)
    }

    /// Model probability of `symbol` (`freq / 2^16`).
    pub fn probability(&self, symbol: i32) -> Result<f64> {
        let (_, f) = self.range(symbol)?;
        Ok(f64::from(f) / f64::from(TOTAL))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cumulative;
        if c.len() < 2 || c[0] != 0 || *c.last().unwrap() != TOTAL || c.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("cumulative table must rise strictly from 0 to 2^16".into()));
        }
        Ok(())
    }
}

/// Quantizes a distribution to integer frequencies summing to 2^16.
///
/// The scaled cumulative sums are rounded to the nearest integer; any
/// symbol left with zero frequency then takes one slot from the currently
/// largest symbol (lowest index on ties).
pub fn build_cdf(probabilities: &[f64], symbol_offset: i32) -> Result<CdfTable> {
    let n = probabilities.len();
    if n == 0 || n > TOTAL as usize {
        return Err(Error::InvalidArgument(format!("cannot build a table over {n} symbols")));
    }
    if let Some(p) = probabilities.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument(format!("negative or non-finite probability {p}")));
    }
    let sum: f64 = probabilities.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {sum}, expected 1")));
    }
    let scale = f64::from(TOTAL) / sum;
    let mut cumulative = Vec::with_capacity(n + 1);
    cumulative.push(0u32);
    let mut acc = 0.0f64;
    for (i, &p) in probabilities.iter().enumerate() {
        acc += p;
        let c = if i + 1 == n { TOTAL } else { ((acc * scale).round() as u32).min(TOTAL) };
        cumulative.push(c.max(*cumulative.last().unwrap()));
    }
    let mut freq: Vec<u32> = cumulative.windows(2).map(|w| w[1] - w[0]).collect();
    for i in 0..n {
        if freq[i] == 0 {
            let (j, _) = freq.iter().enumerate().fold((0, 0), |best, (j, &f)| if f > best.1 { (j, f) } else { best });
            freq[j] -= 1;
            freq[i] = 1;
        }
    }
    let mut cumulative = Vec::with_capacity(n + 1);
    cumulative.push(0);
    for f in freq {
        cumulative.push(cumulative.last().unwrap() + f);
    }
    let t = CdfTable { symbol_offset, cumulative };
    t.validate()?;
    Ok(t)
}

/// LIFO encoder. Symbols come out of [`RansDecoder`] in the reverse of
/// the order they were put in.
#[derive(Debug, Default)]
pub struct RansEncoder {
    state: u64,
    words: Vec<u32>,
}

impl RansEncoder {
    pub fn new() -> Self {
        RansEncoder::default()
    }

    /// Encodes the slot range `[start, start + freq)`.
    pub fn put(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= TOTAL);
        let f = u64::from(freq);
        if (self.state >> (64 - PRECISION_BITS)) >= f {
            self.words.push(self.state as u32);
            self.state >>= WORD_BITS;
        }
        self.state = ((self.state / f) << PRECISION_BITS) | (self.state % f + u64::from(start));
    }

    pub fn put_symbol(&mut self, symbol: i32, table: &CdfTable) -> Result<()> {
        let (s, f) = table.range(symbol)?;
        self.put(s, f);
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        let be = self.state.to_be_bytes();
        let skip = be.iter().take_while(|&&b| b == 0).count();
        let mut out = Vec::with_capacity(8 - skip + 4 * self.words.len());
        out.extend_from_slice(&be[skip..]);
        for w in self.words.iter().rev() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }
}

#[derive(Debug)]
pub struct RansDecoder<'a> {
    state: u64,
    words: &'a [u8],
}

impl<'a> RansDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let t = bytes.len();
        let state_len = if t <= 8 { t } else { 5 + (t - 5) % 4 };
        let mut state = 0u64;
        for &b in &bytes[..state_len] {
            state = (state << 8) | u64::from(b);
        }
        if t > 8 && state < LOWER {
            return Err(Error::CorruptStream("stream state below renormalization bound".into()));
        }
        Ok(RansDecoder { state, words: &bytes[state_len..] })
    }

    /// Current slot in `[0, 2^16)`.
    pub fn peek(&self) -> u32 {
        (self.state & u64::from(TOTAL - 1)) as u32
    }

    /// Removes the range `[start, start + freq)` that contains [`Self::peek`].
    pub fn advance(&mut self, start: u32, freq: u32) {
        let slot = u64::from(self.peek());
        self.state = u64::from(freq) * (self.state >> PRECISION_BITS) + slot - u64::from(start);
        if self.state < LOWER && !self.words.is_empty() {
            let (w, rest) = self.words.split_at(4);
            self.state = (self.state << WORD_BITS) | u64::from(u32::from_le_bytes([w[0], w[1], w[2], w[3]]));
            self.words = rest;
        }
    }

    pub fn get_symbol(&mut self, table: &CdfTable) -> i32 {
        let (sym, start, freq) = table.lookup(self.peek());
        self.advance(start, freq);
        sym
    }

    /// Checks that the stream was consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.state != 0 || !self.words.is_empty() {
            return Err(Error::CorruptStream(format!(
                "stream did not end cleanly (state {:#x}, {} bytes left)",
                self.state,
                self.words.len()
            )));
        }
        Ok(())
    }
}

/// Encodes `symbols[i]` with `tables[i]`.
pub fn rans_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::InvalidArgument(format!("{} symbols but {} tables", symbols.len(), tables.len())));
    }
    let mut enc = RansEncoder::new();
    for (s, t) in symbols.iter().zip(tables).rev() {
        enc.put_symbol(*s, t)?;
    }
    Ok(enc.finish())
}

/// Decodes `tables.len()` symbols and checks that the stream ends exactly.
pub fn rans_decode(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RansDecoder::new(bytes)?;
    let out = tables.iter().map(|t| dec.get_symbol(t)).collect();
    dec.finish()?;
    Ok(out)
}

/// Ideal code length in bits of `symbols` under the quantized tables.
pub fn cross_entropy_bits(symbols: &[i32], tables: &[&CdfTable]) -> Result<f64> {
    let mut bits = 0.0;
    for (s, t) in symbols.iter().zip(tables) {
        bits -= t.probability(*s)?.log2();
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_table() {
        let t = build_cdf(&[0.6, 0.2, 0.1, 0.1], 0).unwrap();
        assert_eq!(t.frequencies(), vec![39322, 13107, 6553, 6554]);
        assert_eq!(t.cumulative, vec![0, 39322, 52429, 58982, 65536]);
        assert_eq!(build_cdf(&[1.0], 0).unwrap().cumulative, vec![0, 65536]);
        assert_eq!(build_cdf(&[0.25; 4], 0).unwrap().frequencies(), vec![16384; 4]);
    }

    #[test]
    fn zero_mass_symbols_get_one_slot() {
        let t = build_cdf(&[1.0, 0.0, 0.0], -1).unwrap();
        assert_eq!(t.frequencies(), vec![65534, 1, 1]);
        assert!(build_cdf(&[1.5, -0.5], 0).is_err());
        assert!(build_cdf(&[0.3, 0.3], 0).is_err());
    }

    #[test]
    fn empty_stream_is_empty() {
        assert!(rans_encode(&[], &[]).unwrap().is_empty());
        assert!(rans_decode(&[], &[]).unwrap().is_empty());
    }

    #[test]
    fn round_trip_small() {
        let t = build_cdf(&[0.6, 0.2, 0.1, 0.1], 0).unwrap();
        let syms: Vec<i32> = (0..1000).map(|i| (i * 7) % 11 % 4).collect();
        let tabs = vec![&t; syms.len()];
        let bytes = rans_encode(&syms, &tabs).unwrap();
        assert_eq!(rans_decode(&bytes, &tabs).unwrap(), syms);
        let ideal = cross_entropy_bits(&syms, &tabs).unwrap();
        assert!((bytes.len() * 8) as f64 <= ideal + 24.0, "{} vs {ideal}", bytes.len() * 8);
    }

    #[test]
    fn out_of_range_symbol_rejected() {
        let t = build_cdf(&[0.5, 0.5], 0).unwrap();
        assert!(matches!(rans_encode(&[2], &[&t]), Err(Error::SymbolOutOfRange { .. })));
    }

    #[test]
    fn truncation_is_detected() {
        let t = build_cdf(&[0.6, 0.2, 0.1, 0.1], 0).unwrap();
        let syms: Vec<i32> = (0..500).map(|i| i % 4).collect();
        let tabs = vec![&t; syms.len()];
        let bytes = rans_encode(&syms, &tabs).unwrap();
        assert!(matches!(rans_decode(&bytes[..bytes.len() - 1], &tabs), Err(Error::CorruptStream(_))));
    }
}
