//! Tensor-level entropy coding on top of [`crate::rans`].
//!
//! Latent elements use Gaussian tables indexed by a snapped scale (64
//! log-spaced values) and the fractional part of a snapped mean (1/256
//! grid); the coded symbol is the offset of `ŷ` from the integer part of
//! the mean. Symbols outside `±ceil(7σ)` go through two escape symbols
//! followed by the overflow in uniform 3-bit chunks with a continuation
//! flag. Hyper-latents use one table per channel built from the prior.

use std::sync::OnceLock;

use crate::autodiff::{Shape, Tensor, FACTORIZED_MAX, FACTORIZED_MIN, FACTORIZED_SYMBOLS};
use crate::entropy::GaussianParams;
use crate::error::{dim_err, Error, Result};
use crate::prob;
use crate::rans::{build_cdf, CdfTable, RansDecoder, RansEncoder, TOTAL};

pub const SCALE_COUNT: usize = 64;
pub const SCALE_MIN: f64 = 0.11;
pub const SCALE_MAX: f64 = 64.0;
pub const MEAN_STEPS: usize = 256;
const TAIL_SIGMAS: f64 = 7.0;
const CHUNK_BITS: u32 = 3;
const CHUNK_FREQ: u32 = TOTAL / (1 << (CHUNK_BITS + 1));

fn log_step() -> f64 {
    (libm::log(SCALE_MAX) - libm::log(SCALE_MIN)) / (SCALE_COUNT - 1) as f64
}

pub fn scale_value(index: usize) -> f64 {
    libm::exp(libm::log(SCALE_MIN) + index as f64 * log_step())
}

/// Nearest grid scale in the log domain.
pub fn snap_scale(sigma: f64) -> usize {
    let s = sigma.clamp(SCALE_MIN, SCALE_MAX);
    let pos = (libm::log(s) - libm::log(SCALE_MIN)) / log_step();
    (pos.round() as usize).min(SCALE_COUNT - 1)
}

/// Splits a mean snapped to 1/256 into integer part and fraction index.
pub fn snap_mean(mu: f64) -> (i64, usize) {
    let q = (mu * MEAN_STEPS as f64).round() as i64;
    (q.div_euclid(MEAN_STEPS as i64), q.rem_euclid(MEAN_STEPS as i64) as usize)
}

pub fn tail_range(scale_index: usize) -> i32 {
    ((TAIL_SIGMAS * scale_value(scale_index)).ceil() as i32).max(1)
}

fn build_gaussian_table(scale_index: usize, frac: usize) -> CdfTable {
    let sigma = scale_value(scale_index);
    let c = frac as f64 / MEAN_STEPS as f64;
    let r = tail_range(scale_index);
    let mut p = Vec::with_capacity(2 * r as usize + 3);
    p.push(prob::gaussian_lower_tail(f64::from(-r) - 0.5 - c, sigma));
    for d in -r..=r {
        p.push(prob::gaussian_mass(f64::from(d) - c, sigma));
    }
    p.push(prob::gaussian_lower_tail(f64::from(-r) - 0.5 + c, sigma));
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    build_cdf(&p, -r - 1).expect("gaussian masses form a distribution")
}

/// Shared, lazily built table for a (scale, mean fraction) cell.
pub fn gaussian_table(scale_index: usize, frac: usize) -> &'static CdfTable {
    static TABLES: OnceLock<Vec<OnceLock<CdfTable>>> = OnceLock::new();
    let all = TABLES.get_or_init(|| (0..SCALE_COUNT * MEAN_STEPS).map(|_| OnceLock::new()).collect());
    all[scale_index * MEAN_STEPS + frac].get_or_init(|| build_gaussian_table(scale_index, frac))
}

/// Table and integer mean offset for one latent element.
fn element_table(mu: f64, sigma: f64) -> (&'static CdfTable, i64, i32) {
    let (m, f) = snap_mean(mu);
    let si = snap_scale(sigma);
    (gaussian_table(si, f), m, tail_range(si))
}

fn integer_symbol(v: f64) -> Result<i64> {
    if v.fract() != 0.0 || v.abs() > f64::from(i32::MAX) {
        return Err(Error::InvalidArgument(format!("latent value {v} is not a representable integer")));
    }
    Ok(v as i64)
}

/// Range operations for one element, in decode order.
fn element_ops(d: i64, table: &CdfTable, r: i32, ops: &mut Vec<(u32, u32)>) -> Result<u32> {
    let r = i64::from(r);
    let (sym, overflow) = if d < -r {
        (-r - 1, (-r - 1 - d) as u64)
    } else if d > r {
        (r + 1, (d - r - 1) as u64)
    } else {
        (d, 0)
    };
    ops.push(table.range(sym as i32)?);
    let mut chunks = 0;
    if sym.abs() > r {
        let mut v = overflow;
        loop {
            let bits = (v & ((1 << CHUNK_BITS) - 1)) as u32;
            v >>= CHUNK_BITS;
            let cont = u32::from(v > 0);
            ops.push(((cont << CHUNK_BITS | bits) * CHUNK_FREQ, CHUNK_FREQ));
            chunks += 1;
            if cont == 0 {
                break;
            }
        }
    }
    Ok(chunks)
}

fn check_params(yhat: &Tensor, gp: &GaussianParams) -> Result<()> {
    if gp.mu.shape() != yhat.shape() || gp.sigma.shape() != yhat.shape() {
        return dim_err(format!(
            "latent {} does not match parameters {} / {}",
            yhat.shape(),
            gp.mu.shape(),
            gp.sigma.shape()
        ));
    }
    Ok(())
}

fn encode_ops(ops: &[(u32, u32)]) -> Vec<u8> {
    let mut enc = RansEncoder::new();
    for &(s, f) in ops.iter().rev() {
        enc.put(s, f);
    }
    enc.finish()
}

pub fn encode_latent(yhat: &Tensor, gp: &GaussianParams) -> Result<Vec<u8>> {
    check_params(yhat, gp)?;
    let mut ops = Vec::with_capacity(yhat.numel());
    for i in 0..yhat.numel() {
        let (table, m, r) = element_table(gp.mu.data()[i], gp.sigma.data()[i]);
        element_ops(integer_symbol(yhat.data()[i])? - m, table, r, &mut ops)?;
    }
    Ok(encode_ops(&ops))
}

pub fn decode_latent(bytes: &[u8], gp: &GaussianParams) -> Result<Tensor> {
    let mut dec = RansDecoder::new(bytes)?;
    let n = gp.mu.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (table, m, r) = element_table(gp.mu.data()[i], gp.sigma.data()[i]);
        let sym = i64::from(dec.get_symbol(table));
        let d = if sym.abs() > i64::from(r) {
            let mut v: u64 = 0;
            let mut shift = 0;
            loop {
                let slot = dec.peek();
                let chunk = slot / CHUNK_FREQ;
                dec.advance(chunk * CHUNK_FREQ, CHUNK_FREQ);
                if shift >= 64 {
                    return Err(Error::CorruptStream("escape overflow does not terminate".into()));
                }
                v |= u64::from(chunk & ((1 << CHUNK_BITS) - 1)) << shift;
                shift += CHUNK_BITS;
                if chunk >> CHUNK_BITS == 0 {
                    break;
                }
            }
            let v = i64::try_from(v).map_err(|_| Error::CorruptStream("escape overflow too large".into()))?;
            if sym < 0 { sym - v } else { sym + v }
        } else {
            sym
        };
        out.push((d + m) as f64);
    }
    dec.finish()?;
    Tensor::new(gp.mu.shape(), out)
}

/// Probability the quantized tables assign to each latent element,
/// including the uniform escape chunks.
pub fn latent_probabilities(yhat: &Tensor, gp: &GaussianParams) -> Result<Tensor> {
    check_params(yhat, gp)?;
    let mut ops = Vec::new();
    let mut data = Vec::with_capacity(yhat.numel());
    for i in 0..yhat.numel() {
        ops.clear();
        let (table, m, r) = element_table(gp.mu.data()[i], gp.sigma.data()[i]);
        element_ops(integer_symbol(yhat.data()[i])? - m, table, r, &mut ops)?;
        let p: f64 = ops.iter().map(|&(_, f)| f64::from(f) / f64::from(TOTAL)).product();
        data.push(p);
    }
    Tensor::new(yhat.shape(), data)
}

/// One table per hyper channel from the prior's symbol masses.
pub fn hyper_tables(masses: &[f64]) -> Result<Vec<CdfTable>> {
    if !masses.len().is_multiple_of(FACTORIZED_SYMBOLS) {
        return dim_err(format!("{} prior masses is not a whole number of channels", masses.len()));
    }
    masses.chunks(FACTORIZED_SYMBOLS).map(|row| build_cdf(row, FACTORIZED_MIN)).collect()
}

fn hyper_symbol(v: f64) -> Result<i32> {
    let s = integer_symbol(v)?;
    if s < i64::from(FACTORIZED_MIN) || s > i64::from(FACTORIZED_MAX) {
        return Err(Error::SymbolOutOfRange {
            symbol: s,
            min: i64::from(FACTORIZED_MIN),
            max: i64::from(FACTORIZED_MAX),
        });
    }
    Ok(s as i32)
}

fn channel_of(shape: Shape, i: usize) -> usize {
    (i / shape.plane()) % shape.c
}

fn check_hyper(shape: Shape, tables: &[CdfTable]) -> Result<()> {
    if shape.c != tables.len() {
        return dim_err(format!("hyper-latent {shape} needs {} tables, got {}", shape.c, tables.len()));
    }
    Ok(())
}

pub fn encode_hyper(zhat: &Tensor, tables: &[CdfTable]) -> Result<Vec<u8>> {
    check_hyper(zhat.shape(), tables)?;
    let mut ops = Vec::with_capacity(zhat.numel());
    for (i, &v) in zhat.data().iter().enumerate() {
        ops.push(tables[channel_of(zhat.shape(), i)].range(hyper_symbol(v)?)?);
    }
    Ok(encode_ops(&ops))
}

pub fn decode_hyper(bytes: &[u8], tables: &[CdfTable], shape: Shape) -> Result<Tensor> {
    check_hyper(shape, tables)?;
    let mut dec = RansDecoder::new(bytes)?;
    let data = (0..shape.numel()).map(|i| f64::from(dec.get_symbol(&tables[channel_of(shape, i)]))).collect();
    dec.finish()?;
    Tensor::new(shape, data)
}

pub fn hyper_probabilities(zhat: &Tensor, tables: &[CdfTable]) -> Result<Tensor> {
    check_hyper(zhat.shape(), tables)?;
    let mut data = Vec::with_capacity(zhat.numel());
    for (i, &v) in zhat.data().iter().enumerate() {
        data.push(tables[channel_of(zhat.shape(), i)].probability(hyper_symbol(v)?)?);
    }
    Tensor::new(zhat.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_grid_endpoints() {
        assert!((scale_value(0) - SCALE_MIN).abs() < 1e-12);
        assert!((scale_value(SCALE_COUNT - 1) - SCALE_MAX).abs() < 1e-9);
        assert_eq!(snap_scale(1e-9), 0);
        assert_eq!(snap_scale(1e9), SCALE_COUNT - 1);
        for i in 0..SCALE_COUNT {
            assert_eq!(snap_scale(scale_value(i)), i);
        }
    }

    #[test]
    fn mean_snapping() {
        assert_eq!(snap_mean(0.0), (0, 0));
        assert_eq!(snap_mean(-0.25), (-1, 192));
        assert_eq!(snap_mean(2.5), (2, 128));
    }

    #[test]
    fn latent_round_trip_with_escapes() {
        let s = Shape::new(1, 2, 2, 3);
        let y = Tensor::new(s, vec![0.0, 1.0, -3.0, 250.0, -1000.0, 7.0, 2.0, 0.0, -1.0, 5.0, 100000.0, -2.0]).unwrap();
        let gp = GaussianParams {
            mu: Tensor::from_fn(s, |i| i as f64 * 0.37 - 2.0),
            sigma: Tensor::from_fn(s, |i| 0.05 + i as f64 * 0.5),
        };
        let bytes = encode_latent(&y, &gp).unwrap();
        assert_eq!(decode_latent(&bytes, &gp).unwrap(), y);
        let p = latent_probabilities(&y, &gp).unwrap();
        let ideal: f64 = p.data().iter().map(|v| -v.log2()).sum();
        assert!((bytes.len() * 8) as f64 <= ideal + 24.0, "{} vs {ideal}", bytes.len() * 8);
    }

    #[test]
    fn hyper_round_trip() {
        let masses: Vec<f64> = (0..2 * FACTORIZED_SYMBOLS).map(|_| 1.0 / FACTORIZED_SYMBOLS as f64).collect();
        let tables = hyper_tables(&masses).unwrap();
        let s = Shape::new(1, 2, 1, 2);
        let z = Tensor::new(s, vec![-64.0, 63.0, 0.0, -3.0]).unwrap();
        let bytes = encode_hyper(&z, &tables).unwrap();
        assert_eq!(decode_hyper(&bytes, &tables, s).unwrap(), z);
        assert!(encode_hyper(&Tensor::full(s, 64.0), &tables).is_err());
    }
}
