//! Lossless range coder (stream rANS variant) over the factorized density.
//!
//! # Table construction
//!
//! Per channel, the integer support is turned into 16-bit frequency tables
//! with `freq_k = floor(p̂_k · 2^16)`. Because `p̂_k ≥ 2^-16`, every bin gets
//! at least frequency 1 without lifting, and `freq_k / 2^16 ≤ p̂_k` always —
//! so the coded size can never undercut the rate estimate. If flooring makes
//! the total exceed `2^16` (possible when many bins sit at the probability
//! floor), the surplus is shaved off the largest bins; if the total falls
//! short, the slack is left as a dead zone at the top of the code space
//! (valid streams never land there, and corrupt ones that do are rejected).
//!
//! # Stream format
//!
//! Symbols are coded in raster order (channel-major); the encoder runs in
//! reverse and the byte buffer is reversed at the end so the decoder reads
//! forward. The first 4 bytes hold the final coder state big-endian; the
//! decoder must finish with the state back at its initial value and every
//! byte consumed, which catches truncation and most corruption.

use std::io::Read;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt};
use ndarray::ArrayD;
use rand::Rng;

use crate::error::{Error, Result};

use super::{DensityId, FactorizedDensity, Latent, QuantizeMode};

/// Bits of precision in the frequency tables.
const PREC: u32 = 16;
const PREC_TOTAL: u32 = 1 << PREC;
/// Lower bound of the coder state interval `[L, 256·L)`.
const RANS_L: u32 = 1 << 23;

/// Quantized distribution for one channel.
#[derive(Debug, Clone)]
pub struct ChannelTable {
    /// Integer value of bin 0.
    pub lo: i64,
    pub freqs: Vec<u32>,
    /// `cums[k] = Σ_{j<k} freqs[j]`.
    pub cums: Vec<u32>,
}

/// Build coding tables for every channel of a density.
pub fn build_tables(density: &FactorizedDensity) -> Result<Vec<ChannelTable>> {
    (0..density.channels())
        .map(|c| {
            let (lo, hi) = density.support(c);
            let nbins = (hi - lo + 1) as usize;
            if nbins > (PREC_TOTAL / 2) as usize {
                return Err(Error::InvalidInput(format!(
                    "channel {c} support [{lo}, {hi}] too wide for 16-bit tables"
                )));
            }
            let probs: Vec<f64> = (lo..=hi).map(|k| density.bin_prob(c, k)).collect();
            let freqs = quantize_freqs(&probs);
            let mut cums = Vec::with_capacity(nbins);
            let mut acc = 0u32;
            for &f in &freqs {
                cums.push(acc);
                acc += f;
            }
            Ok(ChannelTable { lo, freqs, cums })
        })
        .collect()
}

/// Floor probabilities into frequencies summing to at most `2^16`,
/// shaving any flooring surplus off the largest bins.
fn quantize_freqs(probs: &[f64]) -> Vec<u32> {
    let mut freqs: Vec<u32> = probs
        .iter()
        .map(|&p| {
            debug_assert!(p >= super::P_FLOOR);
            ((p * PREC_TOTAL as f64).floor() as u32).max(1)
        })
        .collect();
    let mut total: u64 = freqs.iter().map(|&f| f as u64).sum();
    while total > PREC_TOTAL as u64 {
        let (imax, _) = freqs
            .iter()
            .enumerate()
            .max_by_key(|&(i, &f)| (f, std::cmp::Reverse(i)))
            .expect("non-empty table");
        assert!(freqs[imax] > 1, "cannot shave table below minimum frequency");
        let shave = ((total - PREC_TOTAL as u64) as u32).min(freqs[imax] - freqs[imax] / 2).max(1);
        let shave = shave.min(freqs[imax] - 1);
        freqs[imax] -= shave;
        total -= shave as u64;
    }
    freqs
}

/// Code a symbol sequence; `syms[i] = (channel, bin index)`.
fn encode_symbols(tables: &[ChannelTable], syms: &[(usize, usize)]) -> Vec<u8> {
    if syms.is_empty() {
        return Vec::new();
    }
    let mut out: Vec<u8> = Vec::with_capacity(syms.len() / 2 + 4);
    let mut x: u32 = RANS_L;
    for &(c, k) in syms.iter().rev() {
        let t = &tables[c];
        let f = t.freqs[k];
        let cum = t.cums[k];
        let x_max = f << (23 - PREC + 8);
        while x >= x_max {
            out.push((x & 0xFF) as u8);
            x >>= 8;
        }
        x = ((x / f) << PREC) + (x % f) + cum;
    }
    out.extend_from_slice(&[
        (x & 0xFF) as u8,
        ((x >> 8) & 0xFF) as u8,
        ((x >> 16) & 0xFF) as u8,
        ((x >> 24) & 0xFF) as u8,
    ]);
    out.reverse();
    out
}

/// Decode `channels.len()` symbols; `channels[i]` names the table for
/// position `i`. Returns bin indices.
fn decode_symbols(
    tables: &[ChannelTable],
    bytes: &[u8],
    channels: &[usize],
) -> Result<Vec<usize>> {
    if channels.is_empty() {
        if !bytes.is_empty() {
            return Err(Error::Format("trailing bytes after empty code".into()));
        }
        return Ok(Vec::new());
    }
    if bytes.len() < 4 {
        return Err(Error::Format("coded payload shorter than coder state".into()));
    }
    let mut x = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let mut idx = 4usize;
    let mut out = Vec::with_capacity(channels.len());
    for &c in channels {
        let t = &tables[c];
        let s = x & (PREC_TOTAL - 1);
        // Largest k with cums[k] <= s.
        let k = match t.cums.partition_point(|&cum| cum <= s) {
            0 => return Err(Error::Format("coded value below table range".into())),
            p => p - 1,
        };
        if s >= t.cums[k] + t.freqs[k] {
            return Err(Error::Format("coded value in table dead zone".into()));
        }
        x = t.freqs[k] * (x >> PREC) + s - t.cums[k];
        while x < RANS_L {
            if idx >= bytes.len() {
                return Err(Error::Format("coded payload truncated".into()));
            }
            x = (x << 8) | bytes[idx] as u32;
            idx += 1;
        }
        out.push(k);
    }
    if x != RANS_L {
        return Err(Error::Format("coder state mismatch after decode".into()));
    }
    if idx != bytes.len() {
        return Err(Error::Format("trailing bytes after coded payload".into()));
    }
    Ok(out)
}

/// Raster-order channel index sequence for a `[C, H, W]` latent.
fn channel_sequence(shape: &[usize]) -> Vec<usize> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut seq = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        seq.extend(std::iter::repeat(ci).take(h * w));
    }
    seq
}

/// Losslessly code a rounded latent. Values outside the coding support are
/// clamped first (mirroring the rate estimator's accounting).
pub fn encode_latent(latent: &Latent, density: &FactorizedDensity) -> Result<Vec<u8>> {
    if latent.mode != QuantizeMode::EvalRounded {
        return Err(Error::InvalidInput("only rounded latents can be coded".into()));
    }
    let shape = latent.values.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidInput(format!("latent must be [C,H,W], got {shape:?}")));
    }
    if shape[0] != density.channels() {
        return Err(Error::ModelMismatch(format!(
            "latent has {} channels, density has {}",
            shape[0],
            density.channels()
        )));
    }
    let tables = build_tables(density)?;
    let v3 = latent.values.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let mut syms = Vec::with_capacity(v3.len());
    for (c, plane) in v3.outer_iter().enumerate() {
        let (lo, hi) = density.support(c);
        for &v in plane.iter() {
            let k = (v as i64).clamp(lo, hi);
            syms.push((c, (k - lo) as usize));
        }
    }
    Ok(encode_symbols(&tables, &syms))
}

/// Invert [`encode_latent`]: exact reconstruction of the coded values.
pub fn decode_latent(
    bytes: &[u8],
    shape: [usize; 3],
    density: &FactorizedDensity,
    density_id: DensityId,
) -> Result<Latent> {
    if shape[0] != density.channels() {
        return Err(Error::ModelMismatch(format!(
            "latent has {} channels, density has {}",
            shape[0],
            density.channels()
        )));
    }
    let tables = build_tables(density)?;
    let seq = channel_sequence(&shape);
    let bins = decode_symbols(&tables, bytes, &seq)?;
    let mut values = ArrayD::zeros(ndarray::IxDyn(&shape));
    for ((slot, &c), &k) in values.iter_mut().zip(seq.iter()).zip(bins.iter()) {
        *slot = (tables[c].lo + k as i64) as f64;
    }
    Ok(Latent { values, density_id, mode: QuantizeMode::EvalRounded })
}

/// Append a length-prefixed latent section: `[u32 LE payload length][payload]`.
pub fn write_latent_section(out: &mut Vec<u8>, payload: &[u8]) {
    let mut len = [0u8; 4];
    LittleEndian::write_u32(&mut len, payload.len() as u32);
    out.extend_from_slice(&len);
    out.extend_from_slice(payload);
}

/// Read one length-prefixed latent section.
pub fn read_latent_section(r: &mut (impl Read + ?Sized)) -> Result<Vec<u8>> {
    let len = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("latent section length missing".into()))? as usize;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format("latent section payload truncated".into()))?;
    Ok(payload)
}

/// Draw an integer latent from the density's own distribution (restricted
/// to the coding support). Used by diagnostics and coder validation, where
/// samples must actually follow the model for size comparisons to be fair.
pub fn sample_latent(
    density: &FactorizedDensity,
    shape: [usize; 3],
    density_id: DensityId,
    rng: &mut impl Rng,
) -> Latent {
    let mut values = ArrayD::zeros(ndarray::IxDyn(&shape));
    let per_channel: Vec<(i64, Vec<f64>)> = (0..density.channels())
        .map(|c| {
            let (lo, hi) = density.support(c);
            let probs: Vec<f64> = (lo..=hi).map(|k| density.bin_prob(c, k)).collect();
            let total: f64 = probs.iter().sum();
            let mut acc = 0.0;
            let cdf: Vec<f64> = probs
                .iter()
                .map(|p| {
                    acc += p / total;
                    acc
                })
                .collect();
            (lo, cdf)
        })
        .collect();
    let v3 = values.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
    let mut v3 = v3;
    for c in 0..shape[0] {
        let (lo, ref cdf) = per_channel[c];
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let u: f64 = rng.gen_range(0.0..1.0);
                let k = cdf.partition_point(|&acc| acc < u).min(cdf.len() - 1);
                v3[[c, y, x]] = (lo + k as i64) as f64;
            }
        }
    }
    Latent { values, density_id, mode: QuantizeMode::EvalRounded }
}
