//! Additive-mask secure aggregation over Z_p with p a power of two.
//!
//! Client updates are fixed-point encoded, masked with keys that sum to zero
//! mod p, and only the masked sum is ever decoded. Masks come from a seeded
//! trusted dealer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::SeedStream;

pub const DEFAULT_FIXED_POINT_BITS: u8 = 20;

/// A power-of-two modulus `2^bits`, `1 <= bits <= 64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modulus {
    bits: u8,
}

impl Modulus {
    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 64 {
            return Err(Error::Overflow(format!("modulus 2^{bits} does not fit in 64-bit words")));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn value(&self) -> u128 {
        1u128 << self.bits
    }

    fn mask(&self) -> u64 {
        if self.bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }

    fn add(&self, a: u64, b: u64) -> u64 {
        a.wrapping_add(b) & self.mask()
    }

    fn neg(&self, a: u64) -> u64 {
        a.wrapping_neg() & self.mask()
    }
}

/// Smallest power of two `>= max_inf_norm * n_clients`, at least 2.
/// `max_inf_norm` is in fixed-point units.
pub fn choose_modulus(max_inf_norm: f64, n_clients: usize) -> Result<Modulus> {
    if !(max_inf_norm > 0.0 && max_inf_norm.is_finite()) || n_clients == 0 {
        return Err(Error::Input(format!("cannot size a modulus for bound {max_inf_norm} and {n_clients} clients")));
    }
    let target = max_inf_norm * n_clients as f64;
    let mut bits = target.log2().ceil().max(1.0) as i64;
    while bits > 1 && 2f64.powi(bits as i32 - 1) >= target {
        bits -= 1;
    }
    while 2f64.powi(bits as i32) < target {
        bits += 1;
    }
    if bits > 64 {
        return Err(Error::Overflow(format!("required modulus 2^{bits} exceeds 64 bits")));
    }
    Modulus::from_bits(bits as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecAggConfig {
    pub modulus: Modulus,
    pub fixed_point_bits: u8,
    pub n_clients: usize,
    pub dim: usize,
}

impl SecAggConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fixed_point_bits >= self.modulus.bits {
            return Err(Error::Config(format!(
                "fixed-point bits {} must be below modulus bits {}",
                self.fixed_point_bits, self.modulus.bits
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub modulus: Modulus,
    pub masks: Vec<Vec<u64>>,
}

/// Uniform masks for `n_clients - 1` clients; the last is minus their sum.
pub fn gen_masks(config: &SecAggConfig, seed: u64) -> Result<MaskSet> {
    if config.n_clients < 2 {
        return Err(Error::Input("masking needs at least two clients".into()));
    }
    let m = config.modulus;
    let mut rng = SeedStream::new(seed).child("secagg-dealer").rng();
    let mut total = vec![0u64; config.dim];
    let mut masks = Vec::with_capacity(config.n_clients);
    for _ in 0..config.n_clients - 1 {
        let k: Vec<u64> = (0..config.dim).map(|_| rng.random::<u64>() & m.mask()).collect();
        for (t, x) in total.iter_mut().zip(&k) {
            *t = m.add(*t, *x);
        }
        masks.push(k);
    }
    masks.push(total.iter().map(|&t| m.neg(t)).collect());
    Ok(MaskSet { modulus: m, masks })
}

/// Fixed-point encoding of `v` into `[0, p)`; requires `|v_i| * 2^f < p/2`.
pub fn encode(v: &[f64], f: u8, modulus: Modulus) -> Result<Vec<u64>> {
    let scale = 2f64.powi(f as i32);
    let half = (modulus.value() / 2) as f64;
    v.iter()
        .map(|&x| {
            let y = (x * scale).round();
            if !y.is_finite() || y.abs() >= half {
                return Err(Error::Range(format!("{x} does not fit 2^{} with {f} fractional bits", modulus.bits)));
            }
            Ok((y as i64 as u64) & modulus.mask())
        })
        .collect()
}

pub fn decode(v: &[u64], f: u8, modulus: Modulus) -> Vec<f64> {
    let scale = 2f64.powi(-(f as i32));
    let p = modulus.value() as i128;
    v.iter()
        .map(|&e| {
            let e = e as i128;
            let signed = if e >= p / 2 { e - p } else { e };
            signed as f64 * scale
        })
        .collect()
}

pub fn mask(encoded: &[u64], key: &[u64], modulus: Modulus) -> Result<Vec<u64>> {
    if encoded.len() != key.len() {
        return Err(Error::Dimension { expected: key.len(), actual: encoded.len() });
    }
    Ok(encoded.iter().zip(key).map(|(&a, &k)| modulus.add(a, k)).collect())
}

/// Sums masked updates mod p in the given order and decodes the result.
pub fn unmask_sum(masked: &[Vec<u64>], f: u8, modulus: Modulus) -> Result<Vec<f64>> {
    let first = masked.first().ok_or_else(|| Error::Input("no masked updates to aggregate".into()))?;
    let mut acc = vec![0u64; first.len()];
    for m in masked {
        if m.len() != acc.len() {
            return Err(Error::Dimension { expected: acc.len(), actual: m.len() });
        }
        for (a, &x) in acc.iter_mut().zip(m) {
            *a = modulus.add(*a, x);
        }
    }
    Ok(decode(&acc, f, modulus))
}

/// A masked update as sent over the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedUpdate {
    pub modulus: Modulus,
    pub fixed_point_bits: u8,
    pub values: Vec<u64>,
}

impl MaskedUpdate {
    /// `dimension: u32 LE | p_log2: u8 | f: u8 | values: u64 LE...`
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim =
            u32::try_from(self.values.len()).map_err(|_| Error::Overflow("update dimension exceeds u32".into()))?;
        let mut out = Vec::with_capacity(6 + 8 * self.values.len());
        out.extend(dim.to_le_bytes());
        out.push(self.modulus.bits);
        out.push(self.fixed_point_bits);
        for v in &self.values {
            out.extend(v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::Format("masked update header truncated".into()));
        }
        let dim = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let modulus = Modulus::from_bits(bytes[4]).map_err(|e| Error::Format(e.to_string()))?;
        let fixed_point_bits = bytes[5];
        let body = &bytes[6..];
        if body.len() != dim * 8 {
            return Err(Error::Format(format!("expected {} payload bytes, found {}", dim * 8, body.len())));
        }
        let values: Vec<u64> = body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|&v| (v as u128) >= modulus.value()) {
            return Err(Error::Format("coordinate outside [0, p)".into()));
        }
        Ok(Self { modulus, fixed_point_bits, values })
    }
}

/// Modulus for summing `n_clients` updates bounded by `bound` in each
/// coordinate: twice the scaled bound for the sign, and never fewer than
/// `f + 1` bits.
pub fn sum_modulus(bound: f64, f: u8, n_clients: usize) -> Result<Modulus> {
    let m = choose_modulus(2.0 * bound * 2f64.powi(f as i32), n_clients)?;
    if m.bits <= f {
        return Modulus::from_bits(f + 1);
    }
    Ok(m)
}

/// Aggregates real-valued client updates through the full mask/unmask path.
///
/// `bound` is an a-priori limit on every coordinate of every update; the
/// modulus is sized from it with a factor of two for the sign. Values outside
/// the bound are reported as range errors, never wrapped.
pub fn secure_sum(updates: &[Vec<f64>], bound: f64, f: u8, seed: u64) -> Result<Vec<f64>> {
    let dim = updates.first().map(Vec::len).ok_or_else(|| Error::Input("no updates to aggregate".into()))?;
    let modulus = sum_modulus(bound, f, updates.len())?;
    let config = SecAggConfig { modulus, fixed_point_bits: f, n_clients: updates.len(), dim };
    config.validate()?;
    if updates.len() == 1 {
        let enc = encode(&updates[0], f, modulus)?;
        return unmask_sum(&[enc], f, modulus);
    }
    let masks = gen_masks(&config, seed)?;
    let masked = updates
        .iter()
        .zip(&masks.masks)
        .map(|(u, k)| {
            if u.iter().any(|x| x.abs() > bound) {
                return Err(Error::Range(format!("update coordinate exceeds the agreed bound {bound}")));
            }
            mask(&encode(u, f, modulus)?, k, modulus)
        })
        .collect::<Result<Vec<_>>>()?;
    unmask_sum(&masked, f, modulus)
}
