//! Systematic Reed-Solomon erasure coding over GF(2^8).
//!
//! The generator is derived from a `(k + m) x k` Vandermonde matrix over
//! the evaluation points `0..k+m`, right-multiplied by the inverse of its
//! top `k x k` block. The top block of the result is the identity, so data
//! shards travel unmodified, and any `k` rows remain invertible, so any `k`
//! surviving shards reconstruct the payload.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Primitive polynomial x^8 + x^4 + x^3 + x^2 + 1.
pub const GF_POLY: u16 = 0x11D;
pub const MAX_SHARDS: usize = 255;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FecError {
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error("payload of {len} bytes needs more than {max} shards")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("only {present} of the {needed} required shards are present")]
    InsufficientShards { present: usize, needed: usize },
    #[error("inconsistent shard set: {0}")]
    Inconsistent(&'static str),
}

struct Tables {
    exp: [u8; 512],
    log: [u8; 256],
    mul: Vec<[u8; 256]>,
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut exp = [0u8; 512];
        let mut log = [0u8; 256];
        let mut x: u16 = 1;
        for i in 0..255 {
            exp[i] = x as u8;
            log[x as usize] = i as u8;
            x <<= 1;
            if x & 0x100 != 0 {
                x ^= GF_POLY;
            }
        }
        for i in 255..512 {
            exp[i] = exp[i - 255];
        }
        let mul = (0..256usize)
            .map(|a| {
                let mut row = [0u8; 256];
                if a != 0 {
                    for (b, r) in row.iter_mut().enumerate().skip(1) {
                        *r = exp[log[a] as usize + log[b] as usize];
                    }
                }
                row
            })
            .collect();
        Tables { exp, log, mul }
    })
}

/// GF(2^8) arithmetic.
pub mod gf {
    use super::tables;

    #[inline]
    pub fn add(a: u8, b: u8) -> u8 {
        a ^ b
    }

    #[inline]
    pub fn mul(a: u8, b: u8) -> u8 {
        if a == 0 || b == 0 {
            return 0;
        }
        let t = tables();
        t.exp[t.log[a as usize] as usize + t.log[b as usize] as usize]
    }

    /// Multiplicative inverse. Panics on zero.
    pub fn inv(a: u8) -> u8 {
        assert!(a != 0, "zero has no inverse in GF(256)");
        let t = tables();
        t.exp[255 - t.log[a as usize] as usize]
    }

    pub fn pow(a: u8, n: usize) -> u8 {
        if n == 0 {
            return 1;
        }
        if a == 0 {
            return 0;
        }
        let t = tables();
        t.exp[(t.log[a as usize] as usize * n) % 255]
    }

    /// `dst[i] ^= c * src[i]`
    pub fn mul_add_slice(dst: &mut [u8], src: &[u8], c: u8) {
        match c {
            0 => {}
            1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d ^= s),
            _ => {
                let row = &tables().mul[c as usize];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d ^= row[s as usize]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FecParams {
    pub k: usize,
    pub m: usize,
    pub shard_size: usize,
}

impl Default for FecParams {
    fn default() -> Self {
        Self {
            k: 1,
            m: 0,
            shard_size: 1200,
        }
    }
}

impl FecParams {
    pub fn new(k: usize, m: usize, shard_size: usize) -> Result<Self, FecError> {
        let p = Self { k, m, shard_size };
        p.validate()?;
        Ok(p)
    }

    /// Smallest `k` whose data shards hold `payload_len` bytes.
    pub fn data_shards_for(payload_len: usize, shard_size: usize) -> usize {
        payload_len.div_ceil(shard_size).max(1)
    }

    pub fn validate(&self) -> Result<(), FecError> {
        if self.k < 1 {
            return Err(FecError::InvalidParams("k must be at least 1"));
        }
        if self.k + self.m > MAX_SHARDS {
            return Err(FecError::InvalidParams("k + m must not exceed 255"));
        }
        if self.shard_size == 0 {
            return Err(FecError::InvalidParams("shard_size must be positive"));
        }
        Ok(())
    }

    pub fn total_shards(&self) -> usize {
        self.k + self.m
    }

    /// Bytes the coded frame occupies on a stream.
    pub fn coded_len(&self) -> usize {
        self.total_shards() * self.shard_size
    }
}

/// Shards of one coded payload. Missing shards are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSet {
    pub shard_size: usize,
    pub payload_len: usize,
    pub shards: Vec<Option<Vec<u8>>>,
}

impl ShardSet {
    pub fn present_count(&self) -> usize {
        self.shards.iter().filter(|s| s.is_some()).count()
    }

    /// Bit `i` set when shard `i` is present (first 64 shards).
    pub fn present_mask(&self) -> u64 {
        self.shards
            .iter()
            .take(64)
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .fold(0, |acc, (i, _)| acc | (1 << i))
    }

    pub fn erase(&mut self, index: usize) {
        if let Some(s) = self.shards.get_mut(index) {
            *s = None;
        }
    }

    /// Shards concatenated in index order; missing shards as zeros.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.shards.len() * self.shard_size);
        for s in &self.shards {
            match s {
                Some(d) => out.extend_from_slice(d),
                None => out.resize(out.len() + self.shard_size, 0),
            }
        }
        out
    }
}

thread_local! {
    static GENERATORS: RefCell<HashMap<(usize, usize), Rc<Vec<Vec<u8>>>>> = RefCell::new(HashMap::new());
}

/// The systematic `(k + m) x k` generator, cached per thread.
fn generator(k: usize, m: usize) -> Rc<Vec<Vec<u8>>> {
    GENERATORS.with(|cache| {
        cache
            .borrow_mut()
            .entry((k, m))
            .or_insert_with(|| Rc::new(build_generator(k, m)))
            .clone()
    })
}

fn build_generator(k: usize, m: usize) -> Vec<Vec<u8>> {
    let n = k + m;
    let vander: Vec<Vec<u8>> = (0..n).map(|i| (0..k).map(|j| gf::pow(i as u8, j)).collect()).collect();
    let top_inv = invert(&vander[..k]).expect("Vandermonde block is invertible");
    vander.iter().map(|row| mat_vec_row(row, &top_inv)).collect()
}

/// `row * matrix` for a 1xk row and kxk matrix.
fn mat_vec_row(row: &[u8], matrix: &[Vec<u8>]) -> Vec<u8> {
    let k = matrix.len();
    let mut out = vec![0u8; k];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0u8;
        for (t, &r) in row.iter().enumerate() {
            acc ^= gf::mul(r, matrix[t][j]);
        }
        *o = acc;
    }
    out
}

/// Gauss-Jordan inversion over GF(256).
fn invert(rows: &[Vec<u8>]) -> Option<Vec<Vec<u8>>> {
    let k = rows.len();
    let mut a: Vec<Vec<u8>> = rows.to_vec();
    let mut inv: Vec<Vec<u8>> = (0..k).map(|i| (0..k).map(|j| u8::from(i == j)).collect()).collect();
    for col in 0..k {
        let pivot = (col..k).find(|&r| a[r][col] != 0)?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = gf::inv(a[col][col]);
        for j in 0..k {
            a[col][j] = gf::mul(a[col][j], p);
            inv[col][j] = gf::mul(inv[col][j], p);
        }
        for r in 0..k {
            if r != col && a[r][col] != 0 {
                let f = a[r][col];
                for j in 0..k {
                    let (av, iv) = (a[col][j], inv[col][j]);
                    a[r][j] ^= gf::mul(f, av);
                    inv[r][j] ^= gf::mul(f, iv);
                }
            }
        }
    }
    Some(inv)
}

pub fn fec_encode(payload: &[u8], params: &FecParams) -> Result<ShardSet, FecError> {
    params.validate()?;
    let FecParams { k, m, shard_size } = *params;
    if payload.len() > k * shard_size {
        return Err(FecError::PayloadTooLarge {
            len: payload.len(),
            max: k * shard_size,
        });
    }
    let mut shards: Vec<Option<Vec<u8>>> = Vec::with_capacity(k + m);
    for i in 0..k {
        let start = (i * shard_size).min(payload.len());
        let end = ((i + 1) * shard_size).min(payload.len());
        let mut s = payload[start..end].to_vec();
        s.resize(shard_size, 0);
        shards.push(Some(s));
    }
    if m > 0 {
        let g = generator(k, m);
        for row in &g[k..] {
            let mut parity = vec![0u8; shard_size];
            for (j, &c) in row.iter().enumerate() {
                gf::mul_add_slice(&mut parity, shards[j].as_ref().unwrap(), c);
            }
            shards.push(Some(parity));
        }
    }
    Ok(ShardSet {
        shard_size,
        payload_len: payload.len(),
        shards,
    })
}

pub fn fec_decode(set: &ShardSet, params: &FecParams) -> Result<Vec<u8>, FecError> {
    params.validate()?;
    let FecParams { k, m, shard_size } = *params;
    if set.shards.len() != k + m {
        return Err(FecError::Inconsistent("shard count does not match k + m"));
    }
    if set.shard_size != shard_size {
        return Err(FecError::Inconsistent("shard size mismatch"));
    }
    if set.payload_len > k * shard_size {
        return Err(FecError::Inconsistent("payload length exceeds data shards"));
    }
    if set.shards.iter().flatten().any(|s| s.len() != shard_size) {
        return Err(FecError::Inconsistent("shard of wrong length"));
    }
    let present = set.present_count();
    if present < k {
        return Err(FecError::InsufficientShards { present, needed: k });
    }
    let mut out = Vec::with_capacity(k * shard_size);
    if set.shards[..k].iter().all(Option::is_some) {
        for s in set.shards[..k].iter().flatten() {
            out.extend_from_slice(s);
        }
        out.truncate(set.payload_len);
        return Ok(out);
    }

    let chosen: Vec<usize> = (0..k + m).filter(|&i| set.shards[i].is_some()).take(k).collect();
    let g = generator(k, m);
    let sub: Vec<Vec<u8>> = chosen.iter().map(|&i| g[i].clone()).collect();
    let dec = invert(&sub).ok_or(FecError::Inconsistent("singular decode matrix"))?;
    for row in dec.iter() {
        let mut data = vec![0u8; shard_size];
        for (t, &c) in row.iter().enumerate() {
            gf::mul_add_slice(&mut data, set.shards[chosen[t]].as_ref().unwrap(), c);
        }
        out.extend_from_slice(&data);
    }
    out.truncate(set.payload_len);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FecMode {
    #[default]
    Static,
    Adaptive,
}

/// Parity shard count for `k` data shards.
///
/// Static: `ceil(0.15 k)`. Adaptive: `ceil(k * min(0.5, 4p + 0.02))` for a
/// loss estimate `p`. At least one parity shard, and never past 255 total.
pub fn parity_policy(k: usize, loss_estimate: f64, mode: FecMode) -> usize {
    let m = match mode {
        FecMode::Static => (15 * k).div_ceil(100),
        FecMode::Adaptive => {
            let p = loss_estimate.clamp(0.0, 1.0);
            let ratio = (4.0 * p + 0.02).min(0.5);
            // guard against 0.02 * 50 landing a hair above 1.0
            (k as f64 * ratio - 1e-9).ceil().max(0.0) as usize
        }
    };
    m.max(1).min(MAX_SHARDS.saturating_sub(k))
}

/// Exponentially weighted loss estimate fed with per-packet outcomes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimator {
    pub alpha: f64,
    pub estimate: f64,
}

impl Default for LossEstimator {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            estimate: 0.0,
        }
    }
}

impl LossEstimator {
    pub fn observe(&mut self, lost: bool) {
        let sample = if lost { 1.0 } else { 0.0 };
        self.estimate = (1.0 - self.alpha) * self.estimate + self.alpha * sample;
    }

    pub fn observe_counts(&mut self, acked: u64, lost: u64) {
        // outcomes in aggregate order do not matter much; losses last
        for _ in 0..acked.min(1024) {
            self.observe(false);
        }
        for _ in 0..lost.min(1024) {
            self.observe(true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_code_without_parity() {
        let payload: Vec<u8> = (0..250).map(|i| i as u8).collect();
        let p = FecParams::new(3, 0, 100).unwrap();
        let set = fec_encode(&payload, &p).unwrap();
        assert_eq!(set.shards.len(), 3);
        assert_eq!(set.shards[0].as_deref().unwrap(), &payload[..100]);
        assert_eq!(&set.shards[2].as_deref().unwrap()[..50], &payload[200..]);
        assert_eq!(fec_decode(&set, &p).unwrap(), payload);
    }

    #[test]
    fn single_data_shard_repeats() {
        let p = FecParams::new(1, 1, 2).unwrap();
        let set = fec_encode(b"ab", &p).unwrap();
        assert_eq!(set.shards[1], set.shards[0]);
        let mut lost = set.clone();
        lost.erase(0);
        assert_eq!(fec_decode(&lost, &p).unwrap(), b"ab");
    }

    #[test]
    fn recovers_from_parity() {
        let p = FecParams::new(4, 2, 1200).unwrap();
        let payload: Vec<u8> = (0..4800u32).map(|i| (i * 7 + 3) as u8).collect();
        let mut set = fec_encode(&payload, &p).unwrap();
        set.erase(3);
        set.erase(5);
        assert_eq!(fec_decode(&set, &p).unwrap(), payload);
        set.erase(0);
        assert_eq!(
            fec_decode(&set, &p),
            Err(FecError::InsufficientShards { present: 3, needed: 4 })
        );
    }

    #[test]
    fn too_large_payload() {
        let p = FecParams::new(2, 1, 10).unwrap();
        assert!(matches!(
            fec_encode(&[0; 21], &p),
            Err(FecError::PayloadTooLarge { .. })
        ));
        assert!(FecParams::new(250, 6, 10).is_err());
        assert!(FecParams::new(0, 1, 10).is_err());
    }

    #[test]
    fn parity_policy_examples() {
        assert_eq!(parity_policy(19, 0.0, FecMode::Static), 3);
        assert_eq!(parity_policy(19, 0.0128, FecMode::Adaptive), 2);
        assert_eq!(parity_policy(10, 0.0, FecMode::Adaptive), 1);
        assert_eq!(parity_policy(50, 0.0, FecMode::Adaptive), 1);
        assert_eq!(parity_policy(100, 0.0, FecMode::Adaptive), 2);
        assert_eq!(parity_policy(20, 0.9, FecMode::Adaptive), 10);
        assert_eq!(parity_policy(1, 0.0, FecMode::Static), 1);
        assert_eq!(parity_policy(254, 0.0, FecMode::Static), 1);
    }

    #[test]
    fn loss_estimator_converges() {
        let mut e = LossEstimator::default();
        for i in 0..10_000 {
            e.observe(i % 20 == 0);
        }
        assert!((e.estimate - 0.05).abs() < 0.05);
    }
}
