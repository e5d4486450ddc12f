//! Two-party secure inner products: a fixed-point codec plus a DDH-based
//! single-input inner-product encryption scheme with the guest as key
//! authority.
//!
//! The guest owns the measurement vector u and the master secret; the host
//! submits query vectors a and learns exactly ⟨u, a⟩ per query, recovered by
//! bounded discrete log. Group parameters are fixed published constants in a
//! 62-bit safe-prime group, so all arithmetic fits in u128 intermediates.
//! The parameter sizes are demonstrative, not production hardened.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Published group constants: p is a safe prime, g generates the subgroup of
/// quadratic residues of prime order q = (p − 1) / 2.
pub mod group {
    /// Safe prime modulus (62 bits).
    pub const MODULUS: u64 = 4_611_686_018_427_377_339;
    /// Prime order of the quadratic-residue subgroup, (p − 1) / 2.
    pub const SUBGROUP_ORDER: u64 = 2_305_843_009_213_688_669;
    /// Generator of the order-q subgroup.
    pub const GENERATOR: u64 = 4;

    #[inline]
    pub fn mul(a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % MODULUS as u128) as u64
    }

    pub fn pow(mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base %= MODULUS;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = mul(acc, base);
            }
            base = mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Multiplicative inverse via Fermat.
    pub fn inv(a: u64) -> u64 {
        pow(a, MODULUS - 2)
    }

    /// Maps a signed exponent into Z_q.
    pub fn encode_exponent(x: i64) -> u64 {
        let q = SUBGROUP_ORDER as i128;
        (((x as i128) % q + q) % q) as u64
    }
}

/// Fixed-point embedding of real vectors into the integer message space.
///
/// Values are clipped to ±`bound`, scaled by 2^`scale_bits` and rounded. The
/// published dequantization error bound for one inner product of dimension d
/// is ε_q · (‖x‖∞ + ‖y‖∞ + 1/s) with ε_q = d(B+1)/s.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FixedPointCodec {
    pub scale_bits: u32,
    pub bound: f64,
    pub dim: usize,
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32, bound: f64, dim: usize) -> Result<Self> {
        if bound <= 0.0 || dim == 0 {
            return Err(Error::Config("codec needs positive bound and dimension".into()));
        }
        let codec = FixedPointCodec { scale_bits, bound, dim };
        let max_entry = codec.scale() * bound;
        // no wraparound: the worst-case inner product must stay well inside
        // the subgroup order
        let worst = max_entry * max_entry * dim as f64;
        if worst >= group::SUBGROUP_ORDER as f64 / 2.0 {
            return Err(Error::Config(format!(
                "codec overflow: (s·B)²·d = {worst:.3e} reaches the group order"
            )));
        }
        Ok(codec)
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    /// Published per-product quantization coefficient ε_q = d(B+1)/s.
    pub fn epsilon(&self) -> f64 {
        self.dim as f64 * (self.bound + 1.0) / self.scale()
    }

    /// Published bound on |dequantized − exact| for vectors with the given
    /// sup norms.
    pub fn error_bound(&self, x_inf: f64, y_inf: f64) -> f64 {
        self.epsilon() * (x_inf + y_inf + 1.0 / self.scale())
    }

    /// Rounds to fixed point after clipping to ±bound. Returns whether any
    /// entry was clipped (the caller logs it).
    pub fn quantize(&self, x: &[f64]) -> Result<(Vec<i64>, bool)> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "codec dimension {} vs vector {}",
                self.dim,
                x.len()
            )));
        }
        let mut clipped = false;
        let s = self.scale();
        let out = x
            .iter()
            .map(|&v| {
                let c = if v.abs() > self.bound {
                    clipped = true;
                    v.clamp(-self.bound, self.bound)
                } else {
                    v
                };
                (c * s).round() as i64
            })
            .collect();
        Ok((out, clipped))
    }

    /// Maps an integer inner product of two quantized vectors back to reals.
    pub fn dequantize_product(&self, ip: i64) -> f64 {
        ip as f64 / (self.scale() * self.scale())
    }

    /// Largest integer inner product the codec can produce; decryption
    /// bounds derive from it.
    pub fn product_bound(&self) -> i64 {
        let max_entry = (self.scale() * self.bound).round() as i128;
        let worst = max_entry * max_entry * self.dim as i128;
        worst.min(i64::MAX as i128) as i64
    }
}

/// Guest-held master secret. Deliberately not serializable: it must never
/// enter a transcript.
pub struct IpeSecretKey {
    s: Vec<u64>,
}

/// Published per-coordinate keys h_i = g^{s_i}.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IpePublicKey {
    pub h: Vec<u64>,
}

/// Ciphertext (g^r, {h_i^r · g^{u_i}}).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ciphertext {
    pub c0: u64,
    pub c: Vec<u64>,
}

/// Deterministic key generation for a fixed seed.
pub fn setup(dim: usize, seed: u64) -> (IpeSecretKey, IpePublicKey) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<u64> = (0..dim)
        .map(|_| rng.gen_range(1..group::SUBGROUP_ORDER))
        .collect();
    let h = s.iter().map(|&si| group::pow(group::GENERATOR, si)).collect();
    (IpeSecretKey { s }, IpePublicKey { h })
}

impl IpeSecretKey {
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    /// Functional key for query a: sk_a = ⟨s, a⟩ mod q.
    pub fn keygen(&self, a: &[i64]) -> Result<u64> {
        if a.len() != self.s.len() {
            return Err(Error::Dimension(format!(
                "query dimension {} vs key {}",
                a.len(),
                self.s.len()
            )));
        }
        let q = group::SUBGROUP_ORDER as u128;
        let mut acc = 0u128;
        for (&si, &ai) in self.s.iter().zip(a) {
            let ai = group::encode_exponent(ai) as u128;
            acc = (acc + si as u128 * ai) % q;
        }
        Ok(acc as u64)
    }
}

/// Encrypts an integer vector under the public key with fresh randomness
/// from `rng`. Entries must fit the codec's quantized range.
pub fn encrypt(
    pk: &IpePublicKey,
    u: &[i64],
    max_abs: i64,
    rng: &mut ChaCha8Rng,
) -> Result<Ciphertext> {
    if u.len() != pk.h.len() {
        return Err(Error::Dimension(format!(
            "plaintext dimension {} vs key {}",
            u.len(),
            pk.h.len()
        )));
    }
    if let Some(bad) = u.iter().find(|v| v.abs() > max_abs) {
        return Err(Error::CodecRange(format!(
            "entry {bad} outside the encodable range ±{max_abs}"
        )));
    }
    let r = rng.gen_range(1..group::SUBGROUP_ORDER);
    let c0 = group::pow(group::GENERATOR, r);
    let c = pk
        .h
        .iter()
        .zip(u)
        .map(|(&hi, &ui)| {
            group::mul(
                group::pow(hi, r),
                group::pow(group::GENERATOR, group::encode_exponent(ui)),
            )
        })
        .collect();
    Ok(Ciphertext { c0, c })
}

/// Cached baby-step table for discrete logs in [−bound, bound].
pub struct BsgsSolver {
    bound: i64,
    stride: u64,
    baby: std::collections::HashMap<u64, u32>,
    giant_factor: u64,
}

impl BsgsSolver {
    pub fn new(bound: i64) -> Result<Self> {
        if bound <= 0 {
            return Err(Error::Config("BSGS bound must be positive".into()));
        }
        let range = 2 * bound as u128 + 1;
        let stride = (range as f64).sqrt().ceil() as u64;
        let mut baby = std::collections::HashMap::with_capacity(stride as usize);
        let mut acc = 1u64;
        for j in 0..stride {
            baby.entry(acc).or_insert(j as u32);
            acc = group::mul(acc, group::GENERATOR);
        }
        // g^{-stride}
        let giant_factor = group::inv(group::pow(group::GENERATOR, stride));
        Ok(BsgsSolver {
            bound,
            stride,
            baby,
            giant_factor,
        })
    }

    pub fn bound(&self) -> i64 {
        self.bound
    }

    /// Solves g^x = target for x in [−bound, bound].
    pub fn solve(&self, target: u64) -> Result<i64> {
        // shift by +bound so the exponent is nonnegative
        let mut gamma = group::mul(target, group::pow(group::GENERATOR, self.bound as u64));
        let max_shifted = 2 * self.bound as u64;
        let mut i = 0u64;
        loop {
            if let Some(&j) = self.baby.get(&gamma) {
                let x = i * self.stride + j as u64;
                if x <= max_shifted {
                    return Ok(x as i64 - self.bound);
                }
            }
            i += 1;
            if i * self.stride > max_shifted {
                return Err(Error::BoundExceeded(format!(
                    "no discrete log within ±{}; the inner product exceeds the configured bound",
                    self.bound
                )));
            }
            gamma = group::mul(gamma, self.giant_factor);
        }
    }
}

/// Recovers ⟨u, a⟩ from a ciphertext and the functional key for a.
pub fn decrypt(ct: &Ciphertext, sk_a: u64, a: &[i64], solver: &BsgsSolver) -> Result<i64> {
    if a.len() != ct.c.len() {
        return Err(Error::Dimension(format!(
            "query dimension {} vs ciphertext {}",
            a.len(),
            ct.c.len()
        )));
    }
    let mut acc = 1u64;
    for (&ci, &ai) in ct.c.iter().zip(a) {
        acc = group::mul(acc, group::pow(ci, group::encode_exponent(ai)));
    }
    let blind = group::pow(ct.c0, sk_a);
    let value = group::mul(acc, group::inv(blind));
    solver.solve(value)
}

/// Exact integer inner product, the plaintext oracle for the scheme.
pub fn plain_inner_product(u: &[i64], a: &[i64]) -> i64 {
    u.iter()
        .zip(a)
        .map(|(&x, &y)| x as i128 * y as i128)
        .sum::<i128>() as i64
}
