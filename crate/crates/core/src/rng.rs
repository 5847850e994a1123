//! Seeded random streams and the scalar samplers built on top of them.
//!
//! All randomness in the crate flows from a single user-supplied `u64` seed.
//! Independent consumers (subjects during imputation, bootstrap replicates,
//! simulation replications) each get their own ChaCha12 stream derived from
//! `(seed, domain, index)`, so results never depend on scheduling order.
//!
//! Scalar samplers are implemented here rather than pulled from a
//! distributions crate so that the exact draw sequence is pinned by this
//! repository: uniforms take the top 53 bits of the next `u64`, standard
//! normals use the Box-Muller transform (cosine branch), Exp(1) uses
//! inversion, and Poisson(1) uses Knuth's product-of-uniforms method.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_core::RngCore;

/// Independent stream families. The discriminant is baked into the ChaCha
/// stream id, so streams from different domains never collide even for the
/// same index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    /// Per-subject imputation draws.
    Imputation = 1,
    /// Per-replicate bootstrap weights.
    Bootstrap = 2,
    /// Per-subject trial simulation.
    Simulation = 3,
    /// Test oracles and auxiliary draws.
    Oracle = 4,
}

/// A ChaCha12 stream keyed by `(seed, domain, index)`.
///
/// ChaCha supports 2^64 independent streams per key; the domain tag occupies
/// the top byte of the stream id and the index the low 56 bits.
pub fn substream(seed: u64, domain: StreamDomain, index: u64) -> ChaCha12Rng {
    debug_assert!(index < 1 << 56, "substream index exceeds 56 bits");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) | index);
    rng
}

/// Derives a child seed from `(seed, salt)` via the SplitMix64 finalizer.
/// Used where an API takes a bare seed (e.g. one imputation seed per
/// simulation replication).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw on [0, 1) with 53-bit resolution.
pub fn uniform01<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One standard normal via Box-Muller; the sine branch of the pair is
/// discarded. Use [`fill_standard_normal`] when filling vectors.
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = 1.0 - uniform01(rng); // (0, 1]
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fills `out` with standard normals, consuming Box-Muller pairs so that a
/// length-d fill uses exactly `2 * ceil(d / 2)` uniforms.
pub fn fill_standard_normal<R: RngCore>(rng: &mut R, out: &mut [f64]) {
    let mut i = 0;
    while i + 1 < out.len() {
        let u1 = 1.0 - uniform01(rng);
        let u2 = uniform01(rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out[i] = r * theta.cos();
        out[i + 1] = r * theta.sin();
        i += 2;
    }
    if i < out.len() {
        out[i] = standard_normal(rng);
    }
}

/// Exp(1) via inversion: -ln(1 - U) with U in [0, 1).
pub fn exp1<R: RngCore>(rng: &mut R) -> f64 {
    -(1.0 - uniform01(rng)).ln()
}

/// Poisson(1) via Knuth's method (expected ~2.7 uniforms per draw).
pub fn poisson1<R: RngCore>(rng: &mut R) -> f64 {
    let threshold = (-1.0f64).exp();
    let mut k = 0u64;
    let mut p = 1.0;
    loop {
        p *= uniform01(rng);
        if p <= threshold {
            return k as f64;
        }
        k += 1;
    }
}
