//! Counter-based random numbers: every draw is a pure function of its key,
//! so results do not depend on evaluation order.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered list of words into one 64-bit key.
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Seed for a named sub-stream of `base`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut words = Vec::with_capacity(tags.len() + 1);
    words.push(base);
    words.extend_from_slice(tags);
    hash_words(&words)
}

/// Uniform in the open interval (0, 1).
pub fn uniform_open(key: u64) -> f64 {
    ((splitmix64(key) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard normal keyed on `(seed, a, b)` via Box–Muller.
pub fn counter_normal(seed: u64, a: u64, b: u64) -> f64 {
    let key = hash_words(&[seed, a, b]);
    let u1 = uniform_open(key);
    let u2 = uniform_open(key ^ 0xD1B5_4A32_D192_ED03);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
