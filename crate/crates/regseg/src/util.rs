//! Seed derivation and small hashing helpers shared across modules.
//!
//! Every stream of randomness in the crate is derived from a master seed
//! through [`mix_seed`], so corpora, network initialisations, and per-step
//! draws are reproducible independently of each other.

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates consecutive seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from `(master, tag, index)`.
pub fn mix_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = fnv1a64(tag.as_bytes());
    h ^= splitmix64(master);
    h = h.wrapping_mul(0x100000001b3) ^ splitmix64(index.wrapping_add(0x1357_9bdf_0246_8ace));
    splitmix64(h)
}

/// Standard normal draw via Box-Muller.
pub fn randn(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_is_deterministic_and_tag_sensitive() {
        assert_eq!(mix_seed(7, "corpus", 0), mix_seed(7, "corpus", 0));
        assert_ne!(mix_seed(7, "corpus", 0), mix_seed(7, "corpus", 1));
        assert_ne!(mix_seed(7, "corpus", 0), mix_seed(7, "alpha", 0));
        assert_ne!(mix_seed(7, "corpus", 0), mix_seed(8, "corpus", 0));
    }

    #[test]
    fn fnv_matches_reference_vector() {
        // Published FNV-1a test vector: "a" -> 0xaf63dc4c8601ec8c.
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
