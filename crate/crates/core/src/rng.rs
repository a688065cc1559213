//! Seeding helpers. Every random stream in the pipeline is a ChaCha8
//! generator derived from (global seed, stage tag), which keeps runs
//! reproducible across platforms and makes stages independent of each
//! other's draw counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a, used for stream derivation and config checksums.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf29ce484222325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

/// Deterministic substream for a (seed, tag) pair.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(tag.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = stream(3, "x").gen();
        let b: f64 = stream(3, "x").gen();
        let c: f64 = stream(3, "y").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
