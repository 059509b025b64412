//! Counter-based, splittable random streams.
//!
//! Every stream is identified by a 64-bit key. Draw `i` (1-based) of a
//! stream is `mix64(key + i * GOLDEN)` with wrapping arithmetic, which is
//! exactly SplitMix64 seeded with `key`. A child stream is derived from a
//! parent key and a label without consuming any draws from the parent:
//!
//! ```text
//! child_key = mix64(parent_key ^ mix64(label + LABEL_GAMMA))
//! ```
//!
//! String labels are first reduced to a `u64` with 64-bit FNV-1a over their
//! UTF-8 bytes. Sampling helpers are defined in terms of `next_u64` only, so
//! a port that reproduces `mix64`, the key derivation and the helpers below
//! reproduces every stream bit for bit. The full recipe is in `docs/rng.md`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LABEL_GAMMA: u64 = 0xD1B5_4A32_D192_ED03;
const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed),
            counter: 0,
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Independent child stream for an integer label (scene index, epoch, ...).
    pub fn child(&self, label: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(label.wrapping_add(LABEL_GAMMA))),
            counter: 0,
        }
    }

    /// Independent child stream for a named purpose ("camera", "radar", ...).
    pub fn named(&self, name: &str) -> Self {
        self.child(fnv1a(name.as_bytes()))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer uniform on the closed range [lo, hi].
    pub fn int_range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        let pick = (self.uniform() * span as f64) as u64;
        lo + pick.min(span - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller; consumes two draws, uses the cosine branch.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Poisson by Knuth's product-of-uniforms method; fine for small means.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0;
        let mut prod = self.uniform();
        while prod > limit {
            k += 1;
            prod *= self.uniform();
        }
        k
    }

    /// Fisher-Yates shuffle, iterating from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.int_range(0, i as u64) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // SplitMix64 seeded with 0 produces these first outputs.
        let mut s = Stream { key: 0, counter: 0 };
        assert_eq!(s.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(s.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(s.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xCBF2_9CE4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xAF63_DC4C_8601_EC8C);
    }

    #[test]
    fn children_do_not_disturb_parent() {
        let mut a = Stream::new(9);
        let mut b = Stream::new(9);
        let _c = b.child(3);
        let _d = b.named("radar");
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn distinct_labels_give_distinct_streams() {
        let root = Stream::new(1);
        let mut x = root.child(0);
        let mut y = root.child(1);
        assert_ne!(x.next_u64(), y.next_u64());
    }

    #[test]
    fn uniform_moments() {
        let mut s = Stream::new(5);
        let n = 100_000;
        let mean = (0..n).map(|_| s.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let mut s = Stream::new(6);
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.02 && (v - 1.0).abs() < 0.02);
    }

    #[test]
    fn poisson_mean() {
        let mut s = Stream::new(11);
        let n = 50_000;
        let mean = (0..n).map(|_| s.poisson(1.5) as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() < 0.03);
    }

    #[test]
    fn int_range_covers_bounds() {
        let mut s = Stream::new(2);
        let mut seen = [false; 4];
        for _ in 0..1000 {
            seen[s.int_range(3, 6) as usize - 3] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }
}
