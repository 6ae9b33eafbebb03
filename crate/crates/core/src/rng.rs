//! Counter-based Gaussian random numbers.
//!
//! Block `i` of a stream with key `K` is `fmix64(K + (i + 1) * 0x9E3779B97F4A7C15)`,
//! where `fmix64` is the SplitMix64 output finalizer. Standard normals come in
//! pairs from Box–Muller over two consecutive blocks `(a, b)`:
//!
//! ```text
//! u1 = ((a >> 11) + 1) * 2^-53        in (0, 1]
//! u2 = (b >> 11) * 2^-53              in [0, 1)
//! z0 = sqrt(-2 ln u1) * cos(2 pi u2)
//! z1 = sqrt(-2 ln u1) * sin(2 pi u2)
//! ```
//!
//! `z0` is returned first and `z1` is held for the next call. All
//! transcendental functions go through `libm`, so draws are bitwise identical
//! on every platform. Independent streams are derived from `(seed, index)`
//! without sequencing, see [`SeededRng::stream`].

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn fmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, key: seed, counter: 0, spare: None }
    }

    /// Independent stream `index` of `seed`.
    pub fn stream(seed: u64, index: u64) -> Self {
        let key = fmix64(seed ^ fmix64(index.wrapping_add(1).wrapping_mul(GAMMA)));
        Self { seed, key, counter: 0, spare: None }
    }

    /// Deterministic child seed, e.g. per subject of an experiment.
    pub fn derive_seed(seed: u64, index: u64) -> u64 {
        fmix64(fmix64(seed).wrapping_add(index.wrapping_mul(GAMMA)) ^ 0xD1B5_4A32_D192_ED03)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit blocks consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        fmix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        lo + (self.next_u64() % span) as usize
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let a = self.next_u64();
        let b = self.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}
