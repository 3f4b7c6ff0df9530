//! Counter-based random stream.
//!
//! Every output is a pure function of `(seed, stream, counter)`:
//!
//! ```text
//! key      = fmix(seed ^ fmix(stream ^ STREAM_SALT))
//! out[i]   = fmix(key + (i + 1) * GOLDEN)
//! fmix(z)  = splitmix64 finalizer:
//!            z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//!            z ^= z >> 27; z *= 0x94D049BB133111EB;
//!            z ^= z >> 31
//! ```
//!
//! with `GOLDEN = 0x9E3779B97F4A7C15` and `STREAM_SALT = 0xD1B54A32D192ED03`
//! (wrapping arithmetic throughout). Uniform doubles take the top 53 bits;
//! normals use Box-Muller on two consecutive uniforms, keeping only the
//! cosine branch so each normal consumes exactly two counter values.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;

fn fmix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream, key: fmix(seed ^ fmix(stream ^ STREAM_SALT)), counter: 0 }
    }

    /// Stream id derived from a label, so named consumers never collide by
    /// accident (FNV-1a, 64-bit).
    pub fn stream_id(label: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    pub fn named(seed: u64, label: &str) -> Self {
        Self::new(seed, Self::stream_id(label))
    }

    /// A sibling stream under the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, self.stream ^ fmix(stream.wrapping_add(GOLDEN)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        fmix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Multiply-shift; bias is below 2^-40 for the sizes used here.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
