//! Splittable counter-based random stream.
//!
//! Every stochastic operation in the crate takes an explicit stream, so a run
//! is fully determined by its top-level seed. Streams split by name or index
//! without sharing state; the generator is SplitMix64 evaluated at
//! `base + counter`, so a stream is a pure function of (base, counter).

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic random stream addressed by (base, counter).
#[derive(Debug, Clone)]
pub struct RngStream {
    base: u64,
    counter: u64,
}

impl RngStream {
    pub fn seed(seed: u64) -> Self {
        Self {
            base: mix(seed ^ 0xd6e8_feb8_6659_fd93),
            counter: 0,
        }
    }

    /// Split off an independent stream named by a label.
    pub fn derive(&self, label: &str) -> Self {
        let mut h = FNV_OFFSET;
        for b in label.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
        Self {
            base: mix(self.base ^ h),
            counter: 0,
        }
    }

    /// Split off an independent stream addressed by an index.
    pub fn derive_index(&self, index: u64) -> Self {
        Self {
            base: mix(self.base ^ index.wrapping_mul(GOLDEN) ^ 0x517c_c1b7_2722_0a95),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.base.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u32 << 24) as f32
    }

    /// Uniform in (0, 1] with 53 bits, for log-based samplers.
    fn next_unit_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Box-Muller normal sample.
    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        let u1 = self.next_unit_f64();
        let u2 = self.next_unit_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + std * z as f32
    }

    /// Rademacher sample: -1 or +1 with equal probability.
    pub fn rademacher(&mut self) -> f32 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Unbiased integer in [0, n) by rejection.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below requires n > 0");
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
