//! Deterministic counter-based PRNG.
//!
//! Every stochastic operation in the crate (weight init, dropout masks,
//! shuffling, synthetic signals, calibration sampling) draws from this
//! generator, so a run is fully determined by its seed on every platform.
//! The output function is the SplitMix64 finalizer applied to
//! `seed ^ mix(counter)`; streams for sub-tasks are derived by hashing a
//! label into a fresh seed, which keeps parallel folds statistically
//! independent without shared state.

/// Counter-based deterministic random generator.
///
/// Identical seed => identical draw sequence, bit for bit.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent stream for a labelled sub-task (fold index,
    /// layer name, epoch number). Does not advance this generator.
    pub fn derive(&self, label: &str) -> Rng {
        let mut h = self.seed ^ 0x51_7c_c1_b7_27_22_0a_95;
        for b in label.as_bytes() {
            h = splitmix64(h ^ u64::from(*b));
        }
        Rng::new(h)
    }

    /// Derive an independent stream for a numeric sub-task index.
    pub fn derive_u64(&self, index: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(index ^ GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        splitmix64(self.seed ^ self.counter.wrapping_mul(GOLDEN))
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        // u in (0,1] so ln is finite
        let u = 1.0 - self.next_f64();
        let v = self.next_f64();
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
