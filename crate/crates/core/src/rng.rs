//! Small self-contained PRNG (SplitMix64) so mined data, training runs, and
//! random evaluation strategies reproduce bit-for-bit from a seed, independent
//! of external crate versions or platform.

/// SplitMix64 finalizer, also used to derive independent streams from a seed.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic pseudo-random generator.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive a generator from a (seed, stream) pair. Streams with different
    /// `stream` values are independent regardless of draw order elsewhere.
    pub fn from_seed_pair(seed: u64, stream: u64) -> Self {
        Self::new(mix64(seed).wrapping_add(mix64(stream ^ 0x517C_C1B7_2722_0A95)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_range called with n = 0");
        // Lemire's multiply-shift; bias is < 2^-64 per draw, which is
        // irrelevant here, and the mapping is deterministic.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.gen_range(i + 1);
            xs.swap(i, j);
        }
    }

    /// k distinct indices drawn uniformly from [0, n), in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.gen_range(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// Standard normal via Box-Muller.
    pub fn gaussian(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 < f64::MIN_POSITIVE {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
