//! Seeded pseudo-random numbers.
//!
//! Everything stochastic in this crate draws from an explicit [`SplitMix64`]
//! handle; there is no hidden global generator. The single-`u64` state makes
//! snapshots trivial, which checkpoint resume relies on.

/// SplitMix64 generator (Steele, Lea & Flood 2014). Splittable: child
/// generators are seeded from the parent's output stream, and independent
/// streams can be derived from `base_seed ^ stream_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for `stream_id` under the same base seed.
    pub fn for_stream(base_seed: u64, stream_id: u64) -> Self {
        Self::new(base_seed ^ stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller. Uses two uniforms per draw so the
    /// state stays a single u64 (no cached second sample).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Child generator seeded from this one's stream.
    pub fn split(&mut self) -> Self {
        Self::new(self.next_u64())
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn restore(state: u64) -> Self {
        Self { state }
    }
}
