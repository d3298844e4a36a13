//! Counter-based deterministic PRNG.
//!
//! All randomness in the workspace routes through [`CounterRng`], a
//! SplitMix64-style counter generator: output `i` of a stream is a pure
//! function `mix(key, i)` of the stream key and the counter. Streams are
//! derived from a root seed plus domain/index tags, so work partitioned
//! across users (or parameters, or steps) draws identical values no matter
//! how it is scheduled.

/// SplitMix64 finalizer. Bijective on u64.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A stream of the counter-based generator.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        CounterRng {
            key: mix(seed),
            counter: 0,
        }
    }

    /// Derive an independent substream. `tag` names the domain (a short
    /// constant per call site), `index` the unit of work (user id, step, ...).
    pub fn stream(&self, tag: u64, index: u64) -> Self {
        CounterRng {
            key: mix(self.key ^ mix(tag).wrapping_add(mix(index).rotate_left(17))),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.counter.wrapping_mul(0xd1b5_4a32_d192_ed03)));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be > 0.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        // Multiply-shift; bias is negligible for the n used here (≪ 2^32).
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Geometric number of failures before the first success, P(success)=p.
    /// Support {0, 1, 2, ...}, mean (1-p)/p.
    pub fn geometric(&mut self, p: f64) -> u64 {
        if p >= 1.0 {
            return 0;
        }
        let u = 1.0 - self.uniform(); // in (0, 1]
        libm::floor(libm::log(u) / libm::log(1.0 - p)) as u64
    }

    /// Poisson by inversion of the CDF; fine for the small means used here.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        let limit = libm::exp(-lambda);
        let mut product = self.uniform();
        let mut count = 0;
        while product > limit {
            product *= self.uniform();
            count += 1;
        }
        count
    }

    /// Exponential with the given mean.
    pub fn exponential(&mut self, mean: f64) -> f64 {
        let u = 1.0 - self.uniform();
        -mean * libm::log(u)
    }
}
