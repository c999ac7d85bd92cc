use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Splittable, counter-based random source.
///
/// Identical `(seed, stream)` pairs produce identical draw sequences, and
/// [`SeededRng::derive`] hands out child generators whose sequences do not
/// depend on how many draws the parent (or any sibling) has made. Parallel
/// workers therefore get reproducible streams regardless of thread count.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngId {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn id(&self) -> RngId {
        RngId {
            seed: self.seed,
            stream: self.stream,
        }
    }

    /// Child generator keyed by `tag`. Depends only on `(seed, stream, tag)`.
    pub fn derive(&self, tag: u64) -> SeededRng {
        let child_seed = splitmix64(self.seed ^ splitmix64(self.stream ^ 0xA5A5_5A5A_C3C3_3C3C));
        SeededRng::new(child_seed, tag)
    }

    /// Two-level derivation, e.g. `(iteration, draw)`.
    pub fn derive2(&self, a: u64, b: u64) -> SeededRng {
        self.derive(a).derive(b)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.standard_normal();
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
