//! Keyed random streams.
//!
//! Every random quantity in an estimate is drawn from a stream addressed by
//! `(seed, replicate, role, time)`. The same key always reproduces the same
//! sequence, so results do not depend on how replicates are scheduled across
//! threads, and a filter advanced one observation at a time consumes exactly
//! the randomness of a whole-horizon run.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Address of a stream below the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub replicate: u64,
    pub role: u64,
    pub time: u64,
}

impl StreamKey {
    pub const fn new(replicate: u64, role: u64, time: u64) -> Self {
        Self {
            replicate,
            role,
            time,
        }
    }

    pub const fn at_time(self, time: u64) -> Self {
        Self { time, ..self }
    }
}

/// What a stream is used for. Distinct roles never share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Sampling `(l, p)` for a replicate.
    Plan,
    /// Batch `q` of a particle filter.
    PfBatch(u32),
    /// Batch `q` of a coupled particle filter.
    CpfBatch(u32),
    /// The independent level-`l` filter of the single randomization scheme.
    SinglePf,
    /// Level `l` of a multilevel particle filter (level 0 coincides with `PfBatch(0)`).
    MlpfLevel(u32),
    /// Synthetic data generation.
    Data,
    /// Reference filter run `r`.
    Reference(u32),
}

impl Role {
    pub fn id(self) -> u64 {
        let (tag, idx): (u64, u32) = match self {
            Role::Plan => (1, 0),
            Role::PfBatch(q) => (2, q),
            Role::CpfBatch(q) => (3, q),
            Role::SinglePf => (4, 0),
            Role::MlpfLevel(0) => (2, 0),
            Role::MlpfLevel(l) => (3, l + (1 << 16)),
            Role::Data => (6, 0),
            Role::Reference(r) => (7, r),
        };
        (tag << 48) | idx as u64
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible random stream identified by a master seed and a [`StreamKey`].
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    key: StreamKey,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        let h0 = splitmix64(seed ^ 0x5bd1_e995_u64);
        let h1 = splitmix64(h0 ^ key.replicate);
        let h2 = splitmix64(h1 ^ key.role);
        let h3 = splitmix64(h2 ^ key.time);
        let mut bytes = [0u8; 32];
        for (i, chunk) in bytes.chunks_exact_mut(8).enumerate() {
            chunk.copy_from_slice(&splitmix64(h3.wrapping_add(i as u64 + 1)).to_le_bytes());
        }
        Self {
            seed,
            key,
            inner: ChaCha8Rng::from_seed(bytes),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }
}

impl RngCore for RngStream {
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

/// Source of the two primitive variates the samplers need.
///
/// Every [`RngCore`] is a noise source; [`ScriptedNoise`] replays fixed values.
pub trait NoiseSource {
    fn standard_normal(&mut self) -> f64;
    /// Uniform on `[0, 1)`.
    fn uniform(&mut self) -> f64;
}

impl<R: RngCore + ?Sized> NoiseSource for R {
    fn standard_normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }
}

/// Replays fixed normals and uniforms, cycling when exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedNoise {
    normals: Vec<f64>,
    uniforms: Vec<f64>,
    normal_pos: usize,
    uniform_pos: usize,
}

impl ScriptedNoise {
    pub fn new(normals: Vec<f64>, uniforms: Vec<f64>) -> Self {
        assert!(!normals.is_empty() && !uniforms.is_empty());
        Self {
            normals,
            uniforms,
            normal_pos: 0,
            uniform_pos: 0,
        }
    }

    /// Zero Gaussian noise and uniforms at one half (the median of any symmetric law).
    pub fn zero() -> Self {
        Self::new(vec![0.0], vec![0.5])
    }
}

impl NoiseSource for ScriptedNoise {
    fn standard_normal(&mut self) -> f64 {
        let v = self.normals[self.normal_pos % self.normals.len()];
        self.normal_pos += 1;
        v
    }

    fn uniform(&mut self) -> f64 {
        let v = self.uniforms[self.uniform_pos % self.uniforms.len()];
        self.uniform_pos += 1;
        v
    }
}
