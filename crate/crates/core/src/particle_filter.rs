//! Bootstrap particle filter and its independent-batch composition.
//!
//! A batch run with schedule `N_0 < N_1 < ... < N_p` runs `p + 1` mutually
//! independent filters of sizes `N_0, N_1 - N_0, ..., N_p - N_{p-1}`. The
//! filter estimate through batch `q` pools the first `q + 1` batches, so the
//! estimates for every prefix share their batches bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{FilterError, Result};
use crate::observation::{BenchmarkModel, DataSet};
use crate::rng::{NoiseSource, RngStream, Role, StreamKey};
use crate::sde::{transition_in_place, CostCounter, DiffusionModel, Level, Workspace};

/// Strictly increasing particle counts `N_p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchSchedule {
    /// `N_p = n0 * 2^p`.
    Doubling { n0: usize },
    /// Explicit `N_0, N_1, ...`; `p` beyond the list is an error.
    Explicit(Vec<usize>),
}

impl BatchSchedule {
    pub fn doubling(n0: usize) -> Result<Self> {
        if n0 == 0 {
            return Err(FilterError::InvalidPlan("N_0 must be at least 1".into()));
        }
        Ok(BatchSchedule::Doubling { n0 })
    }

    pub fn explicit(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes[0] == 0 || sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FilterError::InvalidPlan(format!(
                "schedule {sizes:?} is not strictly increasing from >= 1"
            )));
        }
        Ok(BatchSchedule::Explicit(sizes))
    }

    pub fn n0(&self) -> usize {
        self.n(0)
    }

    /// `N_p`.
    pub fn n(&self, p: u32) -> usize {
        match self {
            BatchSchedule::Doubling { n0 } => n0
                .checked_shl(p)
                .filter(|v| v >> p == *n0)
                .expect("N_p overflows usize"),
            BatchSchedule::Explicit(sizes) => sizes[p as usize],
        }
    }

    /// `N_p` for `p >= 0` and 0 for `p = -1`.
    pub fn n_or_zero(&self, p: i64) -> usize {
        if p < 0 {
            0
        } else {
            self.n(p as u32)
        }
    }

    /// `N_q - N_{q-1}`.
    pub fn batch_size(&self, q: u32) -> usize {
        self.n(q) - self.n_or_zero(q as i64 - 1)
    }

    pub fn supports(&self, p: u32) -> bool {
        match self {
            BatchSchedule::Doubling { n0 } => p < usize::BITS && (n0 << p) >> p == *n0,
            BatchSchedule::Explicit(sizes) => (p as usize) < sizes.len(),
        }
    }
}

/// Normalizes log-weights by max subtraction.
///
/// Returns the normalized weights and `ln` of the factor removed, so that the
/// raw weights are `exp(log_scale) * total * normalized`.
pub fn normalize_log_weights(log_w: &[f64], time: usize) -> Result<(Vec<f64>, f64)> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || log_w.iter().any(|w| w.is_nan()) {
        return Err(FilterError::DegenerateWeights { time });
    }
    let mut w: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok((w, max + total.ln()))
}

/// Cumulative sums of `weights`, last entry forced to the total.
pub(crate) fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Index drawn by inverting a cumulative table at `u * total`.
pub(crate) fn invert_cumulative(cdf: &[f64], u: f64) -> usize {
    let target = u * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= target).min(cdf.len() - 1)
}

/// `n` i.i.d. draws from the categorical law `weights` (need not be normalized).
pub fn multinomial_resample<N: NoiseSource + ?Sized>(
    weights: &[f64],
    n: usize,
    noise: &mut N,
) -> Vec<usize> {
    let cdf = cumulative(weights);
    (0..n)
        .map(|_| invert_cumulative(&cdf, noise.uniform()))
        .collect()
}

/// Unnormalized moments of one batch: `eta(G) = exp(log_scale) * mean_g`,
/// `eta(G phi) = exp(log_scale) * mean_g_phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMoments {
    pub count: usize,
    pub log_scale: f64,
    pub mean_g: f64,
    pub mean_g_phi: f64,
}

impl BatchMoments {
    pub fn from_log_weights(
        log_w: &[f64],
        phi_values: impl Iterator<Item = f64>,
        time: usize,
    ) -> Result<Self> {
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || log_w.iter().any(|w| w.is_nan()) {
            return Err(FilterError::DegenerateWeights { time });
        }
        let n = log_w.len() as f64;
        let (mut sg, mut sgp) = (0.0, 0.0);
        for (lw, phi) in log_w.iter().zip(phi_values) {
            let g = (lw - max).exp();
            sg += g;
            sgp += g * phi;
        }
        Ok(Self {
            count: log_w.len(),
            log_scale: max,
            mean_g: sg / n,
            mean_g_phi: sgp / n,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.mean_g_phi / self.mean_g
    }
}

/// Self-normalized functional pooled over batches with weights `count / total`.
pub fn combine_batches(batches: &[BatchMoments]) -> f64 {
    if let [single] = batches {
        return single.ratio();
    }
    let max = batches
        .iter()
        .map(|b| b.log_scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for b in batches {
        let s = b.count as f64 * (b.log_scale - max).exp();
        num += s * b.mean_g_phi;
        den += s * b.mean_g;
    }
    num / den
}

/// Per-batch moments of one batch run at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct PfBatchEstimate {
    pub batches: Vec<BatchMoments>,
}

impl PfBatchEstimate {
    /// Filter estimate pooling batches `0..=q`.
    pub fn combined(&self, q: usize) -> f64 {
        combine_batches(&self.batches[..=q])
    }

    pub fn combined_all(&self) -> f64 {
        combine_batches(&self.batches)
    }

    /// `combined(q) - combined(q - 1)`, with the estimate before batch 0 taken as 0.
    pub fn prefix_difference(&self, q: usize) -> f64 {
        if q == 0 {
            self.combined(0)
        } else {
            self.combined(q) - self.combined(q - 1)
        }
    }
}

/// `N` particles at one Euler level.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    level: Level,
    dim: usize,
    positions: Vec<f64>,
    time: usize,
    ws: Workspace,
}

impl ParticleSystem {
    /// Draws `n` particles from `M^l(x*, .)`.
    pub fn initialize<N: NoiseSource + ?Sized>(
        model: &DiffusionModel,
        level: Level,
        n: usize,
        noise: &mut N,
        cost: &mut CostCounter,
    ) -> Result<Self> {
        assert!(n >= 1, "a particle system needs at least one particle");
        let dim = model.dim();
        let mut ws = Workspace::new(dim);
        let mut positions = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let start = positions.len();
            positions.extend_from_slice(model.initial_state());
            transition_in_place(model, &mut positions[start..], level, noise, &mut ws, cost)?;
        }
        Ok(Self {
            level,
            dim,
            positions,
            time: 0,
            ws,
        })
    }

    /// A system at time 0 with given positions (flattened, `dim` values per particle).
    pub fn from_positions(level: Level, dim: usize, positions: Vec<f64>) -> Self {
        assert!(!positions.is_empty() && positions.len().is_multiple_of(dim));
        Self {
            level,
            dim,
            positions,
            time: 0,
            ws: Workspace::new(dim),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> impl Iterator<Item = &[f64]> {
        self.positions.chunks_exact(self.dim)
    }

    pub fn log_weights(&self, log_g: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        self.particles().map(log_g).collect()
    }

    pub fn moments(
        &self,
        log_g: &dyn Fn(&[f64]) -> f64,
        phi: &dyn Fn(&[f64]) -> f64,
    ) -> Result<BatchMoments> {
        let lw = self.log_weights(log_g);
        BatchMoments::from_log_weights(&lw, self.particles().map(phi), self.time)
    }

    /// Multinomial resampling with `weights`, then one level-`l` transition per particle.
    pub fn resample_and_propagate<N: NoiseSource + ?Sized>(
        &mut self,
        model: &DiffusionModel,
        weights: &[f64],
        noise: &mut N,
        cost: &mut CostCounter,
    ) -> Result<()> {
        let n = self.len();
        let idx = multinomial_resample(weights, n, noise);
        let mut next = Vec::with_capacity(self.positions.len());
        for &j in &idx {
            next.extend_from_slice(self.particle(j));
        }
        for i in 0..n {
            transition_in_place(
                model,
                &mut next[i * self.dim..(i + 1) * self.dim],
                self.level,
                noise,
                &mut self.ws,
                cost,
            )?;
        }
        self.positions = next;
        self.time += 1;
        Ok(())
    }
}

/// One resampling/sampling step with weights `exp(log_g_prev)`.
pub fn pf_step<N: NoiseSource + ?Sized>(
    sys: &mut ParticleSystem,
    model: &DiffusionModel,
    log_g_prev: &dyn Fn(&[f64]) -> f64,
    noise: &mut N,
    cost: &mut CostCounter,
) -> Result<()> {
    let (w, _) = normalize_log_weights(&sys.log_weights(log_g_prev), sys.time)?;
    sys.resample_and_propagate(model, &w, noise, cost)
}

/// `sum g(x_i) phi(x_i) / sum g(x_i)` over one system.
pub fn filter_functional(
    sys: &ParticleSystem,
    log_g: &dyn Fn(&[f64]) -> f64,
    phi: &dyn Fn(&[f64]) -> f64,
) -> Result<f64> {
    Ok(sys.moments(log_g, phi)?.ratio())
}

/// Online batch particle filter: batches `0..=p`, advanced one observation at a time.
#[derive(Debug, Clone)]
pub struct BatchPf<'a> {
    bm: &'a BenchmarkModel,
    systems: Vec<ParticleSystem>,
    pending: Vec<Vec<f64>>,
    roles: Vec<Role>,
    seed: u64,
    replicate: u64,
    observed: usize,
    cost: CostCounter,
}

impl<'a> BatchPf<'a> {
    pub fn new(
        bm: &'a BenchmarkModel,
        schedule: &BatchSchedule,
        p: u32,
        level: Level,
        seed: u64,
        replicate: u64,
    ) -> Result<Self> {
        let sizes: Vec<usize> = (0..=p).map(|q| schedule.batch_size(q)).collect();
        Self::with_batch_sizes(bm, &sizes, level, seed, replicate)
    }

    /// Independent batches of the given sizes; batch `q` draws from role `PfBatch(q)`.
    pub fn with_batch_sizes(
        bm: &'a BenchmarkModel,
        sizes: &[usize],
        level: Level,
        seed: u64,
        replicate: u64,
    ) -> Result<Self> {
        let roles: Vec<Role> = (0..sizes.len() as u32).map(Role::PfBatch).collect();
        Self::with_roles(bm, sizes, &roles, level, seed, replicate)
    }

    /// Independent batches of the given sizes, each drawing from its own role.
    pub fn with_roles(
        bm: &'a BenchmarkModel,
        sizes: &[usize],
        roles: &[Role],
        level: Level,
        seed: u64,
        replicate: u64,
    ) -> Result<Self> {
        assert_eq!(sizes.len(), roles.len());
        let mut cost = CostCounter::new();
        let mut systems = Vec::with_capacity(sizes.len());
        for (&size, role) in sizes.iter().zip(roles) {
            let mut rng = RngStream::new(seed, StreamKey::new(replicate, role.id(), 0));
            systems.push(ParticleSystem::initialize(
                &bm.diffusion,
                level,
                size,
                &mut rng,
                &mut cost,
            )?);
        }
        Ok(Self {
            bm,
            systems,
            pending: Vec::new(),
            roles: roles.to_vec(),
            seed,
            replicate,
            observed: 0,
            cost,
        })
    }

    pub fn cost(&self) -> CostCounter {
        self.cost
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    pub fn systems(&self) -> &[ParticleSystem] {
        &self.systems
    }

    /// Consumes the next observation and returns the batch moments for it.
    pub fn observe(&mut self, y: f64) -> Result<PfBatchEstimate> {
        if !self.pending.is_empty() {
            for ((sys, w), role) in self.systems.iter_mut().zip(&self.pending).zip(&self.roles) {
                let key = StreamKey::new(self.replicate, role.id(), self.observed as u64);
                let mut rng = RngStream::new(self.seed, key);
                sys.resample_and_propagate(&self.bm.diffusion, w, &mut rng, &mut self.cost)?;
            }
        }
        let obs = self.bm.observation;
        let log_g = move |x: &[f64]| obs.log_likelihood(x, y);
        let phi = self.bm.phi;
        let mut batches = Vec::with_capacity(self.systems.len());
        self.pending.clear();
        for sys in &self.systems {
            let lw = sys.log_weights(&log_g);
            batches.push(BatchMoments::from_log_weights(
                &lw,
                sys.particles().map(phi),
                sys.time(),
            )?);
            self.pending.push(normalize_log_weights(&lw, sys.time())?.0);
        }
        self.observed += 1;
        Ok(PfBatchEstimate { batches })
    }
}

/// Runs batches `0..=p` over all of `data`; returns one estimate per observation and the cost.
pub fn batch_pf_run(
    bm: &BenchmarkModel,
    data: &DataSet,
    schedule: &BatchSchedule,
    p: u32,
    level: Level,
    seed: u64,
    replicate: u64,
) -> Result<(Vec<PfBatchEstimate>, CostCounter)> {
    let mut pf = BatchPf::new(bm, schedule, p, level, seed, replicate)?;
    let out = data
        .observations()
        .iter()
        .map(|&y| pf.observe(y))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, pf.cost()))
}
