//! Coupled particle filter over (fine, coarse) pairs.
//!
//! Resampling draws index pairs `(j_f, j_c)` whose marginals are multinomial
//! in the fine and coarse weights respectively, and the new pair is produced
//! by the coupled kernel from `(x_fine[j_f], x_coarse[j_c])`. Two couplings of
//! the index pair are available:
//!
//! * maximal: with probability `alpha = sum_i min(wf_i, wc_i)` a common index
//!   is drawn from the overlap, otherwise the two indices are drawn
//!   independently from the normalized residuals;
//! * Wasserstein (1-D only): one uniform per draw is pushed through both
//!   weighted empirical CDFs of the position-sorted clouds.

use serde::{Deserialize, Serialize};

use crate::error::{FilterError, Result};
use crate::observation::{BenchmarkModel, DataSet};
use crate::particle_filter::{
    combine_batches, cumulative, invert_cumulative, normalize_log_weights, BatchMoments,
    BatchSchedule,
};
use crate::rng::{NoiseSource, RngStream, Role, StreamKey};
use crate::sde::{coupled_transition_in_place, CostCounter, DiffusionModel, Level, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResamplingScheme {
    #[default]
    Maximal,
    Wasserstein,
}

impl std::str::FromStr for ResamplingScheme {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maximal" => Ok(Self::Maximal),
            "wasserstein" => Ok(Self::Wasserstein),
            _ => Err(FilterError::Config(format!(
                "unknown resampling scheme `{s}`"
            ))),
        }
    }
}

/// Overlap mass and how often the drawn pair shared an index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingDiagnostics {
    pub alpha: f64,
    pub matched_fraction: f64,
}

/// Residual mass below which the matched branch is forced.
const RESIDUAL_GUARD: f64 = 1e-14;
const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(w: &[f64], which: &str) -> Result<()> {
    if w.is_empty() {
        return Err(FilterError::InvalidSimplex(format!(
            "{which} weights are empty"
        )));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(FilterError::InvalidSimplex(format!(
            "{which} weights must be finite and non-negative"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(FilterError::InvalidSimplex(format!(
            "{which} weights sum to {s}"
        )));
    }
    Ok(())
}

/// Overlap mass `sum_i min(wf_i, wc_i)`.
pub fn overlap_mass(wf: &[f64], wc: &[f64]) -> f64 {
    wf.iter().zip(wc).map(|(a, b)| a.min(*b)).sum()
}

/// Maximal coupling of two categorical laws on the same index set, `n` i.i.d. pairs.
pub fn maximal_coupling_resample<N: NoiseSource + ?Sized>(
    wf: &[f64],
    wc: &[f64],
    n: usize,
    noise: &mut N,
) -> Result<(Vec<(usize, usize)>, CouplingDiagnostics)> {
    check_simplex(wf, "fine")?;
    check_simplex(wc, "coarse")?;
    if wf.len() != wc.len() {
        return Err(FilterError::InvalidSimplex(
            "fine and coarse weights differ in length".into(),
        ));
    }
    let overlap: Vec<f64> = wf.iter().zip(wc).map(|(a, b)| a.min(*b)).collect();
    let alpha: f64 = overlap.iter().sum();
    let force_matched = 1.0 - alpha < RESIDUAL_GUARD;
    let common_cdf = cumulative(&overlap);
    let (res_f, res_c) = if force_matched {
        (Vec::new(), Vec::new())
    } else {
        let rf: Vec<f64> = wf
            .iter()
            .zip(&overlap)
            .map(|(a, m)| (a - m).max(0.0))
            .collect();
        let rc: Vec<f64> = wc
            .iter()
            .zip(&overlap)
            .map(|(a, m)| (a - m).max(0.0))
            .collect();
        (cumulative(&rf), cumulative(&rc))
    };
    let mut matched = 0usize;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let u = noise.uniform();
        if force_matched || u < alpha {
            let j = invert_cumulative(&common_cdf, noise.uniform());
            matched += 1;
            pairs.push((j, j));
        } else {
            let jf = invert_cumulative(&res_f, noise.uniform());
            let jc = invert_cumulative(&res_c, noise.uniform());
            pairs.push((jf, jc));
        }
    }
    let matched_fraction = if n == 0 {
        1.0
    } else {
        matched as f64 / n as f64
    };
    Ok((
        pairs,
        CouplingDiagnostics {
            alpha: alpha.min(1.0),
            matched_fraction,
        },
    ))
}

/// Comonotone coupling of two weighted 1-D clouds, `n` i.i.d. pairs of original indices.
pub fn wasserstein_resample<N: NoiseSource + ?Sized>(
    fine: &[f64],
    wf: &[f64],
    coarse: &[f64],
    wc: &[f64],
    dim: usize,
    n: usize,
    noise: &mut N,
) -> Result<Vec<(usize, usize)>> {
    if dim != 1 {
        return Err(FilterError::UnsupportedDimension(dim));
    }
    check_simplex(wf, "fine")?;
    check_simplex(wc, "coarse")?;
    let order = |pos: &[f64]| {
        let mut idx: Vec<usize> = (0..pos.len()).collect();
        idx.sort_by(|&a, &b| pos[a].total_cmp(&pos[b]));
        idx
    };
    let of = order(fine);
    let oc = order(coarse);
    let cdf_f = cumulative(&of.iter().map(|&i| wf[i]).collect::<Vec<_>>());
    let cdf_c = cumulative(&oc.iter().map(|&i| wc[i]).collect::<Vec<_>>());
    Ok((0..n)
        .map(|_| {
            let u = noise.uniform();
            (
                of[invert_cumulative(&cdf_f, u)],
                oc[invert_cumulative(&cdf_c, u)],
            )
        })
        .collect())
}

/// `N` (fine, coarse) pairs at levels `l` and `l - 1`.
#[derive(Debug, Clone)]
pub struct CoupledParticleSystem {
    level: Level,
    dim: usize,
    fine: Vec<f64>,
    coarse: Vec<f64>,
    time: usize,
    scheme: ResamplingScheme,
    ws: Workspace,
}

impl CoupledParticleSystem {
    /// Draws `n` pairs from the coupled kernel started at `(x*, x*)`.
    pub fn initialize<N: NoiseSource + ?Sized>(
        model: &DiffusionModel,
        level: Level,
        n: usize,
        scheme: ResamplingScheme,
        noise: &mut N,
        cost: &mut CostCounter,
    ) -> Result<Self> {
        assert!(n >= 1, "a coupled system needs at least one pair");
        if level.get() == 0 {
            return Err(FilterError::InvalidLevel {
                level: 0,
                reason: "coupled filters need l >= 1",
            });
        }
        let dim = model.dim();
        let mut ws = Workspace::new(dim);
        let mut fine = Vec::with_capacity(n * dim);
        let mut coarse = Vec::with_capacity(n * dim);
        for i in 0..n {
            fine.extend_from_slice(model.initial_state());
            coarse.extend_from_slice(model.initial_state());
            let r = i * dim..(i + 1) * dim;
            coupled_transition_in_place(
                model,
                &mut fine[r.clone()],
                &mut coarse[r],
                level,
                noise,
                &mut ws,
                cost,
            )?;
        }
        Ok(Self {
            level,
            dim,
            fine,
            coarse,
            time: 0,
            scheme,
            ws,
        })
    }

    pub fn from_pairs(
        level: Level,
        dim: usize,
        fine: Vec<f64>,
        coarse: Vec<f64>,
        scheme: ResamplingScheme,
    ) -> Self {
        assert!(level.get() >= 1);
        assert_eq!(fine.len(), coarse.len());
        assert!(!fine.is_empty() && fine.len().is_multiple_of(dim));
        Self {
            level,
            dim,
            fine,
            coarse,
            time: 0,
            scheme,
            ws: Workspace::new(dim),
        }
    }

    pub fn len(&self) -> usize {
        self.fine.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn scheme(&self) -> ResamplingScheme {
        self.scheme
    }

    pub fn fine_particles(&self) -> impl Iterator<Item = &[f64]> {
        self.fine.chunks_exact(self.dim)
    }

    pub fn coarse_particles(&self) -> impl Iterator<Item = &[f64]> {
        self.coarse.chunks_exact(self.dim)
    }

    pub fn fine(&self) -> &[f64] {
        &self.fine
    }

    pub fn coarse(&self) -> &[f64] {
        &self.coarse
    }

    pub fn log_weights(&self, log_g: &dyn Fn(&[f64]) -> f64) -> (Vec<f64>, Vec<f64>) {
        (
            self.fine_particles().map(log_g).collect(),
            self.coarse_particles().map(log_g).collect(),
        )
    }

    /// Fine and coarse batch moments.
    pub fn moments(
        &self,
        log_g: &dyn Fn(&[f64]) -> f64,
        phi: &dyn Fn(&[f64]) -> f64,
    ) -> Result<(BatchMoments, BatchMoments)> {
        let (lf, lc) = self.log_weights(log_g);
        Ok((
            BatchMoments::from_log_weights(&lf, self.fine_particles().map(phi), self.time)?,
            BatchMoments::from_log_weights(&lc, self.coarse_particles().map(phi), self.time)?,
        ))
    }

    /// Couples the index pairs under the configured scheme and propagates each pair.
    pub fn resample_and_propagate<N: NoiseSource + ?Sized>(
        &mut self,
        model: &DiffusionModel,
        wf: &[f64],
        wc: &[f64],
        noise: &mut N,
        cost: &mut CostCounter,
    ) -> Result<CouplingDiagnostics> {
        let n = self.len();
        let (pairs, diag) = match self.scheme {
            ResamplingScheme::Maximal => maximal_coupling_resample(wf, wc, n, noise)?,
            ResamplingScheme::Wasserstein => {
                let pairs =
                    wasserstein_resample(&self.fine, wf, &self.coarse, wc, self.dim, n, noise)?;
                let matched = pairs.iter().filter(|(a, b)| a == b).count();
                let alpha = overlap_mass(wf, wc);
                (
                    pairs,
                    CouplingDiagnostics {
                        alpha,
                        matched_fraction: matched as f64 / n as f64,
                    },
                )
            }
        };
        let d = self.dim;
        let mut fine = Vec::with_capacity(self.fine.len());
        let mut coarse = Vec::with_capacity(self.coarse.len());
        for &(jf, jc) in &pairs {
            fine.extend_from_slice(&self.fine[jf * d..(jf + 1) * d]);
            coarse.extend_from_slice(&self.coarse[jc * d..(jc + 1) * d]);
        }
        for i in 0..n {
            let r = i * d..(i + 1) * d;
            coupled_transition_in_place(
                model,
                &mut fine[r.clone()],
                &mut coarse[r],
                self.level,
                noise,
                &mut self.ws,
                cost,
            )?;
        }
        self.fine = fine;
        self.coarse = coarse;
        self.time += 1;
        Ok(diag)
    }
}

/// One coupled resampling/sampling step with weights `exp(log_g_prev)` on both marginals.
pub fn cpf_step<N: NoiseSource + ?Sized>(
    sys: &mut CoupledParticleSystem,
    model: &DiffusionModel,
    log_g_prev: &dyn Fn(&[f64]) -> f64,
    noise: &mut N,
    cost: &mut CostCounter,
) -> Result<CouplingDiagnostics> {
    let (lf, lc) = sys.log_weights(log_g_prev);
    let (wf, _) = normalize_log_weights(&lf, sys.time)?;
    let (wc, _) = normalize_log_weights(&lc, sys.time)?;
    sys.resample_and_propagate(model, &wf, &wc, noise, cost)
}

/// Fine self-normalized functional minus the coarse one, on a single system.
pub fn increment_functional(
    sys: &CoupledParticleSystem,
    log_g: &dyn Fn(&[f64]) -> f64,
    phi: &dyn Fn(&[f64]) -> f64,
) -> Result<f64> {
    let (f, c) = sys.moments(log_g, phi)?;
    Ok(f.ratio() - c.ratio())
}

/// Fine and coarse batch moments of one coupled batch run at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct CpfBatchEstimate {
    pub fine: Vec<BatchMoments>,
    pub coarse: Vec<BatchMoments>,
}

impl CpfBatchEstimate {
    /// Increment estimate pooling batches `0..=q`.
    pub fn increment(&self, q: usize) -> f64 {
        combine_batches(&self.fine[..=q]) - combine_batches(&self.coarse[..=q])
    }

    pub fn increment_all(&self) -> f64 {
        self.increment(self.fine.len() - 1)
    }

    pub fn fine_estimate(&self, q: usize) -> f64 {
        combine_batches(&self.fine[..=q])
    }

    pub fn coarse_estimate(&self, q: usize) -> f64 {
        combine_batches(&self.coarse[..=q])
    }

    /// `increment(q) - increment(q - 1)`, with the increment before batch 0 taken as 0.
    pub fn prefix_difference(&self, q: usize) -> f64 {
        if q == 0 {
            self.increment(0)
        } else {
            self.increment(q) - self.increment(q - 1)
        }
    }
}

/// Online batch coupled filter: batches `0..=p` at level `l`.
#[derive(Debug, Clone)]
pub struct BatchCpf<'a> {
    bm: &'a BenchmarkModel,
    systems: Vec<CoupledParticleSystem>,
    pending: Vec<(Vec<f64>, Vec<f64>)>,
    roles: Vec<Role>,
    seed: u64,
    replicate: u64,
    observed: usize,
    cost: CostCounter,
    diagnostics: Vec<CouplingDiagnostics>,
}

impl<'a> BatchCpf<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        bm: &'a BenchmarkModel,
        schedule: &BatchSchedule,
        p: u32,
        level: Level,
        scheme: ResamplingScheme,
        seed: u64,
        replicate: u64,
    ) -> Result<Self> {
        let sizes: Vec<usize> = (0..=p).map(|q| schedule.batch_size(q)).collect();
        let roles: Vec<Role> = (0..=p).map(Role::CpfBatch).collect();
        Self::with_roles(bm, &sizes, &roles, level, scheme, seed, replicate)
    }

    /// Independent coupled systems of the given sizes, each drawing from its own role.
    #[allow(clippy::too_many_arguments)]
    pub fn with_roles(
        bm: &'a BenchmarkModel,
        sizes: &[usize],
        roles: &[Role],
        level: Level,
        scheme: ResamplingScheme,
        seed: u64,
        replicate: u64,
    ) -> Result<Self> {
        assert_eq!(sizes.len(), roles.len());
        let mut cost = CostCounter::new();
        let mut systems = Vec::with_capacity(sizes.len());
        for (&size, role) in sizes.iter().zip(roles) {
            let mut rng = RngStream::new(seed, StreamKey::new(replicate, role.id(), 0));
            systems.push(CoupledParticleSystem::initialize(
                &bm.diffusion,
                level,
                size,
                scheme,
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
            diagnostics: Vec::new(),
        })
    }

    pub fn cost(&self) -> CostCounter {
        self.cost
    }

    pub fn systems(&self) -> &[CoupledParticleSystem] {
        &self.systems
    }

    /// Diagnostics of every resampling performed so far, batch-major per step.
    pub fn diagnostics(&self) -> &[CouplingDiagnostics] {
        &self.diagnostics
    }

    pub fn observe(&mut self, y: f64) -> Result<CpfBatchEstimate> {
        if !self.pending.is_empty() {
            for ((sys, (wf, wc)), role) in
                self.systems.iter_mut().zip(&self.pending).zip(&self.roles)
            {
                let key = StreamKey::new(self.replicate, role.id(), self.observed as u64);
                let mut rng = RngStream::new(self.seed, key);
                let diag = sys.resample_and_propagate(
                    &self.bm.diffusion,
                    wf,
                    wc,
                    &mut rng,
                    &mut self.cost,
                )?;
                self.diagnostics.push(diag);
            }
        }
        let obs = self.bm.observation;
        let log_g = move |x: &[f64]| obs.log_likelihood(x, y);
        let phi = self.bm.phi;
        let mut fine = Vec::with_capacity(self.systems.len());
        let mut coarse = Vec::with_capacity(self.systems.len());
        self.pending.clear();
        for sys in &self.systems {
            let (lf, lc) = sys.log_weights(&log_g);
            fine.push(BatchMoments::from_log_weights(
                &lf,
                sys.fine_particles().map(phi),
                sys.time(),
            )?);
            coarse.push(BatchMoments::from_log_weights(
                &lc,
                sys.coarse_particles().map(phi),
                sys.time(),
            )?);
            self.pending.push((
                normalize_log_weights(&lf, sys.time())?.0,
                normalize_log_weights(&lc, sys.time())?.0,
            ));
        }
        self.observed += 1;
        Ok(CpfBatchEstimate { fine, coarse })
    }
}

/// Runs coupled batches `0..=p` at level `l` over all of `data`.
#[allow(clippy::too_many_arguments)]
pub fn batch_cpf_run(
    bm: &BenchmarkModel,
    data: &DataSet,
    schedule: &BatchSchedule,
    p: u32,
    level: Level,
    scheme: ResamplingScheme,
    seed: u64,
    replicate: u64,
) -> Result<(Vec<CpfBatchEstimate>, CostCounter)> {
    let mut cpf = BatchCpf::new(bm, schedule, p, level, scheme, seed, replicate)?;
    let out = data
        .observations()
        .iter()
        .map(|&y| cpf.observe(y))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, cpf.cost()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{generate_data, make_benchmark, Generation, ModelName};
    use crate::rng::ScriptedNoise;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, StreamKey::new(0, 0, 0))
    }

    #[test]
    fn identical_weights_always_match() {
        let w = [0.1, 0.2, 0.3, 0.4];
        let (pairs, diag) = maximal_coupling_resample(&w, &w, 1000, &mut rng(1)).unwrap();
        assert!((diag.alpha - 1.0).abs() < 1e-15);
        assert_eq!(diag.matched_fraction, 1.0);
        assert!(pairs.iter().all(|(a, b)| a == b));
    }

    #[test]
    fn hand_case_residuals() {
        let wf = [0.8, 0.2];
        let wc = [0.6, 0.4];
        assert!((overlap_mass(&wf, &wc) - 0.8).abs() < 1e-15);
        // First uniform above alpha sends the draw to the residual branch.
        let mut noise = ScriptedNoise::new(vec![0.0], vec![0.95, 0.5, 0.5]);
        let (pairs, diag) = maximal_coupling_resample(&wf, &wc, 1, &mut noise).unwrap();
        assert_eq!(diag.alpha, 0.8);
        assert_eq!(pairs, vec![(0, 1)]);
        // Matched branch picks proportionally to (0.6, 0.2).
        let mut noise = ScriptedNoise::new(vec![0.0], vec![0.1, 0.74]);
        assert_eq!(
            maximal_coupling_resample(&wf, &wc, 1, &mut noise)
                .unwrap()
                .0,
            vec![(0, 0)]
        );
        let mut noise = ScriptedNoise::new(vec![0.0], vec![0.1, 0.76]);
        assert_eq!(
            maximal_coupling_resample(&wf, &wc, 1, &mut noise)
                .unwrap()
                .0,
            vec![(1, 1)]
        );
        let (pairs, _) = maximal_coupling_resample(&wf, &wc, 20_000, &mut rng(3)).unwrap();
        let residual: Vec<_> = pairs.iter().filter(|(a, b)| a != b).collect();
        assert!(residual.iter().all(|&&p| p == (0, 1)));
    }

    #[test]
    fn invalid_simplex() {
        let mut r = rng(0);
        assert!(matches!(
            maximal_coupling_resample(&[0.5, 0.6], &[0.5, 0.5], 3, &mut r),
            Err(FilterError::InvalidSimplex(_))
        ));
        assert!(matches!(
            maximal_coupling_resample(&[1.5, -0.5], &[0.5, 0.5], 3, &mut r),
            Err(FilterError::InvalidSimplex(_))
        ));
    }

    #[test]
    fn wasserstein_identical_clouds_match() {
        let pos = [0.3, -1.0, 2.0, 0.3, 5.0];
        let w = [0.1, 0.3, 0.2, 0.25, 0.15];
        let pairs = wasserstein_resample(&pos, &w, &pos, &w, 1, 5000, &mut rng(2)).unwrap();
        assert!(pairs.iter().all(|(a, b)| a == b));
    }

    #[test]
    fn wasserstein_is_comonotone() {
        let fine = [3.0, 1.0, 2.0, 0.0];
        let coarse: Vec<f64> = fine.iter().map(|x| 2.0 * x + 10.0).rev().collect();
        let w = [0.25; 4];
        let rank = |pos: &[f64], i: usize| pos.iter().filter(|&&v| v < pos[i]).count();
        let pairs = wasserstein_resample(&fine, &w, &coarse, &w, 1, 2000, &mut rng(5)).unwrap();
        for (a, b) in pairs {
            assert_eq!(rank(&fine, a), rank(&coarse, b));
        }
    }

    #[test]
    fn wasserstein_rejects_dimension_two() {
        let r = wasserstein_resample(&[0.0, 0.0], &[1.0], &[0.0, 0.0], &[1.0], 2, 1, &mut rng(0));
        assert!(matches!(r, Err(FilterError::UnsupportedDimension(2))));
    }

    #[test]
    fn perfect_coupling_is_preserved() {
        // With a = 0 and constant b both Euler grids give the same unit-time map,
        // so matched indices and shared noise keep identical clouds identical.
        let flat = DiffusionModel::scalar("BM", 0.0, |_| 0.0, |_| 1.0, true);
        let level = Level::new(3).unwrap();
        let pos = vec![0.1, -0.4, 0.9, 1.3];
        let mut sys = CoupledParticleSystem::from_pairs(
            level,
            1,
            pos.clone(),
            pos,
            ResamplingScheme::Maximal,
        );
        let mut cost = CostCounter::new();
        for _ in 0..3 {
            let diag = cpf_step(&mut sys, &flat, &|_| 0.0, &mut rng(7), &mut cost).unwrap();
            assert_eq!(diag.matched_fraction, 1.0);
            for (f, c) in sys.fine().iter().zip(sys.coarse()) {
                assert!((f - c).abs() < 1e-12);
            }
        }
        assert_eq!(cost.get(), 3 * 4 * 12);
    }

    #[test]
    fn single_pair_is_identity_resampling() {
        let (pairs, diag) = maximal_coupling_resample(&[1.0], &[1.0], 1, &mut rng(1)).unwrap();
        assert_eq!(pairs, vec![(0, 0)]);
        assert_eq!(diag.alpha, 1.0);
    }

    #[test]
    fn increment_of_equal_marginals_and_constant_phi() {
        let level = Level::new(2).unwrap();
        let pos = vec![0.2, 0.5, -0.3];
        let sys = CoupledParticleSystem::from_pairs(
            level,
            1,
            pos.clone(),
            pos,
            ResamplingScheme::Maximal,
        );
        assert_eq!(
            increment_functional(&sys, &|x| -x[0] * x[0], &|x| x[0]).unwrap(),
            0.0
        );
        let sys = CoupledParticleSystem::from_pairs(
            level,
            1,
            vec![0.2, 0.5],
            vec![1.0, -2.0],
            ResamplingScheme::Maximal,
        );
        assert_eq!(
            increment_functional(&sys, &|x| -x[0] * x[0], &|_| 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn coupled_initialization_rejects_level_zero() {
        let model = DiffusionModel::scalar("OU", 0.0, |x| -x, |_| 1.0, true);
        let r = CoupledParticleSystem::initialize(
            &model,
            Level::new(0).unwrap(),
            3,
            ResamplingScheme::Maximal,
            &mut rng(0),
            &mut CostCounter::new(),
        );
        assert!(matches!(r, Err(FilterError::InvalidLevel { .. })));
    }

    #[test]
    fn batch_cpf_prefixes_and_cost() {
        let bm = make_benchmark(ModelName::Ou);
        let data = generate_data(&bm, 3, Generation::Exact, 3).unwrap();
        let sched = BatchSchedule::doubling(3).unwrap();
        let level = Level::new(2).unwrap();
        for scheme in [ResamplingScheme::Maximal, ResamplingScheme::Wasserstein] {
            let (short, c0) = batch_cpf_run(&bm, &data, &sched, 0, level, scheme, 5, 1).unwrap();
            let (long, c2) = batch_cpf_run(&bm, &data, &sched, 2, level, scheme, 5, 1).unwrap();
            for (s, l) in short.iter().zip(&long) {
                assert_eq!(s.fine[0], l.fine[0]);
                assert_eq!(s.coarse[0], l.coarse[0]);
                assert_eq!(s.increment(0).to_bits(), l.increment(0).to_bits());
            }
            assert_eq!(c0.get(), 3 * 3 * 6);
            assert_eq!(c2.get(), 3 * 12 * 6);
        }
    }
}
