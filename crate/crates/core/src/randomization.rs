//! Probability mass functions over levels and batch indices, single-term
//! draws and the replicate estimators.
//!
//! A replicate samples `(l, p)`, runs `p + 1` independent batches of a
//! particle filter (`l = 0`) or a coupled particle filter (`l >= 1`), and
//! returns the difference between the estimate pooling all batches and the one
//! pooling the first `p`, divided by `P(p | l)`. The replicate's weighted term
//! is that value divided by `P_L(l)`, and the estimate is the average over
//! independent replicates.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupled_pf::{BatchCpf, ResamplingScheme};
use crate::error::{FilterError, Result};
use crate::experiment::{cost_of_draw, single_randomized_cost};
use crate::observation::{BenchmarkModel, DataSet};
use crate::particle_filter::{BatchPf, BatchSchedule};
use crate::rng::{NoiseSource, RngStream, Role, StreamKey};
use crate::sde::Level;
use crate::stats::{mean_and_variance, pairwise_sum};

type MassFn = Arc<dyn Fn(u32) -> f64 + Send + Sync>;

/// A strictly positive pmf on `{0..=max}` or on all of `Z+`.
#[derive(Clone)]
pub struct Pmf {
    masses: Vec<f64>,
    cdf: Vec<f64>,
    /// Unnormalized mass function and its normalizer, for unbounded support.
    tail: Option<(MassFn, f64)>,
}

impl fmt::Debug for Pmf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pmf")
            .field("masses", &self.masses)
            .field("unbounded", &self.tail.is_some())
            .finish()
    }
}

impl Pmf {
    /// Normalizes strictly positive weights on `{0..weights.len()-1}`.
    pub fn finite(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(FilterError::InvalidPlan(format!(
                "pmf weights must be positive and finite: {weights:?}"
            )));
        }
        let total = pairwise_sum(weights);
        let masses: Vec<f64> = weights.iter().map(|w| w / total).collect();
        Ok(Self::from_masses(masses, None))
    }

    /// Pmf proportional to `f` on all of `Z+`.
    ///
    /// `f` must be positive and eventually decreasing fast enough to be summable;
    /// the table stops once a term falls below `1e-18` of the running total.
    pub fn unbounded<F>(f: F) -> Result<Self>
    where
        F: Fn(u32) -> f64 + Send + Sync + 'static,
    {
        const MAX_TERMS: u32 = 200_000;
        let mut terms = Vec::new();
        let mut total = 0.0;
        for k in 0..MAX_TERMS {
            let t = f(k);
            if !(t.is_finite() && t > 0.0) {
                return Err(FilterError::InvalidPlan(format!(
                    "mass function is not positive at {k}"
                )));
            }
            terms.push(t);
            total += t;
            if k >= 8 && t < 1e-18 * total {
                let masses = terms.iter().map(|t| t / total).collect();
                return Ok(Self::from_masses(masses, Some((Arc::new(f), total))));
            }
        }
        Err(FilterError::InvalidPlan(
            "mass function is not summable".into(),
        ))
    }

    fn from_masses(masses: Vec<f64>, tail: Option<(MassFn, f64)>) -> Self {
        let mut acc = 0.0;
        let cdf = masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        Self { masses, cdf, tail }
    }

    pub fn is_unbounded(&self) -> bool {
        self.tail.is_some()
    }

    /// Largest supported value, `None` when unbounded.
    pub fn max(&self) -> Option<u32> {
        if self.tail.is_some() {
            None
        } else {
            Some(self.masses.len() as u32 - 1)
        }
    }

    /// Tabulated masses (the whole support when bounded).
    pub fn table(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass(&self, k: u32) -> f64 {
        match (self.masses.get(k as usize), &self.tail) {
            (Some(m), _) => *m,
            (None, Some((f, total))) => f(k) / total,
            (None, None) => 0.0,
        }
    }

    pub fn sample<N: NoiseSource + ?Sized>(&self, noise: &mut N) -> u32 {
        let u = noise.uniform();
        let k = self.cdf.partition_point(|&c| c <= u);
        if k < self.cdf.len() {
            return k as u32;
        }
        match &self.tail {
            None => (self.cdf.len() - 1) as u32,
            Some((f, total)) => {
                // Walk the tail beyond the table; reached with probability below 1e-17.
                let mut acc = self.cdf[self.cdf.len() - 1];
                let mut k = self.cdf.len() as u32;
                loop {
                    acc += f(k) / total;
                    if u < acc || k == u32::MAX {
                        return k;
                    }
                    k += 1;
                }
            }
        }
    }
}

/// How the batch index is drawn given the level.
#[derive(Debug, Clone)]
pub enum BatchPmf {
    Independent(Pmf),
    PerLevel(Vec<Pmf>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// `P_L(l) ~ 2^(-l beta rho)`, `P_P(p) ~ 2^-p (p+1) log2(p+2)^2`.
    Theory,
    /// `P_L(l) ~ 2^-l (l+1) log2(l+2)^2`, `P_P` as in `Theory`.
    ConstantDiffusion,
    /// Finite support `{0..=L_max}` with a level-dependent batch pmf.
    Truncated,
}

/// Pmfs over `(l, p)`, the schedule `N_p` and run settings shared by all replicates.
#[derive(Debug, Clone)]
pub struct RandomizationPlan {
    pub kind: PlanKind,
    pub pmf_level: Pmf,
    pub pmf_batch: BatchPmf,
    pub schedule: BatchSchedule,
    pub l_max: Option<u32>,
    pub beta: Option<f64>,
    pub rho: Option<f64>,
    pub resampling: ResamplingScheme,
    /// Largest Euler-step cost a single draw may have before it is refused.
    pub cost_budget: Option<u64>,
}

fn log2_sq(x: f64) -> f64 {
    let v = x.log2();
    v * v
}

fn theory_batch_pmf() -> Result<Pmf> {
    Pmf::unbounded(|p| (-(p as f64)).exp2() * (p as f64 + 1.0) * log2_sq(p as f64 + 2.0))
}

/// Unbounded plan with `P_L(l) ~ (2^(-l beta))^rho`, `N_p = n0 2^p`.
pub fn make_theory_plan(beta: f64, rho: f64, n0: usize) -> Result<RandomizationPlan> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(FilterError::InvalidRate(format!(
            "rho must lie in (0, 1), got {rho}"
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(FilterError::InvalidRate(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if n0 == 0 {
        return Err(FilterError::InvalidRate("N_0 must be at least 1".into()));
    }
    let exponent = beta * rho;
    Ok(RandomizationPlan {
        kind: PlanKind::Theory,
        pmf_level: Pmf::unbounded(move |l| (-(l as f64) * exponent).exp2())?,
        pmf_batch: BatchPmf::Independent(theory_batch_pmf()?),
        schedule: BatchSchedule::doubling(n0)?,
        l_max: None,
        beta: Some(beta),
        rho: Some(rho),
        resampling: ResamplingScheme::Maximal,
        cost_budget: None,
    })
}

/// Unbounded plan for constant diffusion coefficients:
/// `P_L(l) ~ 2^-l (l+1) log2(l+2)^2`, `N_p = n0 2^p`.
pub fn make_constant_diffusion_plan(n0: usize) -> Result<RandomizationPlan> {
    if n0 == 0 {
        return Err(FilterError::InvalidRate("N_0 must be at least 1".into()));
    }
    Ok(RandomizationPlan {
        kind: PlanKind::ConstantDiffusion,
        pmf_level: Pmf::unbounded(|l| {
            (-(l as f64)).exp2() * (l as f64 + 1.0) * log2_sq(l as f64 + 2.0)
        })?,
        pmf_batch: BatchPmf::Independent(theory_batch_pmf()?),
        schedule: BatchSchedule::doubling(n0)?,
        l_max: None,
        beta: Some(1.0),
        rho: None,
        resampling: ResamplingScheme::Maximal,
        cost_budget: None,
    })
}

/// Truncated plan on `{0..=l_max}`: `P_L(l) ~ 2^(-1.5 l)` and, with `P_max(l) = l_max - l`,
/// `P(p | l) ~ 2^(4-p)` for `p <= min(4, P_max)`, `2^-p p log2(p)^2` for `5 <= p <= P_max`.
pub fn make_truncated_plan(l_max: u32, n0: usize) -> Result<RandomizationPlan> {
    if l_max > Level::MAX {
        return Err(FilterError::InvalidPlan(format!(
            "L_max = {l_max} is above the supported maximum"
        )));
    }
    let level_weights: Vec<f64> = (0..=l_max).map(|l| (-1.5 * l as f64).exp2()).collect();
    let per_level = (0..=l_max)
        .map(|l| {
            let p_max = l_max - l;
            let w: Vec<f64> = (0..=p_max)
                .map(|p| {
                    if p <= 4 {
                        (4.0 - p as f64).exp2()
                    } else {
                        let pf = p as f64;
                        (-pf).exp2() * pf * log2_sq(pf)
                    }
                })
                .collect();
            Pmf::finite(&w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RandomizationPlan {
        kind: PlanKind::Truncated,
        pmf_level: Pmf::finite(&level_weights)?,
        pmf_batch: BatchPmf::PerLevel(per_level),
        schedule: BatchSchedule::doubling(n0)?,
        l_max: Some(l_max),
        beta: None,
        rho: None,
        resampling: ResamplingScheme::Maximal,
        cost_budget: None,
    })
}

/// `N_0` used for truncated plans: 10 for constant diffusion coefficients, 50 otherwise.
pub fn default_n0(constant_diffusion: bool) -> usize {
    if constant_diffusion {
        10
    } else {
        50
    }
}

impl RandomizationPlan {
    pub fn with_resampling(mut self, scheme: ResamplingScheme) -> Self {
        self.resampling = scheme;
        self
    }

    pub fn with_cost_budget(mut self, budget: u64) -> Self {
        self.cost_budget = Some(budget);
        self
    }

    /// Truncated plans target the level-`L_max` filter, not the exact one.
    pub fn bias_controlled(&self) -> bool {
        self.kind == PlanKind::Truncated
    }

    pub fn batch_pmf(&self, l: u32) -> Option<&Pmf> {
        match &self.pmf_batch {
            BatchPmf::Independent(p) => Some(p),
            BatchPmf::PerLevel(v) => v.get(l as usize),
        }
    }

    pub fn prob_level(&self, l: u32) -> f64 {
        self.pmf_level.mass(l)
    }

    /// `P(p | l)`.
    pub fn prob_batch(&self, l: u32, p: u32) -> f64 {
        self.batch_pmf(l).map_or(0.0, |pmf| pmf.mass(p))
    }

    pub fn p_max(&self, l: u32) -> Option<u32> {
        self.batch_pmf(l).and_then(Pmf::max)
    }

    pub fn supports(&self, l: u32, p: u32) -> bool {
        self.prob_level(l) > 0.0 && self.prob_batch(l, p) > 0.0 && self.schedule.supports(p)
    }

    pub fn sample<N: NoiseSource + ?Sized>(&self, noise: &mut N) -> (u32, u32) {
        let l = self.pmf_level.sample(noise);
        let p = self
            .batch_pmf(l)
            .expect("level drawn from its own support")
            .sample(noise);
        (l, p)
    }

    /// `sum_l sum_p P_L(l) P(p|l) cost_of_draw(l, p, n)`.
    ///
    /// Infinite for the unbounded plans, where `P(p) N_p` grows with `p`.
    pub fn expected_cost(&self, n: usize) -> f64 {
        if self.pmf_level.is_unbounded()
            || matches!(&self.pmf_batch, BatchPmf::Independent(p) if p.is_unbounded())
        {
            return f64::INFINITY;
        }
        let mut total = 0.0;
        for (l, pl) in self.pmf_level.table().iter().enumerate() {
            let pmf = self.batch_pmf(l as u32).expect("level in support");
            for (p, pp) in pmf.table().iter().enumerate() {
                if self.schedule.supports(p as u32) {
                    total += pl * pp * cost_of_draw(l as u32, p as u32, n, &self.schedule) as f64;
                }
            }
        }
        total
    }
}

/// One replicate: `Xi_{l,p}` per observation and its level weight `1 / P_L(l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiSample {
    pub replicate: u64,
    pub l: u32,
    pub p: u32,
    /// `Xi_{l,p}` after each observation (`1 / P(p|l)` already applied).
    pub trace: Vec<f64>,
    pub weight: f64,
    pub cost: u64,
    pub retries: u32,
}

impl XiSample {
    /// `Xi_{l,p}` at the last observation.
    pub fn xi(&self) -> f64 {
        *self.trace.last().expect("at least one observation")
    }

    /// `Xi_{l,p} / P_L(l)` at the last observation.
    pub fn weighted(&self) -> f64 {
        self.weight * self.xi()
    }
}

/// Estimate after `n` observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEstimate {
    pub n: usize,
    pub estimate: f64,
    pub stderr: f64,
}

/// Average of `M` weighted single-term draws.
#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasedEstimate {
    pub per_time: Vec<TimeEstimate>,
    pub m: usize,
    pub total_cost: u64,
    pub retries: u64,
    pub bias_controlled: bool,
    pub draws: Vec<XiSample>,
}

impl UnbiasedEstimate {
    /// Reduces draws in replicate order; the result does not depend on how they were computed.
    pub fn from_draws(draws: Vec<XiSample>, bias_controlled: bool) -> Self {
        let m = draws.len();
        assert!(m > 0, "no draws");
        let horizon = draws[0].trace.len();
        let per_time = (0..horizon)
            .map(|t| {
                let vals: Vec<f64> = draws.iter().map(|d| d.weight * d.trace[t]).collect();
                let (mean, var) = mean_and_variance(&vals);
                TimeEstimate {
                    n: t + 1,
                    estimate: mean,
                    stderr: (var / m as f64).sqrt(),
                }
            })
            .collect();
        Self {
            per_time,
            m,
            total_cost: draws.iter().map(|d| d.cost).sum(),
            retries: draws.iter().map(|d| d.retries as u64).sum(),
            bias_controlled,
            draws,
        }
    }

    pub fn value(&self) -> f64 {
        self.per_time.last().expect("non-empty horizon").estimate
    }

    pub fn stderr(&self) -> f64 {
        self.per_time.last().expect("non-empty horizon").stderr
    }
}

/// What to do when a replicate fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Abort the whole estimate.
    Strict,
    /// Rerun the replicate with fresh streams (same `(l, p)`), up to `max_retries` times.
    Permissive { max_retries: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub threads: usize,
    pub failure: FailurePolicy,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            failure: FailurePolicy::Strict,
        }
    }
}

impl RunOptions {
    pub fn threads(threads: usize) -> Self {
        Self {
            threads,
            ..Self::default()
        }
    }
}

/// Replicate key for attempt `attempt` of replicate `i`.
fn attempt_key(i: u64, attempt: u32) -> u64 {
    i | ((attempt as u64) << 40)
}

/// Runs `m` replicates in parallel and returns their draws in replicate order.
///
/// Replicate `i` samples `(l, p)` from its own plan stream and calls
/// `draw(replicate_key, l, p)`; the key changes on each permissive retry.
pub fn run_replicates<F>(
    plan: &RandomizationPlan,
    m: usize,
    seed: u64,
    opts: RunOptions,
    draw: F,
) -> Result<Vec<XiSample>>
where
    F: Fn(u64, u32, u32) -> Result<XiSample> + Sync,
{
    if m == 0 {
        return Err(FilterError::Config("M must be at least 1".into()));
    }
    let one = |i: u64| -> Result<XiSample> {
        let mut rng = RngStream::new(seed, StreamKey::new(i, Role::Plan.id(), 0));
        let (l, p) = plan.sample(&mut rng);
        let mut attempt = 0u32;
        loop {
            match draw(attempt_key(i, attempt), l, p) {
                Ok(mut s) => {
                    s.replicate = i;
                    s.retries = attempt;
                    return Ok(s);
                }
                Err(e) => {
                    let retry = match opts.failure {
                        FailurePolicy::Strict => false,
                        FailurePolicy::Permissive { max_retries } => {
                            attempt < max_retries
                                && !matches!(e, FilterError::BudgetExceeded { .. })
                        }
                    };
                    if !retry {
                        return Err(match e {
                            e @ FilterError::ReplicateFailed { .. } => e,
                            e => FilterError::ReplicateFailed {
                                replicate: i,
                                l,
                                p,
                                source: Box::new(e),
                            },
                        });
                    }
                    attempt += 1;
                }
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| FilterError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<XiSample>> =
        pool.install(|| (0..m as u64).into_par_iter().map(one).collect());
    results.into_iter().collect()
}

/// `Xi_{l,p}` for one replicate, with every observation of `data` consumed online.
pub fn draw_xi(
    plan: &RandomizationPlan,
    bm: &BenchmarkModel,
    data: &DataSet,
    l: u32,
    p: u32,
    seed: u64,
    replicate: u64,
) -> Result<XiSample> {
    if !plan.supports(l, p) {
        return Err(FilterError::InvalidPlan(format!(
            "(l = {l}, p = {p}) is outside the plan support"
        )));
    }
    if data.is_empty() {
        return Err(FilterError::Config("data set is empty".into()));
    }
    let n = data.len();
    let expected_cost = cost_of_draw(l, p, n, &plan.schedule);
    if let Some(budget) = plan.cost_budget {
        if expected_cost > budget {
            return Err(FilterError::BudgetExceeded {
                l,
                p,
                cost: expected_cost,
                budget,
            });
        }
    }
    let level = Level::new(l)?;
    let inv_pp = 1.0 / plan.prob_batch(l, p);
    let q = p as usize;
    let wrap = |e: FilterError| FilterError::ReplicateFailed {
        replicate,
        l,
        p,
        source: Box::new(e),
    };
    let (trace, cost) = if l == 0 {
        let mut pf = BatchPf::new(bm, &plan.schedule, p, level, seed, replicate).map_err(wrap)?;
        let mut trace = Vec::with_capacity(n);
        for &y in data.observations() {
            trace.push(inv_pp * pf.observe(y).map_err(wrap)?.prefix_difference(q));
        }
        (trace, pf.cost())
    } else {
        let mut cpf = BatchCpf::new(
            bm,
            &plan.schedule,
            p,
            level,
            plan.resampling,
            seed,
            replicate,
        )
        .map_err(wrap)?;
        let mut trace = Vec::with_capacity(n);
        for &y in data.observations() {
            trace.push(inv_pp * cpf.observe(y).map_err(wrap)?.prefix_difference(q));
        }
        (trace, cpf.cost())
    };
    debug_assert_eq!(cost.get(), expected_cost);
    Ok(XiSample {
        replicate,
        l,
        p,
        trace,
        weight: 1.0 / plan.prob_level(l),
        cost: cost.get(),
        retries: 0,
    })
}

/// Doubly randomized estimate from `m` independent replicates.
pub fn unbiased_estimate(
    plan: &RandomizationPlan,
    bm: &BenchmarkModel,
    data: &DataSet,
    m: usize,
    seed: u64,
    opts: RunOptions,
) -> Result<UnbiasedEstimate> {
    let draws = run_replicates(plan, m, seed, opts, |key, l, p| {
        draw_xi(plan, bm, data, l, p, seed, key)
    })?;
    Ok(UnbiasedEstimate::from_draws(draws, plan.bias_controlled()))
}

/// One draw of the single randomization scheme at level `l`, with `N_l` from the plan schedule.
///
/// `l = 0` is a plain filter with `N_0` particles. For `l >= 1` the term combines an
/// independent level-`l` filter of `N_l - N_{l-1}` particles with a coupled filter of
/// `N_{l-1}` pairs: `((N_l - N_{l-1}) / N_l) pf + (N_{l-1} / N_l) fine - coarse`.
pub fn draw_single_randomized(
    plan: &RandomizationPlan,
    bm: &BenchmarkModel,
    data: &DataSet,
    l: u32,
    seed: u64,
    replicate: u64,
) -> Result<XiSample> {
    if plan.prob_level(l) <= 0.0 || !plan.schedule.supports(l) {
        return Err(FilterError::InvalidPlan(format!(
            "level {l} is outside the plan support"
        )));
    }
    let n = data.len();
    let expected_cost = single_randomized_cost(l, n, &plan.schedule);
    if let Some(budget) = plan.cost_budget {
        if expected_cost > budget {
            return Err(FilterError::BudgetExceeded {
                l,
                p: 0,
                cost: expected_cost,
                budget,
            });
        }
    }
    let level = Level::new(l)?;
    let wrap = |e: FilterError| FilterError::ReplicateFailed {
        replicate,
        l,
        p: 0,
        source: Box::new(e),
    };
    let (trace, cost) = if l == 0 {
        let mut pf = BatchPf::with_batch_sizes(bm, &[plan.schedule.n(0)], level, seed, replicate)
            .map_err(wrap)?;
        let trace = data
            .observations()
            .iter()
            .map(|&y| pf.observe(y).map(|e| e.combined(0)))
            .collect::<Result<Vec<_>>>();
        (trace.map_err(wrap)?, pf.cost().get())
    } else {
        let n_l = plan.schedule.n(l);
        let n_prev = plan.schedule.n(l - 1);
        let fresh = n_l - n_prev;
        let mut pf =
            BatchPf::with_batch_sizes(bm, &[fresh], level, seed, replicate).map_err(wrap)?;
        let mut cpf = BatchCpf::with_roles(
            bm,
            &[n_prev],
            &[Role::SinglePf],
            level,
            plan.resampling,
            seed,
            replicate,
        )
        .map_err(wrap)?;
        let a = fresh as f64 / n_l as f64;
        let b = n_prev as f64 / n_l as f64;
        let mut trace = Vec::with_capacity(n);
        for &y in data.observations() {
            let pf_est = pf.observe(y).map_err(wrap)?.combined(0);
            let c = cpf.observe(y).map_err(wrap)?;
            trace.push(a * pf_est + b * c.fine_estimate(0) - c.coarse_estimate(0));
        }
        (trace, pf.cost().get() + cpf.cost().get())
    };
    debug_assert_eq!(cost, expected_cost);
    Ok(XiSample {
        replicate,
        l,
        p: 0,
        trace,
        weight: 1.0 / plan.prob_level(l),
        cost,
        retries: 0,
    })
}

/// Single randomization over the level only; provided for comparison.
pub fn single_randomized_estimate(
    plan: &RandomizationPlan,
    bm: &BenchmarkModel,
    data: &DataSet,
    m: usize,
    seed: u64,
    opts: RunOptions,
) -> Result<UnbiasedEstimate> {
    let draws = run_replicates(plan, m, seed, opts, |key, l, _| {
        draw_single_randomized(plan, bm, data, l, seed, key)
    })?;
    Ok(UnbiasedEstimate::from_draws(draws, plan.bias_controlled()))
}

/// Expected Euler-step cost of one single-randomization draw.
pub fn single_randomized_expected_cost(plan: &RandomizationPlan, n: usize) -> f64 {
    plan.pmf_level
        .table()
        .iter()
        .enumerate()
        .filter(|(l, _)| plan.schedule.supports(*l as u32))
        .map(|(l, pl)| pl * single_randomized_cost(l as u32, n, &plan.schedule) as f64)
        .sum()
}
