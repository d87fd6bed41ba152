//! Multilevel particle filter: a level-0 filter plus independent coupled
//! increments at levels `1..=L`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupled_pf::{BatchCpf, ResamplingScheme};
use crate::error::{FilterError, Result};
use crate::observation::{BenchmarkModel, DataSet};
use crate::particle_filter::BatchPf;
use crate::rng::Role;
use crate::sde::Level;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionRegime {
    /// `M_l = ceil(C_1 2^(2L - 1.5 l))`.
    ConstantB,
    /// `M_l = ceil(C_1 2^(2L - l) max(L, 1))`.
    NonconstantB,
}

impl DiffusionRegime {
    pub fn for_model(bm: &BenchmarkModel) -> Self {
        if bm.diffusion.constant_diffusion() {
            DiffusionRegime::ConstantB
        } else {
            DiffusionRegime::NonconstantB
        }
    }
}

/// Particle counts `M_0..=M_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAllocation {
    pub l_max: u32,
    pub counts: Vec<usize>,
    pub c1: f64,
    pub regime: DiffusionRegime,
}

pub fn allocate(l_max: u32, regime: DiffusionRegime, c1: f64) -> Result<LevelAllocation> {
    if !(c1 > 0.0 && c1.is_finite()) {
        return Err(FilterError::InvalidPlan(format!(
            "C_1 must be positive, got {c1}"
        )));
    }
    Level::new(l_max)?;
    let big_l = l_max as f64;
    let counts = (0..=l_max)
        .map(|l| {
            let l = l as f64;
            let m = match regime {
                DiffusionRegime::ConstantB => c1 * (2.0 * big_l - 1.5 * l).exp2(),
                DiffusionRegime::NonconstantB => c1 * (2.0 * big_l - l).exp2() * big_l.max(1.0),
            };
            (m.ceil() as usize).max(1)
        })
        .collect();
    Ok(LevelAllocation {
        l_max,
        counts,
        c1,
        regime,
    })
}

impl LevelAllocation {
    /// `n (M_0 + sum_{l>=1} M_l (2^l + 2^(l-1)))`.
    pub fn cost(&self, n: usize) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .map(|(l, &m)| {
                let per = if l == 0 {
                    1
                } else {
                    (1u64 << l) + (1u64 << (l - 1))
                };
                m as u64 * per * n as u64
            })
            .sum()
    }
}

/// Contribution of one level: the level-0 filter or a fine-minus-coarse increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpfLevel {
    pub l: u32,
    pub particles: usize,
    pub trace: Vec<f64>,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpfEstimate {
    pub per_time: Vec<f64>,
    pub levels: Vec<MlpfLevel>,
    pub cost: u64,
}

impl MlpfEstimate {
    pub fn value(&self) -> f64 {
        *self.per_time.last().expect("non-empty horizon")
    }
}

fn run_level(
    bm: &BenchmarkModel,
    data: &DataSet,
    alloc: &LevelAllocation,
    l: u32,
    scheme: ResamplingScheme,
    seed: u64,
    replicate: u64,
) -> Result<MlpfLevel> {
    let level = Level::new(l)?;
    let m = alloc.counts[l as usize];
    let (trace, cost) = if l == 0 {
        let mut pf = BatchPf::with_batch_sizes(bm, &[m], level, seed, replicate)?;
        let trace = data
            .observations()
            .iter()
            .map(|&y| pf.observe(y).map(|e| e.combined(0)))
            .collect::<Result<_>>()?;
        (trace, pf.cost().get())
    } else {
        let mut cpf = BatchCpf::with_roles(
            bm,
            &[m],
            &[Role::MlpfLevel(l)],
            level,
            scheme,
            seed,
            replicate,
        )?;
        let trace = data
            .observations()
            .iter()
            .map(|&y| cpf.observe(y).map(|e| e.increment(0)))
            .collect::<Result<_>>()?;
        (trace, cpf.cost().get())
    };
    Ok(MlpfLevel {
        l,
        particles: m,
        trace,
        cost,
    })
}

/// One MLPF run; levels are independent and run in parallel on the current rayon pool.
pub fn mlpf_estimate(
    bm: &BenchmarkModel,
    data: &DataSet,
    alloc: &LevelAllocation,
    scheme: ResamplingScheme,
    seed: u64,
    replicate: u64,
) -> Result<MlpfEstimate> {
    if data.is_empty() {
        return Err(FilterError::Config("data set is empty".into()));
    }
    let levels = (0..=alloc.l_max)
        .into_par_iter()
        .map(|l| run_level(bm, data, alloc, l, scheme, seed, replicate))
        .collect::<Result<Vec<_>>>()?;
    let per_time = (0..data.len())
        .map(|t| levels.iter().map(|lv| lv.trace[t]).sum())
        .collect();
    let cost = levels.iter().map(|lv| lv.cost).sum();
    Ok(MlpfEstimate {
        per_time,
        levels,
        cost,
    })
}

/// `reps` independent MLPF runs on a pool of `threads` workers, in replicate order.
pub fn mlpf_replicates(
    bm: &BenchmarkModel,
    data: &DataSet,
    alloc: &LevelAllocation,
    scheme: ResamplingScheme,
    reps: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<MlpfEstimate>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| FilterError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|r| {
                mlpf_estimate(bm, data, alloc, scheme, seed, r).map_err(|e| {
                    FilterError::ReplicateFailed {
                        replicate: r,
                        l: alloc.l_max,
                        p: 0,
                        source: Box::new(e),
                    }
                })
            })
            .collect()
    })
}
