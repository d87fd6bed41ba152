//! Diffusion models, Euler-Maruyama stepping and the unit-time kernels.
//!
//! A level `l` kernel advances a state over one unit of time with `2^l` Euler
//! steps of size `2^-l`. The coupled kernel advances a fine (level `l`) and a
//! coarse (level `l - 1`) chain together: Gaussian increments are drawn for the
//! fine steps and summed pairwise to drive the coarse steps, so each marginal
//! is exactly the uncoupled kernel at its own level.

use std::fmt;
use std::sync::Arc;

use crate::error::{FilterError, Result};
use crate::rng::NoiseSource;

/// `a(x)`, written into the output slice of length `d`.
pub type DriftFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
/// `b(x)`, written row-major into the output slice of length `d * d`.
pub type DiffusionFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// `dZ = a(Z) dt + b(Z) dW`, started at `initial_state`.
#[derive(Clone)]
pub struct DiffusionModel {
    name: String,
    dim: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    initial_state: Vec<f64>,
    constant_diffusion: bool,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("initial_state", &self.initial_state)
            .field("constant_diffusion", &self.constant_diffusion)
            .finish_non_exhaustive()
    }
}

impl DiffusionModel {
    pub fn new(
        name: impl Into<String>,
        initial_state: Vec<f64>,
        drift: Arc<DriftFn>,
        diffusion: Arc<DiffusionFn>,
        constant_diffusion: bool,
    ) -> Self {
        assert!(
            !initial_state.is_empty(),
            "state dimension must be positive"
        );
        Self {
            name: name.into(),
            dim: initial_state.len(),
            drift,
            diffusion,
            initial_state,
            constant_diffusion,
        }
    }

    /// One-dimensional model from scalar drift and diffusion coefficients.
    pub fn scalar<A, B>(
        name: impl Into<String>,
        x0: f64,
        drift: A,
        diffusion: B,
        constant_diffusion: bool,
    ) -> Self
    where
        A: Fn(f64) -> f64 + Send + Sync + 'static,
        B: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::new(
            name,
            vec![x0],
            Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = drift(x[0])),
            Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = diffusion(x[0])),
            constant_diffusion,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }

    pub fn constant_diffusion(&self) -> bool {
        self.constant_diffusion
    }

    /// Strong rate of the coupled increments: 1 for constant `b`, 1/2 otherwise.
    pub fn beta(&self) -> f64 {
        if self.constant_diffusion {
            1.0
        } else {
            0.5
        }
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.drift)(x, &mut out);
        out
    }

    pub fn diffusion(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        (self.diffusion)(x, &mut out);
        out
    }

    fn overflow(&self, state: &[f64]) -> FilterError {
        FilterError::NumericalOverflow {
            model: self.name.clone(),
            state: state.to_vec(),
        }
    }
}

/// Euler discretization level `l`: step `2^-l`, `2^l` steps per unit time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Level(u32);

impl Level {
    /// Largest supported level; `2^l` must fit comfortably in the cost counter.
    pub const MAX: u32 = 40;

    pub fn new(l: u32) -> Result<Self> {
        if l > Self::MAX {
            return Err(FilterError::InvalidLevel {
                level: l,
                reason: "above the supported maximum",
            });
        }
        Ok(Self(l))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn dt(self) -> f64 {
        (-(self.0 as f64)).exp2()
    }

    pub fn steps_per_unit(self) -> u64 {
        1u64 << self.0
    }

    /// Euler steps spent by one coupled unit-time transition at this level.
    pub fn coupled_steps_per_unit(self) -> u64 {
        assert!(self.0 >= 1);
        self.steps_per_unit() + (self.steps_per_unit() >> 1)
    }

    pub fn coarser(self) -> Option<Level> {
        self.0.checked_sub(1).map(Level)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Additive count of Euler updates, owned by a single replicate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounter(u64);

impl CostCounter {
    pub fn new() -> Self {
        Self(0)
    }

    pub fn add(&mut self, steps: u64) {
        self.0 += steps;
    }

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn merge(&mut self, other: CostCounter) {
        self.0 += other.0;
    }
}

/// Scratch buffers for allocation-free stepping.
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    drift: Vec<f64>,
    diff: Vec<f64>,
    pub(crate) dw: Vec<f64>,
    pub(crate) dw_coarse: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            drift: vec![0.0; dim],
            diff: vec![0.0; dim * dim],
            dw: vec![0.0; dim],
            dw_coarse: vec![0.0; dim],
        }
    }
}

fn euler_in_place(
    model: &DiffusionModel,
    x: &mut [f64],
    dt: f64,
    dw: &[f64],
    ws: &mut Workspace,
) -> Result<()> {
    let d = model.dim;
    (model.drift)(x, &mut ws.drift);
    (model.diffusion)(x, &mut ws.diff);
    for (i, xi) in x.iter_mut().enumerate() {
        let noise: f64 = (0..d).map(|j| ws.diff[i * d + j] * dw[j]).sum();
        *xi += ws.drift[i] * dt + noise;
    }
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(model.overflow(x))
    }
}

/// One Euler-Maruyama update `x + a(x) dt + b(x) dw`.
pub fn euler_step(model: &DiffusionModel, x: &[f64], dt: f64, dw: &[f64]) -> Result<Vec<f64>> {
    assert!(dt > 0.0, "time step must be positive");
    assert_eq!(x.len(), model.dim);
    assert_eq!(dw.len(), model.dim);
    let mut out = x.to_vec();
    let mut ws = Workspace::new(model.dim);
    euler_in_place(model, &mut out, dt, dw, &mut ws)?;
    Ok(out)
}

pub(crate) fn transition_in_place<N: NoiseSource + ?Sized>(
    model: &DiffusionModel,
    x: &mut [f64],
    level: Level,
    noise: &mut N,
    ws: &mut Workspace,
    cost: &mut CostCounter,
) -> Result<()> {
    let dt = level.dt();
    let sd = dt.sqrt();
    let mut dw = std::mem::take(&mut ws.dw);
    for _ in 0..level.steps_per_unit() {
        for v in dw.iter_mut() {
            *v = sd * noise.standard_normal();
        }
        let r = euler_in_place(model, x, dt, &dw, ws);
        if r.is_err() {
            ws.dw = dw;
            return r;
        }
    }
    ws.dw = dw;
    cost.add(level.steps_per_unit());
    Ok(())
}

/// Level-`l` unit-time transition `M^l(x, .)`: `2^l` Euler steps with
/// `N(0, 2^-l I)` increments. Adds `2^l` to `cost`.
pub fn transition<N: NoiseSource + ?Sized>(
    model: &DiffusionModel,
    x: &[f64],
    level: Level,
    noise: &mut N,
    cost: &mut CostCounter,
) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    let mut ws = Workspace::new(model.dim);
    transition_in_place(model, &mut out, level, noise, &mut ws, cost)?;
    Ok(out)
}

pub(crate) fn coupled_transition_in_place<N: NoiseSource + ?Sized>(
    model: &DiffusionModel,
    fine: &mut [f64],
    coarse: &mut [f64],
    level: Level,
    noise: &mut N,
    ws: &mut Workspace,
    cost: &mut CostCounter,
) -> Result<()> {
    if level.get() == 0 {
        return Err(FilterError::InvalidLevel {
            level: 0,
            reason: "coupled transition needs l >= 1",
        });
    }
    let dt = level.dt();
    let sd = dt.sqrt();
    let mut dw = std::mem::take(&mut ws.dw);
    let mut dwc = std::mem::take(&mut ws.dw_coarse);
    let mut result = Ok(());
    'outer: for _ in 0..level.steps_per_unit() / 2 {
        dwc.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..2 {
            for (v, c) in dw.iter_mut().zip(dwc.iter_mut()) {
                *v = sd * noise.standard_normal();
                *c += *v;
            }
            result = euler_in_place(model, fine, dt, &dw, ws);
            if result.is_err() {
                break 'outer;
            }
        }
        result = euler_in_place(model, coarse, 2.0 * dt, &dwc, ws);
        if result.is_err() {
            break;
        }
    }
    ws.dw = dw;
    ws.dw_coarse = dwc;
    result?;
    cost.add(level.coupled_steps_per_unit());
    Ok(())
}

/// Synchronously coupled unit-time transition of a level-`l` and a level-`l-1`
/// chain. Adds `2^l + 2^(l-1)` to `cost`.
pub fn coupled_transition<N: NoiseSource + ?Sized>(
    model: &DiffusionModel,
    x_fine: &[f64],
    x_coarse: &[f64],
    level: Level,
    noise: &mut N,
    cost: &mut CostCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut f = x_fine.to_vec();
    let mut c = x_coarse.to_vec();
    let mut ws = Workspace::new(model.dim);
    coupled_transition_in_place(model, &mut f, &mut c, level, noise, &mut ws, cost)?;
    Ok((f, c))
}

/// Coupled transition driven by explicit fine increments (`2^l` rows of `d` values).
pub fn coupled_transition_with_increments(
    model: &DiffusionModel,
    x_fine: &[f64],
    x_coarse: &[f64],
    level: Level,
    increments: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if level.get() == 0 {
        return Err(FilterError::InvalidLevel {
            level: 0,
            reason: "coupled transition needs l >= 1",
        });
    }
    assert_eq!(increments.len() as u64, level.steps_per_unit());
    let dt = level.dt();
    let mut fine = x_fine.to_vec();
    let mut coarse = x_coarse.to_vec();
    let mut ws = Workspace::new(model.dim);
    for pair in increments.chunks_exact(2) {
        let summed: Vec<f64> = pair[0].iter().zip(&pair[1]).map(|(a, b)| a + b).collect();
        euler_in_place(model, &mut fine, dt, &pair[0], &mut ws)?;
        euler_in_place(model, &mut fine, dt, &pair[1], &mut ws)?;
        euler_in_place(model, &mut coarse, 2.0 * dt, &summed, &mut ws)?;
    }
    Ok((fine, coarse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, ScriptedNoise, StreamKey};

    fn ou() -> DiffusionModel {
        DiffusionModel::scalar("OU", 0.0, |x| -x, |_| 1.0, true)
    }

    fn brownian() -> DiffusionModel {
        DiffusionModel::scalar("BM", 0.0, |_| 0.0, |_| 1.0, true)
    }

    #[test]
    fn euler_step_examples() {
        assert_eq!(euler_step(&ou(), &[0.0], 0.5, &[0.0]).unwrap(), vec![0.0]);
        let gbm = DiffusionModel::scalar("GBM", 1.0, |x| 0.02 * x, |x| 0.2 * x, false);
        let y = euler_step(&gbm, &[1.0], 1.0, &[1.0]).unwrap()[0];
        assert!((y - 1.22).abs() < 1e-15);
        let nld = DiffusionModel::scalar("NLD", 0.0, |x| -x, |x| 1.0 / (1.0 + x * x).sqrt(), false);
        let y = euler_step(&nld, &[0.0], 0.5, &[0.2]).unwrap()[0];
        assert!((y - 0.2).abs() < 1e-15);
    }

    #[test]
    fn euler_step_reports_overflow() {
        let blowup = DiffusionModel::scalar("blowup", 0.0, |x| x * 1e308, |_| 1.0, true);
        match euler_step(&blowup, &[1e10], 1.0, &[0.0]) {
            Err(FilterError::NumericalOverflow { model, state }) => {
                assert_eq!(model, "blowup");
                assert_eq!(state.len(), 1);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn level_arithmetic_is_exact() {
        for l in 0..=Level::MAX {
            let lv = Level::new(l).unwrap();
            assert_eq!(lv.dt() * lv.steps_per_unit() as f64, 1.0);
        }
        assert!(Level::new(Level::MAX + 1).is_err());
    }

    #[test]
    fn level_zero_transition_is_one_step() {
        let mut noise = ScriptedNoise::new(vec![0.3], vec![0.5]);
        let mut cost = CostCounter::new();
        let y = transition(&ou(), &[1.0], Level::new(0).unwrap(), &mut noise, &mut cost).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-15);
        assert_eq!(cost.get(), 1);
    }

    #[test]
    fn transition_cost_is_two_to_the_level() {
        let mut rng = RngStream::new(1, StreamKey::new(0, 0, 0));
        let mut cost = CostCounter::new();
        transition(&ou(), &[0.0], Level::new(3).unwrap(), &mut rng, &mut cost).unwrap();
        assert_eq!(cost.get(), 8);
    }

    #[test]
    fn brownian_transition_has_unit_variance() {
        let n = 100_000;
        let mut rng = RngStream::new(11, StreamKey::new(0, 0, 0));
        let mut cost = CostCounter::new();
        let level = Level::new(3).unwrap();
        let xs: Vec<f64> = (0..n)
            .map(|_| transition(&brownian(), &[0.5], level, &mut rng, &mut cost).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let nf = n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (1.0 / nf).sqrt(), "mean {mean}");
        // Var of the sample variance of a Gaussian is 2 sigma^4 / (n - 1).
        assert!(
            (var - 1.0).abs() < 3.0 * (2.0 / (nf - 1.0)).sqrt(),
            "var {var}"
        );
        assert_eq!(cost.get(), 8 * n as u64);
    }

    #[test]
    fn coupled_ou_hand_example() {
        let (f, c) = coupled_transition_with_increments(
            &ou(),
            &[1.0],
            &[1.0],
            Level::new(1).unwrap(),
            &[vec![0.1], vec![-0.1]],
        )
        .unwrap();
        assert!((f[0] - 0.2).abs() < 1e-15);
        assert!(c[0].abs() < 1e-15);
    }

    #[test]
    fn coupled_brownian_paths_agree() {
        let mut rng = RngStream::new(5, StreamKey::new(0, 0, 0));
        let mut cost = CostCounter::new();
        for l in 1..6 {
            let (f, c) = coupled_transition(
                &brownian(),
                &[0.7],
                &[0.7],
                Level::new(l).unwrap(),
                &mut rng,
                &mut cost,
            )
            .unwrap();
            assert!((f[0] - c[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn coupled_transition_rejects_level_zero() {
        let mut rng = RngStream::new(5, StreamKey::new(0, 0, 0));
        let mut cost = CostCounter::new();
        assert!(matches!(
            coupled_transition(
                &ou(),
                &[0.0],
                &[0.0],
                Level::new(0).unwrap(),
                &mut rng,
                &mut cost
            ),
            Err(FilterError::InvalidLevel { .. })
        ));
        assert_eq!(cost.get(), 0);
    }

    #[test]
    fn coupled_cost_counts_both_chains() {
        let mut rng = RngStream::new(5, StreamKey::new(0, 0, 0));
        for l in 1..8u32 {
            let mut cost = CostCounter::new();
            coupled_transition(
                &ou(),
                &[0.0],
                &[0.0],
                Level::new(l).unwrap(),
                &mut rng,
                &mut cost,
            )
            .unwrap();
            assert_eq!(cost.get(), (1u64 << l) + (1u64 << (l - 1)));
        }
    }

    #[test]
    fn ou_coupling_difference_is_linear_in_increments() {
        // At l = 1 with a = -x, b = 1 and both chains at x:
        // fine = x/4 + xi1/2 + xi2, coarse = 0 * x + xi1 + xi2, so
        // fine - coarse = x/4 - xi1/2 for every x.
        let model = ou();
        for (x, a, b) in [(1.0, 0.1, -0.1), (-2.0, 0.3, 0.7), (0.5, -1.2, 0.4)] {
            let (f, c) = coupled_transition_with_increments(
                &model,
                &[x],
                &[x],
                Level::new(1).unwrap(),
                &[vec![a], vec![b]],
            )
            .unwrap();
            assert!((f[0] - c[0] - (x / 4.0 - a / 2.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn transition_is_deterministic_per_key() {
        let key = StreamKey::new(2, 3, 4);
        let run = || {
            let mut rng = RngStream::new(77, key);
            let mut cost = CostCounter::new();
            transition(&ou(), &[0.3], Level::new(4).unwrap(), &mut rng, &mut cost).unwrap()
        };
        assert_eq!(run()[0].to_bits(), run()[0].to_bits());
    }
}
