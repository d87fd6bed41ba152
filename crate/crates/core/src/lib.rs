//! Unbiased and bias-controlled Monte Carlo estimates of the filter of a
//! partially observed diffusion.
//!
//! The estimator randomizes twice: over the Euler discretization level `l`
//! and over the batch index `p` that fixes the particle count `N_p`. Each
//! replicate is a single weighted term built from a particle filter (`l = 0`)
//! or a coupled particle filter (`l >= 1`); replicates are independent and run
//! in parallel. A multilevel particle filter is included as the comparison
//! baseline.
//!
//! Module map:
//!
//! * [`sde`]: diffusion models, Euler kernels, the coupled fine/coarse kernel
//! * [`observation`]: observation densities, benchmark models, data, Kalman filter
//! * [`particle_filter`]: bootstrap filter and independent batches
//! * [`coupled_pf`]: coupled resampling and the coupled filter
//! * [`randomization`]: pmfs, single-term draws and the estimators
//! * [`mlpf`]: multilevel particle filter
//! * [`experiment`]: cost accounting, experiment configs, CSV outputs

pub mod coupled_pf;
pub mod error;
pub mod experiment;
pub mod mlpf;
pub mod observation;
pub mod particle_filter;
pub mod randomization;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{FilterError, Result};
