//! Cost accounting, experiment configuration and the runs behind the `upf` binary.
//!
//! Every run reads and writes plain CSV files in one output directory:
//!
//! | file | columns |
//! |------|---------|
//! | `data.csv` | `k,y` (plus a `data.json` sidecar) |
//! | `reference.csv` | `n,mean,stderr,method` |
//! | `draws.csv` | `replicate,l,p,xi,weight,cost` |
//! | `summary.csv` | `n,estimate,stderr,M,total_cost` |
//! | `cost_by_draw.csv` | `l,p,draws,cost` |
//! | `cost_summary.csv` | `total_cost,closed_form_total,draws,mean_per_draw,expected_per_draw,bias_controlled` |
//! | `mse_vs_cost.csv` | `m,groups,cost,mse,bias2,variance` |
//! | `mlpf.csv` | `L,l,M_l,estimate_l,cost_l` |
//! | `mlpf_mse.csv` | `L,repeats,cost,mse,bias2,variance` |
//! | `variance_by_level.csv` | `l,N,repeats,mean,variance,log2_variance` |
//! | `variance_slope.csv` | `from,to,slope` |
//! | `cost_ratio.csv` | `mse,mlpf_cost,unbiased_cost,ratio` |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupled_pf::{BatchCpf, ResamplingScheme};
use crate::error::{FilterError, Result};
use crate::mlpf::{allocate, mlpf_replicates, DiffusionRegime, MlpfEstimate};
use crate::observation::{
    generate_data, kalman_reference, make_benchmark, BenchmarkModel, DataSet, Generation, ModelName,
};
use crate::particle_filter::{BatchPf, BatchSchedule};
use crate::randomization::{
    default_n0, make_theory_plan, make_truncated_plan, single_randomized_estimate,
    single_randomized_expected_cost, unbiased_estimate, FailurePolicy, RandomizationPlan,
    RunOptions, UnbiasedEstimate, XiSample,
};
use crate::rng::Role;
use crate::sde::Level;
use crate::stats::{least_squares_slope, mean_and_variance, pairwise_sum};

/// Euler steps of one doubly randomized draw: `n N_p` at level 0, `n N_p (2^l + 2^(l-1))` above.
pub fn cost_of_draw(l: u32, p: u32, n: usize, schedule: &BatchSchedule) -> u64 {
    let per = if l == 0 {
        1
    } else {
        (1u64 << l) + (1u64 << (l - 1))
    };
    n as u64 * schedule.n(p) as u64 * per
}

/// Euler steps of one single-randomization draw at level `l`.
pub fn single_randomized_cost(l: u32, n: usize, schedule: &BatchSchedule) -> u64 {
    let n = n as u64;
    if l == 0 {
        return n * schedule.n(0) as u64;
    }
    let n_l = schedule.n(l) as u64;
    let n_prev = schedule.n(l - 1) as u64;
    n * ((n_l - n_prev) * (1u64 << l) + n_prev * ((1u64 << l) + (1u64 << (l - 1))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Generate,
    #[default]
    Unbiased,
    SingleRand,
    Mlpf,
    Sweep,
    Reference,
}

/// Everything a run needs. Serializes to a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelName,
    pub n: usize,
    /// Truncation level of the plan, top level of the MLPF sweep, or last level of the variance sweep.
    pub l_max: u32,
    /// Use the unbounded plan instead of the truncated one.
    pub unbounded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub rho: f64,
    /// `N_0` of the plan; particles per level in the variance sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n0: Option<usize>,
    pub m: usize,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    /// Data file; `<out>/data.csv` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub resampling: ResamplingScheme,
    pub strict: bool,
    pub max_retries: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_budget: Option<u64>,
    /// Simulate the latent path exactly (OU and GBM only) instead of at level 9.
    pub exact_data: bool,
    /// Cheaper reference filter for non-Gaussian models.
    pub desk: bool,
    pub c1: f64,
    /// Repeated runs per MLPF level or per variance-sweep level.
    pub repeats: usize,
    /// Smallest number of disjoint groups used for one MSE point.
    pub min_groups: usize,
    /// Overrides of the particle-filter reference `(level, particles, repeats)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_level: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_particles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_repeats: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unbiased,
            model: ModelName::Ou,
            n: 10,
            l_max: 4,
            unbounded: false,
            beta: None,
            rho: 0.9,
            n0: None,
            m: 1000,
            seed: 0,
            threads: 1,
            out: PathBuf::from("out"),
            data: None,
            resampling: ResamplingScheme::Maximal,
            strict: true,
            max_retries: 3,
            cost_budget: None,
            exact_data: false,
            desk: false,
            c1: 1.0,
            repeats: 100,
            min_groups: 10,
            reference_level: None,
            reference_particles: None,
            reference_repeats: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| FilterError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FilterError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn data_path(&self) -> PathBuf {
        self.data
            .clone()
            .unwrap_or_else(|| self.out.join("data.csv"))
    }

    pub fn run_options(&self) -> RunOptions {
        let failure = if self.strict {
            FailurePolicy::Strict
        } else {
            FailurePolicy::Permissive {
                max_retries: self.max_retries,
            }
        };
        RunOptions {
            threads: self.threads,
            failure,
        }
    }

    /// Level, particles and repeats of the particle-filter reference.
    pub fn reference_settings(&self) -> (u32, usize, usize) {
        let (l, n, r) = reference_settings(self.desk);
        (
            self.reference_level.unwrap_or(l),
            self.reference_particles.unwrap_or(n),
            self.reference_repeats.unwrap_or(r),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(FilterError::Config("n must be at least 1".into()));
        }
        if self.m == 0 || self.repeats == 0 || self.min_groups == 0 {
            return Err(FilterError::Config(
                "m, repeats and min_groups must be at least 1".into(),
            ));
        }
        if self.threads == 0 {
            return Err(FilterError::Config("threads must be at least 1".into()));
        }
        if self.n0 == Some(0) {
            return Err(FilterError::Config("n0 must be at least 1".into()));
        }
        Level::new(self.l_max)?;
        Ok(())
    }

    /// The randomization plan this configuration describes.
    pub fn plan(&self, bm: &BenchmarkModel) -> Result<RandomizationPlan> {
        let n0 = self
            .n0
            .unwrap_or_else(|| default_n0(bm.diffusion.constant_diffusion()));
        let plan = if self.unbounded {
            make_theory_plan(
                self.beta.unwrap_or_else(|| bm.diffusion.beta()),
                self.rho,
                n0,
            )?
        } else {
            make_truncated_plan(self.l_max, n0)?
        };
        let plan = plan.with_resampling(self.resampling);
        Ok(match self.cost_budget {
            Some(b) => plan.with_cost_budget(b),
            None => plan,
        })
    }
}

/// Counted cost against its closed form and the plan expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub total: u64,
    pub closed_form_total: u64,
    /// `(l, p) -> (draws, cost)`.
    pub breakdown: BTreeMap<(u32, u32), (u64, u64)>,
    pub draws: usize,
    pub expected_per_draw: f64,
}

impl CostReport {
    /// `single` selects the single-randomization cost formula.
    pub fn from_draws(
        draws: &[XiSample],
        plan: &RandomizationPlan,
        n: usize,
        single: bool,
    ) -> Self {
        let mut breakdown: BTreeMap<(u32, u32), (u64, u64)> = BTreeMap::new();
        let mut closed = 0u64;
        for d in draws {
            let e = breakdown.entry((d.l, d.p)).or_default();
            e.0 += 1;
            e.1 += d.cost;
            closed += if single {
                single_randomized_cost(d.l, n, &plan.schedule)
            } else {
                cost_of_draw(d.l, d.p, n, &plan.schedule)
            };
        }
        let expected_per_draw = if single {
            single_randomized_expected_cost(plan, n)
        } else {
            plan.expected_cost(n)
        };
        Self {
            total: draws.iter().map(|d| d.cost).sum(),
            closed_form_total: closed,
            breakdown,
            draws: draws.len(),
            expected_per_draw,
        }
    }

    pub fn mean_per_draw(&self) -> f64 {
        self.total as f64 / self.draws as f64
    }
}

/// One point of an MSE-versus-cost curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsePoint {
    pub cost: f64,
    pub mse: f64,
    pub bias2: f64,
    pub variance: f64,
}

impl MsePoint {
    pub fn from_estimates(estimates: &[f64], costs: &[f64], reference: f64) -> Self {
        let (mean, variance) = mean_and_variance(estimates);
        let sq: Vec<f64> = estimates
            .iter()
            .map(|e| (e - reference) * (e - reference))
            .collect();
        Self {
            cost: pairwise_sum(costs) / costs.len() as f64,
            mse: pairwise_sum(&sq) / sq.len() as f64,
            bias2: (mean - reference) * (mean - reference),
            variance,
        }
    }
}

/// MSE of the randomized estimator with `m` draws, for `m = 1, 2, 4, ...`.
///
/// The draws are split into `M / m` disjoint groups; each group gives one independent
/// estimate. Sizes stop once fewer than `min_groups` groups remain.
pub fn mse_vs_cost(
    draws: &[XiSample],
    reference: f64,
    min_groups: usize,
) -> Vec<(usize, usize, MsePoint)> {
    let mut out = Vec::new();
    let mut m = 1usize;
    while draws.len() / m >= min_groups.max(1) {
        let groups = draws.len() / m;
        let mut ests = Vec::with_capacity(groups);
        let mut costs = Vec::with_capacity(groups);
        for g in draws.chunks_exact(m).take(groups) {
            let vals: Vec<f64> = g.iter().map(XiSample::weighted).collect();
            ests.push(pairwise_sum(&vals) / m as f64);
            costs.push(g.iter().map(|d| d.cost as f64).sum());
        }
        out.push((
            m,
            groups,
            MsePoint::from_estimates(&ests, &costs, reference),
        ));
        m *= 2;
    }
    out
}

/// One row of the cost-ratio table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub mse: f64,
    pub mlpf_cost: f64,
    pub unbiased_cost: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRatio {
    pub rows: Vec<RatioRow>,
    /// Mean ratio over the last four rows.
    pub average: f64,
}

/// Cost of the unbiased curve at `target` MSE, by log-log interpolation on its
/// running-minimum envelope; `None` outside the curve's range.
fn interpolate_cost(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = curve
        .iter()
        .copied()
        .filter(|(c, e)| *c > 0.0 && *e > 0.0)
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut env = f64::INFINITY;
    for (_, e) in pts.iter_mut() {
        env = env.min(*e);
        *e = env;
    }
    let i = pts.iter().position(|&(_, e)| e <= target)?;
    if i == 0 {
        return (pts[0].1 == target).then_some(pts[0].0);
    }
    let (c0, e0) = pts[i - 1];
    let (c1, e1) = pts[i];
    let s = (target.ln() - e0.ln()) / (e1.ln() - e0.ln());
    Some((c0.ln() + s * (c1.ln() - c0.ln())).exp())
}

/// Ratio of unbiased to MLPF cost at each MLPF MSE level; points are `(cost, mse)`,
/// MLPF points in increasing `L`.
pub fn compare_cost_ratio(unbiased: &[(f64, f64)], mlpf: &[(f64, f64)]) -> Result<CostRatio> {
    let rows: Vec<RatioRow> = mlpf
        .iter()
        .filter_map(|&(mlpf_cost, mse)| {
            interpolate_cost(unbiased, mse).map(|unbiased_cost| RatioRow {
                mse,
                mlpf_cost,
                unbiased_cost,
                ratio: unbiased_cost / mlpf_cost,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(FilterError::NonOverlappingRange);
    }
    let tail = &rows[rows.len().saturating_sub(4)..];
    let average = tail.iter().map(|r| r.ratio).sum::<f64>() / tail.len() as f64;
    Ok(CostRatio { rows, average })
}

/// Reference filter means, one per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub method: String,
}

/// Level, particles and repeats of the particle-filter reference.
pub fn reference_settings(desk: bool) -> (u32, usize, usize) {
    if desk {
        (10, 10_000, 20)
    } else {
        (13, 100_000, 100)
    }
}

/// Kalman filter for OU, otherwise the average of `repeats` independent particle filters
/// with `particles` particles at level `l`.
pub fn compute_reference(
    bm: &BenchmarkModel,
    data: &DataSet,
    (l, particles, repeats): (u32, usize, usize),
    seed: u64,
    threads: usize,
) -> Result<Vec<ReferenceRow>> {
    if let Ok(k) = kalman_reference(bm, data) {
        return Ok(k
            .iter()
            .enumerate()
            .map(|(t, m)| ReferenceRow {
                n: t + 1,
                mean: m.mean,
                stderr: 0.0,
                method: "kalman".into(),
            })
            .collect());
    }
    if particles == 0 || repeats == 0 {
        return Err(FilterError::Config(
            "reference needs at least one particle and one repeat".into(),
        ));
    }
    let level = Level::new(l)?;
    let pool = pool(threads)?;
    let traces: Vec<Vec<f64>> = pool.install(|| {
        (0..repeats as u64)
            .into_par_iter()
            .map(|r| {
                let mut pf =
                    BatchPf::with_roles(bm, &[particles], &[Role::Reference(0)], level, seed, r)?;
                data.observations()
                    .iter()
                    .map(|&y| pf.observe(y).map(|e| e.combined(0)))
                    .collect()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let method = format!("pf_level{l}_n{particles}_x{repeats}");
    Ok((0..data.len())
        .map(|t| {
            let vals: Vec<f64> = traces.iter().map(|tr| tr[t]).collect();
            let (mean, var) = mean_and_variance(&vals);
            ReferenceRow {
                n: t + 1,
                mean,
                stderr: (var / repeats as f64).sqrt(),
                method: method.clone(),
            }
        })
        .collect())
}

/// Mean and variance of the level-`l` increment (the plain filter at `l = 0`) at the last observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelVariance {
    pub l: u32,
    pub particles: usize,
    pub repeats: usize,
    pub mean: f64,
    pub variance: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn variance_by_level(
    bm: &BenchmarkModel,
    data: &DataSet,
    levels: std::ops::RangeInclusive<u32>,
    particles: usize,
    repeats: usize,
    scheme: ResamplingScheme,
    seed: u64,
    threads: usize,
) -> Result<Vec<LevelVariance>> {
    let pool = pool(threads)?;
    levels
        .map(|l| {
            let level = Level::new(l)?;
            let vals: Vec<f64> = pool.install(|| {
                (0..repeats as u64)
                    .into_par_iter()
                    .map(|r| -> Result<f64> {
                        let mut last = 0.0;
                        if l == 0 {
                            let mut pf =
                                BatchPf::with_batch_sizes(bm, &[particles], level, seed, r)?;
                            for &y in data.observations() {
                                last = pf.observe(y)?.combined(0);
                            }
                        } else {
                            let mut cpf = BatchCpf::with_roles(
                                bm,
                                &[particles],
                                &[Role::CpfBatch(0)],
                                level,
                                scheme,
                                seed,
                                r,
                            )?;
                            for &y in data.observations() {
                                last = cpf.observe(y)?.increment(0);
                            }
                        }
                        Ok(last)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let (mean, variance) = mean_and_variance(&vals);
            Ok(LevelVariance {
                l,
                particles,
                repeats,
                mean,
                variance,
            })
        })
        .collect()
}

/// Least-squares slope of `log2 variance` against `l` over the given rows.
pub fn variance_slope(rows: &[LevelVariance]) -> f64 {
    let xs: Vec<f64> = rows.iter().map(|r| r.l as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.variance.log2()).collect();
    least_squares_slope(&xs, &ys)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| FilterError::Config(format!("thread pool: {e}")))
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_records(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reference(path: &Path) -> Result<Vec<ReferenceRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize()
        .map(|r| r.map_err(FilterError::from))
        .collect()
}

/// Reads `cost,mse` pairs from a `mse_vs_cost.csv` or `mlpf_mse.csv` file.
pub fn read_mse_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            FilterError::Config(format!("{}: missing column `{name}`", path.display()))
        })
    };
    let (ic, im) = (col("cost")?, col("mse")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| FilterError::Config(format!("{}: {e}", path.display())))
        };
        out.push((parse(ic)?, parse(im)?));
    }
    Ok(out)
}

/// Writes `cost_ratio.csv` from the two MSE curves in `out` and returns the table.
pub fn compare_files(unbiased: &Path, mlpf: &Path, out: &Path) -> Result<CostRatio> {
    let table = compare_cost_ratio(&read_mse_curve(unbiased)?, &read_mse_curve(mlpf)?)?;
    fs::create_dir_all(out)?;
    write_csv(&out.join("cost_ratio.csv"), &table.rows)?;
    Ok(table)
}

/// Paths written by a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutputs {
    pub files: Vec<PathBuf>,
}

impl RunOutputs {
    fn push(&mut self, p: PathBuf) {
        self.files.push(p);
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<DataSet> {
    let data = DataSet::read(&cfg.data_path(), Some(cfg.model))?;
    if data.model != cfg.model {
        return Err(FilterError::ModelMismatch(format!(
            "data was generated for {}, run asks for {}",
            data.model, cfg.model
        )));
    }
    if data.len() < cfg.n {
        return Err(FilterError::Config(format!(
            "data has {} observations, n = {}",
            data.len(),
            cfg.n
        )));
    }
    Ok(data.truncated(cfg.n))
}

/// Reference mean at `n` from `<out>/reference.csv`, when present.
fn reference_at(cfg: &ExperimentConfig) -> Result<Option<f64>> {
    let path = cfg.out.join("reference.csv");
    if !path.exists() {
        return Ok(None);
    }
    let rows = read_reference(&path)?;
    Ok(rows.iter().find(|r| r.n == cfg.n).map(|r| r.mean))
}

fn write_estimate(
    cfg: &ExperimentConfig,
    est: &UnbiasedEstimate,
    plan: &RandomizationPlan,
    single: bool,
    outs: &mut RunOutputs,
) -> Result<()> {
    let draws_path = cfg.out.join("draws.csv");
    let rows: Vec<Vec<String>> = est
        .draws
        .iter()
        .map(|d| {
            vec![
                d.replicate.to_string(),
                d.l.to_string(),
                d.p.to_string(),
                d.xi().to_string(),
                d.weight.to_string(),
                d.cost.to_string(),
            ]
        })
        .collect();
    write_records(
        &draws_path,
        &["replicate", "l", "p", "xi", "weight", "cost"],
        &rows,
    )?;
    outs.push(draws_path);

    let summary_path = cfg.out.join("summary.csv");
    let rows: Vec<Vec<String>> = est
        .per_time
        .iter()
        .map(|t| {
            vec![
                t.n.to_string(),
                t.estimate.to_string(),
                t.stderr.to_string(),
                est.m.to_string(),
                est.total_cost.to_string(),
            ]
        })
        .collect();
    write_records(
        &summary_path,
        &["n", "estimate", "stderr", "M", "total_cost"],
        &rows,
    )?;
    outs.push(summary_path);

    let report = CostReport::from_draws(&est.draws, plan, cfg.n, single);
    if report.total != report.closed_form_total {
        return Err(FilterError::Config(format!(
            "cost counter {} disagrees with the closed form {}",
            report.total, report.closed_form_total
        )));
    }
    let by_draw = cfg.out.join("cost_by_draw.csv");
    let rows: Vec<Vec<String>> = report
        .breakdown
        .iter()
        .map(|((l, p), (k, c))| vec![l.to_string(), p.to_string(), k.to_string(), c.to_string()])
        .collect();
    write_records(&by_draw, &["l", "p", "draws", "cost"], &rows)?;
    outs.push(by_draw);
    let cost_summary = cfg.out.join("cost_summary.csv");
    write_records(
        &cost_summary,
        &[
            "total_cost",
            "closed_form_total",
            "draws",
            "mean_per_draw",
            "expected_per_draw",
            "bias_controlled",
        ],
        &[vec![
            report.total.to_string(),
            report.closed_form_total.to_string(),
            report.draws.to_string(),
            report.mean_per_draw().to_string(),
            report.expected_per_draw.to_string(),
            est.bias_controlled.to_string(),
        ]],
    )?;
    outs.push(cost_summary);

    if let Some(reference) = reference_at(cfg)? {
        let path = cfg.out.join("mse_vs_cost.csv");
        let rows: Vec<Vec<String>> = mse_vs_cost(&est.draws, reference, cfg.min_groups)
            .iter()
            .map(|(m, g, pt)| {
                vec![
                    m.to_string(),
                    g.to_string(),
                    pt.cost.to_string(),
                    pt.mse.to_string(),
                    pt.bias2.to_string(),
                    pt.variance.to_string(),
                ]
            })
            .collect();
        write_records(
            &path,
            &["m", "groups", "cost", "mse", "bias2", "variance"],
            &rows,
        )?;
        outs.push(path);
    }
    Ok(())
}

fn run_mlpf(
    cfg: &ExperimentConfig,
    bm: &BenchmarkModel,
    data: &DataSet,
    outs: &mut RunOutputs,
) -> Result<()> {
    let regime = DiffusionRegime::for_model(bm);
    let reference = reference_at(cfg)?;
    let mut rows = Vec::new();
    let mut mse_rows = Vec::new();
    for big_l in 1..=cfg.l_max.max(1) {
        let alloc = allocate(big_l, regime, cfg.c1)?;
        let runs: Vec<MlpfEstimate> = mlpf_replicates(
            bm,
            data,
            &alloc,
            cfg.resampling,
            cfg.repeats,
            cfg.seed,
            cfg.threads,
        )?;
        for l in 0..=big_l as usize {
            let vals: Vec<f64> = runs
                .iter()
                .map(|r| *r.levels[l].trace.last().expect("non-empty"))
                .collect();
            rows.push(vec![
                big_l.to_string(),
                l.to_string(),
                alloc.counts[l].to_string(),
                (pairwise_sum(&vals) / vals.len() as f64).to_string(),
                runs[0].levels[l].cost.to_string(),
            ]);
        }
        let totals: Vec<f64> = runs.iter().map(MlpfEstimate::value).collect();
        rows.push(vec![
            big_l.to_string(),
            "total".into(),
            alloc.counts.iter().sum::<usize>().to_string(),
            (pairwise_sum(&totals) / totals.len() as f64).to_string(),
            alloc.cost(cfg.n).to_string(),
        ]);
        if let Some(reference) = reference {
            let costs: Vec<f64> = runs.iter().map(|r| r.cost as f64).collect();
            let pt = MsePoint::from_estimates(&totals, &costs, reference);
            mse_rows.push(vec![
                big_l.to_string(),
                cfg.repeats.to_string(),
                pt.cost.to_string(),
                pt.mse.to_string(),
                pt.bias2.to_string(),
                pt.variance.to_string(),
            ]);
        }
    }
    let path = cfg.out.join("mlpf.csv");
    write_records(&path, &["L", "l", "M_l", "estimate_l", "cost_l"], &rows)?;
    outs.push(path);
    if reference.is_some() {
        let path = cfg.out.join("mlpf_mse.csv");
        write_records(
            &path,
            &["L", "repeats", "cost", "mse", "bias2", "variance"],
            &mse_rows,
        )?;
        outs.push(path);
    }
    Ok(())
}

fn run_sweep(
    cfg: &ExperimentConfig,
    bm: &BenchmarkModel,
    data: &DataSet,
    outs: &mut RunOutputs,
) -> Result<()> {
    let particles = cfg.n0.unwrap_or(500);
    let rows = variance_by_level(
        bm,
        data,
        0..=cfg.l_max,
        particles,
        cfg.repeats,
        cfg.resampling,
        cfg.seed,
        cfg.threads,
    )?;
    let path = cfg.out.join("variance_by_level.csv");
    let recs: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.l.to_string(),
                r.particles.to_string(),
                r.repeats.to_string(),
                r.mean.to_string(),
                r.variance.to_string(),
                r.variance.log2().to_string(),
            ]
        })
        .collect();
    write_records(
        &path,
        &["l", "N", "repeats", "mean", "variance", "log2_variance"],
        &recs,
    )?;
    outs.push(path);
    let from = 2.min(cfg.l_max.saturating_sub(1)).max(1);
    if cfg.l_max > from {
        let fit: Vec<LevelVariance> = rows.iter().copied().filter(|r| r.l >= from).collect();
        let path = cfg.out.join("variance_slope.csv");
        write_records(
            &path,
            &["from", "to", "slope"],
            &[vec![
                from.to_string(),
                cfg.l_max.to_string(),
                variance_slope(&fit).to_string(),
            ]],
        )?;
        outs.push(path);
    }
    Ok(())
}

/// Executes `cfg.mode`, writing into `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutputs> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let bm = make_benchmark(cfg.model);
    let mut outs = RunOutputs::default();
    match cfg.mode {
        Mode::Generate => {
            let generation = if cfg.exact_data {
                Generation::Exact
            } else {
                Generation::DEFAULT_EULER
            };
            let data = generate_data(&bm, cfg.n, generation, cfg.seed)?;
            let path = cfg.data_path();
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            data.write(&path)?;
            outs.push(path.with_extension("json"));
            outs.push(path);
        }
        Mode::Reference => {
            let data = load_data(cfg)?;
            let rows =
                compute_reference(&bm, &data, cfg.reference_settings(), cfg.seed, cfg.threads)?;
            let path = cfg.out.join("reference.csv");
            write_csv(&path, &rows)?;
            outs.push(path);
        }
        Mode::Unbiased | Mode::SingleRand => {
            let data = load_data(cfg)?;
            let plan = cfg.plan(&bm)?;
            let single = cfg.mode == Mode::SingleRand;
            let est = if single {
                single_randomized_estimate(&plan, &bm, &data, cfg.m, cfg.seed, cfg.run_options())?
            } else {
                unbiased_estimate(&plan, &bm, &data, cfg.m, cfg.seed, cfg.run_options())?
            };
            write_estimate(cfg, &est, &plan, single, &mut outs)?;
        }
        Mode::Mlpf => {
            let data = load_data(cfg)?;
            run_mlpf(cfg, &bm, &data, &mut outs)?;
        }
        Mode::Sweep => {
            let data = load_data(cfg)?;
            run_sweep(cfg, &bm, &data, &mut outs)?;
        }
    }
    let run_toml = cfg.out.join("run.toml");
    fs::write(&run_toml, cfg.to_toml_string()?)?;
    outs.push(run_toml);
    let plot = cfg.out.join("plot.py");
    fs::write(&plot, PLOT_SCRIPT)?;
    outs.push(plot);
    Ok(outs)
}

/// Plots whichever of the known CSV files are present next to it.
pub const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))


def rows(name):
    path = os.path.join(here, name)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return list(csv.DictReader(f))


def col(rs, key):
    return [float(r[key]) for r in rs]


made = []
unb, ml = rows("mse_vs_cost.csv"), rows("mlpf_mse.csv")
if unb or ml:
    fig, ax = plt.subplots()
    if unb:
        ax.loglog(col(unb, "cost"), col(unb, "mse"), "o-", label="unbiased")
    if ml:
        ax.loglog(col(ml, "cost"), col(ml, "mse"), "s-", label="MLPF")
    ax.set_xlabel("cost (Euler steps)")
    ax.set_ylabel("MSE")
    ax.legend()
    fig.savefig(os.path.join(here, "mse_vs_cost.png"), dpi=150)
    made.append("mse_vs_cost.png")

var = rows("variance_by_level.csv")
if var:
    fig, ax = plt.subplots()
    ax.plot(col(var, "l"), col(var, "log2_variance"), "o-")
    ax.set_xlabel("level")
    ax.set_ylabel("log2 variance")
    fig.savefig(os.path.join(here, "variance_by_level.png"), dpi=150)
    made.append("variance_by_level.png")

summ = rows("summary.csv")
if summ:
    n = col(summ, "n")
    est = col(summ, "estimate")
    se = col(summ, "stderr")
    fig, ax = plt.subplots()
    ax.errorbar(n, est, yerr=[2 * s for s in se], fmt="o-", label="estimate")
    ref = rows("reference.csv")
    if ref:
        ax.plot(col(ref, "n")[: len(n)], col(ref, "mean")[: len(n)], "k--", label="reference")
    ax.set_xlabel("time")
    ax.set_ylabel("filter mean")
    ax.legend()
    fig.savefig(os.path.join(here, "filter_mean.png"), dpi=150)
    made.append("filter_mean.png")

print("\n".join(made) if made else "no known CSV files found", file=sys.stderr)
"#;
