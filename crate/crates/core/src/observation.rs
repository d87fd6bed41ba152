//! Observation densities, the four benchmark models, synthetic data and the
//! exact Kalman filter for the Ornstein-Uhlenbeck benchmark.
//!
//! Index convention: a [`DataSet`] holds `y_1..y_n`. The latent skeleton is
//! `X_k = Z_{k+1}`, and `y_k` is drawn given `X_{k-1}`. A filter that has
//! consumed `k` observations therefore targets `X_{k-1} | y_{1:k}`, and every
//! per-time output in this crate is indexed by that observation count.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FilterError, Result};
use crate::rng::{NoiseSource, RngStream, Role, StreamKey};
use crate::sde::{transition, CostCounter, DiffusionModel, Level};

/// Observation noise law, parameterized by its spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Family {
    Gaussian { variance: f64 },
    Laplace { scale: f64 },
}

/// How the latent state enters the observation law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Link {
    /// Location `x`.
    Identity,
    /// Location `ln x`; zero likelihood for `x <= 0`.
    Log,
    /// Location `ln(max(|x|, eps))`.
    LogAbsEps(f64),
    /// Location 0, variance multiplied by `e^x`.
    ExpVariance,
}

/// `G(x, y)` for scalar observations of the first state coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationModel {
    family: Family,
    link: Link,
    log_norm: f64,
}

impl ObservationModel {
    pub fn new(family: Family, link: Link) -> Self {
        let log_norm = match family {
            Family::Gaussian { variance } => {
                assert!(variance > 0.0);
                -0.5 * (2.0 * PI * variance).ln()
            }
            Family::Laplace { scale } => {
                assert!(scale > 0.0);
                -(2.0 * scale).ln()
            }
        };
        Self {
            family,
            link,
            log_norm,
        }
    }

    pub fn gaussian(variance: f64, link: Link) -> Self {
        Self::new(Family::Gaussian { variance }, link)
    }

    pub fn laplace(scale: f64, link: Link) -> Self {
        Self::new(Family::Laplace { scale }, link)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn link(&self) -> Link {
        self.link
    }

    /// Location and log of the spread multiplier for state `x`.
    fn location(&self, x: f64) -> (f64, f64) {
        match self.link {
            Link::Identity => (x, 0.0),
            Link::Log => (if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }, 0.0),
            Link::LogAbsEps(eps) => (x.abs().max(eps).ln(), 0.0),
            Link::ExpVariance => (0.0, x),
        }
    }

    /// `ln G(x, y)`.
    pub fn log_likelihood(&self, x: &[f64], y: f64) -> f64 {
        let (loc, log_var_mult) = self.location(x[0]);
        if !loc.is_finite() {
            return f64::NEG_INFINITY;
        }
        let r = y - loc;
        match self.family {
            Family::Gaussian { variance } => {
                self.log_norm - 0.5 * log_var_mult - 0.5 * r * r / (variance * log_var_mult.exp())
            }
            Family::Laplace { scale } => {
                let half = 0.5 * log_var_mult;
                self.log_norm - half - r.abs() / (scale * half.exp())
            }
        }
    }

    /// Draws `y ~ G(x, .)`.
    pub fn sample<N: NoiseSource + ?Sized>(&self, x: &[f64], noise: &mut N) -> f64 {
        let (loc, log_var_mult) = self.location(x[0]);
        let spread = (0.5 * log_var_mult).exp();
        match self.family {
            Family::Gaussian { variance } => {
                loc + variance.sqrt() * spread * noise.standard_normal()
            }
            Family::Laplace { scale } => {
                let c = noise.uniform() - 0.5;
                loc - scale * spread * c.signum() * (1.0 - 2.0 * c.abs()).ln()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "OU")]
    Ou,
    #[serde(rename = "GBM")]
    Gbm,
    Langevin,
    #[serde(rename = "NLD")]
    Nld,
}

impl ModelName {
    pub const ALL: [ModelName; 4] = [
        ModelName::Ou,
        ModelName::Gbm,
        ModelName::Langevin,
        ModelName::Nld,
    ];
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelName::Ou => "OU",
            ModelName::Gbm => "GBM",
            ModelName::Langevin => "Langevin",
            ModelName::Nld => "NLD",
        })
    }
}

impl FromStr for ModelName {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ou" => Ok(ModelName::Ou),
            "gbm" => Ok(ModelName::Gbm),
            "langevin" => Ok(ModelName::Langevin),
            "nld" => Ok(ModelName::Nld),
            _ => Err(FilterError::UnknownModel(s.to_string())),
        }
    }
}

/// Closed-form unit-time transitions, where the diffusion has one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExactTransition {
    Ou { theta: f64, mu: f64 },
    Gbm { mu: f64, sigma: f64 },
}

impl ExactTransition {
    pub fn sample<N: NoiseSource + ?Sized>(&self, x: f64, noise: &mut N) -> f64 {
        let z = noise.standard_normal();
        match *self {
            ExactTransition::Ou { theta, mu } => {
                let (f, q) = ou_discrete(theta);
                mu + (x - mu) * f + q.sqrt() * z
            }
            ExactTransition::Gbm { mu, sigma } => {
                x * ((mu - 0.5 * sigma * sigma) + sigma * z).exp()
            }
        }
    }
}

/// Unit-lag OU coefficients `(e^-theta, (1 - e^-2theta) / (2 theta))`.
pub fn ou_discrete(theta: f64) -> (f64, f64) {
    let f = (-theta).exp();
    (f, -(-2.0 * theta).exp_m1() / (2.0 * theta))
}

pub type TestFunction = fn(&[f64]) -> f64;

fn identity_phi(x: &[f64]) -> f64 {
    x[0]
}

/// A diffusion, an observation density and the test function `phi`.
#[derive(Debug, Clone)]
pub struct BenchmarkModel {
    pub name: ModelName,
    pub diffusion: DiffusionModel,
    pub observation: ObservationModel,
    pub phi: TestFunction,
    pub exact: Option<ExactTransition>,
    pub constants: BTreeMap<String, f64>,
}

fn constants(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl BenchmarkModel {
    pub fn ou(theta: f64, mu: f64, tau2: f64) -> Self {
        Self {
            name: ModelName::Ou,
            diffusion: DiffusionModel::scalar("OU", 0.0, move |x| theta * (mu - x), |_| 1.0, true),
            observation: ObservationModel::gaussian(tau2, Link::Identity),
            phi: identity_phi,
            exact: Some(ExactTransition::Ou { theta, mu }),
            constants: constants(&[("theta", theta), ("mu", mu), ("tau2", tau2), ("x0", 0.0)]),
        }
    }

    pub fn gbm(mu: f64, sigma: f64, tau2: f64, link: Link) -> Self {
        Self {
            name: ModelName::Gbm,
            diffusion: DiffusionModel::scalar(
                "GBM",
                1.0,
                move |x| mu * x,
                move |x| sigma * x,
                false,
            ),
            observation: ObservationModel::gaussian(tau2, link),
            phi: identity_phi,
            exact: Some(ExactTransition::Gbm { mu, sigma }),
            constants: constants(&[("mu", mu), ("sigma", sigma), ("tau2", tau2), ("x0", 1.0)]),
        }
    }

    /// Langevin dynamics targeting a Student-t law with `v` degrees of freedom.
    pub fn langevin(v: f64) -> Self {
        Self {
            name: ModelName::Langevin,
            diffusion: DiffusionModel::scalar(
                "Langevin",
                0.0,
                move |x| -0.5 * (v + 1.0) * x / (v + x * x),
                |_| 1.0,
                true,
            ),
            observation: ObservationModel::gaussian(1.0, Link::ExpVariance),
            phi: identity_phi,
            exact: None,
            constants: constants(&[("v", v), ("x0", 0.0)]),
        }
    }

    pub fn nld(theta: f64, mu: f64, s: f64, link: Link) -> Self {
        Self {
            name: ModelName::Nld,
            diffusion: DiffusionModel::scalar(
                "NLD",
                0.0,
                move |x| theta * (mu - x),
                |x| 1.0 / (1.0 + x * x).sqrt(),
                false,
            ),
            observation: ObservationModel::laplace(s, link),
            phi: identity_phi,
            exact: None,
            constants: constants(&[("theta", theta), ("mu", mu), ("s", s), ("x0", 0.0)]),
        }
    }

    pub fn log_g(&self, x: &[f64], y: f64) -> f64 {
        self.observation.log_likelihood(x, y)
    }
}

/// The benchmark with its published constants.
pub fn make_benchmark(name: ModelName) -> BenchmarkModel {
    match name {
        ModelName::Ou => BenchmarkModel::ou(1.0, 0.0, 0.2),
        ModelName::Gbm => BenchmarkModel::gbm(0.02, 0.2, 0.01, Link::LogAbsEps(1e-12)),
        ModelName::Langevin => BenchmarkModel::langevin(10.0),
        ModelName::Nld => BenchmarkModel::nld(1.0, 0.0, 0.1f64.sqrt(), Link::Identity),
    }
}

/// Parses a model name and builds its benchmark.
pub fn make_benchmark_by_name(name: &str) -> Result<BenchmarkModel> {
    Ok(make_benchmark(name.parse()?))
}

/// How the latent signal of a data set was simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generation {
    Exact,
    Euler { level: u32 },
}

impl Generation {
    pub const DEFAULT_EULER: Generation = Generation::Euler { level: 9 };
}

/// Observations `y_1..y_n` with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    observations: Vec<f64>,
    pub model: ModelName,
    pub generation: Generation,
    pub seed: u64,
    pub constants: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    k: usize,
    y: f64,
}

/// Sidecar metadata written next to a data CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSetMeta {
    pub model: ModelName,
    /// `None` for exact simulation.
    pub level: Option<u32>,
    pub seed: u64,
    pub n: usize,
    pub constants: BTreeMap<String, f64>,
}

impl DataSet {
    pub fn new(
        observations: Vec<f64>,
        model: ModelName,
        generation: Generation,
        seed: u64,
    ) -> Self {
        Self {
            observations,
            model,
            generation,
            seed,
            constants: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    /// `y_k` for `k` in `1..=n`.
    pub fn y(&self, k: usize) -> f64 {
        self.observations[k - 1]
    }

    /// The first `n` observations.
    pub fn truncated(&self, n: usize) -> DataSet {
        let mut out = self.clone();
        out.observations.truncate(n);
        out
    }

    pub fn meta(&self) -> DataSetMeta {
        DataSetMeta {
            model: self.model,
            level: match self.generation {
                Generation::Exact => None,
                Generation::Euler { level } => Some(level),
            },
            seed: self.seed,
            n: self.len(),
            constants: self.constants.clone(),
        }
    }

    /// Writes `k,y` rows and returns the CSV text.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("k,y\n");
        for (i, y) in self.observations.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, y));
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json` sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(csv_path)?);
        w.write_all(self.to_csv_string().as_bytes())?;
        w.flush()?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        std::fs::write(csv_path.with_extension("json"), meta + "\n")?;
        Ok(())
    }

    /// Reads a data CSV and its sidecar (when the sidecar is missing, `model` must be supplied).
    pub fn read(csv_path: &Path, model: Option<ModelName>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(csv_path)?;
        let mut ys = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row?;
            if row.k != i + 1 {
                return Err(FilterError::Config(format!(
                    "{}: time indices must be consecutive from 1, found {} at row {}",
                    csv_path.display(),
                    row.k,
                    i + 1
                )));
            }
            ys.push(row.y);
        }
        let sidecar = csv_path.with_extension("json");
        let meta: Option<DataSetMeta> = if sidecar.exists() {
            Some(serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?)
        } else {
            None
        };
        let (model, generation, seed, constants) = match (meta, model) {
            (Some(m), _) => (
                m.model,
                m.level
                    .map_or(Generation::Exact, |level| Generation::Euler { level }),
                m.seed,
                m.constants,
            ),
            (None, Some(model)) => (model, Generation::DEFAULT_EULER, 0, BTreeMap::new()),
            (None, None) => {
                return Err(FilterError::Config(format!(
                    "{} has no sidecar and no model was given",
                    csv_path.display()
                )))
            }
        };
        Ok(Self {
            observations: ys,
            model,
            generation,
            seed,
            constants,
        })
    }
}

/// Simulates `X_0..X_{n-1}` and `y_k ~ G(X_{k-1}, .)`, drawing everything from `noise`.
pub fn generate_data_with_noise<N: NoiseSource + ?Sized>(
    bm: &BenchmarkModel,
    n: usize,
    generation: Generation,
    seed: u64,
    noise: &mut N,
) -> Result<DataSet> {
    if n == 0 {
        return Err(FilterError::Config(
            "data sets need at least one observation".into(),
        ));
    }
    let exact = match generation {
        Generation::Exact => Some(
            bm.exact
                .ok_or_else(|| FilterError::ExactUnavailable(bm.name.to_string()))?,
        ),
        Generation::Euler { .. } => None,
    };
    let level = match generation {
        Generation::Euler { level } => Some(Level::new(level)?),
        Generation::Exact => None,
    };
    let mut cost = CostCounter::new();
    let mut x = bm.diffusion.initial_state().to_vec();
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        x = match (exact, level) {
            (Some(ex), _) => vec![ex.sample(x[0], noise)],
            (None, Some(lv)) => transition(&bm.diffusion, &x, lv, noise, &mut cost)?,
            (None, None) => unreachable!(),
        };
        ys.push(bm.observation.sample(&x, noise));
    }
    let mut data = DataSet::new(ys, bm.name, generation, seed);
    data.constants = bm.constants.clone();
    Ok(data)
}

/// Synthetic data from the keyed data stream of `seed`.
pub fn generate_data(
    bm: &BenchmarkModel,
    n: usize,
    generation: Generation,
    seed: u64,
) -> Result<DataSet> {
    let mut rng = RngStream::new(seed, StreamKey::new(0, Role::Data.id(), 0));
    generate_data_with_noise(bm, n, generation, seed, &mut rng)
}

/// Mean and variance of a scalar filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Exact filter moments for the OU benchmark; entry `k - 1` is `X_{k-1} | y_{1:k}`.
pub fn kalman_reference(bm: &BenchmarkModel, data: &DataSet) -> Result<Vec<FilterMoments>> {
    let (theta, mu) = match (bm.name, bm.exact) {
        (ModelName::Ou, Some(ExactTransition::Ou { theta, mu })) => (theta, mu),
        _ => {
            return Err(FilterError::ModelMismatch(format!(
                "Kalman reference needs OU, got {}",
                bm.name
            )))
        }
    };
    let r = match (bm.observation.family(), bm.observation.link()) {
        (Family::Gaussian { variance }, Link::Identity) => variance,
        _ => {
            return Err(FilterError::ModelMismatch(
                "Kalman reference needs Gaussian identity-link observations".into(),
            ))
        }
    };
    let (f, q) = ou_discrete(theta);
    let x0 = bm.diffusion.initial_state()[0];
    let mut m = x0;
    let mut p = 0.0;
    let mut out = Vec::with_capacity(data.len());
    for &y in data.observations() {
        // Predict one unit of time ahead, then update with y.
        m = mu + (m - mu) * f;
        p = f * f * p + q;
        let gain = p / (p + r);
        m += gain * (y - m);
        p *= 1.0 - gain;
        out.push(FilterMoments {
            mean: m,
            variance: p,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::ScriptedNoise;

    #[test]
    fn ou_drift_matches_constants() {
        let bm = make_benchmark(ModelName::Ou);
        assert_eq!(bm.diffusion.drift(&[2.0]), vec![-2.0]);
        assert_eq!(bm.diffusion.initial_state(), &[0.0]);
    }

    #[test]
    fn langevin_drift() {
        let bm = make_benchmark(ModelName::Langevin);
        assert_eq!(bm.diffusion.drift(&[0.0])[0], 0.0);
        assert!((bm.diffusion.drift(&[1.0])[0] + 0.5).abs() < 1e-15);
        for x in [0.1, 0.7, 3.0, 42.0, -1.3] {
            assert_eq!(bm.diffusion.drift(&[-x])[0], -bm.diffusion.drift(&[x])[0]);
        }
    }

    #[test]
    fn initial_states_and_flags() {
        let expect = [
            (ModelName::Ou, 0.0, true),
            (ModelName::Gbm, 1.0, false),
            (ModelName::Langevin, 0.0, true),
            (ModelName::Nld, 0.0, false),
        ];
        for (name, x0, constant) in expect {
            let bm = make_benchmark(name);
            assert_eq!(bm.diffusion.initial_state(), &[x0]);
            assert_eq!(bm.diffusion.constant_diffusion(), constant, "{name}");
            assert_eq!((bm.phi)(&[1.5]), 1.5);
        }
        let gbm = make_benchmark(ModelName::Gbm);
        assert_eq!(gbm.constants["tau2"], 0.01);
        assert_eq!(gbm.constants["sigma"], 0.2);
        assert_eq!(gbm.constants["mu"], 0.02);
        let nld = make_benchmark(ModelName::Nld);
        assert_eq!(nld.constants["s"], 0.1f64.sqrt());
    }

    #[test]
    fn constant_diffusion_flag_is_honest() {
        for name in ModelName::ALL {
            let bm = make_benchmark(name);
            if bm.diffusion.constant_diffusion() {
                let b0 = bm.diffusion.diffusion(&[0.0]);
                for x in [-3.0, -0.2, 0.4, 7.0] {
                    assert_eq!(bm.diffusion.diffusion(&[x]), b0);
                }
            }
        }
    }

    #[test]
    fn unknown_model_name() {
        assert!(matches!(
            "heston".parse::<ModelName>(),
            Err(FilterError::UnknownModel(_))
        ));
        assert_eq!("nld".parse::<ModelName>().unwrap(), ModelName::Nld);
    }

    #[test]
    fn log_likelihood_examples() {
        let g = ObservationModel::gaussian(0.2, Link::Identity);
        assert!((g.log_likelihood(&[0.3], 0.3) - (-0.5 * (2.0 * PI * 0.2).ln())).abs() < 1e-14);
        assert!((g.log_likelihood(&[0.3], 0.3) + 0.114_220).abs() < 1e-6);
        let l = ObservationModel::laplace(0.1f64.sqrt(), Link::Identity);
        assert!((l.log_likelihood(&[1.0], 1.0) - 0.45815).abs() < 1e-5);
        let mut prev = g.log_likelihood(&[0.0], 0.0);
        for d in [0.5, 1.0, 4.0, 100.0, 1e10] {
            let cur = g.log_likelihood(&[0.0], d);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn log_abs_eps_link_is_finite() {
        let g = ObservationModel::gaussian(0.01, Link::LogAbsEps(1e-12));
        for x in [0.0, -1.0, 1e-300, 2.0] {
            assert!(g.log_likelihood(&[x], 0.1).is_finite());
        }
        let raw = ObservationModel::gaussian(0.01, Link::Log);
        assert_eq!(raw.log_likelihood(&[-1.0], 0.1), f64::NEG_INFINITY);
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
        h * (0.5 * f(a) + inner + 0.5 * f(b))
    }

    #[test]
    fn densities_integrate_to_one() {
        let cases = [
            (ObservationModel::gaussian(0.2, Link::Identity), 0.4),
            (
                ObservationModel::gaussian(0.01, Link::LogAbsEps(1e-12)),
                1.3,
            ),
            (ObservationModel::gaussian(1.0, Link::ExpVariance), 0.8),
            (
                ObservationModel::laplace(0.1f64.sqrt(), Link::Identity),
                -0.6,
            ),
            (
                ObservationModel::laplace(0.1f64.sqrt(), Link::ExpVariance),
                0.5,
            ),
        ];
        for (obs, x) in cases {
            let (loc, _) = obs.location(x);
            // Grid centered on the location so the Laplace kink sits on a node.
            let total = trapezoid(
                |y| obs.log_likelihood(&[x], y).exp(),
                loc - 30.0,
                loc + 30.0,
                600_000,
            );
            assert!((total - 1.0).abs() < 1e-6, "{obs:?} at {x}: {total}");
        }
    }

    #[test]
    fn zero_noise_ou_data() {
        let bm = make_benchmark(ModelName::Ou);
        let data =
            generate_data_with_noise(&bm, 1, Generation::Exact, 0, &mut ScriptedNoise::zero())
                .unwrap();
        assert_eq!(data.observations(), &[0.0]);
    }

    #[test]
    fn exact_unavailable() {
        for name in [ModelName::Langevin, ModelName::Nld] {
            let bm = make_benchmark(name);
            assert!(matches!(
                generate_data(&bm, 3, Generation::Exact, 1),
                Err(FilterError::ExactUnavailable(_))
            ));
        }
        assert!(generate_data(&make_benchmark(ModelName::Gbm), 3, Generation::Exact, 1).is_ok());
    }

    #[test]
    fn ou_exact_variance() {
        let (f, q) = ou_discrete(1.0);
        assert!((f - (-1.0f64).exp()).abs() < 1e-16);
        assert!((q - 0.43233).abs() < 1e-5);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let bm = make_benchmark(ModelName::Nld);
        let a = generate_data(&bm, 50, Generation::DEFAULT_EULER, 7).unwrap();
        let b = generate_data(&bm, 50, Generation::DEFAULT_EULER, 7).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        let c = generate_data(&bm, 50, Generation::DEFAULT_EULER, 8).unwrap();
        assert_ne!(a.to_csv_string(), c.to_csv_string());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data =
            generate_data(&make_benchmark(ModelName::Gbm), 20, Generation::Exact, 3).unwrap();
        data.write(&path).unwrap();
        let back = DataSet::read(&path, None).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn kalman_single_update() {
        let bm = make_benchmark(ModelName::Ou);
        let data = DataSet::new(vec![1.0], ModelName::Ou, Generation::Exact, 0);
        let out = kalman_reference(&bm, &data).unwrap();
        let (_, q) = ou_discrete(1.0);
        assert!((out[0].mean - q / (q + 0.2)).abs() < 1e-12);
        assert!((out[0].mean - 0.68372).abs() < 1e-5);
    }

    #[test]
    fn kalman_uninformative_observations() {
        let bm = BenchmarkModel::ou(1.0, 0.0, 1e12);
        let data = generate_data(&make_benchmark(ModelName::Ou), 10, Generation::Exact, 4).unwrap();
        let out = kalman_reference(&bm, &data).unwrap();
        // Predictor mean from x* = 0 stays at 0.
        for m in out {
            assert!(m.mean.abs() < 1e-6);
        }
    }

    #[test]
    fn kalman_rejects_other_models() {
        let data = DataSet::new(vec![1.0], ModelName::Nld, Generation::Exact, 0);
        assert!(matches!(
            kalman_reference(&make_benchmark(ModelName::Nld), &data),
            Err(FilterError::ModelMismatch(_))
        ));
        let mut laplace_ou = make_benchmark(ModelName::Ou);
        laplace_ou.observation = ObservationModel::laplace(1.0, Link::Identity);
        assert!(matches!(
            kalman_reference(&laplace_ou, &data),
            Err(FilterError::ModelMismatch(_))
        ));
    }
}
