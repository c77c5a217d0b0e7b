//! Monte Carlo experiment driver: sweeps sample size and dimension, runs every
//! configured estimator on common trial data against a cached ground-truth
//! oracle, and emits per-trial records plus MSE/bias/variance summaries as CSV.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{true_divergence, Gaussian, GaussianSpec, OracleEstimate};
use crate::divergence::{
    plugin_estimate_kernel, plugin_from_builder, round_half_up, GFunctional, RatioFieldBuilder,
};
use crate::ensemble::{
    ensemble_from_builder, solve_exact_weights, solve_relaxed_weights, EnsembleSpec, WeightVector,
};
use crate::numeric::DdSum;
use crate::sample::BoxBounds;
use crate::divergence::split_f2;
use crate::seed::Seed;
use crate::{Error, Result};

const TAG_ORACLE: u64 = 1;
const TAG_TRIAL: u64 = 2;
const TAG_F1: u64 = 3;
const TAG_F2: u64 = 4;
const TAG_SPLIT: u64 = 5;
const TAG_KERNEL: u64 = 6;

pub const RECORDS_HEADER: &str =
    "T,d,trial,estimator,estimate_functional,estimate_divergence,truth,sq_error,failed,reason,wall_ms";
pub const SUMMARY_HEADER: &str = "T,d,estimator,n,mse,bias,variance,mean,std";

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// The estimators under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    KnnPlugin,
    KernelPlugin,
    EnsembleExact,
    EnsembleRelaxed,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::KnnPlugin,
        EstimatorKind::KernelPlugin,
        EstimatorKind::EnsembleExact,
        EstimatorKind::EnsembleRelaxed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::KnnPlugin => "knn_plugin",
            EstimatorKind::KernelPlugin => "kernel_plugin",
            EstimatorKind::EnsembleExact => "ensemble_exact",
            EstimatorKind::EnsembleRelaxed => "ensemble_relaxed",
        }
    }
}

/// Scalar values broadcast along the dimension; vectors pin it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    fn materialize(&self, d: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; d]),
            ScalarOrVec::Vector(vs) => {
                if vs.len() != d {
                    return Err(Error::Config(format!(
                        "{what} has length {} but the grid dimension is {d}",
                        vs.len()
                    )));
                }
                Ok(vs.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationChoice {
    #[default]
    None,
    UnitCube,
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

/// A Gaussian density parameterized so one config covers every dimension in
/// the grid (means/variances broadcast from scalars).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityTemplate {
    pub mean: ScalarOrVec,
    pub variance: ScalarOrVec,
    #[serde(default)]
    pub truncation: TruncationChoice,
}

impl DensityTemplate {
    pub fn instantiate(&self, d: usize) -> Result<GaussianSpec> {
        let mean = self.mean.materialize(d, "mean")?;
        let variance = self.variance.materialize(d, "variance")?;
        let covariance = match &self.variance {
            ScalarOrVec::Scalar(v) => crate::distributions::Covariance::Spherical(*v),
            ScalarOrVec::Vector(_) => crate::distributions::Covariance::Diagonal(variance),
        };
        let truncation = match &self.truncation {
            TruncationChoice::None => None,
            TruncationChoice::UnitCube => Some(BoxBounds::unit_cube(d)),
            TruncationChoice::Box { lower, upper } => {
                let b = BoxBounds::new(lower.clone(), upper.clone())?;
                if b.dim() != d {
                    return Err(Error::Config(format!(
                        "truncation box dimension {} does not match grid dimension {d}",
                        b.dim()
                    )));
                }
                Some(b)
            }
        };
        let spec = GaussianSpec { mean, covariance, truncation };
        spec.validate()?;
        Ok(spec)
    }
}

/// The divergence functional, in a serializable shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GSpec {
    Renyi { alpha: f64 },
    Kl,
    /// the constant functional g ≡ 1 (estimates are exactly 1; a test hook)
    One,
}

impl GSpec {
    pub fn functional(&self) -> Result<GFunctional> {
        match self {
            GSpec::Renyi { alpha } => GFunctional::renyi(*alpha),
            GSpec::Kl => Ok(GFunctional::kl()),
            GSpec::One => Ok(GFunctional::constant_one()),
        }
    }
}

fn default_l_min() -> f64 {
    1.0
}
fn default_l_max() -> f64 {
    3.0
}
fn default_l_count() -> usize {
    30
}
fn default_eta() -> f64 {
    1.5
}

/// Ensemble index grid and norm cap; defaults to 30 indices on [1, 3] with
/// eta = 1.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub l_values: Option<Vec<f64>>,
    #[serde(default = "default_l_min")]
    pub l_min: f64,
    #[serde(default = "default_l_max")]
    pub l_max: f64,
    #[serde(default = "default_l_count")]
    pub l_count: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            l_values: None,
            l_min: default_l_min(),
            l_max: default_l_max(),
            l_count: default_l_count(),
            eta: default_eta(),
        }
    }
}

impl EnsembleConfig {
    pub fn spec(&self, d: usize) -> Result<EnsembleSpec> {
        match &self.l_values {
            Some(vs) => EnsembleSpec::new(vs.clone(), d),
            None => EnsembleSpec::evenly_spaced(self.l_min, self.l_max, self.l_count, d),
        }
    }
}

fn default_alpha_frac() -> f64 {
    0.5
}
fn default_oracle_budget() -> usize {
    10_000_000
}
fn default_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

/// Full description of one experiment sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub master_seed: u64,
    pub trials: usize,
    pub t_grid: Vec<usize>,
    pub d_grid: Vec<usize>,
    #[serde(default = "default_alpha_frac")]
    pub alpha_frac: f64,
    #[serde(default = "default_oracle_budget")]
    pub oracle_budget: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    pub f1: DensityTemplate,
    pub f2: DensityTemplate,
    pub g: GSpec,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.t_grid.is_empty() || self.d_grid.is_empty() {
            return Err(Error::Config("t_grid and d_grid must be nonempty".into()));
        }
        if self.t_grid.iter().any(|&t| t < 2) {
            return Err(Error::Config("every T must be >= 2".into()));
        }
        if self.d_grid.iter().any(|&d| d == 0) {
            return Err(Error::Config("every d must be >= 1".into()));
        }
        if !(self.alpha_frac > 0.0 && self.alpha_frac < 1.0) {
            return Err(Error::Config(format!(
                "alpha_frac must lie in (0,1), got {}",
                self.alpha_frac
            )));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimators must be nonempty".into()));
        }
        self.g.functional()?;
        for &d in &self.d_grid {
            self.f1.instantiate(d)?;
            let f2 = self.f2.instantiate(d)?;
            let f1 = self.f1.instantiate(d)?;
            if f1.truncation != f2.truncation {
                return Err(Error::Config(
                    "f1 and f2 must share the same truncation".into(),
                ));
            }
            if self.uses_ensemble() {
                self.ensemble.spec(d)?;
            }
        }
        Ok(())
    }

    fn uses_ensemble(&self) -> bool {
        self.estimators
            .iter()
            .any(|e| matches!(e, EstimatorKind::EnsembleExact | EstimatorKind::EnsembleRelaxed))
    }

    /// Estimators in canonical order, deduplicated.
    pub fn estimator_set(&self) -> Vec<EstimatorKind> {
        let mut set: Vec<EstimatorKind> = self.estimators.clone();
        set.sort();
        set.dedup();
        set
    }
}

// ---------------------------------------------------------------------------
// records and summaries
// ---------------------------------------------------------------------------

/// One estimator's result on one Monte Carlo trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub t: usize,
    pub d: usize,
    pub trial: usize,
    pub estimator: EstimatorKind,
    pub estimate_functional: Option<f64>,
    pub estimate_divergence: Option<f64>,
    pub truth_functional: f64,
    pub truth_divergence: f64,
    pub sq_error: Option<f64>,
    pub failed: bool,
    pub reason: String,
    pub wall_ms: u64,
}

/// Per-(T, d, estimator) aggregate. `n` counts successful trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub t: usize,
    pub d: usize,
    pub estimator: EstimatorKind,
    pub n: usize,
    pub n_failed: usize,
    pub mse: f64,
    pub bias: f64,
    pub variance: f64,
    pub mean: f64,
    pub std: f64,
}

/// Which estimate scale a summary aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Functional,
    Divergence,
}

/// Ground-truth cell for one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCell {
    pub d: usize,
    pub truth_functional: f64,
    pub truth_divergence: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedCell {
    pub t: usize,
    pub eta: f64,
    pub epsilon: Option<f64>,
    pub weights: Option<WeightVector>,
    pub error: Option<String>,
}

/// Weight-solver diagnostics for one dimension (exported as JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub d: usize,
    pub indices: Vec<f64>,
    pub exact: Option<WeightVector>,
    pub exact_error: Option<String>,
    pub relaxed: Vec<RelaxedCell>,
}

/// Everything one experiment run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<TrialRecord>,
    pub oracle: Vec<OracleCell>,
    pub weight_diagnostics: Vec<WeightDiagnostics>,
}

// ---------------------------------------------------------------------------
// the driver
// ---------------------------------------------------------------------------

struct DimensionContext {
    d: usize,
    gauss1: Gaussian,
    gauss2: Gaussian,
    support: Option<BoxBounds>,
    oracle: OracleCell,
    ensemble_spec: Option<EnsembleSpec>,
    exact_weights: Option<std::result::Result<WeightVector, String>>,
    /// per t-grid position, when the relaxed estimator is configured
    relaxed_weights: Vec<Option<std::result::Result<(WeightVector, f64), String>>>,
}

fn sanitize_reason(reason: &str) -> String {
    reason.replace(',', ";").replace('\n', " ")
}

fn failed_record(
    t: usize,
    d: usize,
    trial: usize,
    estimator: EstimatorKind,
    oracle: &OracleCell,
    reason: &str,
) -> TrialRecord {
    TrialRecord {
        t,
        d,
        trial,
        estimator,
        estimate_functional: None,
        estimate_divergence: None,
        truth_functional: oracle.truth_functional,
        truth_divergence: oracle.truth_divergence,
        sq_error: None,
        failed: true,
        reason: sanitize_reason(reason),
        wall_ms: 0,
    }
}

/// Runs the full sweep. Deterministic given the config (including the master
/// seed) for any rayon thread count: all seeds are derived per (T, d, trial)
/// and records are ordered before being returned.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let master = Seed::new(config.master_seed);
    let g = config.g.functional()?;
    let estimators = config.estimator_set();
    let use_knn_table = estimators.iter().any(|e| {
        matches!(
            e,
            EstimatorKind::KnnPlugin | EstimatorKind::EnsembleExact | EstimatorKind::EnsembleRelaxed
        )
    });

    // oracle truths and weight vectors are solved once, serially
    let mut contexts: Vec<DimensionContext> = Vec::with_capacity(config.d_grid.len());
    for (di, &d) in config.d_grid.iter().enumerate() {
        let f1 = config.f1.instantiate(d)?;
        let f2 = config.f2.instantiate(d)?;
        let oracle_est: OracleEstimate = true_divergence(
            &f1,
            &f2,
            &g,
            config.oracle_budget,
            master.derive(TAG_ORACLE).derive(di as u64),
        )?;
        let truth_divergence = g.post_transform(oracle_est.value)?;
        let oracle = OracleCell {
            d,
            truth_functional: oracle_est.value,
            truth_divergence,
            std_error: oracle_est.std_error,
        };
        let ensemble_spec = if config.uses_ensemble() {
            Some(config.ensemble.spec(d)?)
        } else {
            None
        };
        let exact_weights = if estimators.contains(&EstimatorKind::EnsembleExact) {
            let spec = ensemble_spec.as_ref().unwrap();
            Some(solve_exact_weights(spec).map_err(|e| e.to_string()))
        } else {
            None
        };
        let relaxed_weights: Vec<Option<std::result::Result<(WeightVector, f64), String>>> =
            if estimators.contains(&EstimatorKind::EnsembleRelaxed) {
                let spec = ensemble_spec.as_ref().unwrap();
                config
                    .t_grid
                    .iter()
                    .map(|&t| {
                        Some(
                            solve_relaxed_weights(spec, t, config.ensemble.eta)
                                .map(|r| (r.weights, r.epsilon))
                                .map_err(|e| e.to_string()),
                        )
                    })
                    .collect()
            } else {
                vec![None; config.t_grid.len()]
            };
        let support = f2.truncation.clone();
        contexts.push(DimensionContext {
            d,
            gauss1: Gaussian::new(&f1)?,
            gauss2: Gaussian::new(&f2)?,
            support,
            oracle,
            ensemble_spec,
            exact_weights,
            relaxed_weights,
        });
    }

    let mut work: Vec<(usize, usize, usize)> = Vec::new();
    for ti in 0..config.t_grid.len() {
        for di in 0..config.d_grid.len() {
            for trial in 0..config.trials {
                work.push((ti, di, trial));
            }
        }
    }

    let mut records: Vec<TrialRecord> = work
        .par_iter()
        .map(|&(ti, di, trial)| {
            run_trial(config, &contexts[di], &estimators, &g, ti, trial, master, use_knn_table)
        })
        .collect::<Result<Vec<Vec<TrialRecord>>>>()?
        .into_iter()
        .flatten()
        .collect();

    records.sort_by(|a, b| {
        (a.t, a.d, a.trial, a.estimator).cmp(&(b.t, b.d, b.trial, b.estimator))
    });

    let weight_diagnostics = contexts
        .iter()
        .filter(|c| c.ensemble_spec.is_some())
        .map(|c| {
            let spec = c.ensemble_spec.as_ref().unwrap();
            WeightDiagnostics {
                d: c.d,
                indices: spec.indices().to_vec(),
                exact: c.exact_weights.as_ref().and_then(|r| r.as_ref().ok().cloned()),
                exact_error: c
                    .exact_weights
                    .as_ref()
                    .and_then(|r| r.as_ref().err().cloned()),
                relaxed: config
                    .t_grid
                    .iter()
                    .zip(&c.relaxed_weights)
                    .filter_map(|(&t, r)| {
                        r.as_ref().map(|res| match res {
                            Ok((w, eps)) => RelaxedCell {
                                t,
                                eta: config.ensemble.eta,
                                epsilon: Some(*eps),
                                weights: Some(w.clone()),
                                error: None,
                            },
                            Err(e) => RelaxedCell {
                                t,
                                eta: config.ensemble.eta,
                                epsilon: None,
                                weights: None,
                                error: Some(e.clone()),
                            },
                        })
                    })
                    .collect(),
            }
        })
        .collect();

    Ok(ExperimentOutput {
        records,
        oracle: contexts.into_iter().map(|c| c.oracle).collect(),
        weight_diagnostics,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    config: &ExperimentConfig,
    ctx: &DimensionContext,
    estimators: &[EstimatorKind],
    g: &GFunctional,
    ti: usize,
    trial: usize,
    master: Seed,
    use_knn_table: bool,
) -> Result<Vec<TrialRecord>> {
    let t = config.t_grid[ti];
    let d = ctx.d;
    let di_tag = ctx.d as u64;
    let trial_seed = master
        .derive(TAG_TRIAL)
        .derive(ti as u64)
        .derive(di_tag)
        .derive(trial as u64);

    let all_failed = |reason: &str| -> Vec<TrialRecord> {
        estimators
            .iter()
            .map(|&e| failed_record(t, d, trial, e, &ctx.oracle, reason))
            .collect()
    };

    // common trial data
    let f2_full = match ctx.gauss2.sample(t, trial_seed.derive(TAG_F2)) {
        Ok(s) => s,
        Err(e) => return Ok(all_failed(&e.to_string())),
    };
    let (eval, refs) = match split_f2(&f2_full, config.alpha_frac, trial_seed.derive(TAG_SPLIT)) {
        Ok(pair) => pair,
        Err(e) => return Ok(all_failed(&e.to_string())),
    };
    let m1 = t;
    let samples_f1 = match ctx.gauss1.sample(m1, trial_seed.derive(TAG_F1)) {
        Ok(s) => s,
        Err(e) => return Ok(all_failed(&e.to_string())),
    };
    let m2 = refs.len();
    let k1_base = round_half_up((m1 as f64).sqrt()).clamp(1, m1);
    let k2_base = round_half_up((m2 as f64).sqrt()).clamp(1, m2);

    let ensemble_ks: Option<std::result::Result<Vec<usize>, String>> = ctx
        .ensemble_spec
        .as_ref()
        .map(|spec| spec.ks(m1, m2).map_err(|e| e.to_string()));

    // one distance table serves the plug-in and every ensemble member
    let builder = if use_knn_table {
        let mut k1_max = k1_base;
        let mut k2_max = k2_base;
        if let Some(Ok(ks)) = &ensemble_ks {
            let km = *ks.iter().max().unwrap();
            k1_max = k1_max.max(km);
            k2_max = k2_max.max(km);
        }
        match RatioFieldBuilder::new(&eval, &samples_f1, &refs, k1_max, k2_max) {
            Ok(b) => Some(b),
            Err(e) => return Ok(all_failed(&e.to_string())),
        }
    } else {
        None
    };

    let mut out = Vec::with_capacity(estimators.len());
    for &estimator in estimators {
        let start = Instant::now();
        let result = match estimator {
            EstimatorKind::KnnPlugin => {
                plugin_from_builder(builder.as_ref().unwrap(), k1_base, k2_base, g)
            }
            EstimatorKind::KernelPlugin => plugin_estimate_kernel(
                &eval,
                &refs,
                &samples_f1,
                k1_base,
                k2_base,
                ctx.support.as_ref(),
                g,
                trial_seed.derive(TAG_KERNEL),
            ),
            EstimatorKind::EnsembleExact | EstimatorKind::EnsembleRelaxed => {
                let weights = match estimator {
                    EstimatorKind::EnsembleExact => ctx
                        .exact_weights
                        .as_ref()
                        .expect("exact weights prepared")
                        .clone(),
                    _ => ctx.relaxed_weights[ti]
                        .as_ref()
                        .expect("relaxed weights prepared")
                        .clone()
                        .map(|(w, _)| w),
                };
                match (weights, &ensemble_ks) {
                    (Err(e), _) => Err(Error::Config(e)),
                    (_, Some(Err(e))) => Err(Error::Config(e.clone())),
                    (Ok(w), Some(Ok(ks))) => {
                        ensemble_from_builder(builder.as_ref().unwrap(), ks, &w, g)
                    }
                    (Ok(_), None) => unreachable!("ensemble spec missing"),
                }
            }
        };
        let wall_ms = start.elapsed().as_millis() as u64;
        let record = match result {
            Ok(est) => {
                let err = est.functional - ctx.oracle.truth_functional;
                TrialRecord {
                    t,
                    d,
                    trial,
                    estimator,
                    estimate_functional: Some(est.functional),
                    estimate_divergence: Some(est.divergence),
                    truth_functional: ctx.oracle.truth_functional,
                    truth_divergence: ctx.oracle.truth_divergence,
                    sq_error: Some(err * err),
                    failed: false,
                    reason: String::new(),
                    wall_ms,
                }
            }
            Err(e) => {
                let mut r = failed_record(t, d, trial, estimator, &ctx.oracle, &e.to_string());
                r.wall_ms = wall_ms;
                r
            }
        };
        out.push(record);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// summaries
// ---------------------------------------------------------------------------

/// Population-form aggregates per (T, d, estimator):
/// `mse = mean((x - truth)^2)`, `bias = mean - truth`,
/// `variance = mean((x - mean)^2)`, so `mse = bias^2 + variance` identically.
pub fn summarize(records: &[TrialRecord], scale: Scale) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(usize, usize, EstimatorKind), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.t, r.d, r.estimator)).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(cells.len());
    for ((t, d, estimator), cell) in cells {
        let values: Vec<f64> = cell
            .iter()
            .filter(|r| !r.failed)
            .filter_map(|r| match scale {
                Scale::Functional => r.estimate_functional,
                Scale::Divergence => r.estimate_divergence,
            })
            .collect();
        let n_failed = cell.len() - values.len();
        if values.is_empty() {
            rows.push(SummaryRow {
                t,
                d,
                estimator,
                n: 0,
                n_failed,
                mse: f64::NAN,
                bias: f64::NAN,
                variance: f64::NAN,
                mean: f64::NAN,
                std: f64::NAN,
            });
            continue;
        }
        let truth = match scale {
            Scale::Functional => cell[0].truth_functional,
            Scale::Divergence => cell[0].truth_divergence,
        };
        let n = values.len() as f64;
        let mut sum = DdSum::new();
        for &v in &values {
            sum.add(v);
        }
        let mean = sum.value() / n;
        let mut var_sum = DdSum::new();
        let mut mse_sum = DdSum::new();
        for &v in &values {
            var_sum.add_prod(v - mean, v - mean);
            mse_sum.add_prod(v - truth, v - truth);
        }
        let variance = var_sum.value() / n;
        let mse = mse_sum.value() / n;
        rows.push(SummaryRow {
            t,
            d,
            estimator,
            n: values.len(),
            n_failed,
            mse,
            bias: mean - truth,
            variance,
            mean,
            std: variance.sqrt(),
        });
    }
    rows
}

/// The reference curve c/T plotted against the theoretical parametric rate.
pub fn reference_curve(t_grid: &[usize], c: f64) -> Result<Vec<(usize, f64)>> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "reference constant must be positive, got {c}"
        )));
    }
    Ok(t_grid.iter().map(|&t| (t, c / t as f64)).collect())
}

/// Least-squares slope of ln(y) against ln(x). None when fewer than two
/// usable points exist.
pub fn fit_log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mean_x = logs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = logs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Warnings for cells where the oracle's standard error exceeds 5% of the
/// smallest estimator RMSE (the truth is then too noisy to rank estimators).
pub fn oracle_precision_warnings(rows: &[SummaryRow], oracle: &[OracleCell]) -> Vec<String> {
    let mut by_cell: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.n > 0) {
        let rmse = row.mse.sqrt();
        by_cell
            .entry((row.t, row.d))
            .and_modify(|m| *m = m.min(rmse))
            .or_insert(rmse);
    }
    let mut warnings = Vec::new();
    for ((t, d), min_rmse) in by_cell {
        if let Some(cell) = oracle.iter().find(|o| o.d == d) {
            if cell.std_error > 0.05 * min_rmse {
                warnings.push(format!(
                    "cell (T={t}, d={d}): oracle std error {:.3e} exceeds 5% of the smallest estimator RMSE {:.3e}",
                    cell.std_error, min_rmse
                ));
            }
        }
    }
    warnings
}

// ---------------------------------------------------------------------------
// CSV / file output
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => String::new(),
    }
}

pub fn records_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.d,
            r.trial,
            r.estimator.name(),
            fmt_opt(r.estimate_functional),
            fmt_opt(r.estimate_divergence),
            r.truth_functional,
            fmt_opt(r.sq_error),
            r.failed,
            r.reason,
            r.wall_ms
        ));
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.d,
            r.estimator.name(),
            r.n,
            fmt_opt(Some(r.mse)),
            fmt_opt(Some(r.bias)),
            fmt_opt(Some(r.variance)),
            fmt_opt(Some(r.mean)),
            fmt_opt(Some(r.std)),
        ));
    }
    out
}

/// The records CSV with the wall-time column removed; wall time is the one
/// deliberately nondeterministic field, so byte comparisons use this view.
pub fn strip_wall_ms_column(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .fold(String::new(), |mut acc, line| {
            acc.push_str(line);
            acc.push('\n');
            acc
        })
}

/// Writes records.csv, summary.csv, summary_divergence.csv and per-dimension
/// weight diagnostics JSON into `dir`. Returns the paths written.
pub fn write_experiment_outputs(dir: &Path, output: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let records_path = dir.join("records.csv");
    std::fs::write(&records_path, records_csv(&output.records))?;
    written.push(records_path);

    let summary_path = dir.join("summary.csv");
    std::fs::write(
        &summary_path,
        summary_csv(&summarize(&output.records, Scale::Functional)),
    )?;
    written.push(summary_path);

    let summary_div_path = dir.join("summary_divergence.csv");
    std::fs::write(
        &summary_div_path,
        summary_csv(&summarize(&output.records, Scale::Divergence)),
    )?;
    written.push(summary_div_path);

    let oracle_path = dir.join("oracle.json");
    let oracle_json = serde_json::to_string_pretty(&output.oracle)
        .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&oracle_path, oracle_json)?;
    written.push(oracle_path);

    for diag in &output.weight_diagnostics {
        let path = dir.join(format!("weights_d{}.json", diag.d));
        let mut file = std::fs::File::create(&path)?;
        let json = serde_json::to_string_pretty(diag).map_err(|e| Error::Config(e.to_string()))?;
        file.write_all(json.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            master_seed: 7,
            trials: 2,
            t_grid: vec![100],
            d_grid: vec![1],
            alpha_frac: 0.5,
            oracle_budget: 100_000,
            estimators: EstimatorKind::ALL.to_vec(),
            f1: DensityTemplate {
                mean: ScalarOrVec::Scalar(0.7),
                variance: ScalarOrVec::Scalar(0.1),
                truncation: TruncationChoice::UnitCube,
            },
            f2: DensityTemplate {
                mean: ScalarOrVec::Scalar(0.3),
                variance: ScalarOrVec::Scalar(0.3),
                truncation: TruncationChoice::UnitCube,
            },
            g: GSpec::Renyi { alpha: 0.8 },
            ensemble: EnsembleConfig {
                l_values: None,
                l_min: 1.0,
                l_max: 3.0,
                l_count: 10,
                eta: 1.5,
            },
        }
    }

    #[test]
    fn record_counting() {
        let config = tiny_config();
        let output = run_experiment(&config).unwrap();
        // trials * |T| * |d| * |estimators| = 2 * 1 * 1 * 4
        assert_eq!(output.records.len(), 8);
    }

    #[test]
    fn summarize_single_record() {
        let r = TrialRecord {
            t: 10,
            d: 1,
            trial: 0,
            estimator: EstimatorKind::KnnPlugin,
            estimate_functional: Some(1.5),
            estimate_divergence: Some(1.5),
            truth_functional: 1.0,
            truth_divergence: 1.0,
            sq_error: Some(0.25),
            failed: false,
            reason: String::new(),
            wall_ms: 0,
        };
        let rows = summarize(&[r], Scale::Functional);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].n, 1);
        assert_eq!(rows[0].variance, 0.0);
        assert!((rows[0].mse - rows[0].bias * rows[0].bias).abs() < 1e-15);
    }

    #[test]
    fn summarize_symmetric_pair() {
        let mk = |trial: usize, est: f64| TrialRecord {
            t: 10,
            d: 1,
            trial,
            estimator: EstimatorKind::KnnPlugin,
            estimate_functional: Some(est),
            estimate_divergence: Some(est),
            truth_functional: 2.0,
            truth_divergence: 2.0,
            sq_error: Some((est - 2.0) * (est - 2.0)),
            failed: false,
            reason: String::new(),
            wall_ms: 0,
        };
        let rows = summarize(&[mk(0, 3.0), mk(1, 1.0)], Scale::Functional);
        assert_eq!(rows[0].bias, 0.0);
        assert_eq!(rows[0].mse, 1.0);
        assert_eq!(rows[0].variance, 1.0);
    }

    #[test]
    fn summarize_mse_identity_and_direct_mean() {
        let mut rng_state = 88172645463325252u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state as f64 / u64::MAX as f64) * 2.0
        };
        let truth = 0.83;
        let records: Vec<TrialRecord> = (0..57)
            .map(|trial| {
                let est = next();
                TrialRecord {
                    t: 500,
                    d: 3,
                    trial,
                    estimator: EstimatorKind::EnsembleRelaxed,
                    estimate_functional: Some(est),
                    estimate_divergence: Some(est),
                    truth_functional: truth,
                    truth_divergence: truth,
                    sq_error: Some((est - truth) * (est - truth)),
                    failed: false,
                    reason: String::new(),
                    wall_ms: 0,
                }
            })
            .collect();
        let rows = summarize(&records, Scale::Functional);
        let row = &rows[0];
        let identity_gap = (row.mse - (row.bias * row.bias + row.variance)).abs();
        assert!(identity_gap / row.mse < 1e-10, "identity gap {identity_gap}");
        let direct: f64 =
            records.iter().map(|r| r.sq_error.unwrap()).sum::<f64>() / records.len() as f64;
        assert!(((row.mse - direct) / direct).abs() < 1e-12);
    }

    #[test]
    fn summarize_flags_all_failed_cell() {
        let r = TrialRecord {
            t: 10,
            d: 1,
            trial: 0,
            estimator: EstimatorKind::KernelPlugin,
            estimate_functional: None,
            estimate_divergence: None,
            truth_functional: 1.0,
            truth_divergence: 1.0,
            sq_error: None,
            failed: true,
            reason: "boom".into(),
            wall_ms: 0,
        };
        let rows = summarize(&[r], Scale::Functional);
        assert_eq!(rows[0].n, 0);
        assert_eq!(rows[0].n_failed, 1);
        assert!(rows[0].mse.is_nan());
    }

    #[test]
    fn reference_curve_values() {
        let curve = reference_curve(&[100, 1000, 1], 100.0).unwrap();
        assert_eq!(curve[0], (100, 1.0));
        assert_eq!(curve[1], (1000, 0.1));
        assert_eq!(curve[2], (1, 100.0));
        assert!(reference_curve(&[10], 0.0).is_err());
        let unit = reference_curve(&[1], 1.0).unwrap();
        assert_eq!(unit[0], (1, 1.0));
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [100.0, 200.0, 400.0, 800.0]
            .iter()
            .map(|&t| (t, 50.0 / t))
            .collect();
        let slope = fit_log_log_slope(&pts).unwrap();
        assert!((slope + 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let good = r#"
            trials = 1
            t_grid = [50]
            d_grid = [1]
            estimators = ["knn_plugin"]
            [f1]
            mean = 0.7
            variance = 0.1
            truncation = "unit_cube"
            [f2]
            mean = 0.3
            variance = 0.3
            truncation = "unit_cube"
            [g]
            kind = "kl"
        "#;
        ExperimentConfig::from_toml(good).unwrap();

        let unknown = format!("{good}\nbogus_key = 3\n");
        assert!(matches!(
            ExperimentConfig::from_toml(&unknown),
            Err(Error::Config(_))
        ));

        let bad_alpha = good.replace("trials = 1", "trials = 1\nalpha_frac = 1.5");
        assert!(ExperimentConfig::from_toml(&bad_alpha).is_err());

        let zero_trials = good.replace("trials = 1", "trials = 0");
        assert!(ExperimentConfig::from_toml(&zero_trials).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let config = tiny_config();
        let text = toml::to_string(&config).unwrap();
        let parsed = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let config = tiny_config();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| run_experiment(&config).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(
            strip_wall_ms_column(&records_csv(&a.records)),
            strip_wall_ms_column(&records_csv(&b.records))
        );
        assert_eq!(
            summary_csv(&summarize(&a.records, Scale::Functional)),
            summary_csv(&summarize(&b.records, Scale::Functional))
        );
    }

    #[test]
    fn trial_samples_are_independent_across_trials() {
        let mut config = tiny_config();
        config.trials = 6;
        config.estimators = vec![EstimatorKind::KnnPlugin];
        let master = Seed::new(config.master_seed);
        let f2 = config.f2.instantiate(1).unwrap();
        let gauss = Gaussian::new(&f2).unwrap();
        let mut first_rows = Vec::new();
        for trial in 0..config.trials {
            let s = master
                .derive(TAG_TRIAL)
                .derive(0)
                .derive(1)
                .derive(trial as u64);
            let sample = gauss.sample(100, s.derive(TAG_F2)).unwrap();
            first_rows.push(sample.row(0).to_vec());
        }
        for i in 0..first_rows.len() {
            for j in (i + 1)..first_rows.len() {
                assert_ne!(first_rows[i], first_rows[j], "trials {i} and {j} collide");
            }
        }
    }

    #[test]
    fn failed_reasons_are_csv_safe() {
        assert_eq!(sanitize_reason("a,b\nc"), "a;b c");
    }

    #[test]
    fn strip_wall_ms_removes_only_last_column() {
        let csv = "a,b,c\n1,2,3\n4,5,6\n";
        assert_eq!(strip_wall_ms_column(csv), "a,b\n1,2\n4,5\n");
    }
}
