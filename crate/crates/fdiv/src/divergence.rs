//! The g-functionals and the k-NN plug-in divergence estimator, including the
//! f2 data-split protocol.
//!
//! The estimated quantity is the functional `G = E_{f2}[ g(f1(X)/f2(X)) ]`.
//! The plug-in estimator splits the f2 sample into N evaluation points and M2
//! density references, forms the likelihood-ratio field
//! `L(X_i) = f1_hat(X_i) / f2_hat(X_i)` from k-NN density estimates, and
//! averages `g(L(X_i))`. A post-transform maps the functional to the named
//! divergence (Rényi: `ln(G)/(alpha-1)`; KL: identity).

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::density::{knn_density_from_distance, TruncatedUniformKernelEstimator};
use crate::numeric::DdSum;
use crate::sample::{BoxBounds, SampleSet};
use crate::seed::Seed;
use crate::spatial::{unit_ball_volume, NeighborIndex};
use crate::{Error, Result};

/// Rounds positive reals half-up, the convention for every count derived from
/// a real-valued schedule (M2, k(l), baseline k).
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// The convex function g applied to the likelihood ratio, together with the
/// post-transform from the functional value to the reported divergence.
#[derive(Clone)]
pub enum GFunctional {
    /// `g(x) = x^alpha`, reported as `ln(G)/(alpha-1)`.
    Renyi { alpha: f64 },
    /// `g(x) = -ln x`, reported as-is.
    Kl,
    /// User-supplied g, reported as-is.
    Custom {
        name: String,
        g: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for GFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GFunctional::Renyi { alpha } => write!(f, "Renyi {{ alpha: {alpha} }}"),
            GFunctional::Kl => write!(f, "Kl"),
            GFunctional::Custom { name, .. } => write!(f, "Custom {{ name: {name:?} }}"),
        }
    }
}

impl GFunctional {
    pub fn renyi(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0 && alpha != 1.0) {
            return Err(Error::InvalidParameter(format!(
                "Renyi alpha must lie in (0,1) or (1,inf), got {alpha}"
            )));
        }
        Ok(GFunctional::Renyi { alpha })
    }

    pub fn kl() -> Self {
        GFunctional::Kl
    }

    pub fn custom(name: impl Into<String>, g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        GFunctional::Custom {
            name: name.into(),
            g: Arc::new(g),
        }
    }

    /// The constant functional `g ≡ 1`; its estimate is exactly 1 on any data.
    pub fn constant_one() -> Self {
        Self::custom("one", |_| 1.0)
    }

    pub fn name(&self) -> String {
        match self {
            GFunctional::Renyi { alpha } => format!("renyi:{alpha}"),
            GFunctional::Kl => "kl".to_string(),
            GFunctional::Custom { name, .. } => format!("custom:{name}"),
        }
    }

    /// Evaluates g at a likelihood ratio, which must be strictly positive and
    /// finite.
    pub fn evaluate(&self, ratio: f64) -> Result<f64> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(Error::InvalidRatio { value: ratio, index: 0 });
        }
        let v = match self {
            GFunctional::Renyi { alpha } => ratio.powf(*alpha),
            GFunctional::Kl => -ratio.ln(),
            GFunctional::Custom { g, .. } => g(ratio),
        };
        if !v.is_finite() {
            return Err(Error::InvalidRatio { value: v, index: 0 });
        }
        Ok(v)
    }

    /// Maps the functional value G to the reported divergence.
    pub fn post_transform(&self, functional: f64) -> Result<f64> {
        match self {
            GFunctional::Renyi { alpha } => {
                if functional <= 0.0 {
                    return Err(Error::NonPositiveFunctional(functional));
                }
                Ok(functional.ln() / (alpha - 1.0))
            }
            GFunctional::Kl | GFunctional::Custom { .. } => Ok(functional),
        }
    }
}

/// Sample-budget bookkeeping for one estimation problem: T = N + M2 points
/// from f2, M1 points from f1, and the neighbor counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    /// total f2 budget T
    pub total: usize,
    /// fraction of T used as density references: M2 = round(alpha_frac * T)
    pub alpha_frac: f64,
    pub m1: usize,
    pub k1: usize,
    pub k2: usize,
}

impl SplitConfig {
    pub fn m2(&self) -> usize {
        round_half_up(self.alpha_frac * self.total as f64).clamp(1, self.total - 1)
    }

    pub fn n_eval(&self) -> usize {
        self.total - self.m2()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total < 2 {
            return Err(Error::InvalidParameter(format!(
                "f2 budget T={} must be at least 2",
                self.total
            )));
        }
        if !(self.alpha_frac > 0.0 && self.alpha_frac < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha_frac must lie in (0,1), got {}",
                self.alpha_frac
            )));
        }
        if self.k2 == 0 || self.k2 > self.m2() {
            return Err(Error::NeighborCount { k: self.k2, max: self.m2() });
        }
        if self.k1 == 0 || self.k1 > self.m1 {
            return Err(Error::NeighborCount { k: self.k1, max: self.m1 });
        }
        Ok(())
    }
}

/// Randomly partitions an f2 sample into (evaluation, reference) parts of
/// sizes (T - round(alpha_frac*T), round(alpha_frac*T)).
pub fn split_f2(samples: &SampleSet, alpha_frac: f64, seed: Seed) -> Result<(SampleSet, SampleSet)> {
    let t = samples.len();
    if t < 2 {
        return Err(Error::InvalidParameter(format!(
            "cannot split {t} samples into two nonempty parts"
        )));
    }
    if !(alpha_frac > 0.0 && alpha_frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha_frac must lie in (0,1), got {alpha_frac}"
        )));
    }
    let m2 = round_half_up(alpha_frac * t as f64).clamp(1, t - 1);
    let n = t - m2;
    let mut indices: Vec<usize> = (0..t).collect();
    let mut rng = seed.rng();
    // Fisher-Yates
    for i in (1..t).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        indices.swap(i, j);
    }
    let mut eval_idx = indices[..n].to_vec();
    let mut ref_idx = indices[n..].to_vec();
    eval_idx.sort_unstable();
    ref_idx.sort_unstable();
    let eval = samples.select(&eval_idx, format!("{}/eval", samples.label()))?;
    let refs = samples.select(&ref_idx, format!("{}/ref", samples.label()))?;
    Ok((eval, refs))
}

/// The likelihood-ratio field over the evaluation points: strictly positive,
/// finite values aligned with the evaluation-row index.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodRatioField {
    values: Vec<f64>,
}

impl LikelihoodRatioField {
    fn new(values: Vec<f64>) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidRatio { value: v, index: i });
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(1/N) * sum_i g(L(X_i))`, summed in evaluation-point order with an
    /// order-robust accumulator.
    pub fn functional_mean(&self, g: &GFunctional) -> Result<f64> {
        let mut sum = DdSum::new();
        for (i, &v) in self.values.iter().enumerate() {
            let gv = g.evaluate(v).map_err(|e| match e {
                Error::InvalidRatio { value, .. } => Error::InvalidRatio { value, index: i },
                other => other,
            })?;
            sum.add(gv);
        }
        Ok(sum.value_dd().div(crate::numeric::Dd::from_f64(self.values.len() as f64)).to_f64())
    }
}

/// Precomputed k-NN distance tables from the evaluation points into both
/// reference sets. One table serves every neighbor count up to the build
/// maximum, so ensemble members share the expensive queries.
#[derive(Debug)]
pub struct RatioFieldBuilder {
    n_eval: usize,
    dim: usize,
    m1: usize,
    m2: usize,
    k1_max: usize,
    k2_max: usize,
    unit_ball_vol: f64,
    /// n_eval × k1_max ascending distances into the f1 sample
    dist_f1: Vec<f64>,
    /// n_eval × k2_max ascending distances into the f2 reference part
    dist_f2: Vec<f64>,
    eval_points: Vec<f64>,
}

impl RatioFieldBuilder {
    pub fn new(
        eval: &SampleSet,
        samples_f1: &SampleSet,
        ref_f2: &SampleSet,
        k1_max: usize,
        k2_max: usize,
    ) -> Result<Self> {
        let dim = eval.dim();
        for s in [samples_f1, ref_f2] {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: s.dim(),
                });
            }
        }
        if k1_max == 0 || k1_max > samples_f1.len() {
            return Err(Error::NeighborCount { k: k1_max, max: samples_f1.len() });
        }
        if k2_max == 0 || k2_max > ref_f2.len() {
            return Err(Error::NeighborCount { k: k2_max, max: ref_f2.len() });
        }
        let idx1 = NeighborIndex::build(samples_f1)?;
        let idx2 = NeighborIndex::build(ref_f2)?;
        let n_eval = eval.len();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n_eval)
            .into_par_iter()
            .map(|i| {
                let x = eval.row(i);
                let d1 = idx1.k_smallest_distances(x, k1_max)?;
                let d2 = idx2.k_smallest_distances(x, k2_max)?;
                Ok((d1, d2))
            })
            .collect::<Result<_>>()?;
        let mut dist_f1 = Vec::with_capacity(n_eval * k1_max);
        let mut dist_f2 = Vec::with_capacity(n_eval * k2_max);
        for (d1, d2) in rows {
            dist_f1.extend_from_slice(&d1);
            dist_f2.extend_from_slice(&d2);
        }
        Ok(Self {
            n_eval,
            dim,
            m1: samples_f1.len(),
            m2: ref_f2.len(),
            k1_max,
            k2_max,
            unit_ball_vol: unit_ball_volume(dim),
            dist_f1,
            dist_f2,
            eval_points: eval.as_flat().to_vec(),
        })
    }

    pub fn n_eval(&self) -> usize {
        self.n_eval
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    /// The ratio field `f1_hat / f2_hat` for neighbor counts `(k1, k2)`.
    pub fn field(&self, k1: usize, k2: usize) -> Result<LikelihoodRatioField> {
        if k1 == 0 || k1 > self.k1_max {
            return Err(Error::NeighborCount { k: k1, max: self.k1_max });
        }
        if k2 == 0 || k2 > self.k2_max {
            return Err(Error::NeighborCount { k: k2, max: self.k2_max });
        }
        let mut values = Vec::with_capacity(self.n_eval);
        for i in 0..self.n_eval {
            let rho1 = self.dist_f1[i * self.k1_max + (k1 - 1)];
            let rho2 = self.dist_f2[i * self.k2_max + (k2 - 1)];
            if rho1 == 0.0 || rho2 == 0.0 {
                let point = self.eval_points[i * self.dim..(i + 1) * self.dim].to_vec();
                return Err(Error::DuplicatePoint {
                    point,
                    k: if rho1 == 0.0 { k1 } else { k2 },
                });
            }
            let f1 = knn_density_from_distance(k1, self.m1, self.dim, self.unit_ball_vol, rho1);
            let f2 = knn_density_from_distance(k2, self.m2, self.dim, self.unit_ball_vol, rho2);
            values.push(f1 / f2);
        }
        LikelihoodRatioField::new(values)
    }
}

/// A divergence estimate on both scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceEstimate {
    /// the functional G that the empirical mean targets
    pub functional: f64,
    /// post-transformed value (Rényi: ln(G)/(alpha-1); otherwise G itself)
    pub divergence: f64,
}

/// The k-NN plug-in estimator on an already-built distance table.
pub fn plugin_from_builder(
    builder: &RatioFieldBuilder,
    k1: usize,
    k2: usize,
    g: &GFunctional,
) -> Result<DivergenceEstimate> {
    let field = builder.field(k1, k2)?;
    let functional = field.functional_mean(g)?;
    Ok(DivergenceEstimate {
        functional,
        divergence: g.post_transform(functional)?,
    })
}

/// The k-NN plug-in estimator of the divergence functional.
///
/// `eval` and `ref_f2` are the two halves of the f2 split; `samples_f1` is
/// the f1 sample. Requires `k1 <= M1` and `k2 <= M2`.
pub fn plugin_estimate(
    eval: &SampleSet,
    ref_f2: &SampleSet,
    samples_f1: &SampleSet,
    k1: usize,
    k2: usize,
    g: &GFunctional,
) -> Result<DivergenceEstimate> {
    let builder = RatioFieldBuilder::new(eval, samples_f1, ref_f2, k1, k2)?;
    plugin_from_builder(&builder, k1, k2, g)
}

/// Same plug-in skeleton with the truncated-uniform-kernel density estimate
/// substituted for the k-NN one. Bandwidths follow `h_i = (k_i / M_i)^(1/d)`.
pub fn plugin_estimate_kernel(
    eval: &SampleSet,
    ref_f2: &SampleSet,
    samples_f1: &SampleSet,
    k1: usize,
    k2: usize,
    support: Option<&BoxBounds>,
    g: &GFunctional,
    seed: Seed,
) -> Result<DivergenceEstimate> {
    let dim = eval.dim();
    for s in [samples_f1, ref_f2] {
        if s.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.dim(),
            });
        }
    }
    if k1 == 0 || k1 > samples_f1.len() {
        return Err(Error::NeighborCount { k: k1, max: samples_f1.len() });
    }
    if k2 == 0 || k2 > ref_f2.len() {
        return Err(Error::NeighborCount { k: k2, max: ref_f2.len() });
    }
    let h1 = (k1 as f64 / samples_f1.len() as f64).powf(1.0 / dim as f64);
    let h2 = (k2 as f64 / ref_f2.len() as f64).powf(1.0 / dim as f64);
    let est1 =
        TruncatedUniformKernelEstimator::new(samples_f1, h1, support.cloned(), seed.derive(1))?;
    let est2 = TruncatedUniformKernelEstimator::new(ref_f2, h2, support.cloned(), seed.derive(2))?;
    let values: Vec<f64> = (0..eval.len())
        .into_par_iter()
        .map(|i| {
            let x = eval.row(i);
            let f1 = est1.density_at(x)?;
            let f2 = est2.density_at(x)?;
            Ok(f1 / f2)
        })
        .collect::<Result<_>>()?;
    let field = LikelihoodRatioField::new(values)?;
    let functional = field.functional_mean(g)?;
    Ok(DivergenceEstimate {
        functional,
        divergence: g.post_transform(functional)?,
    })
}
