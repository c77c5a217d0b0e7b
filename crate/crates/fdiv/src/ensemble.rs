//! Ensemble construction over an index grid, the optimal-weight solvers, and
//! the weighted divergence estimator.
//!
//! Base estimators are the k-NN plug-ins at neighbor counts
//! `k(l) = round(l * sqrt(M2))` for indices `l` in a fixed grid. Their leading
//! bias terms scale like `psi_i(l) = l^(i/d)` for `i = 1..d-1`, so a weight
//! vector with `sum w = 1` and `gamma_w(i) = sum_l w(l) psi_i(l) = 0` cancels
//! them. The exact solver returns the minimum-norm solution of those
//! constraints via the normal system `w = A' (A A')^{-1} b`; the relaxed
//! solver trades a slack `epsilon` on the scaled bias constraints against a
//! cap `eta` on the weight norm, which controls the variance at finite sample
//! sizes.
//!
//! The normal system squares the constraint conditioning, so it is factored
//! in double-double precision with iterative refinement; the returned f64
//! vector genuinely satisfies the advertised residual bounds whenever the
//! Gram condition estimate passes the 1e12 gate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::divergence::{
    round_half_up, DivergenceEstimate, GFunctional, RatioFieldBuilder,
};
use crate::numeric::{dd_dot, Dd, DdSum};
use crate::sample::SampleSet;
use crate::{Error, Result};

/// Gram condition estimates above this are treated as numerically singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Tolerance on `|sum w - 1|` for every returned weight vector.
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Tolerance on `|gamma_w(i)|` for the exact solver.
pub const GAMMA_TOLERANCE: f64 = 1e-10;

/// The ensemble index grid and dimension; fixes the basis functions
/// `psi_i(l) = l^(i/d)`, the exponent set `J = {1..d-1}`, and the neighbor
/// count map `k(l) = round(l * sqrt(M2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    indices: Vec<f64>,
    dim: usize,
}

impl EnsembleSpec {
    pub fn new(indices: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        if indices.len() < dim {
            return Err(Error::InvalidParameter(format!(
                "need more than d-1 = {} ensemble indices, got {}",
                dim - 1,
                indices.len()
            )));
        }
        for pair in indices.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::InvalidParameter(format!(
                    "ensemble indices must be strictly increasing, got {:?}",
                    indices
                )));
            }
        }
        if indices.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "ensemble indices must be positive reals, got {:?}",
                indices
            )));
        }
        Ok(Self { indices, dim })
    }

    /// `count` evenly spaced indices on `[l_min, l_max]`.
    pub fn evenly_spaced(l_min: f64, l_max: f64, count: usize, dim: usize) -> Result<Self> {
        if count < 2 || !(l_min < l_max) {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 indices with l_min < l_max, got count={count}, [{l_min}, {l_max}]"
            )));
        }
        let step = (l_max - l_min) / (count - 1) as f64;
        let indices = (0..count).map(|i| l_min + step * i as f64).collect();
        Self::new(indices, dim)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[f64] {
        &self.indices
    }

    /// The bias exponents J = {1, ..., d-1}.
    pub fn exponents(&self) -> impl Iterator<Item = usize> + '_ {
        1..self.dim
    }

    /// `psi_i(l) = l^(i/d)`.
    pub fn basis(&self, i: usize, l: f64) -> f64 {
        l.powf(i as f64 / self.dim as f64)
    }

    /// The constraint matrix: row 0 all ones (rhs 1), row i the basis values
    /// `psi_i(l)` (rhs 0), giving d rows over L columns.
    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        let l = self.len();
        DMatrix::from_fn(self.dim, l, |i, j| {
            if i == 0 {
                1.0
            } else {
                self.basis(i, self.indices[j])
            }
        })
    }

    /// `k(l) = round(l * sqrt(M2))`, clamped to 1 below; exceeding
    /// `min(M1, M2)` is an error rather than a silent clamp.
    pub fn k_for(&self, l: f64, m1: usize, m2: usize) -> Result<usize> {
        let cap = m1.min(m2);
        let raw = round_half_up(l * (m2 as f64).sqrt());
        if raw > cap {
            return Err(Error::NeighborCount { k: raw, max: cap });
        }
        Ok(raw.max(1))
    }

    pub fn ks(&self, m1: usize, m2: usize) -> Result<Vec<usize>> {
        self.indices.iter().map(|&l| self.k_for(l, m1, m2)).collect()
    }
}

/// Weights aligned with the ensemble indices, with the achieved constraint
/// residuals `gamma_w(i)` and the l2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    /// `gamma_w(i) = sum_l w(l) psi_i(l)` for i in J, in exponent order
    pub residuals: Vec<f64>,
    pub norm: f64,
}

/// Output of the slack-relaxed solver: the weights plus the achieved slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedWeights {
    pub weights: WeightVector,
    /// achieved `max_i |gamma_w(i)| * T^((d-i)/(2d))`
    pub epsilon: f64,
}

// ---------------------------------------------------------------------------
// double-double normal-system machinery
// ---------------------------------------------------------------------------

struct RowMajor<'a> {
    a: &'a [f64],
    rows: usize,
    cols: usize,
}

impl<'a> RowMajor<'a> {
    fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.cols..(i + 1) * self.cols]
    }
}

fn flatten(a: &DMatrix<f64>) -> Vec<f64> {
    let (rows, cols) = a.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Gram matrix `A A'` accumulated in double-double precision.
fn dd_gram(a: &RowMajor) -> Vec<Dd> {
    let d = a.rows;
    let mut g = vec![Dd::ZERO; d * d];
    for i in 0..d {
        for j in i..d {
            let v = dd_dot(a.row(i), a.row(j));
            g[i * d + j] = v;
            g[j * d + i] = v;
        }
    }
    g
}

/// Double-double Cholesky factor (lower triangular) of a symmetric matrix.
fn dd_cholesky(g: &[Dd], d: usize) -> Result<Vec<Dd>> {
    let mut l = vec![Dd::ZERO; d * d];
    for j in 0..d {
        let mut diag = g[j * d + j];
        for k in 0..j {
            diag = diag.sub(l[j * d + k].mul(l[j * d + k]));
        }
        if diag.to_f64() <= 0.0 {
            return Err(Error::SingularConstraints { cond: f64::INFINITY });
        }
        let pivot = diag.sqrt();
        l[j * d + j] = pivot;
        for i in (j + 1)..d {
            let mut v = g[i * d + j];
            for k in 0..j {
                v = v.sub(l[i * d + k].mul(l[j * d + k]));
            }
            l[i * d + j] = v.div(pivot);
        }
    }
    Ok(l)
}

fn dd_chol_solve(l: &[Dd], d: usize, rhs: &[Dd]) -> Vec<Dd> {
    let mut z = vec![Dd::ZERO; d];
    for i in 0..d {
        let mut v = rhs[i];
        for k in 0..i {
            v = v.sub(l[i * d + k].mul(z[k]));
        }
        z[i] = v.div(l[i * d + i]);
    }
    let mut y = vec![Dd::ZERO; d];
    for i in (0..d).rev() {
        let mut v = z[i];
        for k in (i + 1)..d {
            v = v.sub(l[k * d + i].mul(y[k]));
        }
        y[i] = v.div(l[i * d + i]);
    }
    y
}

/// Max abs row residual of `A w = rhs`, each row accumulated exactly.
fn max_residual(a: &RowMajor, w: &[f64], rhs: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.rows {
        let r = Dd::from_f64(rhs[i]).sub(dd_dot(a.row(i), w)).to_f64().abs();
        worst = worst.max(r);
    }
    worst
}

/// Minimum-norm solution of `A w = rhs` through the normal system
/// `w = A' (A A')^{-1} rhs`, factored and refined in double-double precision,
/// then nudged so the f64 vector's exact first-row sum matches `rhs[0]`.
fn min_norm_solve(a: &RowMajor, rhs: &[f64]) -> Result<Vec<f64>> {
    let d = a.rows;
    let cols = a.cols;
    let gram = dd_gram(a);
    let chol = dd_cholesky(&gram, d)?;
    let rhs_dd: Vec<Dd> = rhs.iter().map(|&v| Dd::from_f64(v)).collect();
    let y = dd_chol_solve(&chol, d, &rhs_dd);

    let mut w = vec![0.0f64; cols];
    for (j, wj) in w.iter_mut().enumerate() {
        let mut acc = Dd::ZERO;
        for i in 0..d {
            acc = acc.add(y[i].mul_f64(a.row(i)[j]));
        }
        *wj = acc.to_f64();
    }

    // refinement: correct the f64 rounding of w within the row space
    let mut best = w.clone();
    let mut best_res = max_residual(a, &w, rhs);
    for _ in 0..3 {
        let r: Vec<Dd> = (0..d)
            .map(|i| Dd::from_f64(rhs[i]).sub(dd_dot(a.row(i), &w)))
            .collect();
        let dy = dd_chol_solve(&chol, d, &r);
        for (j, wj) in w.iter_mut().enumerate() {
            let mut acc = Dd::ZERO;
            for i in 0..d {
                acc = acc.add(dy[i].mul_f64(a.row(i)[j]));
            }
            *wj += acc.to_f64();
        }
        let res = max_residual(a, &w, rhs);
        if res < best_res {
            best_res = res;
            best.copy_from_slice(&w);
        } else {
            break;
        }
    }
    let mut w = best;

    // drive the exact sum of the f64 components onto rhs[0] by adjusting the
    // smallest-magnitude component (finest ulp)
    for _ in 0..2 {
        let mut sum = DdSum::new();
        for &v in &w {
            sum.add(v);
        }
        let excess = sum.value_dd().sub(Dd::from_f64(rhs[0])).to_f64();
        if excess == 0.0 {
            break;
        }
        let j = (0..cols)
            .min_by(|&p, &q| w[p].abs().total_cmp(&w[q].abs()))
            .unwrap();
        w[j] -= excess;
    }
    Ok(w)
}

fn weight_vector_from(a: &RowMajor, w: Vec<f64>) -> WeightVector {
    let residuals: Vec<f64> = (1..a.rows).map(|i| dd_dot(a.row(i), &w).to_f64()).collect();
    let mut norm_sq = DdSum::new();
    for &v in &w {
        norm_sq.add_prod(v, v);
    }
    WeightVector {
        weights: w,
        residuals,
        norm: norm_sq.value_dd().sqrt().to_f64(),
    }
}

fn sum_residual(w: &[f64]) -> f64 {
    let mut sum = DdSum::new();
    for &v in w {
        sum.add(v);
    }
    sum.value_dd().sub(Dd::ONE).to_f64()
}

/// Condition estimate of the f64-rounded Gram matrix.
fn gram_condition(gram: &[Dd], d: usize) -> f64 {
    let g = DMatrix::from_fn(d, d, |i, j| gram[i * d + j].to_f64());
    let svals = g.singular_values();
    let max = svals.max();
    let min = svals.min();
    if !(min > 0.0) {
        f64::INFINITY
    } else {
        max / min
    }
}

// ---------------------------------------------------------------------------
// solvers
// ---------------------------------------------------------------------------

/// The unique minimum-l2-norm weights satisfying `sum w = 1` and
/// `gamma_w(i) = 0` for all i in J.
///
/// Errors when the Gram condition estimate exceeds 1e12 (the indices are too
/// clustered for the basis rows to be distinguishable in f64), and enforces
/// the residual bounds on the returned vector.
pub fn solve_exact_weights(spec: &EnsembleSpec) -> Result<WeightVector> {
    let a_mat = spec.constraint_matrix();
    let flat = flatten(&a_mat);
    let a = RowMajor {
        a: &flat,
        rows: spec.dim(),
        cols: spec.len(),
    };
    let cond = gram_condition(&dd_gram(&a), a.rows);
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        return Err(Error::SingularConstraints { cond });
    }
    let mut rhs = vec![0.0; a.rows];
    rhs[0] = 1.0;
    let w = min_norm_solve(&a, &rhs)?;
    let wv = weight_vector_from(&a, w);
    let sum_res = sum_residual(&wv.weights);
    if sum_res.abs() > SUM_TOLERANCE {
        return Err(Error::ResidualCheck(format!(
            "sum residual {sum_res:e} exceeds {SUM_TOLERANCE:e}"
        )));
    }
    if let Some(worst) = wv.residuals.iter().map(|r| r.abs()).fold(None, |m: Option<f64>, r| {
        Some(m.map_or(r, |m| m.max(r)))
    }) {
        if worst > GAMMA_TOLERANCE {
            return Err(Error::ResidualCheck(format!(
                "gamma residual {worst:e} exceeds {GAMMA_TOLERANCE:e}"
            )));
        }
    }
    Ok(wv)
}

/// State for minimizing `|| R^{-T} (b + c) ||^2` over the slack box.
struct NormEvaluator {
    /// columns `R^{-T} e_i`, i = 0..d
    z_cols: Vec<DVector<f64>>,
    dim: usize,
}

impl NormEvaluator {
    fn new(a_mat: &DMatrix<f64>) -> Result<Self> {
        let d = a_mat.nrows();
        let qr = a_mat.transpose().qr();
        let r = qr.r();
        for i in 0..d {
            if r[(i, i)] == 0.0 {
                return Err(Error::SingularConstraints { cond: f64::INFINITY });
            }
        }
        // forward substitution on R' (lower triangular) for each basis vector
        let mut z_cols = Vec::with_capacity(d);
        for e in 0..d {
            let mut z = DVector::zeros(d);
            for i in 0..d {
                let mut v = if i == e { 1.0 } else { 0.0 };
                for k in 0..i {
                    v -= r[(k, i)] * z[k];
                }
                z[i] = v / r[(i, i)];
            }
            z_cols.push(z);
        }
        Ok(Self { z_cols, dim: d })
    }

    /// Minimum of the squared norm over `|c_i| <= beta_i`, with the argmin.
    /// Solved exactly by enumerating active sets (the box has d-1 <= 7
    /// coordinates, so 3^(d-1) sign patterns).
    fn min_over_box(&self, betas: &[f64]) -> (f64, Vec<f64>) {
        let nc = betas.len();
        debug_assert_eq!(nc + 1, self.dim);
        if nc == 0 {
            return (self.z_cols[0].norm_squared(), Vec::new());
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut fallback: Option<(f64, Vec<f64>)> = None;
        let mut pattern = vec![0i8; nc];
        let total = 3usize.pow(nc as u32);
        for code in 0..total {
            let mut rem = code;
            for p in pattern.iter_mut() {
                *p = (rem % 3) as i8 - 1;
                rem /= 3;
            }
            // fixed part of z
            let mut z_fixed = self.z_cols[0].clone();
            let mut free: Vec<usize> = Vec::new();
            for (idx, &p) in pattern.iter().enumerate() {
                if p == 0 && betas[idx] > 0.0 {
                    free.push(idx);
                } else {
                    let v = p as f64 * betas[idx];
                    z_fixed += &self.z_cols[idx + 1] * v;
                }
            }
            let mut c = vec![0.0; nc];
            for (idx, &p) in pattern.iter().enumerate() {
                c[idx] = p as f64 * betas[idx];
            }
            if !free.is_empty() {
                let zf = DMatrix::from_fn(self.dim, free.len(), |r, j| self.z_cols[free[j] + 1][r]);
                let sol = zf.clone().svd(true, true).solve(&(-&z_fixed), 1e-14);
                let Ok(sol) = sol else { continue };
                let mut ok = true;
                for (j, &idx) in free.iter().enumerate() {
                    if sol[j].abs() > betas[idx] * (1.0 + 1e-9) + 1e-300 {
                        ok = false;
                        break;
                    }
                    c[idx] = sol[j].clamp(-betas[idx], betas[idx]);
                }
                if !ok {
                    // clamped point is feasible but suboptimal; keep as fallback
                    let mut z = self.z_cols[0].clone();
                    for (idx, &ci) in c.iter().enumerate() {
                        z += &self.z_cols[idx + 1] * ci;
                    }
                    let phi = z.norm_squared();
                    if fallback.as_ref().is_none_or(|(f, _)| phi < *f) {
                        fallback = Some((phi, c));
                    }
                    continue;
                }
            }
            // total z and gradient-based KKT screen for the fixed coordinates
            let mut z = self.z_cols[0].clone();
            for (idx, &ci) in c.iter().enumerate() {
                z += &self.z_cols[idx + 1] * ci;
            }
            let phi = z.norm_squared();
            let scale = 1e-9 * (1.0 + phi);
            let mut kkt_ok = true;
            for (idx, &p) in pattern.iter().enumerate() {
                if p != 0 && betas[idx] > 0.0 {
                    let grad = 2.0 * self.z_cols[idx + 1].dot(&z);
                    if (p > 0 && grad > scale) || (p < 0 && grad < -scale) {
                        kkt_ok = false;
                        break;
                    }
                }
            }
            if kkt_ok && best.as_ref().is_none_or(|(f, _)| phi < *f) {
                best = Some((phi, c));
            }
        }
        best.or(fallback).expect("active-set enumeration always yields a candidate")
    }
}

/// Solves the slack-relaxed weight program:
/// minimize epsilon subject to `sum w = 1`,
/// `|gamma_w(i)| * T^((d-i)/(2d)) <= epsilon` for i in J, and `||w|| <= eta`.
///
/// Method: bisection on epsilon; for each epsilon the minimum attainable
/// weight norm over the slack box is computed exactly by active-set
/// enumeration of a d-1 dimensional box-constrained quadratic.
pub fn solve_relaxed_weights(spec: &EnsembleSpec, t: usize, eta: f64) -> Result<RelaxedWeights> {
    if t == 0 {
        return Err(Error::InvalidParameter("sample budget T must be >= 1".into()));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
    }
    let l_count = spec.len();
    let min_eta = 1.0 / (l_count as f64).sqrt();
    if eta < min_eta * (1.0 - 1e-9) {
        return Err(Error::InfeasibleRelaxation { eta, min_eta });
    }
    let d = spec.dim();
    let a_mat = spec.constraint_matrix();
    let flat = flatten(&a_mat);
    let a = RowMajor { a: &flat, rows: d, cols: l_count };
    let evaluator = NormEvaluator::new(&a_mat)?;
    let scales: Vec<f64> = spec
        .exponents()
        .map(|i| (t as f64).powf((d - i) as f64 / (2.0 * d as f64)))
        .collect();
    let eta_sq = eta * eta * (1.0 + 1e-12);
    let betas_for = |eps: f64| -> Vec<f64> { scales.iter().map(|s| eps / s).collect() };
    let feasible = |eps: f64| -> (bool, Vec<f64>) {
        let (phi, c) = evaluator.min_over_box(&betas_for(eps));
        (phi <= eta_sq, c)
    };

    let (zero_ok, c_zero) = feasible(0.0);
    let (mut eps_final, mut c_star) = if zero_ok {
        (0.0, c_zero)
    } else {
        // the uniform vector is always inside the eta ball, so its slack is
        // a valid upper bound
        let uniform = vec![1.0 / l_count as f64; l_count];
        let mut hi = spec
            .exponents()
            .zip(&scales)
            .map(|(i, s)| {
                let gamma: f64 = spec.indices().iter().map(|&l| spec.basis(i, l)).sum::<f64>()
                    / l_count as f64;
                (gamma.abs() * s).max(f64::MIN_POSITIVE)
            })
            .fold(0.0f64, f64::max);
        let _ = uniform;
        let mut tries = 0;
        while !feasible(hi).0 {
            hi *= 2.0;
            tries += 1;
            if tries > 60 {
                return Err(Error::ResidualCheck(
                    "relaxed program: no feasible slack found".into(),
                ));
            }
        }
        let mut lo = 0.0f64;
        for _ in 0..200 {
            if hi - lo <= 1e-7 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if feasible(mid).0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (_, c) = feasible(hi);
        (hi, c)
    };

    // final solve in double-double for the chosen slack values, with a bump
    // loop in case the f64 norm evaluation sat marginally below eta
    for _ in 0..32 {
        let mut rhs = vec![0.0; d];
        rhs[0] = 1.0;
        for (i, &ci) in c_star.iter().enumerate() {
            rhs[i + 1] = ci;
        }
        let w = min_norm_solve(&a, &rhs)?;
        let wv = weight_vector_from(&a, w);
        let sum_res = sum_residual(&wv.weights);
        if sum_res.abs() > SUM_TOLERANCE {
            return Err(Error::ResidualCheck(format!(
                "sum residual {sum_res:e} exceeds {SUM_TOLERANCE:e}"
            )));
        }
        if wv.norm <= eta * (1.0 + 1e-8) {
            let epsilon = wv
                .residuals
                .iter()
                .zip(&scales)
                .map(|(g, s)| g.abs() * s)
                .fold(0.0f64, f64::max);
            return Ok(RelaxedWeights { weights: wv, epsilon });
        }
        eps_final = eps_final * (1.0 + 1e-6) + 1e-12;
        c_star = feasible(eps_final).1;
    }
    Err(Error::ResidualCheck(
        "relaxed program: norm certificate not met after slack bumps".into(),
    ))
}

// ---------------------------------------------------------------------------
// weighted estimator
// ---------------------------------------------------------------------------

/// Weighted combination of plug-in estimates on an already-built distance
/// table. `ks` are the per-member neighbor counts, aligned with the weights.
pub fn ensemble_from_builder(
    builder: &RatioFieldBuilder,
    ks: &[usize],
    weights: &WeightVector,
    g: &GFunctional,
) -> Result<DivergenceEstimate> {
    if ks.len() != weights.weights.len() {
        return Err(Error::InvalidParameter(format!(
            "{} neighbor counts vs {} weights",
            ks.len(),
            weights.weights.len()
        )));
    }
    // duplicate k(l) after rounding: compute each member once
    let mut member: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for &k in ks {
        if !member.contains_key(&k) {
            let value = builder.field(k, k)?.functional_mean(g)?;
            member.insert(k, value);
        }
    }
    let mut acc = DdSum::new();
    for (&k, &w) in ks.iter().zip(&weights.weights) {
        acc.add_prod(w, member[&k]);
    }
    let functional = acc.value_dd().to_f64();
    Ok(DivergenceEstimate {
        functional,
        divergence: g.post_transform(functional)?,
    })
}

/// The weighted ensemble estimator `G_w = sum_l w(l) * G_{k(l)}`, every
/// member sharing one data split.
pub fn ensemble_estimate(
    eval: &SampleSet,
    ref_f2: &SampleSet,
    samples_f1: &SampleSet,
    spec: &EnsembleSpec,
    weights: &WeightVector,
    g: &GFunctional,
) -> Result<DivergenceEstimate> {
    let ks = spec.ks(samples_f1.len(), ref_f2.len())?;
    let k_max = *ks.iter().max().unwrap();
    let builder = RatioFieldBuilder::new(eval, samples_f1, ref_f2, k_max, k_max)?;
    ensemble_from_builder(&builder, &ks, weights, g)
}
