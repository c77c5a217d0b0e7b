//! Pointwise density estimates: the adaptive k-NN estimator and the
//! boundary-truncated uniform-kernel baseline.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::sample::{BoxBounds, SampleSet};
use crate::seed::Seed;
use crate::spatial::{unit_ball_volume, NeighborIndex};
use crate::{Error, Result};

/// Minimum Monte Carlo draws for ball/box intersection volumes.
pub const MIN_VOLUME_DRAWS: usize = 10_000;

/// `k / (M * c_d * rho^d)` for a k-th neighbor distance `rho`. Shared by the
/// estimator and the ratio-field path so both produce bit-identical values.
#[inline]
pub fn knn_density_from_distance(k: usize, m: usize, dim: usize, unit_ball_vol: f64, rho: f64) -> f64 {
    k as f64 / (m as f64 * unit_ball_vol * rho.powi(dim as i32))
}

/// Adaptive k-NN density estimate `k / (M * c_d * rho_k(x)^d)`.
#[derive(Debug)]
pub struct KnnDensityEstimator {
    index: NeighborIndex,
    k: usize,
    m: usize,
    dim: usize,
    unit_ball_vol: f64,
}

impl KnnDensityEstimator {
    pub fn new(reference: &SampleSet, k: usize) -> Result<Self> {
        Self::from_index(NeighborIndex::build(reference)?, k)
    }

    pub fn from_index(index: NeighborIndex, k: usize) -> Result<Self> {
        if k == 0 || k > index.len() {
            return Err(Error::NeighborCount { k, max: index.len() });
        }
        Ok(Self {
            k,
            m: index.len(),
            dim: index.dim(),
            unit_ball_vol: unit_ball_volume(index.dim()),
            index,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn reference_count(&self) -> usize {
        self.m
    }

    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }

    /// Strictly positive whenever the k-th neighbor distance is; a zero
    /// distance means duplicated data and is rejected.
    pub fn density_at(&self, x: &[f64]) -> Result<f64> {
        let rho = self.index.kth_distance(x, self.k)?;
        if rho == 0.0 {
            return Err(Error::DuplicatePoint {
                point: x.to_vec(),
                k: self.k,
            });
        }
        Ok(knn_density_from_distance(self.k, self.m, self.dim, self.unit_ball_vol, rho))
    }
}

/// Uniform-kernel density estimate with its kernel mass renormalized by the
/// volume of `B(x, h) ∩ box` near the support boundary.
///
/// Interior balls use the exact volume `c_d h^d`; balls crossing the boundary
/// use Monte Carlo over a fixed set of unit-ball draws, scaled and translated
/// per query, so evaluation is deterministic given the construction seed.
#[derive(Debug)]
pub struct TruncatedUniformKernelEstimator {
    points: Vec<f64>,
    m: usize,
    dim: usize,
    bandwidth: f64,
    support: Option<BoxBounds>,
    unit_ball_vol: f64,
    /// flattened unit-ball draws, MIN_VOLUME_DRAWS × dim
    ball_draws: Vec<f64>,
}

impl TruncatedUniformKernelEstimator {
    pub fn new(
        reference: &SampleSet,
        bandwidth: f64,
        support: Option<BoxBounds>,
        seed: Seed,
    ) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        let dim = reference.dim();
        if let Some(b) = &support {
            if b.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: b.dim(),
                });
            }
        }
        let mut rng = seed.rng();
        let mut ball_draws = Vec::with_capacity(MIN_VOLUME_DRAWS * dim);
        for _ in 0..MIN_VOLUME_DRAWS {
            // isotropic direction times U^(1/d) radius
            let mut norm_sq = 0.0;
            let start = ball_draws.len();
            for _ in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                norm_sq += z * z;
                ball_draws.push(z);
            }
            let norm = norm_sq.sqrt();
            let radius: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
            let scale = if norm > 0.0 { radius / norm } else { 0.0 };
            for v in &mut ball_draws[start..] {
                *v *= scale;
            }
        }
        Ok(Self {
            points: reference.as_flat().to_vec(),
            m: reference.len(),
            dim,
            bandwidth,
            support,
            unit_ball_vol: unit_ball_volume(dim),
            ball_draws,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn ball_inside_support(&self, x: &[f64]) -> bool {
        match &self.support {
            None => true,
            Some(b) => x
                .iter()
                .zip(b.lower.iter().zip(&b.upper))
                .all(|(v, (l, u))| v - self.bandwidth >= *l && v + self.bandwidth <= *u),
        }
    }

    fn intersection_volume(&self, x: &[f64]) -> f64 {
        let full = self.unit_ball_vol * self.bandwidth.powi(self.dim as i32);
        if self.ball_inside_support(x) {
            return full;
        }
        let b = self.support.as_ref().unwrap();
        let mut inside = 0usize;
        'draws: for draw in self.ball_draws.chunks_exact(self.dim) {
            for i in 0..self.dim {
                let v = x[i] + self.bandwidth * draw[i];
                if v < b.lower[i] || v > b.upper[i] {
                    continue 'draws;
                }
            }
            inside += 1;
        }
        full * inside as f64 / (self.ball_draws.len() / self.dim) as f64
    }

    /// `#{refs within h of x} / (M * vol(B(x,h) ∩ box))`. Zero when no
    /// reference point falls inside the ball.
    pub fn density_at(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        if let Some(b) = &self.support {
            if !b.contains(x) {
                return Err(Error::OutsideSupport { point: x.to_vec() });
            }
        }
        let h_sq = self.bandwidth * self.bandwidth;
        let mut count = 0usize;
        for p in self.points.chunks_exact(self.dim) {
            let mut d2 = 0.0;
            for i in 0..self.dim {
                let diff = x[i] - p[i];
                d2 += diff * diff;
            }
            if d2 <= h_sq {
                count += 1;
            }
        }
        let vol = self.intersection_volume(x);
        if vol <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "ball/box intersection volume vanished at {x:?}"
            )));
        }
        Ok(count as f64 / (self.m as f64 * vol))
    }
}
