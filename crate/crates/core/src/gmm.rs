//! 2-D Gaussian mixture math: SPD covariance handling, Mahalanobis energies,
//! chi-square mass, ellipse areas, and mixture densities.
//!
//! Everything here is specialized to the plane; the closed forms used by the
//! level solver (ellipse area `pi * sqrt(l1*l2) * c`, mode mass
//! `1 - exp(-c/2)`) only hold for two dimensions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// World-frame position or offset, meters.
pub type Vec2 = [f64; 2];
/// Row-major 2x2 matrix, m^2.
pub type Mat2 = [[f64; 2]; 2];

/// Smallest admissible covariance eigenvalue (m^2). Anything below is
/// treated as a degenerate prediction and rejected.
pub const EPS_LAMBDA: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("covariance is not SPD: eigenvalue {eigenvalue} below {EPS_LAMBDA}")]
    NonSpd { eigenvalue: f64 },
    #[error("mixture weights invalid: {0}")]
    BadWeights(String),
    #[error("mixture must have at least one mode")]
    EmptyMixture,
}

/// One Gaussian mode of a position prediction: mean and SPD covariance.
///
/// The covariance is symmetrized on construction and its inverse, determinant
/// and eigendecomposition are precomputed; `GaussianMode` values are immutable
/// afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMode {
    mean: Vec2,
    cov: Mat2,
    #[serde(skip, default = "default_mat2")]
    inv_cov: Mat2,
    #[serde(skip)]
    det: f64,
    #[serde(skip)]
    eig: Option<Eig2>,
}

fn default_mat2() -> Mat2 {
    [[0.0; 2]; 2]
}

/// Eigendecomposition of a 2x2 SPD matrix, `lambda1 >= lambda2 > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eig2 {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Unit eigenvector for `lambda1`.
    pub axis1: Vec2,
    /// Unit eigenvector for `lambda2`.
    pub axis2: Vec2,
}

impl GaussianMode {
    pub fn new(mean: Vec2, cov: Mat2) -> Result<Self, GmmError> {
        // Tolerate serialization round-off in the off-diagonal.
        let b = 0.5 * (cov[0][1] + cov[1][0]);
        let cov = [[cov[0][0], b], [b, cov[1][1]]];
        let eig = eig2x2(&cov)?;
        let det = eig.lambda1 * eig.lambda2;
        let inv_cov = [
            [cov[1][1] / det, -cov[0][1] / det],
            [-cov[0][1] / det, cov[0][0] / det],
        ];
        Ok(Self {
            mean,
            cov,
            inv_cov,
            det,
            eig: Some(eig),
        })
    }

    pub fn mean(&self) -> Vec2 {
        self.mean
    }

    pub fn cov(&self) -> Mat2 {
        self.cov
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    pub fn eig(&self) -> &Eig2 {
        self.eig.as_ref().expect("constructed via GaussianMode::new")
    }

    /// Ellipse area factor `pi * sqrt(lambda1 * lambda2)`; the area of the
    /// sublevel set at level `c` is this times `c`.
    pub fn area_unit(&self) -> f64 {
        std::f64::consts::PI * self.det.sqrt()
    }

    /// Re-validate after deserialization (serde skips the derived fields).
    pub fn revalidate(self) -> Result<Self, GmmError> {
        Self::new(self.mean, self.cov)
    }
}

/// Per-horizon-step mixture prediction for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrediction {
    modes: Vec<GaussianMode>,
    weights: Vec<f64>,
    pub horizon_step: usize,
}

impl GmmPrediction {
    pub fn new(
        modes: Vec<GaussianMode>,
        weights: Vec<f64>,
        horizon_step: usize,
    ) -> Result<Self, GmmError> {
        if modes.is_empty() {
            return Err(GmmError::EmptyMixture);
        }
        if modes.len() != weights.len() {
            return Err(GmmError::BadWeights(format!(
                "{} modes but {} weights",
                modes.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(GmmError::BadWeights("negative or non-finite weight".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GmmError::BadWeights(format!("weights sum to {sum}")));
        }
        Ok(Self {
            modes,
            weights,
            horizon_step,
        })
    }

    pub fn modes(&self) -> &[GaussianMode] {
        &self.modes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// Same mixture with every covariance multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Result<Self, GmmError> {
        let modes = self
            .modes
            .iter()
            .map(|m| {
                let c = m.cov();
                GaussianMode::new(
                    m.mean(),
                    [
                        [c[0][0] * alpha, c[0][1] * alpha],
                        [c[1][0] * alpha, c[1][1] * alpha],
                    ],
                )
            })
            .collect::<Result<_, _>>()?;
        Self::new(modes, self.weights.clone(), self.horizon_step)
    }
}

/// Closed-form eigendecomposition of a symmetric 2x2 matrix.
pub fn eig2x2(cov: &Mat2) -> Result<Eig2, GmmError> {
    let a = cov[0][0];
    let b = 0.5 * (cov[0][1] + cov[1][0]);
    let d = cov[1][1];
    let mid = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let lambda1 = mid + disc;
    let lambda2 = mid - disc;
    if lambda2 < EPS_LAMBDA {
        return Err(GmmError::NonSpd { eigenvalue: lambda2 });
    }
    let (axis1, axis2) = if b.abs() > 1e-14 {
        (normalize([b, lambda1 - a]), normalize([b, lambda2 - a]))
    } else if a >= d {
        ([1.0, 0.0], [0.0, 1.0])
    } else {
        ([0.0, 1.0], [1.0, 0.0])
    };
    Ok(Eig2 {
        lambda1,
        lambda2,
        axis1,
        axis2,
    })
}

fn normalize(v: Vec2) -> Vec2 {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    [v[0] / n, v[1] / n]
}

/// Mahalanobis energy `(x - mean)^T cov^-1 (x - mean)`.
pub fn mahalanobis(x: Vec2, mode: &GaussianMode) -> f64 {
    let dx = x[0] - mode.mean[0];
    let dy = x[1] - mode.mean[1];
    let inv = &mode.inv_cov;
    dx * (inv[0][0] * dx + inv[0][1] * dy) + dy * (inv[1][0] * dx + inv[1][1] * dy)
}

/// Probability mass of a single 2-D Gaussian mode inside its own sublevel
/// ellipse at level `c`: the chi-square(2) CDF, `1 - exp(-c/2)`.
pub fn chi2_mass_2d(c: f64) -> f64 {
    debug_assert!(c >= 0.0);
    -(-c / 2.0).exp_m1()
}

/// Level at which a mode ellipse holds mass `p`, the chi-square(2) quantile.
pub fn chi2_level_2d(p: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&p));
    -2.0 * (1.0 - p).ln()
}

/// Area of the sublevel ellipse `{x : V(x) <= c}`.
pub fn ellipse_volume(mode: &GaussianMode, c: f64) -> f64 {
    debug_assert!(c >= 0.0);
    mode.area_unit() * c
}

/// Mixture density at `x`.
pub fn gmm_density(x: Vec2, gmm: &GmmPrediction) -> f64 {
    gmm.modes
        .iter()
        .zip(&gmm.weights)
        .map(|(m, &p)| p * mode_density(x, m))
        .sum()
}

fn mode_density(x: Vec2, mode: &GaussianMode) -> f64 {
    let v = mahalanobis(x, mode);
    (-0.5 * v).exp() / (2.0 * std::f64::consts::PI * mode.det.sqrt())
}

/// Log mixture density, with per-mode covariances multiplied by `alpha`.
/// Computed via log-sum-exp so deep-tail observations do not underflow.
pub fn gmm_log_density_scaled(x: Vec2, gmm: &GmmPrediction, alpha: f64) -> f64 {
    let log_terms: Vec<f64> = gmm
        .modes
        .iter()
        .zip(&gmm.weights)
        .filter(|(_, &p)| p > 0.0)
        .map(|(m, &p)| {
            let v = mahalanobis(x, m) / alpha;
            p.ln() - 0.5 * v - (2.0 * std::f64::consts::PI * alpha * m.det.sqrt()).ln()
        })
        .collect();
    log_sum_exp(&log_terms)
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}
