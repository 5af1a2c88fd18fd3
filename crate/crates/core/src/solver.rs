//! Level solver for the union-of-ellipses reachable set.
//!
//! The program minimizes the summed ellipse areas subject to the weighted
//! per-mode mass constraint. KKT stationarity gives the closed form
//! `c_i(nu) = max(0, 2 ln(nu p_i / (2 a_i)))` with `a_i = pi sqrt(l1 l2)`,
//! and the dual variable `nu` is found by scalar bisection on the mass
//! constraint, which is nondecreasing in `nu`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{chi2_mass_2d, mahalanobis, GaussianMode, GmmPrediction, Vec2};

/// Modes lighter than this are dropped from the dual and assigned level 0.
pub const P_FLOOR: f64 = 1e-12;
/// Constraint residual at which bisection stops.
pub const MASS_TOL: f64 = 1e-10;
const MAX_BISECT: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("tau must lie in (0,1), got {0}")]
    InvalidTau(f64),
    #[error("all mixture weights below {P_FLOOR}")]
    DegenerateMixture,
}

/// Solved sublevel thresholds for one mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSolution {
    /// Per-mode levels `c_i`, zero for modes dropped by the active bound.
    pub levels: Vec<f64>,
    /// Dual variable at the solution.
    pub dual: f64,
    /// Summed ellipse area, m^2.
    pub objective: f64,
    /// Weighted per-mode mass at the solution, `>= tau`.
    pub achieved_mass: f64,
}

/// Union of mode ellipses with solved levels and a common covariance scale.
///
/// Membership is `min_i V_i(x) / scale <= c_i` over components with a
/// positive level; zero-level components are singletons and treated as
/// empty for membership and intersection purposes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrsSet {
    pub components: Vec<FrsComponent>,
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrsComponent {
    pub mode: GaussianMode,
    pub level: f64,
    pub weight: f64,
}

/// Monte-Carlo mass estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MassEstimate {
    pub mass: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Solve for the per-mode levels at mass target `tau`.
pub fn solve_levels(gmm: &GmmPrediction, tau: f64) -> Result<LevelSolution, SolveError> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(SolveError::InvalidTau(tau));
    }
    let areas: Vec<f64> = gmm.modes().iter().map(|m| m.area_unit()).collect();
    let weights = gmm.weights();
    let active: Vec<usize> = (0..weights.len())
        .filter(|&i| weights[i] >= P_FLOOR)
        .collect();
    if active.is_empty() {
        return Err(SolveError::DegenerateMixture);
    }

    // g(nu) = sum_i p_i (1 - exp(-c_i(nu)/2)) = sum_i (p_i - min(p_i, 2 a_i / nu)).
    let constraint = |nu: f64| -> f64 {
        active
            .iter()
            .map(|&i| weights[i] - weights[i].min(2.0 * areas[i] / nu))
            .sum()
    };

    // All levels are zero at nu_lo; grow nu_hi until the constraint is met.
    let mut nu_lo = active
        .iter()
        .map(|&i| 2.0 * areas[i] / weights[i])
        .fold(f64::INFINITY, f64::min);
    let mut nu_hi = nu_lo * 2.0;
    while constraint(nu_hi) < tau {
        nu_hi *= 2.0;
    }
    for _ in 0..MAX_BISECT {
        let mid = 0.5 * (nu_lo + nu_hi);
        if constraint(mid) >= tau {
            nu_hi = mid;
        } else {
            nu_lo = mid;
        }
        if constraint(nu_hi) - tau <= MASS_TOL && nu_hi - nu_lo <= 1e-12 * nu_hi {
            break;
        }
    }
    // The upper endpoint keeps the solution feasible.
    let nu = nu_hi;
    let levels: Vec<f64> = (0..weights.len())
        .map(|i| {
            if weights[i] < P_FLOOR {
                0.0
            } else {
                (2.0 * (nu * weights[i] / (2.0 * areas[i])).ln()).max(0.0)
            }
        })
        .collect();
    let objective = levels.iter().zip(&areas).map(|(&c, &a)| a * c).sum();
    let achieved_mass = levels
        .iter()
        .zip(weights)
        .map(|(&c, &p)| p * chi2_mass_2d(c))
        .sum();
    Ok(LevelSolution {
        levels,
        dual: nu,
        objective,
        achieved_mass,
    })
}

/// Materialize the reachable set at a covariance scale (1 for the raw set,
/// the conformal quantile for a calibrated one). Levels are reused as-is:
/// the solution is invariant to a common covariance scaling.
pub fn build_frs(gmm: &GmmPrediction, solution: &LevelSolution, scale: f64) -> FrsSet {
    assert!(scale > 0.0, "scale must be positive");
    let components = gmm
        .modes()
        .iter()
        .zip(&solution.levels)
        .zip(gmm.weights())
        .map(|((mode, &level), &weight)| FrsComponent {
            mode: mode.clone(),
            level,
            weight,
        })
        .collect();
    FrsSet {
        components,
        scale,
    }
}

impl FrsSet {
    pub fn contains(&self, x: Vec2) -> bool {
        self.components
            .iter()
            .any(|c| c.level > 0.0 && mahalanobis(x, &c.mode) / self.scale <= c.level)
    }
}

/// Monte-Carlo estimate of the mixture mass inside the set. Deterministic
/// for a fixed seed.
pub fn frs_mass(frs: &FrsSet, gmm: &GmmPrediction, n_samples: usize, seed: u64) -> MassEstimate {
    assert!(n_samples >= 1_000, "need at least 1e3 samples");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inside = 0usize;
    for _ in 0..n_samples {
        let x = sample_gmm(gmm, &mut rng);
        if frs.contains(x) {
            inside += 1;
        }
    }
    let mass = inside as f64 / n_samples as f64;
    let stderr = (mass * (1.0 - mass) / n_samples as f64).sqrt();
    MassEstimate {
        mass,
        stderr,
        n_samples,
    }
}

/// Draw one sample from the mixture.
pub fn sample_gmm<R: Rng>(gmm: &GmmPrediction, rng: &mut R) -> Vec2 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut idx = gmm.num_modes() - 1;
    for (i, &p) in gmm.weights().iter().enumerate() {
        acc += p;
        if u <= acc {
            idx = i;
            break;
        }
    }
    sample_mode(&gmm.modes()[idx], rng)
}

pub fn sample_mode<R: Rng>(mode: &GaussianMode, rng: &mut R) -> Vec2 {
    let e = mode.eig();
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let s1 = e.lambda1.sqrt() * z1;
    let s2 = e.lambda2.sqrt() * z2;
    [
        mode.mean()[0] + e.axis1[0] * s1 + e.axis2[0] * s2,
        mode.mean()[1] + e.axis1[1] * s1 + e.axis2[1] * s2,
    ]
}
