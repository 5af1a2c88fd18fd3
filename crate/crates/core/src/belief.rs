//! Online two-point Bayesian tracking of predictor confidence.
//!
//! The confidence parameter `beta` takes one of two values; the posterior
//! over them is updated each frame with the likelihood of the newly observed
//! position under the previous frame's one-step-ahead forecast, whose
//! calibrated covariances are divided by the hypothesized `beta`. A low
//! expected confidence dilates the monitored set (scale `eta / beta_hat`)
//! and can trigger a switch to a worst-case fallback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{gmm_log_density_scaled, GmmPrediction, Vec2};

/// Mass floor after each update; keeps the filter out of absorbing states
/// so it can recover when the predictor recovers.
pub const MASS_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("need 0 < beta_low < beta_high, got ({0}, {1})")]
    InvalidRange(f64, f64),
}

/// Two-point belief over the confidence parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub mass_low: f64,
    pub mass_high: f64,
    pub beta_low: f64,
    pub beta_high: f64,
    pub history_len: usize,
}

/// Which set construction the monitor should use for an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodChoice {
    Learned,
    Fallback,
}

/// Fallback flavor used when confidence drops below the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FallbackKind {
    None,
    ParametricWc,
    WorstCase,
}

pub fn init_belief(beta_low: f64, beta_high: f64) -> Result<BeliefState, BeliefError> {
    if !(0.0 < beta_low && beta_low < beta_high) {
        return Err(BeliefError::InvalidRange(beta_low, beta_high));
    }
    Ok(BeliefState {
        mass_low: 0.5,
        mass_high: 0.5,
        beta_low,
        beta_high,
        history_len: 0,
    })
}

/// Bayes update with the observed position under the one-step-ahead
/// forecast issued at the previous frame. All arithmetic is done in the
/// log domain; tail observations never underflow to the caller.
pub fn update_belief(
    state: &BeliefState,
    x_obs: Vec2,
    prediction: &GmmPrediction,
    eta: f64,
) -> BeliefState {
    let ll_low = gmm_log_density_scaled(x_obs, prediction, eta / state.beta_low);
    let ll_high = gmm_log_density_scaled(x_obs, prediction, eta / state.beta_high);
    let log_low = state.mass_low.ln() + ll_low;
    let log_high = state.mass_high.ln() + ll_high;
    let norm = crate::gmm::log_sum_exp(&[log_low, log_high]);
    let mut mass_low = (log_low - norm).exp();
    let mut mass_high = (log_high - norm).exp();
    // floor and renormalize
    mass_low = mass_low.max(MASS_FLOOR);
    mass_high = mass_high.max(MASS_FLOOR);
    let s = mass_low + mass_high;
    BeliefState {
        mass_low: mass_low / s,
        mass_high: mass_high / s,
        history_len: state.history_len + 1,
        ..*state
    }
}

/// Posterior mean confidence.
pub fn beta_hat(state: &BeliefState) -> f64 {
    state.mass_low * state.beta_low + state.mass_high * state.beta_high
}

/// Switch to the fallback when confidence drops below the threshold.
pub fn select_method(beta_hat: f64, threshold: f64, fallback: FallbackKind) -> MethodChoice {
    if fallback != FallbackKind::None && beta_hat < threshold {
        MethodChoice::Fallback
    } else {
        MethodChoice::Learned
    }
}
