//! Worst-case occupancy fallbacks.
//!
//! `worst_case_frs` is a data-free disc over-approximation of the reachable
//! set of a bounded-control Dubins vehicle: the radius integrates the speed
//! envelope `min(v0 + a_max s, v_max)`, which dominates any feasible speed
//! profile regardless of steering. `parametric_wc_frs` derives a per-mode
//! speed bound from the predictor's mean displacements plus a 3-sigma
//! covariance margin and grows a disc per mode.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{GmmPrediction, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WcError {
    #[error("prediction sequence is missing steps up to {0}")]
    MissingSteps(usize),
}

/// Planar kinematic state of a tracked agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentKinematicState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
}

/// Disc occupancy over-approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscSet {
    pub center: Vec2,
    pub radius: f64,
}

impl DiscSet {
    pub fn contains(&self, x: Vec2) -> bool {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        (dx * dx + dy * dy).sqrt() <= self.radius
    }
}

/// Maximum distance reachable in `t` seconds starting at speed `v0` with
/// acceleration bounded by `a_max` and speed saturating at `v_max`.
pub fn reach_radius(v0: f64, t: f64, a_max: f64, v_max: f64) -> f64 {
    debug_assert!(t >= 0.0 && a_max > 0.0 && v_max > 0.0);
    let v0 = v0.min(v_max);
    let t_sat = (v_max - v0) / a_max;
    if t <= t_sat {
        v0 * t + 0.5 * a_max * t * t
    } else {
        v0 * t_sat + 0.5 * a_max * t_sat * t_sat + v_max * (t - t_sat)
    }
}

/// Data-free worst-case occupancy disc at horizon `t` seconds.
pub fn worst_case_frs(state: &AgentKinematicState, t: f64, a_max: f64, v_max: f64) -> DiscSet {
    DiscSet {
        center: state.position,
        radius: reach_radius(state.speed, t, a_max, v_max),
    }
}

/// Predictor-parameterized worst-case occupancy at horizon step `t_step`.
///
/// Per mode, the speed bound is the largest per-step mean displacement over
/// steps `1..=t_step` plus three standard deviations of the step's position
/// covariance, divided by the step duration. Returns one disc per mode,
/// all centered at the agent's current position.
pub fn parametric_wc_frs(
    predictions: &[GmmPrediction],
    state: &AgentKinematicState,
    t_step: usize,
    dt: f64,
) -> Result<Vec<DiscSet>, WcError> {
    if predictions.len() < t_step || t_step == 0 {
        return Err(WcError::MissingSteps(t_step));
    }
    let n_modes = predictions[0].num_modes();
    let mut discs = Vec::with_capacity(n_modes);
    for i in 0..n_modes {
        let mut v_bound: f64 = 0.0;
        let mut prev = state.position;
        for pred in &predictions[..t_step] {
            let mode = &pred.modes()[i];
            let mean = mode.mean();
            let disp = ((mean[0] - prev[0]).powi(2) + (mean[1] - prev[1]).powi(2)).sqrt();
            let sigma = mode.eig().lambda1.sqrt();
            v_bound = v_bound.max((disp + 3.0 * sigma) / dt);
            prev = mean;
        }
        discs.push(DiscSet {
            center: state.position,
            radius: v_bound * t_step as f64 * dt,
        });
    }
    Ok(discs)
}
