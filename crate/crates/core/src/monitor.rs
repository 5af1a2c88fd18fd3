//! Per-frame safety verdicts.
//!
//! For each contender the monitor builds a per-horizon-step occupancy set
//! using the configured method, tests it against the time-aligned ego plan
//! state with an additive footprint radius, and ORs the step conflicts into
//! a frame verdict. Conflicts are only ever tested between an ego state and
//! the contender set for the same step: a crossing path with disjoint
//! timing is safe.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{
    beta_hat, init_belief, select_method, update_belief, BeliefState, FallbackKind, MethodChoice,
};
use crate::conformal::CalibrationModel;
use crate::gmm::{chi2_level_2d, GmmPrediction, Vec2};
use crate::solver::{build_frs, solve_levels, FrsSet};
use crate::wcfrs::{parametric_wc_frs, worst_case_frs, AgentKinematicState, DiscSet};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("agent {0} has no prediction for the full horizon")]
    MissingPrediction(String),
    #[error("method requires a calibration model")]
    MissingCalibration,
    #[error("solver: {0}")]
    Solve(#[from] crate::solver::SolveError),
    #[error("conformal: {0}")]
    Conformal(#[from] crate::conformal::ConformalError),
    #[error("worst-case: {0}")]
    Wc(#[from] crate::wcfrs::WcError),
}

/// Reachable-set construction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Uncalibrated per-mode 99% chi-square ellipses.
    Ci99,
    /// Predictor-parameterized worst-case discs, uncalibrated.
    ParametricWc,
    /// Solved levels with the conformal scale.
    ForceOpt,
    /// Solved levels with scale `eta / beta_hat`.
    ForceOptBelief,
    /// Switches to parametric worst-case discs below the belief threshold.
    ForceOptPwc,
    /// Switches to data-free worst-case discs below the belief threshold.
    ForceOptWc,
    /// Data-free worst-case discs.
    WorstCase,
}

impl Method {
    pub fn needs_calibration(&self) -> bool {
        matches!(
            self,
            Method::ForceOpt | Method::ForceOptBelief | Method::ForceOptPwc | Method::ForceOptWc
        )
    }

    pub fn uses_belief(&self) -> bool {
        matches!(
            self,
            Method::ForceOptBelief | Method::ForceOptPwc | Method::ForceOptWc
        )
    }

    pub fn all() -> &'static [Method] {
        &[
            Method::Ci99,
            Method::ParametricWc,
            Method::ForceOpt,
            Method::ForceOptBelief,
            Method::ForceOptPwc,
            Method::ForceOptWc,
            Method::WorstCase,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ci99 => "ci99",
            Method::ParametricWc => "pwc",
            Method::ForceOpt => "force-opt",
            Method::ForceOptBelief => "force-opt-belief",
            Method::ForceOptPwc => "force-opt-pwc",
            Method::ForceOptWc => "force-opt-wc",
            Method::WorstCase => "wc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::all()
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

/// Full method configuration for a monitoring run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// Mass target for the level solver.
    pub tau: f64,
    pub beta_low: f64,
    pub beta_high: f64,
    pub beta_threshold: f64,
    /// Combined ego + contender footprint, applied additively to the
    /// contender's set.
    pub footprint_radius: f64,
    pub a_max: f64,
    pub v_max: f64,
    pub dt: f64,
    /// Hard-error on agents without predictions instead of skipping them.
    pub strict_predictions: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::ForceOpt,
            tau: 0.95,
            beta_low: 0.3,
            beta_high: 1.0,
            beta_threshold: 0.75,
            footprint_radius: 2.0,
            a_max: 4.0,
            v_max: 15.0,
            dt: 0.5,
            strict_predictions: false,
        }
    }
}

/// Monitored ego motion plan: one state per horizon step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgoPlan {
    /// (position, heading) at steps 1..=T.
    pub states: Vec<(Vec2, f64)>,
    pub dt: f64,
    pub footprint_radius: f64,
}

/// One contender's inputs for a frame.
#[derive(Debug, Clone)]
pub struct AgentFrame {
    pub id: String,
    pub state: AgentKinematicState,
    /// Predictions for horizon steps 1..=T, in order. Empty if the
    /// predictor dropped this agent this frame.
    pub predictions: Vec<GmmPrediction>,
}

/// Occupancy set for one agent at one horizon step.
#[derive(Debug, Clone)]
pub enum ReachSet {
    Ellipses(FrsSet),
    Discs(Vec<DiscSet>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentVerdict {
    pub id: String,
    /// Bit `t-1` set means a conflict at horizon step `t`.
    pub conflict_steps: u32,
    pub beta_hat: Option<f64>,
    pub method_used: String,
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameVerdict {
    pub is_unsafe: bool,
    /// (agent id, horizon step) of the earliest-step conflict.
    pub first_conflict: Option<(String, usize)>,
    pub per_agent: Vec<AgentVerdict>,
}

/// Sequential per-scenario state: per-agent beliefs and the previous
/// frame's one-step-ahead forecasts.
#[derive(Debug, Default)]
pub struct MonitorState {
    beliefs: HashMap<String, BeliefState>,
    prev_one_step: HashMap<String, GmmPrediction>,
}

impl MonitorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn belief(&self, agent: &str) -> Option<&BeliefState> {
        self.beliefs.get(agent)
    }
}

/// Does the occupancy set, inflated by the footprint radius, contain the
/// ego position? Ellipse semi-axes are inflated additively, a conservative
/// outer bound on the ellipse-disc Minkowski sum.
pub fn step_conflict(set: &ReachSet, ego_pos: Vec2, footprint_radius: f64) -> bool {
    match set {
        ReachSet::Discs(discs) => discs.iter().any(|d| {
            let dx = ego_pos[0] - d.center[0];
            let dy = ego_pos[1] - d.center[1];
            (dx * dx + dy * dy).sqrt() <= d.radius + footprint_radius
        }),
        ReachSet::Ellipses(frs) => frs.components.iter().any(|c| {
            if c.level <= 0.0 {
                return false;
            }
            let e = c.mode.eig();
            let s1 = (frs.scale * e.lambda1 * c.level).sqrt() + footprint_radius;
            let s2 = (frs.scale * e.lambda2 * c.level).sqrt() + footprint_radius;
            let dx = ego_pos[0] - c.mode.mean()[0];
            let dy = ego_pos[1] - c.mode.mean()[1];
            let u1 = (e.axis1[0] * dx + e.axis1[1] * dy) / s1;
            let u2 = (e.axis2[0] * dx + e.axis2[1] * dy) / s2;
            u1 * u1 + u2 * u2 <= 1.0
        }),
    }
}

/// Build the per-step occupancy sets for one agent under the configured
/// method. `beta` is the agent's current posterior mean confidence.
pub fn build_agent_sets(
    agent: &AgentFrame,
    cfg: &MethodConfig,
    calibration: Option<&CalibrationModel>,
    beta: Option<f64>,
) -> Result<(Vec<ReachSet>, String), MonitorError> {
    let t_max = agent.predictions.len();
    let learned_scale = |step: usize, dilate: bool| -> Result<f64, MonitorError> {
        let model = calibration.ok_or(MonitorError::MissingCalibration)?;
        let eta = model.eta(step)?;
        Ok(match (dilate, beta) {
            (true, Some(b)) => eta / b,
            _ => eta,
        })
    };

    let choice = match (cfg.method, beta) {
        (Method::ForceOptPwc, Some(b)) => {
            select_method(b, cfg.beta_threshold, FallbackKind::ParametricWc)
        }
        (Method::ForceOptWc, Some(b)) => {
            select_method(b, cfg.beta_threshold, FallbackKind::WorstCase)
        }
        _ => MethodChoice::Learned,
    };

    let mut sets = Vec::with_capacity(t_max);
    let used;
    match (cfg.method, choice) {
        (Method::WorstCase, _) | (Method::ForceOptWc, MethodChoice::Fallback) => {
            used = "wc";
            for t in 1..=t_max {
                sets.push(ReachSet::Discs(vec![worst_case_frs(
                    &agent.state,
                    t as f64 * cfg.dt,
                    cfg.a_max,
                    cfg.v_max,
                )]));
            }
        }
        (Method::ParametricWc, _) | (Method::ForceOptPwc, MethodChoice::Fallback) => {
            used = "pwc";
            for t in 1..=t_max {
                sets.push(ReachSet::Discs(parametric_wc_frs(
                    &agent.predictions,
                    &agent.state,
                    t,
                    cfg.dt,
                )?));
            }
        }
        (Method::Ci99, _) => {
            used = "ci99";
            let level = chi2_level_2d(0.99);
            for pred in &agent.predictions {
                let mut sol = solve_levels(pred, 0.99)?;
                sol.levels.iter_mut().for_each(|c| *c = level);
                sets.push(ReachSet::Ellipses(build_frs(pred, &sol, 1.0)));
            }
        }
        (Method::ForceOpt, _) => {
            used = "force-opt";
            for pred in &agent.predictions {
                let sol = solve_levels(pred, cfg.tau)?;
                let scale = learned_scale(pred.horizon_step, false)?;
                sets.push(ReachSet::Ellipses(build_frs(pred, &sol, scale)));
            }
        }
        (Method::ForceOptBelief, _)
        | (Method::ForceOptPwc, MethodChoice::Learned)
        | (Method::ForceOptWc, MethodChoice::Learned) => {
            used = if cfg.method == Method::ForceOptBelief {
                "force-opt-belief"
            } else {
                "force-opt"
            };
            let dilate = cfg.method == Method::ForceOptBelief;
            for pred in &agent.predictions {
                let sol = solve_levels(pred, cfg.tau)?;
                let scale = learned_scale(pred.horizon_step, dilate)?;
                sets.push(ReachSet::Ellipses(build_frs(pred, &sol, scale)));
            }
        }
    }
    Ok((sets, used.to_string()))
}

/// Evaluate one frame: update beliefs with the newly observed positions,
/// build each contender's per-step sets, and test them against the
/// time-aligned ego plan.
pub fn evaluate_frame(
    state: &mut MonitorState,
    agents: &[AgentFrame],
    ego: &EgoPlan,
    cfg: &MethodConfig,
    calibration: Option<&CalibrationModel>,
) -> Result<FrameVerdict, MonitorError> {
    let mut per_agent = Vec::with_capacity(agents.len());
    let mut first_conflict: Option<(String, usize)> = None;

    for agent in agents {
        // Belief update against the forecast issued last frame for the
        // position we just observed.
        let beta = if cfg.method.uses_belief() {
            let b = state
                .beliefs
                .entry(agent.id.clone())
                .or_insert_with(|| init_belief(cfg.beta_low, cfg.beta_high).expect("valid betas"));
            if let Some(prev) = state.prev_one_step.get(&agent.id) {
                let eta = calibration
                    .and_then(|m| m.eta(prev.horizon_step).ok())
                    .unwrap_or(1.0);
                *b = update_belief(b, agent.state.position, prev, eta);
            }
            Some(beta_hat(b))
        } else {
            None
        };

        if agent.predictions.is_empty() {
            if cfg.strict_predictions {
                return Err(MonitorError::MissingPrediction(agent.id.clone()));
            }
            per_agent.push(AgentVerdict {
                id: agent.id.clone(),
                conflict_steps: 0,
                beta_hat: beta,
                method_used: "skipped".into(),
                skipped: true,
            });
            continue;
        }

        if let Some(first) = agent.predictions.first() {
            state.prev_one_step.insert(agent.id.clone(), first.clone());
        }

        let (sets, used) = build_agent_sets(agent, cfg, calibration, beta)?;
        let mut bitmap = 0u32;
        for (idx, set) in sets.iter().enumerate() {
            let step = idx + 1;
            let Some(&(ego_pos, _)) = ego.states.get(idx) else {
                break;
            };
            if step_conflict(set, ego_pos, cfg.footprint_radius) {
                bitmap |= 1 << idx;
                match &first_conflict {
                    Some((_, s)) if *s <= step => {}
                    _ => first_conflict = Some((agent.id.clone(), step)),
                }
            }
        }
        per_agent.push(AgentVerdict {
            id: agent.id.clone(),
            conflict_steps: bitmap,
            beta_hat: beta,
            method_used: used,
            skipped: false,
        });
    }

    Ok(FrameVerdict {
        is_unsafe: per_agent.iter().any(|a| a.conflict_steps != 0),
        first_conflict,
        per_agent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GaussianMode;
    use std::collections::BTreeMap;

    fn identity_mode(mean: Vec2) -> GaussianMode {
        GaussianMode::new(mean, [[1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    fn single_pred(mean: Vec2, step: usize) -> GmmPrediction {
        GmmPrediction::new(vec![identity_mode(mean)], vec![1.0], step).unwrap()
    }

    fn frs_at(mean: Vec2, level: f64, scale: f64) -> ReachSet {
        let g = single_pred(mean, 1);
        let mut sol = solve_levels(&g, 0.95).unwrap();
        sol.levels[0] = level;
        ReachSet::Ellipses(build_frs(&g, &sol, scale))
    }

    fn calib_all(eta: f64, t_max: usize) -> CalibrationModel {
        let mut per_step = BTreeMap::new();
        for t in 1..=t_max {
            per_step.insert(
                t,
                crate::conformal::StepCalibration { eta, n: 100 },
            );
        }
        CalibrationModel {
            gamma: 0.05,
            per_step,
            source_hashes: vec![],
        }
    }

    #[test]
    fn conflict_at_mean_and_disc_boundary() {
        assert!(step_conflict(&frs_at([3.0, 4.0], 4.0, 1.0), [3.0, 4.0], 0.0));
        let disc = ReachSet::Discs(vec![DiscSet {
            center: [0.0, 0.0],
            radius: 5.0,
        }]);
        assert!(step_conflict(&disc, [7.0, 0.0], 2.0));
        assert!(!step_conflict(&disc, [7.01, 0.0], 2.0));
    }

    #[test]
    fn inflated_ellipse_membership() {
        // identity covariance, level 4 -> semi-axes 2; +1 footprint -> 3.
        let set = frs_at([0.0, 0.0], 4.0, 1.0);
        assert!(step_conflict(&set, [3.0, 0.0], 1.0));
        assert!(!step_conflict(&set, [3.05, 0.0], 1.0));
    }

    #[test]
    fn no_contenders_is_safe() {
        let ego = EgoPlan {
            states: vec![([0.0, 0.0], 0.0); 6],
            dt: 0.5,
            footprint_radius: 2.0,
        };
        let mut st = MonitorState::new();
        let cfg = MethodConfig {
            method: Method::WorstCase,
            ..Default::default()
        };
        let v = evaluate_frame(&mut st, &[], &ego, &cfg, None).unwrap();
        assert!(!v.is_unsafe);
        assert!(v.first_conflict.is_none());
    }

    fn head_on_scene(shift_steps: usize) -> (Vec<AgentFrame>, EgoPlan) {
        // Contender predicted to march down the x axis toward the origin;
        // ego plan crosses the same points. `shift_steps` time-shifts the
        // ego so the paths cross but never at the same step.
        let t_max = 6usize;
        let preds: Vec<GmmPrediction> = (1..=t_max)
            .map(|t| single_pred([20.0 - 2.0 * t as f64, 0.0], t))
            .collect();
        let agent = AgentFrame {
            id: "c0".into(),
            state: AgentKinematicState {
                position: [20.0, 0.0],
                heading: std::f64::consts::PI,
                speed: 4.0,
            },
            predictions: preds,
        };
        let ego_states: Vec<(Vec2, f64)> = (1..=t_max)
            .map(|t| {
                let tt = t + shift_steps;
                ([20.0 - 2.0 * tt as f64, 0.0], 0.0)
            })
            .collect();
        (
            vec![agent],
            EgoPlan {
                states: ego_states,
                dt: 0.5,
                footprint_radius: 2.0,
            },
        )
    }

    #[test]
    fn head_on_flags_and_time_shift_clears() {
        let cfg = MethodConfig {
            method: Method::ForceOpt,
            footprint_radius: 1.0,
            ..Default::default()
        };
        let calib = calib_all(1.0, 6);
        let (agents, ego) = head_on_scene(0);
        let mut st = MonitorState::new();
        let v = evaluate_frame(&mut st, &agents, &ego, &cfg, Some(&calib)).unwrap();
        assert!(v.is_unsafe);
        let (id, step) = v.first_conflict.unwrap();
        assert_eq!(id, "c0");
        assert_eq!(step, 1);

        // Same geometry, ego passes 2 s (4 steps) earlier: each ego step-t
        // state is 8 m from the step-t prediction, outside axes ~2.4+1.
        let (agents, ego) = head_on_scene(4);
        let mut st = MonitorState::new();
        let v = evaluate_frame(&mut st, &agents, &ego, &cfg, Some(&calib)).unwrap();
        assert!(!v.is_unsafe, "time-aligned sets must be disjoint");
    }

    #[test]
    fn enlarging_scale_never_unflags() {
        let calib_small = calib_all(1.0, 6);
        let calib_big = calib_all(3.0, 6);
        let (agents, ego) = head_on_scene(1);
        for footprint in [0.5, 1.0, 3.0] {
            let cfg = |fp: f64| MethodConfig {
                method: Method::ForceOpt,
                footprint_radius: fp,
                ..Default::default()
            };
            let c1 = cfg(footprint);
            let mut st = MonitorState::new();
            let small = evaluate_frame(&mut st, &agents, &ego, &c1, Some(&calib_small)).unwrap();
            let c2 = cfg(footprint + 1.0);
            let mut st = MonitorState::new();
            let big = evaluate_frame(&mut st, &agents, &ego, &c2, Some(&calib_big)).unwrap();
            if small.is_unsafe {
                assert!(big.is_unsafe, "conservatism must be monotone");
            }
        }
    }

    #[test]
    fn ci99_unsafe_implies_calibrated_unsafe_when_contained() {
        // With eta large enough that the calibrated set contains each CI
        // ellipse (eta * c_i >= chi2_99 for every solved level), a CI99
        // conflict implies a calibrated conflict.
        let (agents, ego) = head_on_scene(2);
        let ci = MethodConfig {
            method: Method::Ci99,
            ..Default::default()
        };
        let mut st = MonitorState::new();
        let ci_v = evaluate_frame(&mut st, &agents, &ego, &ci, None).unwrap();

        // verify containment first
        let level99 = chi2_level_2d(0.99);
        let mut eta_needed: f64 = 1.0;
        for pred in &agents[0].predictions {
            let sol = solve_levels(pred, 0.95).unwrap();
            for &c in &sol.levels {
                if c > 0.0 {
                    eta_needed = eta_needed.max(level99 / c);
                }
            }
        }
        let calib = calib_all(eta_needed, 6);
        let fo = MethodConfig {
            method: Method::ForceOpt,
            ..Default::default()
        };
        let mut st = MonitorState::new();
        let fo_v = evaluate_frame(&mut st, &agents, &ego, &fo, Some(&calib)).unwrap();
        if ci_v.is_unsafe {
            assert!(fo_v.is_unsafe);
        }
    }

    #[test]
    fn missing_predictions_skip_or_error() {
        let agent = AgentFrame {
            id: "ghost".into(),
            state: AgentKinematicState {
                position: [0.0, 0.0],
                heading: 0.0,
                speed: 1.0,
            },
            predictions: vec![],
        };
        let ego = EgoPlan {
            states: vec![([50.0, 50.0], 0.0); 6],
            dt: 0.5,
            footprint_radius: 2.0,
        };
        let mut cfg = MethodConfig {
            method: Method::WorstCase,
            ..Default::default()
        };
        let mut st = MonitorState::new();
        let v = evaluate_frame(&mut st, &[agent.clone()], &ego, &cfg, None).unwrap();
        assert!(v.per_agent[0].skipped && !v.is_unsafe);

        cfg.strict_predictions = true;
        let mut st = MonitorState::new();
        assert!(matches!(
            evaluate_frame(&mut st, &[agent], &ego, &cfg, None),
            Err(MonitorError::MissingPrediction(_))
        ));
    }

    #[test]
    fn belief_fallback_switches_method() {
        // Feed observations far outside the forecast: belief collapses and
        // the hybrid method should report the fallback construction.
        let cfg = MethodConfig {
            method: Method::ForceOptWc,
            ..Default::default()
        };
        let calib = calib_all(1.0, 6);
        let ego = EgoPlan {
            states: vec![([500.0, 500.0], 0.0); 6],
            dt: 0.5,
            footprint_radius: 2.0,
        };
        let mut st = MonitorState::new();
        let mut used = String::new();
        for frame in 0..5 {
            // observed position drifts far from where it was forecast
            let pos = [30.0 * frame as f64, 0.0];
            let agent = AgentFrame {
                id: "c0".into(),
                state: AgentKinematicState {
                    position: pos,
                    heading: 0.0,
                    speed: 2.0,
                },
                predictions: (1..=6).map(|t| single_pred(pos, t)).collect(),
            };
            let v = evaluate_frame(&mut st, &[agent], &ego, &cfg, Some(&calib)).unwrap();
            used = v.per_agent[0].method_used.clone();
        }
        assert_eq!(used, "wc");
        assert!(st.belief("c0").unwrap().mass_low > 0.9);
    }
}
