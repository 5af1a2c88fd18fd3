//! Unsafe-scenario synthesis.
//!
//! Takes a safe scene and replans the ego's controls so the ego arrives at a
//! contender's observed position at the contender's arrival step, producing
//! a labeled near-collision. The control sequence is found by projected
//! gradient descent with adjoint (backpropagated) gradients through the
//! forward-Euler bicycle dynamics, so the synthesized track is dynamically
//! feasible by construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::bicycle::{bicycle_step, rollout, BicycleControl, BicycleParams};
use super::{Role, Scene, SceneLabel};
use crate::gmm::Vec2;
use crate::wcfrs::{reach_radius, AgentKinematicState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("no contender target is reachable by the ego")]
    NoTarget,
    #[error("optimizer stalled {best_distance:.3} m from the target (tolerance {tol})")]
    Infeasible { best_distance: f64, tol: f64 },
    #[error("scene has no contenders")]
    NoContenders,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Terminal miss distance that still counts as a collision.
    pub pos_tol: f64,
    pub max_iters: usize,
    /// Quadratic control regularizer weight.
    pub reg: f64,
    /// Earliest allowed collision step.
    pub min_collision_step: usize,
    /// Latest allowed collision step, counted back from the track end.
    pub end_margin: usize,
    pub params: BicycleParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pos_tol: 0.5,
            max_iters: 4000,
            reg: 1e-3,
            min_collision_step: 6,
            end_margin: 2,
            params: BicycleParams::default(),
        }
    }
}

struct ForwardPass {
    states: Vec<AgentKinematicState>,
    /// Whether the speed update was clamped at each step.
    clamped: Vec<bool>,
}

fn forward(
    start: &AgentKinematicState,
    controls: &[BicycleControl],
    p: &BicycleParams,
) -> ForwardPass {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut clamped = Vec::with_capacity(controls.len());
    states.push(*start);
    for c in controls {
        let s = states.last().unwrap();
        let raw_v = s.speed + c.accel * p.dt;
        clamped.push(raw_v < 0.0 || raw_v > p.v_max);
        let next = AgentKinematicState {
            position: [
                s.position[0] + s.speed * s.heading.cos() * p.dt,
                s.position[1] + s.speed * s.heading.sin() * p.dt,
            ],
            heading: s.heading + s.speed / p.wheelbase * c.steer.tan() * p.dt,
            speed: raw_v.clamp(0.0, p.v_max),
        };
        states.push(next);
    }
    ForwardPass { states, clamped }
}

/// Loss `0.5 |p_T - target|^2 + 0.5 reg sum(a^2 + d^2)` and its gradient
/// with respect to the controls, via the adjoint recursion.
fn loss_and_grad(
    start: &AgentKinematicState,
    controls: &[BicycleControl],
    target: Vec2,
    reg: f64,
    p: &BicycleParams,
) -> (f64, Vec<BicycleControl>, f64) {
    let fwd = forward(start, controls, p);
    let term = fwd.states.last().unwrap();
    let ex = term.position[0] - target[0];
    let ey = term.position[1] - target[1];
    let miss = (ex * ex + ey * ey).sqrt();
    let reg_term: f64 = controls
        .iter()
        .map(|c| c.accel * c.accel + c.steer * c.steer)
        .sum();
    let loss = 0.5 * (ex * ex + ey * ey) + 0.5 * reg * reg_term;

    // Adjoint state: d loss / d (x, y, theta, v).
    let mut lam = [ex, ey, 0.0, 0.0];
    let mut grad = vec![BicycleControl::default(); controls.len()];
    for t in (0..controls.len()).rev() {
        let s = &fwd.states[t];
        let c = &controls[t];
        let (sin_t, cos_t) = s.heading.sin_cos();
        let sec2 = 1.0 / c.steer.cos().powi(2);
        let dv_dv = if fwd.clamped[t] { 0.0 } else { 1.0 };

        grad[t].accel = lam[3] * p.dt * dv_dv + reg * c.accel;
        grad[t].steer = lam[2] * s.speed / p.wheelbase * sec2 * p.dt + reg * c.steer;

        // lam_t = A_t^T lam_{t+1} with A the Euler-step Jacobian.
        lam = [
            lam[0],
            lam[1],
            lam[2] - lam[0] * s.speed * sin_t * p.dt + lam[1] * s.speed * cos_t * p.dt,
            lam[3] * dv_dv
                + lam[0] * cos_t * p.dt
                + lam[1] * sin_t * p.dt
                + lam[2] / p.wheelbase * c.steer.tan() * p.dt,
        ];
    }
    (loss, grad, miss)
}

fn project(c: &mut BicycleControl, p: &BicycleParams) {
    c.accel = c.accel.clamp(-p.a_max, p.a_max);
    c.steer = c.steer.clamp(-p.delta_max, p.delta_max);
}

/// Pursuit-controller warm start: steer toward the target bearing and pace
/// the speed to arrive on time. Gives the gradient refinement a start well
/// inside the right basin.
fn pursuit_init(
    start: &AgentKinematicState,
    target: Vec2,
    n_steps: usize,
    p: &BicycleParams,
) -> Vec<BicycleControl> {
    let mut controls = Vec::with_capacity(n_steps);
    let mut s = *start;
    for step in 0..n_steps {
        let remaining = (n_steps - step) as f64 * p.dt;
        let dx = target[0] - s.position[0];
        let dy = target[1] - s.position[1];
        let dist = (dx * dx + dy * dy).sqrt().max(1e-9);
        let bearing = dy.atan2(dx);
        let mut err = bearing - s.heading;
        while err > std::f64::consts::PI {
            err -= 2.0 * std::f64::consts::PI;
        }
        while err < -std::f64::consts::PI {
            err += 2.0 * std::f64::consts::PI;
        }
        let steer = (2.0 * err).clamp(-p.delta_max, p.delta_max);
        let v_des = (dist / remaining).clamp(0.0, p.v_max);
        let accel = ((v_des - s.speed) / p.dt).clamp(-p.a_max, p.a_max);
        let c = BicycleControl { accel, steer };
        controls.push(c);
        s = bicycle_step(&s, c, p).expect("clamped controls");
    }
    controls
}

/// Drive `start` to within `pos_tol / 2` of `target` in exactly `n_steps`
/// steps.
fn solve_controls(
    start: &AgentKinematicState,
    target: Vec2,
    n_steps: usize,
    cfg: &SynthConfig,
) -> Result<Vec<BicycleControl>, SynthError> {
    let p = &cfg.params;
    let mut best_miss = f64::INFINITY;
    for init in [pursuit_init(start, target, n_steps, p), vec![BicycleControl::default(); n_steps]]
    {
        match descend(start, init, target, cfg) {
            Ok(c) => return Ok(c),
            Err(SynthError::Infeasible { best_distance, .. }) => {
                best_miss = best_miss.min(best_distance);
            }
            Err(e) => return Err(e),
        }
    }
    Err(SynthError::Infeasible {
        best_distance: best_miss,
        tol: cfg.pos_tol,
    })
}

fn descend(
    start: &AgentKinematicState,
    init: Vec<BicycleControl>,
    target: Vec2,
    cfg: &SynthConfig,
) -> Result<Vec<BicycleControl>, SynthError> {
    let p = &cfg.params;
    let mut controls = init;
    let (mut loss, mut grad, mut miss) = loss_and_grad(start, &controls, target, cfg.reg, p);
    let mut step = 1.0f64;
    let goal = cfg.pos_tol * 0.5;
    for _ in 0..cfg.max_iters {
        if miss <= goal {
            return Ok(controls);
        }
        // Backtracking line search on the projected step.
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial: Vec<BicycleControl> = controls
                .iter()
                .zip(&grad)
                .map(|(c, g)| BicycleControl {
                    accel: c.accel - step * g.accel,
                    steer: c.steer - step * g.steer,
                })
                .collect();
            trial.iter_mut().for_each(|c| project(c, p));
            let (l2, g2, m2) = loss_and_grad(start, &trial, target, cfg.reg, p);
            if l2 < loss {
                controls = trial;
                loss = l2;
                grad = g2;
                miss = m2;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if miss <= cfg.pos_tol {
        Ok(controls)
    } else {
        Err(SynthError::Infeasible {
            best_distance: miss,
            tol: cfg.pos_tol,
        })
    }
}

/// Rewrite the ego track of a safe scene into a near-collision with one of
/// its contenders, returning the new (labeled) scene.
pub fn synthesize_unsafe(scene: &Scene, cfg: &SynthConfig) -> Result<Scene, SynthError> {
    if scene.contenders().next().is_none() {
        return Err(SynthError::NoContenders);
    }
    let ego = scene.ego();
    let ego_start = ego.kinematic(0);
    let n_steps = scene.n_steps();
    let t_max = n_steps.saturating_sub(1 + cfg.end_margin);

    // Candidate (contender, step) targets the ego can reach, preferring the
    // smallest deviation from the ego's nominal position at that step. Try
    // them in order until the optimizer succeeds.
    let mut candidates: Vec<(usize, Vec2, f64, usize)> = Vec::new();
    for (ci, track) in scene.contenders().enumerate() {
        for t_o in cfg.min_collision_step..=t_max {
            let target = track.position(t_o);
            let d0 = dist(ego_start.position, target);
            let reach = reach_radius(
                ego_start.speed,
                t_o as f64 * cfg.params.dt,
                cfg.params.a_max,
                cfg.params.v_max,
            );
            // Keep a margin against the speed envelope: targets that need
            // near-saturated controls the whole way leave the optimizer no
            // slack against the regularizer.
            if d0 > 0.85 * reach {
                continue;
            }
            // Targets closer than the braking distance would need a spiral
            // path the local optimizer cannot find.
            if d0 < ego_start.speed.powi(2) / (2.0 * cfg.params.a_max) {
                continue;
            }
            candidates.push((t_o, target, dist(ego.position(t_o), target), ci));
        }
    }
    if candidates.is_empty() {
        return Err(SynthError::NoTarget);
    }
    // Round-robin over contenders, easiest target of each first, so one
    // hard contender cannot exhaust the attempt budget.
    candidates.sort_by(|a, b| a.2.total_cmp(&b.2));
    let n_contenders = scene.contenders().count();
    let mut by_contender: Vec<Vec<(usize, Vec2, f64)>> = vec![Vec::new(); n_contenders];
    for (t_o, target, dev, ci) in candidates {
        by_contender[ci].push((t_o, target, dev));
    }
    let mut ordered = Vec::new();
    let mut round = 0;
    loop {
        let mut any = false;
        for list in &by_contender {
            if let Some(&c) = list.get(round) {
                ordered.push(c);
                any = true;
            }
        }
        if !any {
            break;
        }
        round += 1;
    }

    let mut solved = None;
    let mut last_err = SynthError::NoTarget;
    for &(t_o, target, _) in ordered.iter().take(40) {
        match solve_controls(&ego_start, target, t_o, cfg) {
            Ok(c) => {
                solved = Some((t_o, c));
                break;
            }
            Err(e) => last_err = e,
        }
    }
    let Some((t_o, controls)) = solved else {
        return Err(last_err);
    };
    let mut states = rollout(&ego_start, &controls, &cfg.params).expect("projected controls");
    // Coast past the collision step to fill the track.
    while states.len() < n_steps {
        let next = bicycle_step(states.last().unwrap(), BicycleControl::default(), &cfg.params)
            .expect("coast control");
        states.push(next);
    }

    let mut out = scene.clone();
    out.label = SceneLabel::SynthUnsafe;
    out.meta.id = format!("{}_u", scene.meta.id);
    out.meta.collision_step = Some(t_o);
    let ego_track = out
        .tracks
        .iter_mut()
        .find(|t| t.role == Role::Ego)
        .expect("ego track");
    ego_track.maneuver = None;
    ego_track.states = states
        .iter()
        .map(|s| [s.position[0], s.position[1], s.heading, s.speed])
        .collect();
    Ok(out)
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
