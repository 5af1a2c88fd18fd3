//! Kinematic bicycle model used by the world generator and the unsafe
//! trajectory synthesizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wcfrs::AgentKinematicState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BicycleError {
    #[error("control out of bounds: accel {accel} (|a| <= {a_max}), steer {steer} (|d| <= {delta_max})")]
    ControlOutOfBounds {
        accel: f64,
        steer: f64,
        a_max: f64,
        delta_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleParams {
    /// Wheelbase in meters.
    pub wheelbase: f64,
    pub a_max: f64,
    pub delta_max: f64,
    pub v_max: f64,
    pub dt: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            a_max: 4.0,
            delta_max: 0.6,
            v_max: 15.0,
            dt: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BicycleControl {
    pub accel: f64,
    pub steer: f64,
}

/// One forward-Euler step of the kinematic bicycle. Speed is clamped to
/// `[0, v_max]`; out-of-bounds controls are an error.
pub fn bicycle_step(
    state: &AgentKinematicState,
    control: BicycleControl,
    params: &BicycleParams,
) -> Result<AgentKinematicState, BicycleError> {
    if control.accel.abs() > params.a_max + 1e-12 || control.steer.abs() > params.delta_max + 1e-12
    {
        return Err(BicycleError::ControlOutOfBounds {
            accel: control.accel,
            steer: control.steer,
            a_max: params.a_max,
            delta_max: params.delta_max,
        });
    }
    let (sin_t, cos_t) = state.heading.sin_cos();
    Ok(AgentKinematicState {
        position: [
            state.position[0] + state.speed * cos_t * params.dt,
            state.position[1] + state.speed * sin_t * params.dt,
        ],
        heading: state.heading + state.speed / params.wheelbase * control.steer.tan() * params.dt,
        speed: (state.speed + control.accel * params.dt).clamp(0.0, params.v_max),
    })
}

/// Roll out a control sequence from `start`, returning `controls.len() + 1`
/// states including the start.
pub fn rollout(
    start: &AgentKinematicState,
    controls: &[BicycleControl],
    params: &BicycleParams,
) -> Result<Vec<AgentKinematicState>, BicycleError> {
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push(*start);
    for &c in controls {
        let next = bicycle_step(out.last().unwrap(), c, params)?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start(v: f64) -> AgentKinematicState {
        AgentKinematicState {
            position: [0.0, 0.0],
            heading: 0.0,
            speed: v,
        }
    }

    #[test]
    fn straight_line_integration() {
        let p = BicycleParams::default();
        let s = rollout(&start(10.0), &[BicycleControl::default(); 4], &p).unwrap();
        for (t, st) in s.iter().enumerate() {
            assert!((st.position[0] - 10.0 * 0.5 * t as f64).abs() < 1e-12);
            assert_eq!(st.position[1], 0.0);
            assert_eq!(st.speed, 10.0);
        }
    }

    #[test]
    fn accel_and_speed_clamps() {
        let p = BicycleParams::default();
        // Accelerating from 14 at a_max caps at v_max.
        let s = bicycle_step(&start(14.0), BicycleControl { accel: 4.0, steer: 0.0 }, &p).unwrap();
        assert_eq!(s.speed, 15.0);
        // Braking from 1 at -a_max floors at zero.
        let s = bicycle_step(&start(1.0), BicycleControl { accel: -4.0, steer: 0.0 }, &p).unwrap();
        assert_eq!(s.speed, 0.0);
    }

    #[test]
    fn constant_steer_turns_heading() {
        let p = BicycleParams::default();
        let c = BicycleControl { accel: 0.0, steer: 0.2 };
        let s = bicycle_step(&start(8.0), c, &p).unwrap();
        let expect = 8.0 / 2.7 * 0.2_f64.tan() * 0.5;
        assert!((s.heading - expect).abs() < 1e-12);
        // Symmetric steer mirrors the trajectory about the x axis.
        let left = rollout(&start(8.0), &[c; 6], &p).unwrap();
        let right = rollout(
            &start(8.0),
            &[BicycleControl { accel: 0.0, steer: -0.2 }; 6],
            &p,
        )
        .unwrap();
        for (l, r) in left.iter().zip(&right) {
            assert!((l.position[0] - r.position[0]).abs() < 1e-12);
            assert!((l.position[1] + r.position[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_controls_rejected() {
        let p = BicycleParams::default();
        assert!(matches!(
            bicycle_step(&start(5.0), BicycleControl { accel: 4.5, steer: 0.0 }, &p),
            Err(BicycleError::ControlOutOfBounds { .. })
        ));
        assert!(matches!(
            bicycle_step(&start(5.0), BicycleControl { accel: 0.0, steer: 0.7 }, &p),
            Err(BicycleError::ControlOutOfBounds { .. })
        ));
    }
}
