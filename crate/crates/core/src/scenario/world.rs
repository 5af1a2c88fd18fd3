//! Seeded synthetic world generator.
//!
//! Each scene has one ego vehicle driving a straight lane and one to four
//! contenders, either ahead in the same lane or approaching on a crossing
//! road. Contenders follow a nominal kinematic-bicycle rollout that switches
//! to a maneuver at a fixed onset step; their observed positions add a
//! cumulative random-walk perturbation so consecutive scenes are
//! exchangeable draws from the same process. Ego tracks are noise-free:
//! the ego's future is its own motion plan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bicycle::{rollout, BicycleControl, BicycleParams};
use super::{AgentTrack, MapContext, Role, Scene, SceneLabel, SceneMeta, SCENE_FORMAT};
use crate::wcfrs::AgentKinematicState;

/// Discrete contender behaviors; also the predictor's hypothesis set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    KeepLane,
    TurnLeft,
    TurnRight,
    Brake,
    Cross,
}

/// Canonical hypothesis ordering; a top-K predictor truncates this list.
pub const MANEUVER_ORDER: [Maneuver; 5] = [
    Maneuver::KeepLane,
    Maneuver::TurnLeft,
    Maneuver::TurnRight,
    Maneuver::Brake,
    Maneuver::Cross,
];

impl Maneuver {
    /// Control at the given phase relative to the maneuver onset. Negative
    /// phases (before onset) coast.
    pub fn control(self, phase: i64) -> BicycleControl {
        let coast = BicycleControl::default();
        if phase < 0 {
            return coast;
        }
        match self {
            Maneuver::KeepLane => coast,
            Maneuver::TurnLeft if phase < 6 => BicycleControl { accel: 0.0, steer: 0.18 },
            Maneuver::TurnRight if phase < 6 => BicycleControl { accel: 0.0, steer: -0.18 },
            Maneuver::Brake if phase < 6 => BicycleControl { accel: -2.0, steer: 0.0 },
            Maneuver::Cross if phase < 4 => BicycleControl { accel: 2.0, steer: 0.0 },
            _ => coast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_scenes: usize,
    /// Track length in steps (states per agent).
    pub n_steps: usize,
    /// Step at which contender maneuvers begin.
    pub maneuver_onset: usize,
    /// Per-step standard deviation of the position random walk.
    pub sigma_w: f64,
    pub contenders_min: usize,
    pub contenders_max: usize,
    /// Minimum time-aligned ego/contender distance in a safe scene.
    pub safe_margin: f64,
    /// Fraction of scenes flagged for the predictor's distribution-shift
    /// bias.
    pub ood_fraction: f64,
    pub params: BicycleParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_scenes: 50,
            n_steps: 30,
            maneuver_onset: 4,
            sigma_w: 1.0,
            contenders_min: 1,
            contenders_max: 4,
            safe_margin: 8.0,
            ood_fraction: 0.0,
            params: BicycleParams::default(),
        }
    }
}

fn nominal_states(
    start: AgentKinematicState,
    maneuver: Maneuver,
    onset: usize,
    n_steps: usize,
    params: &BicycleParams,
) -> Vec<AgentKinematicState> {
    let controls: Vec<BicycleControl> = (0..n_steps.saturating_sub(1))
        .map(|step| maneuver.control(step as i64 - onset as i64))
        .collect();
    rollout(&start, &controls, params).expect("maneuver controls are in bounds")
}

fn observed_track(
    id: &str,
    role: Role,
    maneuver: Option<Maneuver>,
    nominal: &[AgentKinematicState],
    sigma_w: f64,
    rng: &mut ChaCha8Rng,
) -> AgentTrack {
    let noise = Normal::new(0.0, sigma_w).expect("valid sigma");
    let mut walk = [0.0f64, 0.0];
    let states = nominal
        .iter()
        .enumerate()
        .map(|(t, s)| {
            if t > 0 && sigma_w > 0.0 {
                walk[0] += noise.sample(rng);
                walk[1] += noise.sample(rng);
            }
            [
                s.position[0] + walk[0],
                s.position[1] + walk[1],
                s.heading,
                s.speed,
            ]
        })
        .collect();
    AgentTrack {
        id: id.to_string(),
        role,
        maneuver,
        states,
    }
}

fn min_aligned_distance(a: &AgentTrack, b: &AgentTrack) -> f64 {
    a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

fn sample_contender_start(rng: &mut ChaCha8Rng, ego_x0: f64, push_out: f64) -> AgentKinematicState {
    if rng.gen_bool(0.5) {
        // Same-lane, ahead of the ego.
        AgentKinematicState {
            position: [
                ego_x0 + rng.gen_range(20.0..45.0) + push_out,
                rng.gen_range(-1.0..1.0),
            ],
            heading: 0.0,
            speed: rng.gen_range(4.0..9.0),
        }
    } else {
        // Crossing road through the origin.
        let from_north = rng.gen_bool(0.5);
        let y0 = rng.gen_range(20.0..40.0) + push_out;
        AgentKinematicState {
            position: [rng.gen_range(-3.0..3.0), if from_north { y0 } else { -y0 }],
            heading: if from_north {
                -std::f64::consts::FRAC_PI_2
            } else {
                std::f64::consts::FRAC_PI_2
            },
            speed: rng.gen_range(4.0..9.0),
        }
    }
}

/// Generate `cfg.n_scenes` safe scenes, deterministically from `seed`.
pub fn gen_world(cfg: &WorldConfig, seed: u64) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = MapContext {
        lanes: vec![
            vec![[-60.0, 0.0], [60.0, 0.0]],
            vec![[0.0, -60.0], [0.0, 60.0]],
        ],
    };
    (0..cfg.n_scenes)
        .map(|i| {
            let ego_start = AgentKinematicState {
                position: [rng.gen_range(-40.0..-25.0), 0.0],
                heading: 0.0,
                speed: rng.gen_range(6.0..10.0),
            };
            let ego_nominal = nominal_states(
                ego_start,
                Maneuver::KeepLane,
                cfg.maneuver_onset,
                cfg.n_steps,
                &cfg.params,
            );
            let ego = observed_track(
                "ego",
                Role::Ego,
                Some(Maneuver::KeepLane),
                &ego_nominal,
                0.0,
                &mut rng,
            );

            let n_contenders = rng.gen_range(cfg.contenders_min..=cfg.contenders_max);
            let mut tracks = vec![ego];
            for c in 0..n_contenders {
                let mut accepted = None;
                for attempt in 0..30u32 {
                    // After repeated failures push the start point outward.
                    let push_out = if attempt >= 20 { 30.0 } else { 0.0 };
                    let start = sample_contender_start(&mut rng, ego_start.position[0], push_out);
                    let maneuver = MANEUVER_ORDER[rng.gen_range(0..MANEUVER_ORDER.len())];
                    let nominal = nominal_states(
                        start,
                        maneuver,
                        cfg.maneuver_onset,
                        cfg.n_steps,
                        &cfg.params,
                    );
                    let track = observed_track(
                        &format!("c{c}"),
                        Role::Contender,
                        Some(maneuver),
                        &nominal,
                        cfg.sigma_w,
                        &mut rng,
                    );
                    if min_aligned_distance(&tracks[0], &track) >= cfg.safe_margin {
                        accepted = Some(track);
                        break;
                    }
                }
                if let Some(track) = accepted {
                    tracks.push(track);
                }
            }

            Scene {
                format: SCENE_FORMAT.into(),
                dt: cfg.params.dt,
                label: SceneLabel::Safe,
                meta: SceneMeta {
                    id: format!("scene_{i:05}"),
                    collision_step: None,
                    ood: rng.gen_bool(cfg.ood_fraction),
                    maneuver_onset: cfg.maneuver_onset,
                },
                tracks,
                map: Some(map.clone()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::closest_approach;

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig {
            n_scenes: 5,
            ..WorldConfig::default()
        };
        let a = gen_world(&cfg, 42);
        let b = gen_world(&cfg, 42);
        assert_eq!(a, b);
        let c = gen_world(&cfg, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn scenes_respect_safety_margin_and_shape() {
        let cfg = WorldConfig {
            n_scenes: 20,
            ..WorldConfig::default()
        };
        for scene in gen_world(&cfg, 7) {
            assert_eq!(scene.label, SceneLabel::Safe);
            let ego = scene.ego().clone();
            assert!(scene.contenders().count() >= 1);
            for track in scene.contenders() {
                assert_eq!(track.len(), cfg.n_steps);
                assert!(min_aligned_distance(&ego, track) >= cfg.safe_margin);
            }
        }
    }

    #[test]
    fn noise_free_world_has_kinematically_consistent_tracks() {
        let cfg = WorldConfig {
            n_scenes: 3,
            sigma_w: 0.0,
            ..WorldConfig::default()
        };
        for scene in gen_world(&cfg, 9) {
            for track in &scene.tracks {
                // Positions must advance by v dt along the heading.
                for t in 0..track.len() - 1 {
                    let s = track.states[t];
                    let n = track.states[t + 1];
                    let ex = s[0] + s[3] * s[2].cos() * cfg.params.dt;
                    let ey = s[1] + s[3] * s[2].sin() * cfg.params.dt;
                    assert!((n[0] - ex).abs() < 1e-9 && (n[1] - ey).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn maneuvers_change_the_nominal_path() {
        let params = BicycleParams::default();
        let start = AgentKinematicState {
            position: [0.0, 0.0],
            heading: 0.0,
            speed: 8.0,
        };
        let keep = nominal_states(start, Maneuver::KeepLane, 4, 20, &params);
        let left = nominal_states(start, Maneuver::TurnLeft, 4, 20, &params);
        let brake = nominal_states(start, Maneuver::Brake, 4, 20, &params);
        let cross = nominal_states(start, Maneuver::Cross, 4, 20, &params);
        // Identical until the onset takes effect (controls applied from the
        // onset step change states from onset + 1 on).
        for t in 0..=4 {
            assert_eq!(keep[t].position, left[t].position);
            assert_eq!(keep[t].position, brake[t].position);
        }
        assert!(left[12].position[1] > 1.0);
        assert!(brake[12].position[0] < keep[12].position[0] - 5.0);
        assert!(cross[12].position[0] > keep[12].position[0] + 2.0);
        assert_eq!(brake[19].speed, 0.0f64.max(8.0 - 2.0 * 6.0 * 0.5));
    }

    #[test]
    fn observed_track_noise_statistics() {
        // The walk increment per step is N(0, sigma^2) per axis; at step t
        // the deviation from nominal has variance t sigma^2 per axis.
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = BicycleParams::default();
        let start = AgentKinematicState {
            position: [0.0, 0.0],
            heading: 0.0,
            speed: 5.0,
        };
        let nominal = nominal_states(start, Maneuver::KeepLane, 4, 10, &params);
        let sigma = 0.8;
        let t_probe = 6usize;
        let n = 4000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let track = observed_track("c", Role::Contender, None, &nominal, sigma, &mut rng);
            let dx = track.states[t_probe][0] - nominal[t_probe].position[0];
            let dy = track.states[t_probe][1] - nominal[t_probe].position[1];
            sum_sq += dx * dx + dy * dy;
        }
        let var_per_axis = sum_sq / (2.0 * n as f64);
        let expect = t_probe as f64 * sigma * sigma;
        assert!(
            (var_per_axis / expect - 1.0).abs() < 0.08,
            "var {var_per_axis} vs {expect}"
        );
    }

    #[test]
    fn crossing_contenders_pass_near_origin() {
        // Sanity on geometry: some crossing contender's nominal path should
        // approach the ego lane.
        let cfg = WorldConfig {
            n_scenes: 30,
            sigma_w: 0.0,
            ..WorldConfig::default()
        };
        let scenes = gen_world(&cfg, 11);
        let mut saw_close = false;
        for scene in &scenes {
            let ego = scene.ego();
            for c in scene.contenders() {
                if closest_approach(ego, c).distance < 25.0 {
                    saw_close = true;
                }
            }
        }
        assert!(saw_close);
    }
}
