//! Synthetic multimodal trajectory predictor.
//!
//! For each contender the predictor enumerates the first `k` maneuvers of
//! the canonical hypothesis ordering, rolls each hypothesis forward from the
//! agent's current observed position (with nominal heading and speed), and
//! weights hypotheses by a softmax over how well their rollouts explain the
//! recent history. Step-`t` covariances grow linearly, `t sigma_w^2 shrink I`:
//! with `shrink = 1` the predictor is exactly well specified for the
//! generator's random-walk observation noise, and `shrink < 1` makes it
//! overconfident by a known factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::bicycle::{rollout, BicycleControl, BicycleParams};
use super::world::{Maneuver, MANEUVER_ORDER};
use super::{AgentTrack, PredRecord, Role, Scene};
use crate::gmm::{GaussianMode, GmmPrediction};
use crate::wcfrs::AgentKinematicState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("frame {frame} needs {history} history steps")]
    InsufficientHistory { frame: usize, history: usize },
    #[error("mode count {0} must be in 1..={max}", max = MANEUVER_ORDER.len())]
    BadModeCount(usize),
    #[error("frame {0} is past the end of the track ({1} steps)")]
    FrameOutOfRange(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Number of maneuver hypotheses (modes), `1..=5`.
    pub k: usize,
    /// History steps used to score hypotheses.
    pub history: usize,
    /// Forecast horizon in steps.
    pub horizon: usize,
    /// Observation-noise standard deviation assumed per step.
    pub sigma_w: f64,
    /// Multiplier on the model covariance; `< 1` is overconfident.
    pub shrink: f64,
    /// Constant mean offset (meters, along heading) applied on scenes
    /// flagged as out-of-distribution.
    pub ood_bias: f64,
    /// Softmax temperature for hypothesis weights.
    pub softmax_temp: f64,
    pub params: BicycleParams,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            k: 5,
            history: 4,
            horizon: 6,
            sigma_w: 1.0,
            shrink: 1.0,
            ood_bias: 0.0,
            softmax_temp: 1.0,
            params: BicycleParams::default(),
        }
    }
}

fn hypothesis_controls(
    maneuver: Maneuver,
    first_step: usize,
    n: usize,
    onset: usize,
) -> Vec<BicycleControl> {
    (0..n)
        .map(|s| maneuver.control((first_step + s) as i64 - onset as i64))
        .collect()
}

/// Softmax hypothesis weights from the fit of each hypothesis rollout to
/// the observed history window `[frame - history, frame]`.
fn hypothesis_weights(
    track: &AgentTrack,
    frame: usize,
    onset: usize,
    cfg: &PredictorConfig,
) -> Vec<f64> {
    let anchor = frame - cfg.history;
    let start = AgentKinematicState {
        position: track.position(anchor),
        heading: track.states[anchor][2],
        speed: track.states[anchor][3],
    };
    let denom = 2.0 * cfg.sigma_w.powi(2) * cfg.softmax_temp * cfg.history as f64;
    let scores: Vec<f64> = MANEUVER_ORDER[..cfg.k]
        .iter()
        .map(|&m| {
            let controls = hypothesis_controls(m, anchor, cfg.history, onset);
            let states = rollout(&start, &controls, &cfg.params)
                .expect("hypothesis controls are in bounds");
            let mut fit = 0.0;
            for h in 1..=cfg.history {
                let obs = track.position(anchor + h);
                let hyp = states[h].position;
                fit += (obs[0] - hyp[0]).powi(2) + (obs[1] - hyp[1]).powi(2);
            }
            -fit / denom
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Predict one contender at one frame: a `horizon`-long sequence of
/// mixtures, one per future step.
pub fn predict_agent(
    track: &AgentTrack,
    frame: usize,
    onset: usize,
    ood: bool,
    cfg: &PredictorConfig,
) -> Result<Vec<GmmPrediction>, PredictorError> {
    if cfg.k == 0 || cfg.k > MANEUVER_ORDER.len() {
        return Err(PredictorError::BadModeCount(cfg.k));
    }
    if frame >= track.len() {
        return Err(PredictorError::FrameOutOfRange(frame, track.len()));
    }
    if frame < cfg.history {
        return Err(PredictorError::InsufficientHistory {
            frame,
            history: cfg.history,
        });
    }
    let weights = hypothesis_weights(track, frame, onset, cfg);
    let start = AgentKinematicState {
        position: track.position(frame),
        heading: track.states[frame][2],
        speed: track.states[frame][3],
    };
    // Mean rollout per hypothesis.
    let paths: Vec<Vec<AgentKinematicState>> = MANEUVER_ORDER[..cfg.k]
        .iter()
        .map(|&m| {
            let controls = hypothesis_controls(m, frame, cfg.horizon, onset);
            rollout(&start, &controls, &cfg.params).expect("hypothesis controls are in bounds")
        })
        .collect();
    Ok((1..=cfg.horizon)
        .map(|t| {
            let var = (t as f64 * cfg.sigma_w.powi(2) * cfg.shrink).max(1e-9);
            let modes = paths
                .iter()
                .map(|path| {
                    let s = &path[t];
                    let mut mean = s.position;
                    if ood {
                        mean[0] += cfg.ood_bias * s.heading.cos();
                        mean[1] += cfg.ood_bias * s.heading.sin();
                    }
                    GaussianMode::new(mean, [[var, 0.0], [0.0, var]])
                        .expect("isotropic covariance is SPD")
                })
                .collect();
            GmmPrediction::new(modes, weights.clone(), t).expect("weights are normalized")
        })
        .collect())
}

/// Predictions for every contender at every frame with full history, as
/// flat serializable records.
pub fn predict_scene(scene: &Scene, cfg: &PredictorConfig) -> Result<Vec<PredRecord>, PredictorError> {
    let mut out = Vec::new();
    for frame in cfg.history..scene.n_steps() {
        for track in &scene.tracks {
            if track.role != Role::Contender {
                continue;
            }
            let preds = predict_agent(track, frame, scene.meta.maneuver_onset, scene.meta.ood, cfg)?;
            for p in &preds {
                out.push(PredRecord::from_prediction(&scene.meta.id, frame, &track.id, p));
            }
        }
    }
    Ok(out)
}

/// Displacement of a mode mean from the agent's observed position at the
/// prediction frame; convenience for tests.
#[cfg(test)]
fn mean_offset(track: &AgentTrack, frame: usize, pred: &GmmPrediction, mode: usize) -> crate::gmm::Vec2 {
    let p = track.position(frame);
    let m = pred.modes()[mode].mean();
    [m[0] - p[0], m[1] - p[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{chi2_level_2d, mahalanobis};
    use crate::scenario::world::{gen_world, WorldConfig};

    fn noise_free_world(n: usize, seed: u64) -> Vec<Scene> {
        gen_world(
            &WorldConfig {
                n_scenes: n,
                sigma_w: 0.0,
                ..WorldConfig::default()
            },
            seed,
        )
    }

    #[test]
    fn uniform_weights_at_maneuver_onset() {
        // At the onset frame the history window predates every maneuver, so
        // all hypotheses explain it equally well.
        let scenes = gen_world(&WorldConfig { n_scenes: 4, ..WorldConfig::default() }, 21);
        let cfg = PredictorConfig::default();
        for scene in &scenes {
            for track in scene.contenders() {
                let preds =
                    predict_agent(track, scene.meta.maneuver_onset, scene.meta.maneuver_onset, false, &cfg)
                        .unwrap();
                for w in preds[0].weights() {
                    assert!((w - 0.2).abs() < 1e-12, "weights {:?}", preds[0].weights());
                }
            }
        }
    }

    #[test]
    fn true_hypothesis_dominates_after_onset() {
        // Noise-free world, frame well past onset: the true maneuver's
        // rollout fits the history exactly, every alternative does not.
        let cfg = PredictorConfig::default();
        let mut checked = 0;
        for scene in noise_free_world(10, 3) {
            for track in scene.contenders() {
                let truth = track.maneuver.unwrap();
                let frame = scene.meta.maneuver_onset + cfg.history + 2;
                let preds = predict_agent(track, frame, scene.meta.maneuver_onset, false, &cfg).unwrap();
                let idx = MANEUVER_ORDER.iter().position(|&m| m == truth).unwrap();
                let w = preds[0].weights();
                // Brake from low speed can coincide with keep-lane once the
                // speed floor is hit; only require the true mode to be a
                // maximizer.
                let w_max = w.iter().cloned().fold(0.0, f64::max);
                assert!(w[idx] >= w_max - 1e-9, "truth {truth:?} weights {w:?}");
                if w[idx] > 0.9 {
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no contender produced a decisive posterior");
    }

    #[test]
    fn keep_lane_mean_matches_nominal_displacement() {
        let cfg = PredictorConfig { k: 1, ..PredictorConfig::default() };
        for scene in noise_free_world(3, 8) {
            for track in scene.contenders() {
                if track.maneuver != Some(Maneuver::KeepLane) {
                    continue;
                }
                let frame = scene.meta.maneuver_onset;
                let preds = predict_agent(track, frame, scene.meta.maneuver_onset, false, &cfg).unwrap();
                for (i, p) in preds.iter().enumerate() {
                    let t = i + 1;
                    // Keep-lane truth: mean must equal the future observed
                    // position exactly in a noise-free world.
                    if frame + t < track.len() {
                        let truth = track.position(frame + t);
                        let m = p.modes()[0].mean();
                        assert!((m[0] - truth[0]).abs() < 1e-9);
                        assert!((m[1] - truth[1]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn covariance_grows_linearly_with_step() {
        let cfg = PredictorConfig { sigma_w: 0.7, shrink: 0.25, ..PredictorConfig::default() };
        let scene = &noise_free_world(1, 4)[0];
        let track = scene.contenders().next().unwrap();
        let preds = predict_agent(track, 4, 4, false, &cfg).unwrap();
        for (i, p) in preds.iter().enumerate() {
            let t = (i + 1) as f64;
            let expect = t * 0.49 * 0.25;
            for mode in p.modes() {
                let cov = mode.cov();
                assert!((cov[0][0] - expect).abs() < 1e-12);
                assert!((cov[1][1] - expect).abs() < 1e-12);
                assert_eq!(cov[0][1], 0.0);
            }
        }
    }

    #[test]
    fn ood_bias_shifts_means_by_constant_offset() {
        let cfg = PredictorConfig { ood_bias: 3.0, ..PredictorConfig::default() };
        let scene = &noise_free_world(1, 6)[0];
        let track = scene.contenders().next().unwrap();
        let clean = predict_agent(track, 4, 4, false, &cfg).unwrap();
        let biased = predict_agent(track, 4, 4, true, &cfg).unwrap();
        for (c, b) in clean.iter().zip(&biased) {
            for (mc, mb) in c.modes().iter().zip(b.modes()) {
                let dx = mb.mean()[0] - mc.mean()[0];
                let dy = mb.mean()[1] - mc.mean()[1];
                assert!(((dx * dx + dy * dy).sqrt() - 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn well_specified_predictor_is_calibrated_against_truth() {
        // Oracle for the whole pipeline: with shrink = 1 the true-maneuver
        // mode's residual is the walk increment, distributed
        // N(0, t sigma^2 I). Empirical chi-square coverage at mass 0.9 must
        // be close to 0.9 for every horizon step.
        let world_cfg = WorldConfig {
            n_scenes: 300,
            sigma_w: 0.6,
            contenders_min: 1,
            contenders_max: 1,
            safe_margin: 0.0,
            ..WorldConfig::default()
        };
        let cfg = PredictorConfig { sigma_w: 0.6, ..PredictorConfig::default() };
        let scenes = gen_world(&world_cfg, 99);
        let level = chi2_level_2d(0.9);
        for t in [1usize, 3, 6] {
            let mut hits = 0usize;
            let mut total = 0usize;
            for scene in &scenes {
                let track = scene.contenders().next().unwrap();
                let frame = scene.meta.maneuver_onset;
                let preds = predict_agent(track, frame, frame, false, &cfg).unwrap();
                let truth_idx = MANEUVER_ORDER
                    .iter()
                    .position(|&m| m == track.maneuver.unwrap())
                    .unwrap();
                let mode = &preds[t - 1].modes()[truth_idx];
                let x = track.position(frame + t);
                if mahalanobis(x, mode) <= level {
                    hits += 1;
                }
                total += 1;
            }
            let cov = hits as f64 / total as f64;
            assert!((cov - 0.9).abs() < 0.06, "t={t}: coverage {cov}");
        }
    }

    #[test]
    fn input_validation() {
        let scene = &noise_free_world(1, 2)[0];
        let track = scene.contenders().next().unwrap();
        let cfg = PredictorConfig::default();
        assert!(matches!(
            predict_agent(track, 2, 4, false, &cfg),
            Err(PredictorError::InsufficientHistory { .. })
        ));
        assert!(matches!(
            predict_agent(track, 4, 4, false, &PredictorConfig { k: 0, ..cfg.clone() }),
            Err(PredictorError::BadModeCount(0))
        ));
        assert!(matches!(
            predict_agent(track, 4, 4, false, &PredictorConfig { k: 9, ..cfg.clone() }),
            Err(PredictorError::BadModeCount(9))
        ));
        assert!(matches!(
            predict_agent(track, 500, 4, false, &cfg),
            Err(PredictorError::FrameOutOfRange(500, _))
        ));
    }

    #[test]
    fn predict_scene_covers_all_frames_and_agents() {
        let scene = &noise_free_world(1, 12)[0];
        let cfg = PredictorConfig::default();
        let records = predict_scene(scene, &cfg).unwrap();
        let n_contenders = scene.contenders().count();
        let n_frames = scene.n_steps() - cfg.history;
        assert_eq!(records.len(), n_contenders * n_frames * cfg.horizon);
        assert!(records.iter().all(|r| r.scene == scene.meta.id));
        assert!(records.iter().all(|r| r.weights.len() == cfg.k));
        // Records round-trip into valid mixtures.
        for r in records.iter().take(10) {
            r.to_prediction().unwrap();
        }
        let _ = mean_offset(
            scene.contenders().next().unwrap(),
            cfg.history,
            &records[0].to_prediction().unwrap(),
            0,
        );
    }
}
