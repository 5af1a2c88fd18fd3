//! Scene data model and I/O, the synthetic world generator, the synthetic
//! GMM predictor, and the unsafe-scenario synthesizer.

mod bicycle;
mod predictor;
mod synth;
mod world;

pub use bicycle::{bicycle_step, BicycleControl, BicycleError, BicycleParams};
pub use predictor::{predict_agent, predict_scene, PredictorConfig, PredictorError};
pub use synth::{synthesize_unsafe, SynthConfig, SynthError};
pub use world::{gen_world, Maneuver, WorldConfig, MANEUVER_ORDER};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gmm::{GaussianMode, GmmPrediction, Vec2};
use crate::wcfrs::AgentKinematicState;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version '{0}'")]
    BadFormat(String),
    #[error("invalid prediction record: {0}")]
    BadRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ego,
    Contender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneLabel {
    Safe,
    SynthUnsafe,
}

/// One agent's track at fixed `dt`: observed positions with nominal
/// (noise-free) heading and speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: String,
    pub role: Role,
    /// True behavior of a generated contender, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maneuver: Option<Maneuver>,
    /// `[x, y, theta, v]` per step.
    pub states: Vec<[f64; 4]>,
}

impl AgentTrack {
    pub fn kinematic(&self, step: usize) -> AgentKinematicState {
        let s = self.states[step];
        AgentKinematicState {
            position: [s[0], s[1]],
            heading: s[2],
            speed: s[3],
        }
    }

    pub fn position(&self, step: usize) -> Vec2 {
        [self.states[step][0], self.states[step][1]]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MapContext {
    /// Lane centerline polylines.
    pub lanes: Vec<Vec<Vec2>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SceneMeta {
    pub id: String,
    /// Step of the forced collision in synthesized-unsafe scenes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collision_step: Option<usize>,
    /// Flagged for the predictor's out-of-distribution bias knob.
    #[serde(default)]
    pub ood: bool,
    /// Step at which contender maneuvers begin.
    #[serde(default)]
    pub maneuver_onset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub format: String,
    pub dt: f64,
    pub label: SceneLabel,
    pub meta: SceneMeta,
    pub tracks: Vec<AgentTrack>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<MapContext>,
}

pub const SCENE_FORMAT: &str = "scene_v1";
pub const PRED_FORMAT: &str = "pred_v1";

impl Scene {
    pub fn ego(&self) -> &AgentTrack {
        self.tracks
            .iter()
            .find(|t| t.role == Role::Ego)
            .expect("scene has an ego track")
    }

    pub fn contenders(&self) -> impl Iterator<Item = &AgentTrack> {
        self.tracks.iter().filter(|t| t.role == Role::Contender)
    }

    pub fn n_steps(&self) -> usize {
        self.tracks.first().map(|t| t.len()).unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneIoError> {
        let mut f = fs::File::create(path)?;
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SceneIoError> {
        let data = fs::read_to_string(path)?;
        let scene: Scene = serde_json::from_str(&data)?;
        if scene.format != SCENE_FORMAT {
            return Err(SceneIoError::BadFormat(scene.format));
        }
        Ok(scene)
    }

    /// Content hash used for calibration/evaluation disjointness checks.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scene serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        format!("{:x}", h.finalize())
    }
}

/// Load every `*.json` scene in a directory, sorted by file name.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>, SceneIoError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Scene::load(p)).collect()
}

/// One prediction-file line: a single (scene, frame, agent, step) mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredRecord {
    pub format: String,
    pub scene: String,
    pub frame: usize,
    pub agent: String,
    pub t: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec2>,
    pub covs: Vec<[[f64; 2]; 2]>,
}

impl PredRecord {
    pub fn from_prediction(
        scene: &str,
        frame: usize,
        agent: &str,
        pred: &GmmPrediction,
    ) -> Self {
        Self {
            format: PRED_FORMAT.to_string(),
            scene: scene.to_string(),
            frame,
            agent: agent.to_string(),
            t: pred.horizon_step,
            weights: pred.weights().to_vec(),
            means: pred.modes().iter().map(|m| m.mean()).collect(),
            covs: pred.modes().iter().map(|m| m.cov()).collect(),
        }
    }

    pub fn to_prediction(&self) -> Result<GmmPrediction, SceneIoError> {
        let modes = self
            .means
            .iter()
            .zip(&self.covs)
            .map(|(&mean, &cov)| GaussianMode::new(mean, cov))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| SceneIoError::BadRecord(e.to_string()))?;
        GmmPrediction::new(modes, self.weights.clone(), self.t)
            .map_err(|e| SceneIoError::BadRecord(e.to_string()))
    }
}

pub fn write_pred_jsonl(path: &Path, records: &[PredRecord]) -> Result<(), SceneIoError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pred_jsonl(path: &Path) -> Result<Vec<PredRecord>, SceneIoError> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredRecord = serde_json::from_str(&line)?;
        if r.format != PRED_FORMAT {
            return Err(SceneIoError::BadFormat(r.format));
        }
        out.push(r);
    }
    Ok(out)
}

/// Closest time-aligned-or-not approach between two tracks: the minimum
/// distance over all step pairs. Ties prefer the smallest contender step,
/// then the smallest ego step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestApproach {
    /// Contender position at `t_contender`.
    pub point: Vec2,
    pub t_ego: usize,
    pub t_contender: usize,
    pub distance: f64,
}

pub fn closest_approach(ego: &AgentTrack, contender: &AgentTrack) -> ClosestApproach {
    assert!(!ego.is_empty() && !contender.is_empty());
    let mut best = ClosestApproach {
        point: contender.position(0),
        t_ego: 0,
        t_contender: 0,
        distance: f64::INFINITY,
    };
    for (to, cs) in contender.states.iter().enumerate() {
        for (te, es) in ego.states.iter().enumerate() {
            let d = ((es[0] - cs[0]).powi(2) + (es[1] - cs[1]).powi(2)).sqrt();
            if d < best.distance {
                best = ClosestApproach {
                    point: [cs[0], cs[1]],
                    t_ego: te,
                    t_contender: to,
                    distance: d,
                };
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_track(id: &str, role: Role, start: Vec2, vel: Vec2, n: usize) -> AgentTrack {
        let heading = vel[1].atan2(vel[0]);
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        AgentTrack {
            id: id.into(),
            role,
            maneuver: None,
            states: (0..n)
                .map(|t| {
                    [
                        start[0] + vel[0] * t as f64,
                        start[1] + vel[1] * t as f64,
                        heading,
                        speed,
                    ]
                })
                .collect(),
        }
    }

    #[test]
    fn closest_approach_crossing() {
        // Ego crosses the origin at t=5, contender at t=8: p_c is (0,0).
        let ego = straight_track("ego", Role::Ego, [-5.0, 0.0], [1.0, 0.0], 12);
        let con = straight_track("c", Role::Contender, [0.0, 8.0], [0.0, -1.0], 12);
        let ca = closest_approach(&ego, &con);
        assert_eq!(ca.point, [0.0, 0.0]);
        assert_eq!(ca.t_contender, 8);
        assert_eq!(ca.t_ego, 5);
        assert_eq!(ca.distance, 0.0);
    }

    #[test]
    fn closest_approach_parallel() {
        let ego = straight_track("ego", Role::Ego, [0.0, 0.0], [1.0, 0.0], 10);
        let con = straight_track("c", Role::Contender, [0.0, 5.0], [1.0, 0.0], 10);
        let ca = closest_approach(&ego, &con);
        assert_eq!(ca.distance, 5.0);
        assert_eq!(ca.point[1], 5.0);
    }

    #[test]
    fn closest_approach_matches_exhaustive_on_permuted_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, role: Role| {
                let states: Vec<[f64; 4]> = (0..15)
                    .map(|_| {
                        [
                            rng.gen_range(-20.0..20.0),
                            rng.gen_range(-20.0..20.0),
                            0.0,
                            1.0,
                        ]
                    })
                    .collect();
                AgentTrack {
                    id: "x".into(),
                    role,
                    maneuver: None,
                    states,
                }
            };
            let ego = mk(&mut rng, Role::Ego);
            let con = mk(&mut rng, Role::Contender);
            let ca = closest_approach(&ego, &con);
            let mut dmin = f64::INFINITY;
            for a in &ego.states {
                for b in &con.states {
                    dmin = dmin.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
                }
            }
            assert_eq!(ca.distance, dmin);
        }
    }

    #[test]
    fn scene_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scene = Scene {
            format: SCENE_FORMAT.into(),
            dt: 0.5,
            label: SceneLabel::Safe,
            meta: SceneMeta {
                id: "s0".into(),
                collision_step: None,
                ood: false,
                maneuver_onset: 4,
            },
            tracks: vec![straight_track("ego", Role::Ego, [0.0, 0.0], [2.0, 0.0], 8)],
            map: Some(MapContext {
                lanes: vec![vec![[0.0, 0.0], [100.0, 0.0]]],
            }),
        };
        let path = dir.path().join("s0.json");
        scene.save(&path).unwrap();
        let loaded = Scene::load(&path).unwrap();
        assert_eq!(scene, loaded);
        assert_eq!(scene.content_hash(), loaded.content_hash());
    }

    #[test]
    fn pred_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GmmPrediction::new(
            vec![
                GaussianMode::new([1.0, 2.0], [[1.0, 0.2], [0.2, 2.0]]).unwrap(),
                GaussianMode::new([3.0, 4.0], [[0.5, 0.0], [0.0, 0.5]]).unwrap(),
            ],
            vec![0.6, 0.4],
            3,
        )
        .unwrap();
        let rec = PredRecord::from_prediction("s0", 5, "c1", &g);
        let path = dir.path().join("preds.jsonl");
        write_pred_jsonl(&path, &[rec.clone()]).unwrap();
        let back = read_pred_jsonl(&path).unwrap();
        assert_eq!(back.len(), 1);
        let g2 = back[0].to_prediction().unwrap();
        assert_eq!(g2.horizon_step, 3);
        assert_eq!(g2.modes()[0].mean(), [1.0, 2.0]);
        assert_eq!(g2.weights(), g.weights());
    }
}
