//! Evaluation harness: dataset assembly, calibration plumbing, frame
//! labeling, per-method error rates, coverage summaries, the mode-count
//! ablation, and timing.
//!
//! All outputs except the timing sidecar are deterministic functions of the
//! input artifacts; nothing here reads clocks into the serialized reports.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{
    calibrate, nonconformity, CalibrationModel, CalibrationRecord, ConformalError,
};
use crate::gmm::GmmPrediction;
use crate::monitor::{evaluate_frame, AgentFrame, EgoPlan, Method, MethodConfig, MonitorError, MonitorState};
use crate::scenario::{
    predict_agent, synthesize_unsafe, PredRecord, PredictorConfig, PredictorError, Scene,
    SceneLabel, SynthConfig, SynthError,
};
use crate::solver::{solve_levels, SolveError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("prediction records for scene '{scene}' are not contiguous over horizon steps")]
    RaggedPredictions { scene: String },
    #[error("scene '{0}' appears in both the calibration and evaluation sets")]
    DatasetOverlap(String),
}

/// Predictions indexed by scene, frame, and agent; horizon-step order.
#[derive(Debug, Default, Clone)]
pub struct PredIndex {
    map: HashMap<String, HashMap<(usize, String), Vec<GmmPrediction>>>,
}

impl PredIndex {
    pub fn from_records(records: &[PredRecord]) -> Result<Self, HarnessError> {
        let mut map: HashMap<String, HashMap<(usize, String), Vec<GmmPrediction>>> =
            HashMap::new();
        let mut buckets: HashMap<(String, usize, String), Vec<(usize, GmmPrediction)>> =
            HashMap::new();
        for r in records {
            let pred = r
                .to_prediction()
                .map_err(|_| HarnessError::RaggedPredictions {
                    scene: r.scene.clone(),
                })?;
            buckets
                .entry((r.scene.clone(), r.frame, r.agent.clone()))
                .or_default()
                .push((r.t, pred));
        }
        for ((scene, frame, agent), mut preds) in buckets {
            preds.sort_by_key(|(t, _)| *t);
            if preds.iter().enumerate().any(|(i, (t, _))| *t != i + 1) {
                return Err(HarnessError::RaggedPredictions { scene });
            }
            map.entry(scene)
                .or_default()
                .insert((frame, agent), preds.into_iter().map(|(_, p)| p).collect());
        }
        Ok(Self { map })
    }

    /// Run the synthetic predictor over every frame of every scene.
    pub fn generate(scenes: &[Scene], cfg: &PredictorConfig) -> Result<Self, HarnessError> {
        let mut map: HashMap<String, HashMap<(usize, String), Vec<GmmPrediction>>> =
            HashMap::new();
        for scene in scenes {
            let entry = map.entry(scene.meta.id.clone()).or_default();
            for frame in cfg.history..scene.n_steps() {
                for track in scene.contenders() {
                    let preds = predict_agent(
                        track,
                        frame,
                        scene.meta.maneuver_onset,
                        scene.meta.ood,
                        cfg,
                    )?;
                    entry.insert((frame, track.id.clone()), preds);
                }
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, scene: &str, frame: usize, agent: &str) -> Option<&Vec<GmmPrediction>> {
        self.map.get(scene)?.get(&(frame, agent.to_string()))
    }
}

/// Build scored calibration records for every contender state with ground
/// truth inside the horizon. `onset_only` restricts to each scene's
/// maneuver-onset frame.
pub fn build_calibration_records(
    scenes: &[Scene],
    preds: &PredIndex,
    tau: f64,
    onset_only: bool,
) -> Result<Vec<CalibrationRecord>, HarnessError> {
    let mut out = Vec::new();
    for scene in scenes {
        let frames: Vec<usize> = if onset_only {
            vec![scene.meta.maneuver_onset]
        } else {
            (scene.meta.maneuver_onset..scene.n_steps()).collect()
        };
        for frame in frames {
            for track in scene.contenders() {
                let Some(preds) = preds.get(&scene.meta.id, frame, &track.id) else {
                    continue;
                };
                for pred in preds {
                    let t = pred.horizon_step;
                    if frame + t >= track.len() {
                        continue;
                    }
                    out.push(CalibrationRecord {
                        prediction: pred.clone(),
                        levels: solve_levels(pred, tau)?,
                        ground_truth: track.position(frame + t),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Calibrate a model and stamp it with the source scenes' content hashes.
pub fn calibrate_on_scenes(
    scenes: &[Scene],
    preds: &PredIndex,
    tau: f64,
    gamma: f64,
    onset_only: bool,
) -> Result<CalibrationModel, HarnessError> {
    let records = build_calibration_records(scenes, preds, tau, onset_only)?;
    let mut model = calibrate(&records, gamma)?;
    model.source_hashes = scenes.iter().map(|s| s.content_hash()).collect();
    Ok(model)
}

/// Frame label for rate accounting. `Some(true)` = the monitor should flag
/// it, `Some(false)` = it should not, `None` = excluded (a frame of an
/// unsafe scene whose collision lies outside the monitoring window).
pub fn frame_label(scene: &Scene, frame: usize, horizon: usize) -> Option<bool> {
    match (scene.label, scene.meta.collision_step) {
        (SceneLabel::Safe, _) => Some(false),
        (SceneLabel::SynthUnsafe, Some(t_o)) => {
            if frame < t_o && t_o <= frame + horizon {
                Some(true)
            } else {
                None
            }
        }
        (SceneLabel::SynthUnsafe, None) => None,
    }
}

/// One monitored frame in a serialized verdict stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub scene: String,
    pub frame: usize,
    pub method: String,
    /// `None` when the frame is excluded from rate accounting.
    pub label_unsafe: Option<bool>,
    pub flagged: bool,
    pub first_conflict: Option<(String, usize)>,
}

/// Confusion counts and rates for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRates {
    pub method: String,
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    /// Balanced error rate, `(fpr + fnr) / 2`.
    pub ber: Option<f64>,
}

impl MethodRates {
    fn from_counts(method: String, n_safe: usize, fp: usize, n_unsafe: usize, fnn: usize) -> Self {
        let fpr = (n_safe > 0).then(|| fp as f64 / n_safe as f64);
        let fnr = (n_unsafe > 0).then(|| fnn as f64 / n_unsafe as f64);
        let ber = match (fpr, fnr) {
            (Some(a), Some(b)) => Some(0.5 * (a + b)),
            _ => None,
        };
        Self {
            method,
            n_safe,
            n_unsafe,
            false_pos: fp,
            false_neg: fnn,
            fpr,
            fnr,
            ber,
        }
    }
}

/// Wall-clock cost of one method's monitoring calls; reported separately
/// so the deterministic artifacts stay byte-stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub n_frames: usize,
    pub mean_us: f64,
    pub max_us: f64,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub base: MethodConfig,
    /// Monitoring horizon in steps; plans are truncated near track ends.
    pub horizon: usize,
    /// First frame with enough history for the predictor.
    pub first_frame: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::all().to_vec(),
            base: MethodConfig::default(),
            horizon: 6,
            first_frame: 4,
        }
    }
}

#[derive(Debug)]
pub struct EvalOutput {
    pub verdicts: Vec<VerdictRecord>,
    pub rates: Vec<MethodRates>,
    pub timing: Vec<MethodTiming>,
}

fn ego_plan(scene: &Scene, frame: usize, horizon: usize, cfg: &MethodConfig) -> EgoPlan {
    let ego = scene.ego();
    let t_end = (frame + horizon).min(ego.len() - 1);
    EgoPlan {
        states: (frame + 1..=t_end)
            .map(|t| (ego.position(t), ego.states[t][2]))
            .collect(),
        dt: scene.dt,
        footprint_radius: cfg.footprint_radius,
    }
}

/// Monitor one scene sequentially with one method.
pub fn run_monitor_scene(
    scene: &Scene,
    preds: &PredIndex,
    cfg: &MethodConfig,
    calibration: Option<&CalibrationModel>,
    horizon: usize,
    first_frame: usize,
) -> Result<Vec<(usize, crate::monitor::FrameVerdict)>, HarnessError> {
    let mut state = MonitorState::new();
    let mut out = Vec::new();
    for frame in first_frame..scene.n_steps() {
        let agents: Vec<AgentFrame> = scene
            .contenders()
            .map(|track| AgentFrame {
                id: track.id.clone(),
                state: track.kinematic(frame),
                predictions: preds
                    .get(&scene.meta.id, frame, &track.id)
                    .cloned()
                    .unwrap_or_default(),
            })
            .collect();
        let plan = ego_plan(scene, frame, horizon, cfg);
        let verdict = evaluate_frame(&mut state, &agents, &plan, cfg, calibration)?;
        out.push((frame, verdict));
    }
    Ok(out)
}

/// Evaluate every configured method over the scene set. Fails if any scene
/// was part of the calibration set.
pub fn evaluate_methods(
    scenes: &[Scene],
    preds: &PredIndex,
    cfg: &EvalConfig,
    calibration: Option<&CalibrationModel>,
) -> Result<EvalOutput, HarnessError> {
    if let Some(model) = calibration {
        for scene in scenes {
            if model.source_hashes.contains(&scene.content_hash()) {
                return Err(HarnessError::DatasetOverlap(scene.meta.id.clone()));
            }
        }
    }
    let mut verdicts = Vec::new();
    let mut rates = Vec::new();
    let mut timing = Vec::new();
    for &method in &cfg.methods {
        let mcfg = MethodConfig {
            method,
            ..cfg.base.clone()
        };
        let calib = method.needs_calibration().then_some(calibration).flatten();
        if method.needs_calibration() && calib.is_none() {
            return Err(HarnessError::Monitor(MonitorError::MissingCalibration));
        }
        let (mut n_safe, mut n_unsafe, mut fp, mut fnn) = (0usize, 0usize, 0usize, 0usize);
        let mut elapsed = Vec::new();
        for scene in scenes {
            let t0 = Instant::now();
            let frames = run_monitor_scene(scene, preds, &mcfg, calib, cfg.horizon, cfg.first_frame)?;
            let dt_us = t0.elapsed().as_secs_f64() * 1e6 / frames.len().max(1) as f64;
            elapsed.push((dt_us, frames.len()));
            for (frame, verdict) in frames {
                let label = frame_label(scene, frame, cfg.horizon);
                match (label, verdict.is_unsafe) {
                    (Some(false), flagged) => {
                        n_safe += 1;
                        fp += flagged as usize;
                    }
                    (Some(true), flagged) => {
                        n_unsafe += 1;
                        fnn += !flagged as usize;
                    }
                    (None, _) => {}
                }
                verdicts.push(VerdictRecord {
                    scene: scene.meta.id.clone(),
                    frame,
                    method: method.name().to_string(),
                    label_unsafe: label,
                    flagged: verdict.is_unsafe,
                    first_conflict: verdict.first_conflict,
                });
            }
        }
        rates.push(MethodRates::from_counts(
            method.name().to_string(),
            n_safe,
            fp,
            n_unsafe,
            fnn,
        ));
        let n_frames: usize = elapsed.iter().map(|&(_, n)| n).sum();
        let mean_us = elapsed.iter().map(|&(us, n)| us * n as f64).sum::<f64>()
            / n_frames.max(1) as f64;
        let max_us = elapsed.iter().map(|&(us, _)| us).fold(0.0, f64::max);
        timing.push(MethodTiming {
            method: method.name().to_string(),
            n_frames,
            mean_us,
            max_us,
        });
    }
    Ok(EvalOutput {
        verdicts,
        rates,
        timing,
    })
}

/// Per-step and per-trajectory empirical coverage of the conformalized
/// sets on held-out scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageSummary {
    /// Fraction of states covered, per horizon step.
    pub per_step: BTreeMap<usize, f64>,
    /// Fraction of states covered, pooled over steps.
    pub per_state: f64,
    /// Fraction of (scene, frame, agent) trajectories with every step
    /// covered.
    pub per_trajectory: f64,
    pub n_states: usize,
    pub n_trajectories: usize,
}

pub fn coverage_on_scenes(
    scenes: &[Scene],
    preds: &PredIndex,
    model: &CalibrationModel,
    tau: f64,
    onset_only: bool,
) -> Result<CoverageSummary, HarnessError> {
    let mut hit: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut n_traj = 0usize;
    let mut traj_hit = 0usize;
    for scene in scenes {
        let frames: Vec<usize> = if onset_only {
            vec![scene.meta.maneuver_onset]
        } else {
            (scene.meta.maneuver_onset..scene.n_steps()).collect()
        };
        for frame in frames {
            for track in scene.contenders() {
                let Some(preds) = preds.get(&scene.meta.id, frame, &track.id) else {
                    continue;
                };
                let mut all = true;
                let mut any = false;
                for pred in preds {
                    let t = pred.horizon_step;
                    if frame + t >= track.len() {
                        continue;
                    }
                    any = true;
                    let levels = solve_levels(pred, tau)?;
                    let score = nonconformity(pred, &levels, track.position(frame + t))?;
                    let eta = model.eta(t)?;
                    let e = hit.entry(t).or_default();
                    e.1 += 1;
                    if score <= eta {
                        e.0 += 1;
                    } else {
                        all = false;
                    }
                }
                if any {
                    n_traj += 1;
                    traj_hit += all as usize;
                }
            }
        }
    }
    let n_states: usize = hit.values().map(|&(_, n)| n).sum();
    let covered: usize = hit.values().map(|&(h, _)| h).sum();
    Ok(CoverageSummary {
        per_step: hit
            .into_iter()
            .map(|(t, (h, n))| (t, h as f64 / n.max(1) as f64))
            .collect(),
        per_state: covered as f64 / n_states.max(1) as f64,
        per_trajectory: traj_hit as f64 / n_traj.max(1) as f64,
        n_states,
        n_trajectories: n_traj,
    })
}

/// Convert a deterministic share of a safe scene set into synthesized
/// near-collisions. Scenes the synthesizer cannot solve stay safe.
pub fn make_mixed_dataset(
    mut scenes: Vec<Scene>,
    synth: &SynthConfig,
    unsafe_target: usize,
) -> Vec<Scene> {
    let mut converted = 0;
    for scene in scenes.iter_mut() {
        if converted >= unsafe_target {
            break;
        }
        match synthesize_unsafe(scene, synth) {
            Ok(s) => {
                *scene = s;
                converted += 1;
            }
            Err(SynthError::NoTarget | SynthError::Infeasible { .. } | SynthError::NoContenders) => {}
        }
    }
    scenes
}

/// One row of the mode-count ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    /// Calibrated scale per horizon step.
    pub etas: BTreeMap<usize, f64>,
    pub rates: MethodRates,
    pub coverage: CoverageSummary,
}

/// Re-run prediction, onset-frame calibration, and evaluation for each
/// mode count.
pub fn mode_ablation(
    calib_scenes: &[Scene],
    eval_scenes: &[Scene],
    ks: &[usize],
    predictor: &PredictorConfig,
    gamma: f64,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for &k in ks {
        let pcfg = PredictorConfig {
            k,
            ..predictor.clone()
        };
        let calib_preds = PredIndex::generate(calib_scenes, &pcfg)?;
        let model = calibrate_on_scenes(calib_scenes, &calib_preds, eval.base.tau, gamma, true)?;
        let eval_preds = PredIndex::generate(eval_scenes, &pcfg)?;
        let out = evaluate_methods(
            eval_scenes,
            &eval_preds,
            &EvalConfig {
                methods: vec![Method::ForceOpt],
                ..eval.clone()
            },
            Some(&model),
        )?;
        let coverage = coverage_on_scenes(eval_scenes, &eval_preds, &model, eval.base.tau, true)?;
        rows.push(AblationRow {
            k,
            etas: model
                .per_step
                .iter()
                .map(|(&t, s)| (t, s.eta))
                .collect(),
            rates: out.rates.into_iter().next().expect("one method"),
            coverage,
        });
    }
    Ok(rows)
}

/// Render rates as CSV.
pub fn rates_csv(rates: &[MethodRates]) -> String {
    let mut s = String::from("method,n_safe,n_unsafe,false_pos,false_neg,fpr,fnr,ber\n");
    for r in rates {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            r.n_safe,
            r.n_unsafe,
            r.false_pos,
            r.false_neg,
            f(r.fpr),
            f(r.fnr),
            f(r.ber)
        ));
    }
    s
}

/// Render timing as CSV (non-deterministic sidecar).
pub fn timing_csv(timing: &[MethodTiming]) -> String {
    let mut s = String::from("method,n_frames,mean_us,max_us\n");
    for t in timing {
        s.push_str(&format!(
            "{},{},{:.2},{:.2}\n",
            t.method, t.n_frames, t.mean_us, t.max_us
        ));
    }
    s
}

/// Render ablation rows as CSV, one line per (k, step).
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("k,step,eta,fnr,fpr,per_state_coverage,per_traj_coverage\n");
    for row in rows {
        for (&t, &eta) in &row.etas {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{:.6},{},{},{:.6},{:.6}\n",
                row.k,
                t,
                eta,
                f(row.rates.fnr),
                f(row.rates.fpr),
                row.coverage.per_state,
                row.coverage.per_trajectory
            ));
        }
    }
    s
}

/// Render verdicts as JSONL.
pub fn verdicts_jsonl(verdicts: &[VerdictRecord]) -> String {
    let mut s = String::new();
    for v in verdicts {
        s.push_str(&serde_json::to_string(v).expect("verdict serializes"));
        s.push('\n');
    }
    s
}
