//! Split-conformal calibration of the reachable-set covariance scale.
//!
//! The nonconformity score of a ground-truth position is the smallest
//! covariance scaling that places it inside the solved set; with fixed
//! levels this is `min_i V_i(x) / c_i` over modes with a positive level.
//! Calibration takes, per horizon step, the `ceil((N+1)(1-gamma))`-th order
//! statistic of the scores, the standard split-CP finite-sample quantile.
//! Scores at exactly the quantile count as covered (closed set).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{mahalanobis, GmmPrediction, Vec2};
use crate::solver::{build_frs, FrsSet, LevelSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformalError {
    #[error("every level is zero; score undefined")]
    AllLevelsZero,
    #[error("horizon step {step}: {n} records, need at least {need} for gamma={gamma}")]
    InsufficientData {
        step: usize,
        n: usize,
        need: usize,
        gamma: f64,
    },
    #[error("no calibrated scale for horizon step {0}")]
    MissingStep(usize),
}

/// One calibration example: a prediction and the position later observed.
#[derive(Debug, Clone)]
pub struct CalibrationRecord {
    pub prediction: GmmPrediction,
    pub levels: LevelSolution,
    pub ground_truth: Vec2,
}

/// Per-horizon-step conformal scales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub gamma: f64,
    /// step -> (eta, number of calibration records). Serialized as a flat
    /// array of `{t, eta, n}` entries.
    #[serde(with = "per_step_serde")]
    pub per_step: BTreeMap<usize, StepCalibration>,
    /// Content hashes of the scenes the calibration was computed from;
    /// used to enforce calibration/evaluation disjointness.
    #[serde(default)]
    pub source_hashes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepCalibration {
    pub eta: f64,
    pub n: usize,
}

mod per_step_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        t: usize,
        eta: f64,
        n: usize,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<usize, StepCalibration>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(&t, s)| Entry {
                t,
                eta: s.eta,
                n: s.n,
            })
            .collect();
        entries.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<usize, StepCalibration>, D::Error> {
        let entries = Vec::<Entry>::deserialize(de)?;
        Ok(entries
            .into_iter()
            .map(|e| (e.t, StepCalibration { eta: e.eta, n: e.n }))
            .collect())
    }
}

impl CalibrationModel {
    pub fn eta(&self, step: usize) -> Result<f64, ConformalError> {
        self.per_step
            .get(&step)
            .map(|s| s.eta)
            .ok_or(ConformalError::MissingStep(step))
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let s = serde_json::to_string_pretty(self).expect("model serializes");
        std::fs::write(path, s + "\n")
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let data = std::fs::read_to_string(path)?;
        serde_json::from_str(&data).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Smallest covariance scaling placing `x` inside the set with the given
/// levels: `min_i V_i(x)/c_i` over positive levels.
pub fn nonconformity(
    prediction: &GmmPrediction,
    levels: &LevelSolution,
    x: Vec2,
) -> Result<f64, ConformalError> {
    let score = prediction
        .modes()
        .iter()
        .zip(&levels.levels)
        .filter(|(_, &c)| c > 0.0)
        .map(|(m, &c)| mahalanobis(x, m) / c)
        .fold(f64::INFINITY, f64::min);
    if score.is_finite() {
        Ok(score)
    } else {
        Err(ConformalError::AllLevelsZero)
    }
}

/// Split-CP quantile index: the `ceil((n+1)(1-gamma))`-th order statistic
/// (1-based). Requires `n >= ceil(1/gamma)` so the index stays in range.
fn quantile_index(n: usize, gamma: f64) -> usize {
    (((n + 1) as f64) * (1.0 - gamma)).ceil() as usize
}

/// Calibrate per-horizon-step scales from scored records.
pub fn calibrate(
    records: &[CalibrationRecord],
    gamma: f64,
) -> Result<CalibrationModel, ConformalError> {
    assert!((0.0..1.0).contains(&gamma) && gamma > 0.0);
    let mut scores: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        let s = nonconformity(&r.prediction, &r.levels, r.ground_truth)?;
        scores.entry(r.prediction.horizon_step).or_default().push(s);
    }
    // The order-statistic index must exist: ceil((n+1)(1-gamma)) <= n,
    // i.e. n >= ceil((1-gamma)/gamma).
    let need = ((1.0 - gamma) / gamma).ceil() as usize;
    let mut per_step = BTreeMap::new();
    for (step, mut s) in scores {
        let n = s.len();
        if quantile_index(n, gamma) > n {
            return Err(ConformalError::InsufficientData {
                step,
                n,
                need,
                gamma,
            });
        }
        s.sort_by(|a, b| a.total_cmp(b));
        let eta = s[quantile_index(n, gamma) - 1];
        per_step.insert(step, StepCalibration { eta, n });
    }
    Ok(CalibrationModel {
        gamma,
        per_step,
        source_hashes: Vec::new(),
    })
}

/// The calibrated set: the raw set with covariance scale `eta` for the
/// prediction's horizon step. Levels are not re-solved.
pub fn conformalized_frs(
    prediction: &GmmPrediction,
    levels: &LevelSolution,
    model: &CalibrationModel,
) -> Result<FrsSet, ConformalError> {
    let eta = model.eta(prediction.horizon_step)?;
    Ok(build_frs(prediction, levels, eta))
}

/// Per-step and pooled miscoverage of test records under a calibrated model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_step: BTreeMap<usize, f64>,
    pub pooled: f64,
    pub n_total: usize,
}

pub fn empirical_coverage(
    test_records: &[CalibrationRecord],
    model: &CalibrationModel,
) -> Result<CoverageReport, ConformalError> {
    let mut miss: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in test_records {
        let step = r.prediction.horizon_step;
        let eta = model.eta(step)?;
        let s = nonconformity(&r.prediction, &r.levels, r.ground_truth)?;
        let e = miss.entry(step).or_default();
        e.1 += 1;
        if s > eta {
            e.0 += 1;
        }
    }
    let n_total: usize = miss.values().map(|&(_, n)| n).sum();
    let missed: usize = miss.values().map(|&(m, _)| m).sum();
    Ok(CoverageReport {
        per_step: miss
            .into_iter()
            .map(|(t, (m, n))| (t, m as f64 / n as f64))
            .collect(),
        pooled: missed as f64 / n_total.max(1) as f64,
        n_total,
    })
}
