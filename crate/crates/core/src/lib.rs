//! Calibrated forward reachable sets from Gaussian-mixture trajectory
//! predictions, plus a per-frame motion-plan safety monitor and a synthetic
//! benchmark harness.
//!
//! The pipeline: a predictor emits per-horizon-step position GMMs for each
//! surrounding agent; [`solver`] extracts a minimal-area union-of-ellipses
//! reachable set per step; [`conformal`] calibrates a covariance scale so the
//! set covers held-out ground truth at a target rate; [`belief`] tracks
//! confidence in the predictor online and dilates the set (or switches to a
//! [`wcfrs`] worst-case fallback) when observations stop matching the
//! forecasts; [`monitor`] intersects the sets with the ego plan footprint.

pub mod belief;
pub mod conformal;
pub mod gmm;
pub mod harness;
pub mod monitor;
pub mod scenario;
pub mod solver;
pub mod wcfrs;
