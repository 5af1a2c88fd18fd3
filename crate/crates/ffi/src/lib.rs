//! C ABI surface for the reachable-set library.
//!
//! Conventions:
//! - Every fallible call returns a [`FrsmonStatus`]; out-parameters are only
//!   written on `Ok`.
//! - Heap objects are returned as opaque handles and must be released with the
//!   matching `*_free` function. Passing a handle after freeing it is
//!   undefined behaviour, as in any C API.
//! - A human-readable message for the most recent error on the current thread
//!   is available via [`frsmon_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use frsmon::belief::{beta_hat, init_belief, update_belief, BeliefState};
use frsmon::conformal::{nonconformity, CalibrationModel};
use frsmon::gmm::{GaussianMode, GmmPrediction};
use frsmon::solver::{build_frs, solve_levels, FrsSet, LevelSolution};
use frsmon::wcfrs::{worst_case_frs, AgentKinematicState};

/// Result code for every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrsmonStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or structurally invalid.
    InvalidArgument = 2,
    /// The level solver rejected the problem.
    SolveFailed = 3,
    /// The calibration model was missing a step or failed to load.
    CalibrationFailed = 4,
    /// A path was not valid UTF-8 or a file operation failed.
    IoFailed = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: FrsmonStatus, msg: impl std::fmt::Display) -> FrsmonStatus {
    let c = CString::new(msg.to_string()).unwrap_or_else(|_| CString::new("error").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
    status
}

/// Message for the most recent error on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn frsmon_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Opaque Gaussian-mixture prediction for one horizon step.
pub struct FrsmonGmm(GmmPrediction);
/// Opaque solved level set (one level per mode).
pub struct FrsmonLevels(LevelSolution);
/// Opaque reachable set built from a mixture and its levels.
pub struct FrsmonFrs(FrsSet);
/// Opaque per-step calibration model.
pub struct FrsmonModel(CalibrationModel);
/// Opaque trust belief over the predictor.
pub struct FrsmonBelief(BeliefState);

macro_rules! check_null {
    ($($p:expr),+) => {
        $(if $p.is_null() {
            return fail(FrsmonStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

unsafe fn gmm<'a>(h: *const FrsmonGmm) -> &'a GmmPrediction {
    &(*h).0
}

/// Builds a mixture from packed arrays:
/// `means` is `k * 2` doubles (x, y per mode), `covs` is `k * 4` doubles
/// (row-major 2x2 per mode), `weights` is `k` doubles summing to 1.
/// `horizon_step` is the 1-based prediction step the mixture belongs to.
///
/// # Safety
/// The array pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn frsmon_gmm_new(
    means: *const f64,
    covs: *const f64,
    weights: *const f64,
    k: usize,
    horizon_step: usize,
    out: *mut *mut FrsmonGmm,
) -> FrsmonStatus {
    check_null!(means, covs, weights, out);
    if k == 0 {
        return fail(FrsmonStatus::InvalidArgument, "k must be positive");
    }
    let means = std::slice::from_raw_parts(means, k * 2);
    let covs = std::slice::from_raw_parts(covs, k * 4);
    let weights = std::slice::from_raw_parts(weights, k);
    let mut modes = Vec::with_capacity(k);
    for i in 0..k {
        let m = [means[2 * i], means[2 * i + 1]];
        let c = [
            [covs[4 * i], covs[4 * i + 1]],
            [covs[4 * i + 2], covs[4 * i + 3]],
        ];
        match GaussianMode::new(m, c) {
            Ok(mode) => modes.push(mode),
            Err(e) => return fail(FrsmonStatus::InvalidArgument, e),
        }
    }
    match GmmPrediction::new(modes, weights.to_vec(), horizon_step) {
        Ok(g) => {
            *out = Box::into_raw(Box::new(FrsmonGmm(g)));
            FrsmonStatus::Ok
        }
        Err(e) => fail(FrsmonStatus::InvalidArgument, e),
    }
}

/// # Safety
/// `handle` must come from `frsmon_gmm_new` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn frsmon_gmm_free(handle: *mut FrsmonGmm) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Solves for the per-mode squared-Mahalanobis levels covering mass `tau`.
///
/// # Safety
/// `handle` must be a live mixture handle.
#[no_mangle]
pub unsafe extern "C" fn frsmon_solve_levels(
    handle: *const FrsmonGmm,
    tau: f64,
    out: *mut *mut FrsmonLevels,
) -> FrsmonStatus {
    check_null!(handle, out);
    match solve_levels(gmm(handle), tau) {
        Ok(sol) => {
            *out = Box::into_raw(Box::new(FrsmonLevels(sol)));
            FrsmonStatus::Ok
        }
        Err(e) => fail(FrsmonStatus::SolveFailed, e),
    }
}

/// Number of levels in a solution.
///
/// # Safety
/// `handle` must be a live levels handle.
#[no_mangle]
pub unsafe extern "C" fn frsmon_levels_len(handle: *const FrsmonLevels) -> usize {
    if handle.is_null() {
        0
    } else {
        (*handle).0.levels.len()
    }
}

/// Copies the levels into `out` (capacity `len`) and reports the objective
/// (total ellipse area) and achieved probability mass. Any of the output
/// pointers may be null to skip that field.
///
/// # Safety
/// `handle` must be live; `out` must have capacity for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn frsmon_levels_get(
    handle: *const FrsmonLevels,
    out: *mut f64,
    len: usize,
    objective: *mut f64,
    achieved_mass: *mut f64,
) -> FrsmonStatus {
    check_null!(handle);
    let sol = &(*handle).0;
    if !out.is_null() {
        if len < sol.levels.len() {
            return fail(FrsmonStatus::InvalidArgument, "output buffer too small");
        }
        std::ptr::copy_nonoverlapping(sol.levels.as_ptr(), out, sol.levels.len());
    }
    if !objective.is_null() {
        *objective = sol.objective;
    }
    if !achieved_mass.is_null() {
        *achieved_mass = sol.achieved_mass;
    }
    FrsmonStatus::Ok
}

/// # Safety
/// `handle` must come from `frsmon_solve_levels` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn frsmon_levels_free(handle: *mut FrsmonLevels) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Builds the reachable set at a given scale (1.0 = uncalibrated; pass the
/// calibrated eta for the step to get the conformalized set).
///
/// # Safety
/// Both handles must be live and refer to the same mixture.
#[no_mangle]
pub unsafe extern "C" fn frsmon_build_frs(
    handle: *const FrsmonGmm,
    levels: *const FrsmonLevels,
    scale: f64,
    out: *mut *mut FrsmonFrs,
) -> FrsmonStatus {
    check_null!(handle, levels, out);
    if !(scale > 0.0) {
        return fail(FrsmonStatus::InvalidArgument, "scale must be positive");
    }
    let frs = build_frs(gmm(handle), &(*levels).0, scale);
    *out = Box::into_raw(Box::new(FrsmonFrs(frs)));
    FrsmonStatus::Ok
}

/// Point-membership test. Writes 1 into `out` when (x, y) is inside.
///
/// # Safety
/// `handle` must be a live set handle.
#[no_mangle]
pub unsafe extern "C" fn frsmon_frs_contains(
    handle: *const FrsmonFrs,
    x: f64,
    y: f64,
    out: *mut i32,
) -> FrsmonStatus {
    check_null!(handle, out);
    *out = (*handle).0.contains([x, y]) as i32;
    FrsmonStatus::Ok
}

/// # Safety
/// `handle` must come from `frsmon_build_frs` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn frsmon_frs_free(handle: *mut FrsmonFrs) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Nonconformity score of a ground-truth point against a solved mixture:
/// the minimum over modes of squared Mahalanobis distance divided by the
/// mode's level.
///
/// # Safety
/// Both handles must be live and refer to the same mixture.
#[no_mangle]
pub unsafe extern "C" fn frsmon_nonconformity(
    handle: *const FrsmonGmm,
    levels: *const FrsmonLevels,
    x: f64,
    y: f64,
    out: *mut f64,
) -> FrsmonStatus {
    check_null!(handle, levels, out);
    match nonconformity(gmm(handle), &(*levels).0, [x, y]) {
        Ok(score) => {
            *out = score;
            FrsmonStatus::Ok
        }
        Err(e) => fail(FrsmonStatus::InvalidArgument, e),
    }
}

/// Loads a calibration model from a JSON file produced by the CLI.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn frsmon_model_load(
    path: *const c_char,
    out: *mut *mut FrsmonModel,
) -> FrsmonStatus {
    check_null!(path, out);
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(e) => return fail(FrsmonStatus::IoFailed, e),
    };
    match CalibrationModel::load(Path::new(path)) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(FrsmonModel(m)));
            FrsmonStatus::Ok
        }
        Err(e) => fail(FrsmonStatus::IoFailed, e),
    }
}

/// Calibrated scale for a 1-based horizon step.
///
/// # Safety
/// `handle` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn frsmon_model_eta(
    handle: *const FrsmonModel,
    step: usize,
    out: *mut f64,
) -> FrsmonStatus {
    check_null!(handle, out);
    match (*handle).0.eta(step) {
        Ok(eta) => {
            *out = eta;
            FrsmonStatus::Ok
        }
        Err(e) => fail(FrsmonStatus::CalibrationFailed, e),
    }
}

/// # Safety
/// `handle` must come from `frsmon_model_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn frsmon_model_free(handle: *mut FrsmonModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Creates a two-point trust belief over covariance scales
/// `beta_low < beta_high`, starting uniform.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn frsmon_belief_new(
    beta_low: f64,
    beta_high: f64,
    out: *mut *mut FrsmonBelief,
) -> FrsmonStatus {
    check_null!(out);
    match init_belief(beta_low, beta_high) {
        Ok(b) => {
            *out = Box::into_raw(Box::new(FrsmonBelief(b)));
            FrsmonStatus::Ok
        }
        Err(e) => fail(FrsmonStatus::InvalidArgument, e),
    }
}

/// Updates the belief in place with an observed position against the one-step
/// forecast it was predicted by, at calibrated scale `eta`.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn frsmon_belief_update(
    handle: *mut FrsmonBelief,
    x: f64,
    y: f64,
    prediction: *const FrsmonGmm,
    eta: f64,
) -> FrsmonStatus {
    check_null!(handle, prediction);
    if !(eta > 0.0) {
        return fail(FrsmonStatus::InvalidArgument, "eta must be positive");
    }
    (*handle).0 = update_belief(&(*handle).0, [x, y], gmm(prediction), eta);
    FrsmonStatus::Ok
}

/// Posterior mean of the trust scale; below the fallback threshold the
/// caller should switch to a conservative reachable set.
///
/// # Safety
/// `handle` must be a live belief handle.
#[no_mangle]
pub unsafe extern "C" fn frsmon_belief_beta_hat(
    handle: *const FrsmonBelief,
    out: *mut f64,
) -> FrsmonStatus {
    check_null!(handle, out);
    *out = beta_hat(&(*handle).0);
    FrsmonStatus::Ok
}

/// # Safety
/// `handle` must come from `frsmon_belief_new` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn frsmon_belief_free(handle: *mut FrsmonBelief) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Membership test against the kinematic worst-case disc for an agent at
/// (x0, y0) with the given heading and speed, after `t` seconds, under
/// acceleration bound `a_max` and speed cap `v_max`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn frsmon_worst_case_contains(
    x0: f64,
    y0: f64,
    heading: f64,
    speed: f64,
    t: f64,
    a_max: f64,
    v_max: f64,
    qx: f64,
    qy: f64,
    out: *mut i32,
) -> FrsmonStatus {
    check_null!(out);
    if !(t >= 0.0 && a_max >= 0.0 && v_max >= 0.0 && speed >= 0.0) {
        return fail(
            FrsmonStatus::InvalidArgument,
            "t, speed, a_max and v_max must be nonnegative",
        );
    }
    let state = AgentKinematicState {
        position: [x0, y0],
        heading,
        speed,
    };
    *out = worst_case_frs(&state, t, a_max, v_max).contains([qx, qy]) as i32;
    FrsmonStatus::Ok
}

#[cfg(test)]
mod tests {
    use super::*;

    unsafe fn unit_gmm() -> *mut FrsmonGmm {
        let means = [0.0, 0.0];
        let covs = [1.0, 0.0, 0.0, 1.0];
        let weights = [1.0];
        let mut h = std::ptr::null_mut();
        assert_eq!(
            frsmon_gmm_new(means.as_ptr(), covs.as_ptr(), weights.as_ptr(), 1, 1, &mut h),
            FrsmonStatus::Ok
        );
        h
    }

    #[test]
    fn solve_and_membership_round_trip() {
        unsafe {
            let g = unit_gmm();
            let mut sol = std::ptr::null_mut();
            assert_eq!(frsmon_solve_levels(g, 0.95, &mut sol), FrsmonStatus::Ok);
            assert_eq!(frsmon_levels_len(sol), 1);
            let mut level = [0.0f64];
            let (mut obj, mut mass) = (0.0, 0.0);
            assert_eq!(
                frsmon_levels_get(sol, level.as_mut_ptr(), 1, &mut obj, &mut mass),
                FrsmonStatus::Ok
            );
            // Single isotropic mode: c = -2 ln(1 - tau).
            assert!((level[0] - (-2.0 * 0.05f64.ln())).abs() < 1e-9);
            assert!((mass - 0.95).abs() < 1e-6);

            let mut frs = std::ptr::null_mut();
            assert_eq!(frsmon_build_frs(g, sol, 1.0, &mut frs), FrsmonStatus::Ok);
            let mut inside = -1;
            assert_eq!(frsmon_frs_contains(frs, 0.0, 0.0, &mut inside), FrsmonStatus::Ok);
            assert_eq!(inside, 1);
            assert_eq!(frsmon_frs_contains(frs, 10.0, 0.0, &mut inside), FrsmonStatus::Ok);
            assert_eq!(inside, 0);

            let mut score = 0.0;
            assert_eq!(frsmon_nonconformity(g, sol, 0.0, 0.0, &mut score), FrsmonStatus::Ok);
            assert_eq!(score, 0.0);

            frsmon_frs_free(frs);
            frsmon_levels_free(sol);
            frsmon_gmm_free(g);
        }
    }

    #[test]
    fn belief_drops_under_biased_observations() {
        unsafe {
            let g = unit_gmm();
            let mut b = std::ptr::null_mut();
            assert_eq!(frsmon_belief_new(0.3, 1.0, &mut b), FrsmonStatus::Ok);
            let mut bh = 0.0;
            frsmon_belief_beta_hat(b, &mut bh);
            assert!((bh - 0.65).abs() < 1e-12);
            for _ in 0..20 {
                assert_eq!(frsmon_belief_update(b, 4.0, 0.0, g, 1.0), FrsmonStatus::Ok);
            }
            frsmon_belief_beta_hat(b, &mut bh);
            assert!(bh < 0.75);
            frsmon_belief_free(b);
            frsmon_gmm_free(g);
        }
    }

    #[test]
    fn worst_case_disc_query() {
        unsafe {
            let mut inside = -1;
            let st = frsmon_worst_case_contains(0.0, 0.0, 0.0, 5.0, 1.0, 4.0, 15.0, 3.0, 0.0, &mut inside);
            assert_eq!(st, FrsmonStatus::Ok);
            assert_eq!(inside, 1);
            frsmon_worst_case_contains(0.0, 0.0, 0.0, 5.0, 1.0, 4.0, 15.0, 20.0, 0.0, &mut inside);
            assert_eq!(inside, 0);
        }
    }

    #[test]
    fn errors_set_status_and_message() {
        unsafe {
            let mut h = std::ptr::null_mut();
            let st = frsmon_gmm_new(
                std::ptr::null(),
                std::ptr::null(),
                std::ptr::null(),
                1,
                1,
                &mut h,
            );
            assert_eq!(st, FrsmonStatus::NullPointer);
            assert!(!frsmon_last_error().is_null());

            let g = unit_gmm();
            let mut sol = std::ptr::null_mut();
            assert_eq!(frsmon_solve_levels(g, 1.5, &mut sol), FrsmonStatus::SolveFailed);
            let msg = CStr::from_ptr(frsmon_last_error()).to_str().unwrap();
            assert!(!msg.is_empty());
            frsmon_gmm_free(g);
        }
    }
}
