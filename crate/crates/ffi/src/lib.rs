//! C ABI over `influence-core`.
//!
//! Conventions: every fallible call returns an [`InflStatus`]; on failure
//! `infl_last_error()` describes it until the next failing call on the same
//! thread. Objects are opaque handles created by `*_new`/`*_load` and
//! released by the matching `*_free`. Matrices are row-major `double`
//! arrays; output buffers are caller-allocated with the stated lengths.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use influence_core::envs::EnvSpec;
use influence_core::human::SolvedModel;
use influence_core::inference::{LearnerNet, NetTrack};
use influence_core::lq::{solve_dare, LqProblem, DEFAULT_MAX_ITER, DEFAULT_TOL};
use influence_core::planner::PlannerConfig;
use influence_core::service::{Bias, Condition, Session, Teaching};
use influence_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownEnv = 3,
    DimensionMismatch = 4,
    /// Riccati non-convergence, indefinite policy precision or an
    /// unstable closed loop.
    Numerical = 5,
    MalformedFile = 6,
    Io = 7,
    CheckpointRequired = 8,
    StaleTick = 9,
    SessionEnded = 10,
    Panic = 11,
    Other = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InflBias {
    X = 0,
    Y = 1,
    Free = 2,
}

/// Outcome of one session step in the tabletop plane.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InflTick {
    /// Index of the next step.
    pub tick: u64,
    pub x: [f64; 2],
    pub executed_u: [f64; 2],
    pub u_r: [f64; 2],
    pub action_optimality: f64,
    pub effort: f64,
}

pub struct InflEnv(EnvSpec);
pub struct InflModel(SolvedModel);
pub struct InflNet(Arc<LearnerNet>);
pub struct InflTracker {
    net: Arc<LearnerNet>,
    track: NetTrack,
}
pub struct InflSession(Session);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(InflStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownEnv(_) => InflStatus::UnknownEnv,
            Error::DimensionMismatch(_) | Error::ShapeMismatch { .. } | Error::VariantMismatch(_) => InflStatus::DimensionMismatch,
            Error::NonConvergence { .. } | Error::SingularH | Error::UnstableClosedLoop(_) => InflStatus::Numerical,
            Error::Format(_) | Error::Json(_) => InflStatus::MalformedFile,
            Error::Io(_) => InflStatus::Io,
            Error::CheckpointRequired(_) => InflStatus::CheckpointRequired,
            Error::StaleTick { .. } => InflStatus::StaleTick,
            Error::SessionEnded | Error::SessionNotEnded => InflStatus::SessionEnded,
            _ => InflStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: InflStatus, msg: &str) -> Failure {
    Failure(status, msg.to_string())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> InflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => InflStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            InflStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(fail(InflStatus::NullPointer, "null input array"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize) -> Result<&'a mut [f64], Failure> {
    if ptr.is_null() {
        return Err(fail(InflStatus::NullPointer, "null output array"));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(fail(InflStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| fail(InflStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn handle<'a, T>(ptr: *const T) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| fail(InflStatus::NullPointer, "null handle"))
}

unsafe fn handle_mut<'a, T>(ptr: *mut T) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| fail(InflStatus::NullPointer, "null handle"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(InflStatus::NullPointer, "null output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(fail(InflStatus::DimensionMismatch, &format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn infl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn infl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Solve the DARE for `(A n×n, B n×m, Q n×n, R m×m)`. Writes `P` (n×n)
/// and, when `k_out` is not NULL, the gain `K` (m×n).
///
/// # Safety
/// Array arguments must point to the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn infl_dare_solve(
    a: *const f64,
    b: *const f64,
    q: *const f64,
    r: *const f64,
    n: usize,
    m: usize,
    p_out: *mut f64,
    k_out: *mut f64,
) -> InflStatus {
    guard(|| {
        if n == 0 || m == 0 {
            return Err(fail(InflStatus::InvalidArgument, "dimensions must be positive"));
        }
        let a = DMatrix::from_row_slice(n, n, slice(a, n * n)?);
        let b = DMatrix::from_row_slice(n, m, slice(b, n * m)?);
        let q = DMatrix::from_row_slice(n, n, slice(q, n * n)?);
        let r = DMatrix::from_row_slice(m, m, slice(r, m * m)?);
        let prob = LqProblem::new(a, b, q, r)?;
        let sol = solve_dare(&prob, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let p_out = slice_mut(p_out, n * n)?;
        for (i, v) in p_out.iter_mut().enumerate() {
            *v = sol.p[(i / n, i % n)];
        }
        if !k_out.is_null() {
            let k_out = slice_mut(k_out, m * n)?;
            for (i, v) in k_out.iter_mut().enumerate() {
                *v = sol.k[(i / n, i % n)];
            }
        }
        Ok(())
    })
}

/// Built-in environment by name (`lander`, `arm`, `goal`, `pref`, ...).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infl_env_new(name: *const c_char, out: *mut *mut InflEnv) -> InflStatus {
    guard(|| {
        let env = EnvSpec::by_name(str_arg(name)?)?;
        put(out, InflEnv(env))
    })
}

/// # Safety
/// `env` must come from `infl_env_new` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn infl_env_free(env: *mut InflEnv) {
    free(env)
}

/// State, action and internal-model dimensions.
///
/// # Safety
/// Pointers must be valid; any output may be NULL.
#[no_mangle]
pub unsafe extern "C" fn infl_env_dims(env: *const InflEnv, state: *mut usize, action: *mut usize, theta: *mut usize) -> InflStatus {
    guard(|| {
        let env = &handle(env)?.0;
        for (p, v) in [(state, env.state_dim()), (action, env.action_dim()), (theta, env.theta_dim())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copy the internal model the robot teaches toward.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn infl_env_theta_star(env: *const InflEnv, out: *mut f64, len: usize) -> InflStatus {
    guard(|| {
        let env = &handle(env)?.0;
        check_len(len, env.theta_dim(), "theta")?;
        slice_mut(out, len)?.copy_from_slice(&env.theta_star);
        Ok(())
    })
}

/// One step of the true dynamics from `x` with control `u`, toward the
/// goal selected by `goal_count` reached goals.
///
/// # Safety
/// `x` and `x_out` hold `state` doubles, `u` holds `action` doubles.
#[no_mangle]
pub unsafe extern "C" fn infl_env_step(env: *const InflEnv, x: *const f64, u: *const f64, goal_count: usize, x_out: *mut f64) -> InflStatus {
    guard(|| {
        let env = &handle(env)?.0;
        let (n, m) = (env.state_dim(), env.action_dim());
        let x = DVector::from_column_slice(slice(x, n)?);
        let u = DVector::from_column_slice(slice(u, m)?);
        let next = env.dynamics(&x, &u, env.goal_for(goal_count));
        slice_mut(x_out, n)?.copy_from_slice(next.as_slice());
        Ok(())
    })
}

/// Solve the human's control problem for internal model `theta`.
///
/// # Safety
/// `theta` holds `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infl_model_new(env: *const InflEnv, theta: *const f64, len: usize, out: *mut *mut InflModel) -> InflStatus {
    guard(|| {
        let env = &handle(env)?.0;
        check_len(len, env.theta_dim(), "theta")?;
        let model = SolvedModel::from_vec(env, slice(theta, len)?)?;
        put(out, InflModel(model))
    })
}

/// # Safety
/// `model` must come from `infl_model_new` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn infl_model_free(model: *mut InflModel) {
    free(model)
}

/// Mean human action at state `x`.
///
/// # Safety
/// `x` holds `state` doubles and `u_out` holds `action` doubles.
#[no_mangle]
pub unsafe extern "C" fn infl_model_mean_action(
    model: *const InflModel,
    env: *const InflEnv,
    x: *const f64,
    goal_count: usize,
    u_out: *mut f64,
) -> InflStatus {
    guard(|| {
        let (model, env) = (&handle(model)?.0, &handle(env)?.0);
        let x = DVector::from_column_slice(slice(x, env.state_dim())?);
        let mean = model.policy(env, &x, env.goal_for(goal_count))?.mean();
        slice_mut(u_out, env.action_dim())?.copy_from_slice(mean.as_slice());
        Ok(())
    })
}

/// Log-density of human action `u` at state `x`.
///
/// # Safety
/// `x` holds `state` doubles, `u` holds `action` doubles, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn infl_model_log_prob(
    model: *const InflModel,
    env: *const InflEnv,
    x: *const f64,
    u: *const f64,
    goal_count: usize,
    out: *mut f64,
) -> InflStatus {
    guard(|| {
        let (model, env) = (&handle(model)?.0, &handle(env)?.0);
        let x = DVector::from_column_slice(slice(x, env.state_dim())?);
        let u = DVector::from_column_slice(slice(u, env.action_dim())?);
        let lp = model.policy(env, &x, env.goal_for(goal_count))?.log_prob(&u);
        *handle_mut(out)? = lp;
        Ok(())
    })
}

/// Load a trained learning-dynamics network.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infl_net_load(path: *const c_char, out: *mut *mut InflNet) -> InflStatus {
    guard(|| {
        let net = LearnerNet::load(Path::new(str_arg(path)?))?;
        put(out, InflNet(Arc::new(net)))
    })
}

/// # Safety
/// `net` must come from `infl_net_load` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn infl_net_free(net: *mut InflNet) {
    free(net)
}

/// Start tracking one trajectory. The tracker keeps the network alive.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infl_tracker_new(net: *const InflNet, out: *mut *mut InflTracker) -> InflStatus {
    guard(|| {
        let net = handle(net)?.0.clone();
        let track = net.begin();
        put(out, InflTracker { net, track })
    })
}

/// # Safety
/// `tracker` must come from `infl_tracker_new` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn infl_tracker_free(tracker: *mut InflTracker) {
    free(tracker)
}

/// Feed one observed transition `(x, u_H, x')`.
///
/// # Safety
/// `x`, `x_next` hold `state` doubles and `u_h` holds `action` doubles of
/// the network's environment.
#[no_mangle]
pub unsafe extern "C" fn infl_tracker_push(tracker: *mut InflTracker, x: *const f64, u_h: *const f64, x_next: *const f64) -> InflStatus {
    guard(|| {
        let t = handle_mut(tracker)?;
        let (n, m) = (t.net.env.state_dim(), t.net.env.action_dim());
        let (x, u_h, x_next) = (slice(x, n)?, slice(u_h, m)?, slice(x_next, n)?);
        t.net.push(&mut t.track, x, u_h, x_next);
        Ok(())
    })
}

/// Current estimate `θ̂`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn infl_tracker_theta(tracker: *const InflTracker, out: *mut f64, len: usize) -> InflStatus {
    guard(|| {
        let t = handle(tracker)?;
        check_len(len, t.track.theta.len(), "theta")?;
        slice_mut(out, len)?.copy_from_slice(&t.track.theta);
        Ok(())
    })
}

/// Interactive session on the tabletop arm. `net` may be NULL for
/// no-teaching sessions; `planner_budget_ms` of 0 disables the cap.
///
/// # Safety
/// `net` must be a live handle or NULL; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infl_session_new(
    net: *const InflNet,
    teaching: bool,
    bias: InflBias,
    seed: u64,
    planner_budget_ms: u64,
    out: *mut *mut InflSession,
) -> InflStatus {
    guard(|| {
        let net = net.as_ref().map(|n| n.0.clone());
        let bias = match bias {
            InflBias::X => Bias::X,
            InflBias::Y => Bias::Y,
            InflBias::Free => Bias::Free,
        };
        let strategy = if teaching { Teaching::ActiveTeaching } else { Teaching::NoTeaching };
        let planner = PlannerConfig { budget_ms: (planner_budget_ms > 0).then_some(planner_budget_ms), ..PlannerConfig::default() };
        let session = Session::new(seed, Condition { strategy, bias }, net, planner, seed)?;
        put(out, InflSession(session))
    })
}

/// # Safety
/// `session` must come from `infl_session_new` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn infl_session_free(session: *mut InflSession) {
    free(session)
}

/// Queue the human input for `tick`.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn infl_session_input(session: *mut InflSession, tick: u64, ux: f64, uy: f64) -> InflStatus {
    guard(|| Ok(handle_mut(session)?.0.input(tick, [ux, uy])?))
}

/// Execute one step and describe it.
///
/// # Safety
/// `session` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infl_session_advance(session: *mut InflSession, out: *mut InflTick) -> InflStatus {
    guard(|| {
        let s = handle_mut(session)?.0.advance()?;
        let two = |v: &[f64]| [v[0], v[1]];
        *handle_mut(out)? = InflTick {
            tick: s.tick,
            x: two(&s.x),
            executed_u: two(&s.executed_u),
            u_r: two(&s.u_r),
            action_optimality: s.metrics.action_optimality,
            effort: s.metrics.effort,
        };
        Ok(())
    })
}

/// End the session and return its summary as JSON. Release the string
/// with `infl_string_free`.
///
/// # Safety
/// `session` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infl_session_finish(session: *mut InflSession, out: *mut *mut c_char) -> InflStatus {
    guard(|| {
        let s = &mut handle_mut(session)?.0;
        s.end();
        let json = serde_json::to_string(&s.summary()?).map_err(|e| fail(InflStatus::Other, &e.to_string()))?;
        if out.is_null() {
            return Err(fail(InflStatus::NullPointer, "null output string"));
        }
        *out = CString::new(json).expect("JSON has no NULs").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn infl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
