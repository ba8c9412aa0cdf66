//! C bindings for building MDPs, solving set-valued policies and querying them.
//!
//! Every fallible call returns an [`SvpStatus`]. On failure the message is
//! available from [`svp_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use svp_core::env::EnvSpec;
use svp_core::metrics::compute_metrics;
use svp_core::solve::{evaluate_values, value_iteration, DEFAULT_TOLERANCE};
use svp_core::svp::{solve_policy, Algorithm};
use svp_core::{SetValuedPolicy, SvpError, TabularMdp};

/// Opaque MDP handle.
pub struct SvpMdp(TabularMdp);

/// Opaque set-valued policy handle.
pub struct SvpPolicy(SetValuedPolicy);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidMdp = 4,
    InvalidPolicy = 5,
    NoFixedPoint = 6,
    NotDag = 7,
    NotConverged = 8,
    BufferTooSmall = 9,
    Io = 10,
    Panic = 11,
    Internal = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(SvpStatus, String);

impl From<SvpError> for Failure {
    fn from(e: SvpError) -> Self {
        let status = match &e {
            SvpError::InvalidMdp(_) | SvpError::Stochastic { .. } => SvpStatus::InvalidMdp,
            SvpError::InvalidPolicy(_) => SvpStatus::InvalidPolicy,
            SvpError::NoFixedPoint(_) => SvpStatus::NoFixedPoint,
            SvpError::NotDag(_) => SvpStatus::NotDag,
            SvpError::NotConverged { .. } => SvpStatus::NotConverged,
            SvpError::Io(_) => SvpStatus::Io,
            SvpError::Internal(_) => SvpStatus::Internal,
            _ => SvpStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> SvpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside svp");
            SvpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SvpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(SvpStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> FfiResult {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn fill(out: *mut f64, len: usize, values: &[f64]) -> FfiResult {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if len < values.len() {
        return Err(Failure(SvpStatus::BufferTooSmall, format!("buffer holds {len} values, {} needed", values.len())));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn state_in(mdp: &TabularMdp, s: usize) -> FfiResult {
    if s < mdp.state_count() {
        Ok(())
    } else {
        Err(Failure(SvpStatus::InvalidArgument, format!("state {s} out of range")))
    }
}

/// Message of the last failed call on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn svp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Build an environment from a JSON spec such as `{"kind":"chain","k":5,"seed":0,"gamma":0.9}`.
///
/// # Safety
/// `spec_json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svp_mdp_from_env_json(spec_json: *const c_char, out: *mut *mut SvpMdp) -> SvpStatus {
    guard(|| {
        let spec: EnvSpec = serde_json::from_str(text(spec_json, "spec_json")?)
            .map_err(|e| Failure(SvpStatus::InvalidArgument, e.to_string()))?;
        let mdp = spec.build()?;
        write(out, Box::into_raw(Box::new(SvpMdp(mdp))), "out")
    })
}

/// Build an MDP from its full JSON description.
///
/// # Safety
/// `mdp_json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svp_mdp_from_json(mdp_json: *const c_char, out: *mut *mut SvpMdp) -> SvpStatus {
    guard(|| {
        let mdp = TabularMdp::from_json(text(mdp_json, "mdp_json")?)?;
        write(out, Box::into_raw(Box::new(SvpMdp(mdp))), "out")
    })
}

/// # Safety
/// `mdp` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn svp_mdp_free(mdp: *mut SvpMdp) {
    if !mdp.is_null() {
        drop(Box::from_raw(mdp));
    }
}

/// # Safety
/// `mdp` must be a live handle; the out pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn svp_mdp_shape(
    mdp: *const SvpMdp,
    states: *mut usize,
    actions: *mut usize,
    gamma: *mut f64,
) -> SvpStatus {
    guard(|| {
        let mdp = &handle(mdp, "mdp")?.0;
        if !states.is_null() {
            states.write(mdp.state_count());
        }
        if !actions.is_null() {
            actions.write(mdp.action_count());
        }
        if !gamma.is_null() {
            gamma.write(mdp.gamma());
        }
        Ok(())
    })
}

/// Write `V*` into `v_out`, which must hold at least `len >= state count` values.
///
/// # Safety
/// `mdp` must be a live handle and `v_out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn svp_value_iteration(mdp: *const SvpMdp, v_out: *mut f64, len: usize) -> SvpStatus {
    guard(|| {
        let mdp = &handle(mdp, "mdp")?.0;
        let (_, v) = value_iteration(mdp, DEFAULT_TOLERANCE)?;
        fill(v_out, len, &v.0)
    })
}

/// Solve with an algorithm name such as `near-greedy-vi` or `conservative`.
///
/// # Safety
/// `mdp` must be a live handle, `algo` a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svp_solve(
    mdp: *const SvpMdp,
    algo: *const c_char,
    zeta: f64,
    out: *mut *mut SvpPolicy,
) -> SvpStatus {
    guard(|| {
        let mdp = &handle(mdp, "mdp")?.0;
        let algo = Algorithm::parse(text(algo, "algo")?)?;
        let solved = solve_policy(mdp, algo, zeta)?;
        write(out, Box::into_raw(Box::new(SvpPolicy(solved.policy))), "out")
    })
}

/// # Safety
/// `json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svp_policy_from_json(json: *const c_char, out: *mut *mut SvpPolicy) -> SvpStatus {
    guard(|| {
        let policy = SetValuedPolicy::from_json(text(json, "json")?)?;
        write(out, Box::into_raw(Box::new(SvpPolicy(policy))), "out")
    })
}

/// # Safety
/// `policy` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn svp_policy_free(policy: *mut SvpPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Bit `a` of `bits_out` is set when action `a` belongs to the set at `state`.
///
/// # Safety
/// `policy` must be a live handle and `bits_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svp_policy_set(policy: *const SvpPolicy, state: usize, bits_out: *mut u64) -> SvpStatus {
    guard(|| {
        let policy = &handle(policy, "policy")?.0;
        if state >= policy.state_count() {
            return Err(Failure(SvpStatus::InvalidArgument, format!("state {state} out of range")));
        }
        write(bits_out, policy.set(state).bits(), "bits_out")
    })
}

/// # Safety
/// `policy` must be a live handle and `states_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svp_policy_state_count(policy: *const SvpPolicy, states_out: *mut usize) -> SvpStatus {
    guard(|| {
        let policy = &handle(policy, "policy")?.0;
        write(states_out, policy.state_count(), "states_out")
    })
}

/// Worst-case values `V^pi` of `policy` on `mdp`.
///
/// # Safety
/// Both handles must be live and `v_out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn svp_evaluate(
    mdp: *const SvpMdp,
    policy: *const SvpPolicy,
    v_out: *mut f64,
    len: usize,
) -> SvpStatus {
    guard(|| {
        let mdp = &handle(mdp, "mdp")?.0;
        let policy = &handle(policy, "policy")?.0;
        policy.validate_for(mdp)?;
        let v = evaluate_values(mdp, policy, DEFAULT_TOLERANCE)?;
        fill(v_out, len, &v.0)
    })
}

/// Average set size over non-terminal states and `min V^pi / V*` over states
/// with positive `V*`. The ratio is NaN when no state qualifies.
///
/// # Safety
/// Both handles must be live; the out pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn svp_policy_metrics(
    mdp: *const SvpMdp,
    policy: *const SvpPolicy,
    average_size: *mut f64,
    worst_ratio: *mut f64,
) -> SvpStatus {
    guard(|| {
        let mdp = &handle(mdp, "mdp")?.0;
        let policy = &handle(policy, "policy")?.0;
        policy.validate_for(mdp)?;
        let (_, v) = value_iteration(mdp, DEFAULT_TOLERANCE)?;
        let m = compute_metrics(mdp, policy, &v.0)?;
        if !average_size.is_null() {
            average_size.write(m.average_policy_size_nonterminal);
        }
        if !worst_ratio.is_null() {
            worst_ratio.write(m.worst_case_ratio.unwrap_or(f64::NAN));
        }
        Ok(())
    })
}

/// Does the set at `state` contain `action`.
///
/// # Safety
/// `policy` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svp_policy_contains(
    policy: *const SvpPolicy,
    state: usize,
    action: usize,
    out: *mut bool,
) -> SvpStatus {
    guard(|| {
        let policy = &handle(policy, "policy")?.0;
        if state >= policy.state_count() || action >= policy.action_count() {
            return Err(Failure(SvpStatus::InvalidArgument, format!("({state}, {action}) out of range")));
        }
        write(out, policy.contains(state, action), "out")
    })
}

/// Serialize a policy. Release the string with [`svp_string_free`].
///
/// # Safety
/// `policy` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svp_policy_to_json(policy: *const SvpPolicy, out: *mut *mut c_char) -> SvpStatus {
    guard(|| {
        let policy = &handle(policy, "policy")?.0;
        let s = CString::new(policy.to_json()).map_err(|e| Failure(SvpStatus::Internal, e.to_string()))?;
        write(out, s.into_raw(), "out")
    })
}

/// Serialize an MDP. Release the string with [`svp_string_free`].
///
/// # Safety
/// `mdp` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svp_mdp_to_json(mdp: *const SvpMdp, out: *mut *mut c_char) -> SvpStatus {
    guard(|| {
        let mdp = &handle(mdp, "mdp")?.0;
        let s = CString::new(mdp.to_json()).map_err(|e| Failure(SvpStatus::Internal, e.to_string()))?;
        write(out, s.into_raw(), "out")
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn svp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Checks a state index against an MDP.
///
/// # Safety
/// `mdp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn svp_mdp_is_terminal(mdp: *const SvpMdp, state: usize, out: *mut bool) -> SvpStatus {
    guard(|| {
        let mdp = &handle(mdp, "mdp")?.0;
        state_in(mdp, state)?;
        write(out, mdp.is_terminal(state), "out")
    })
}
