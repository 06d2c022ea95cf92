//! C interface to the Burst Market platform.
//!
//! A [`BmPlatform`] is an opaque handle owning a platform driven by a
//! simulated clock. Every fallible call returns a [`BmStatus`]; on failure the
//! error code and message for the calling thread are available from
//! [`bm_last_error_code`] and [`bm_last_error_message`].
//!
//! Strings handed out by this library must be released with
//! [`bm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use burst_market::command::{self, Command};
use burst_market::econometrics::{self, IncomeScenario, Recoup};
use burst_market::kernel::{
    compute_charge, split_commission, AccountId, CommissionBps, Money, Rate, SimClock, Timestamp,
};
use burst_market::platform::{Config, Platform, PlatformError};
use serde_json::Value;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    ConfigInvalid = 4,
    /// The platform refused the operation; see the last error code.
    Rejected = 5,
    StorageFailure = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// Opaque platform handle.
pub struct BmPlatform {
    platform: Platform,
    clock: SimClock,
}

struct LastError {
    code: CString,
    message: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<LastError>> = const { RefCell::new(None) };
}

fn set_error(code: &str, message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    let err = LastError {
        code: CString::new(code.replace('\0', " ")).unwrap_or_default(),
        message: CString::new(message).unwrap_or_default(),
    };
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(err));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn fail(status: BmStatus, code: &str, message: impl Into<String>) -> BmStatus {
    set_error(code, message);
    status
}

fn platform_failure(e: &PlatformError) -> BmStatus {
    let status = match e {
        PlatformError::Persistence(_) => BmStatus::StorageFailure,
        _ => BmStatus::Rejected,
    };
    fail(status, e.code(), e.to_string())
}

/// Runs `f`, turning a panic into [`BmStatus::Panic`].
fn guard(f: impl FnOnce() -> BmStatus) -> BmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(BmStatus::Panic, "Panic", "internal panic"),
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, BmStatus> {
    if s.is_null() {
        return Err(fail(BmStatus::NullPointer, "NullPointer", "string argument is null"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| fail(BmStatus::InvalidUtf8, "InvalidUtf8", e.to_string()))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

fn bps(v: u32) -> Result<CommissionBps, BmStatus> {
    CommissionBps::new(v).map_err(|e| fail(BmStatus::InvalidArgument, "InvalidArgument", e.to_string()))
}

/// Creates a platform from a JSON config. `config_json` may be null for
/// defaults. The clock starts at 2030-01-01T00:00:00Z and moves only through
/// [`bm_platform_advance`].
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string. `out` must be a
/// valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn bm_platform_new(config_json: *const c_char, out: *mut *mut BmPlatform) -> BmStatus {
    guard(|| {
        if out.is_null() {
            return fail(BmStatus::NullPointer, "NullPointer", "out is null");
        }
        *out = ptr::null_mut();
        let config = if config_json.is_null() {
            Config::default()
        } else {
            let text = match read_str(config_json) {
                Ok(t) => t,
                Err(s) => return s,
            };
            match Config::from_json(text) {
                Ok(c) => c,
                Err(e) => return fail(BmStatus::ConfigInvalid, "ConfigInvalid", e.to_string()),
            }
        };
        let clock = SimClock::new(Timestamp::SIM_EPOCH);
        let platform = match Platform::open(config, Arc::new(clock.clone())) {
            Ok(p) => p,
            Err(e) => return platform_failure(&e),
        };
        *out = Box::into_raw(Box::new(BmPlatform { platform, clock }));
        BmStatus::Ok
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must be null or a pointer from [`bm_platform_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bm_platform_free(handle: *mut BmPlatform) {
    if !handle.is_null() {
        let mut h = Box::from_raw(handle);
        let _ = h.platform.flush();
    }
}

/// Runs one command. `request_json` is an object with an `action` key, the
/// action's arguments and an optional `actor` account id. On success the
/// result is written to `out_json` as a JSON string.
///
/// # Safety
/// `handle` must be a live handle, `request_json` a NUL-terminated string and
/// `out_json` a valid pointer to writable storage for one string pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_platform_execute(
    handle: *mut BmPlatform,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> BmStatus {
    guard(|| {
        if handle.is_null() || out_json.is_null() {
            return fail(BmStatus::NullPointer, "NullPointer", "handle or out_json is null");
        }
        *out_json = ptr::null_mut();
        let text = match read_str(request_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let mut request: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => return fail(BmStatus::InvalidJson, "InvalidJson", e.to_string()),
        };
        let actor = match request.as_object_mut().map(|o| o.remove("actor")) {
            None => return fail(BmStatus::InvalidJson, "InvalidJson", "request is not an object"),
            Some(None) | Some(Some(Value::Null)) => None,
            Some(Some(Value::String(s))) => Some(AccountId::new(s)),
            Some(Some(_)) => return fail(BmStatus::InvalidJson, "InvalidJson", "actor must be a string"),
        };
        let cmd: Command = match serde_json::from_value(request) {
            Ok(c) => c,
            Err(e) => return fail(BmStatus::InvalidJson, "InvalidJson", e.to_string()),
        };
        let h = &mut *handle;
        match command::execute(&mut h.platform, actor.as_ref(), &cmd) {
            Ok(v) => {
                *out_json = into_c_string(v.to_string());
                BmStatus::Ok
            }
            Err(e) => platform_failure(&e),
        }
    })
}

/// Moves the simulated clock forward and fires any due timeouts.
///
/// # Safety
/// `handle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bm_platform_advance(handle: *mut BmPlatform, seconds: u64) -> BmStatus {
    guard(|| {
        if handle.is_null() {
            return fail(BmStatus::NullPointer, "NullPointer", "handle is null");
        }
        let h = &mut *handle;
        h.clock.advance(seconds);
        match h.platform.tick() {
            Ok(_) => BmStatus::Ok,
            Err(e) => platform_failure(&e),
        }
    })
}

/// Current simulated time as Unix seconds.
///
/// # Safety
/// `handle` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bm_platform_now(handle: *const BmPlatform, out: *mut i64) -> BmStatus {
    guard(|| {
        if handle.is_null() || out.is_null() {
            return fail(BmStatus::NullPointer, "NullPointer", "handle or out is null");
        }
        *out = (*handle).platform.now().unix();
        BmStatus::Ok
    })
}

/// Hex sha256 of the platform state.
///
/// # Safety
/// `handle` must be a live handle and `out_hex` writable.
#[no_mangle]
pub unsafe extern "C" fn bm_platform_digest(handle: *const BmPlatform, out_hex: *mut *mut c_char) -> BmStatus {
    guard(|| {
        if handle.is_null() || out_hex.is_null() {
            return fail(BmStatus::NullPointer, "NullPointer", "handle or out_hex is null");
        }
        *out_hex = into_c_string((*handle).platform.digest());
        BmStatus::Ok
    })
}

/// Charge in cents for `seconds` at a per-minute rate, rounded half up.
#[no_mangle]
pub extern "C" fn bm_compute_charge(per_minute_cents: u64, seconds: u64) -> u64 {
    compute_charge(Rate::per_minute(per_minute_cents), seconds).amount()
}

/// Splits a charge into the platform's commission and the seller's credit.
///
/// # Safety
/// `out_commission` and `out_credit` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bm_split_commission(
    charge_cents: u64,
    commission_bps: u32,
    out_commission: *mut u64,
    out_credit: *mut u64,
) -> BmStatus {
    guard(|| {
        if out_commission.is_null() || out_credit.is_null() {
            return fail(BmStatus::NullPointer, "NullPointer", "output pointer is null");
        }
        let bps = match bps(commission_bps) {
            Ok(b) => b,
            Err(s) => return s,
        };
        let (commission, credit) = split_commission(Money::cents(charge_cents), bps);
        *out_commission = commission.amount();
        *out_credit = credit.amount();
        BmStatus::Ok
    })
}

fn income(per_minute: u64, minutes_per_day: u64, days: u64, commission_bps: u32) -> Result<IncomeScenario, BmStatus> {
    Ok(IncomeScenario {
        per_minute: Money::cents(per_minute),
        minutes_per_day,
        days,
        commission_bps: bps(commission_bps)?,
    })
}

/// Seller net in cents over `days` days.
///
/// # Safety
/// `out_cents` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bm_annual_income(
    per_minute_cents: u64,
    minutes_per_day: u64,
    days: u64,
    commission_bps: u32,
    out_cents: *mut u64,
) -> BmStatus {
    guard(|| {
        if out_cents.is_null() {
            return fail(BmStatus::NullPointer, "NullPointer", "out_cents is null");
        }
        match income(per_minute_cents, minutes_per_day, days, commission_bps) {
            Ok(s) => {
                *out_cents = econometrics::annual_income(&s).amount();
                BmStatus::Ok
            }
            Err(status) => status,
        }
    })
}

/// Whole days of net income needed to cover `loan_cents`. When daily net is
/// zero the loan is never recouped: `out_never` is set and `out_days` is 0.
///
/// # Safety
/// `out_days` and `out_never` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bm_days_to_recoup(
    loan_cents: u64,
    per_minute_cents: u64,
    minutes_per_day: u64,
    commission_bps: u32,
    out_days: *mut u64,
    out_never: *mut bool,
) -> BmStatus {
    guard(|| {
        if out_days.is_null() || out_never.is_null() {
            return fail(BmStatus::NullPointer, "NullPointer", "output pointer is null");
        }
        let s = match income(per_minute_cents, minutes_per_day, 1, commission_bps) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match econometrics::days_to_recoup(Money::cents(loan_cents), &s) {
            Recoup::Days(d) => {
                *out_days = d;
                *out_never = false;
            }
            Recoup::Never => {
                *out_days = 0;
                *out_never = true;
            }
        }
        BmStatus::Ok
    })
}

fn last_error_field(pick: fn(&LastError) -> *const c_char) -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), pick))
}

/// Code of the last failure on this thread, such as `InsufficientFunds`, or
/// null. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn bm_last_error_code() -> *const c_char {
    last_error_field(|e| e.code.as_ptr())
}

/// Message of the last failure on this thread, or null.
#[no_mangle]
pub extern "C" fn bm_last_error_message() -> *const c_char {
    last_error_field(|e| e.message.as_ptr())
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
