//! C ABI over the mmpc crate: plan metrics and rates behind an opaque
//! handle, one-shot simulation and structural audit, integer status codes,
//! and a thread-local error message. The matching header lives in
//! `include/mmpc.h`; every `mmpc_*` symbol here must appear there.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use mmpc::analytics::{rate_point, RatePoint};
use mmpc::audit::structural_checks;
use mmpc::gf::Gf;
use mmpc::model::{build_library, relabel, DemandSet, MessageLibrary, RandomTape};
use mmpc::planner::{
    assign_signs, build_query_plan, min_field_size, plan_summary, shuffle_plan, stage_counts,
    PlanSummary,
};
use mmpc::protocol::{run_protocol, ProtocolError};
use num::{BigRational, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Result of every fallible call. Inspect `mmpc_last_error` on non-zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmpcStatus {
    Ok = 0,
    NullArg = 1,
    BadParams = 2,
    VerifyFailed = 3,
    Internal = 4,
}

/// Selector for [`mmpc_rate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmpcRateKind {
    /// Best baseline built from single-message schemes.
    R1 = 0,
    /// The multi-message scheme's rate P*L/D.
    R2 = 1,
    /// Capacity upper bound.
    Upper = 2,
    /// Upper bound over the better of R1 and R2.
    Gap = 3,
}

/// Measurements of one simulated run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MmpcRunStats {
    /// Symbols per message.
    pub l: u64,
    /// Symbols actually downloaded.
    pub download: u64,
    /// Download the plan promises; equals `download` on success.
    pub expected: u64,
    pub rate_num: u64,
    pub rate_den: u64,
}

/// Opaque: closed-form plan measurements plus the analytic rates.
pub struct MmpcSummary {
    summary: PlanSummary,
    point: RatePoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    LAST_ERROR.with(|e| *e.borrow_mut() = bytes);
}

fn fail(status: MmpcStatus, msg: impl Into<String>) -> MmpcStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> MmpcStatus) -> MmpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(MmpcStatus::Internal, "caught a panic at the ABI boundary"),
    }
}

/// Copy the most recent error message into `buf` (NUL-terminated, truncated
/// to `cap` bytes) and return the full message length. `buf` may be null to
/// query the length alone.
#[no_mangle]
pub extern "C" fn mmpc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Static version string; do not free.
#[no_mangle]
pub extern "C" fn mmpc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Smallest usable odd prime for the given plan.
fn auto_field(summary: &PlanSummary) -> u64 {
    let mut q = min_field_size(summary).max(3);
    if q % 2 == 0 {
        q += 1;
    }
    while Gf::new(q).is_err() {
        q += 2;
    }
    q
}

/// Random full-rank dependent rows, reproducible from the seed.
fn draw_rows(m: usize, k: usize, q: u64, seed: u64) -> Result<MessageLibrary, MmpcStatus> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0x666669);
    for _ in 0..200 {
        let rows: Vec<Vec<u64>> = (0..m - k)
            .map(|_| (0..k).map(|_| rng.gen_range(0..q)).collect())
            .collect();
        if let Ok(lib) = build_library(m, k, q, &rows) {
            return Ok(lib);
        }
    }
    Err(fail(
        MmpcStatus::BadParams,
        format!("no full-rank dependent rows found over F_{q}"),
    ))
}

struct Instance {
    lib: MessageLibrary,
    demand: DemandSet,
    q: u64,
}

/// Shared front end of `mmpc_simulate` and `mmpc_structural_audit`:
/// validate the shape, pick the field, draw dependent rows, fix the demand.
fn build_instance(
    m: u32,
    k: u32,
    p: u32,
    n: u32,
    q: u64,
    seed: u64,
    demand: *const u32,
    demand_len: usize,
) -> Result<Instance, MmpcStatus> {
    let (m, k, p, n) = (m as usize, k as usize, p as usize, n as usize);
    let summary = plan_summary(m, k, p, n).map_err(|e| fail(MmpcStatus::BadParams, e.to_string()))?;
    let q = if q == 0 { auto_field(&summary) } else { q };
    if q < min_field_size(&summary) {
        return Err(fail(
            MmpcStatus::BadParams,
            format!("field size {q} below the widest stage's requirement"),
        ));
    }
    Gf::new(q).map_err(|e| fail(MmpcStatus::BadParams, e.to_string()))?;

    let lib = draw_rows(m, k, q, seed)?;
    let indices: Vec<usize> = if demand.is_null() {
        (0..p).collect()
    } else {
        if demand_len != p {
            return Err(fail(
                MmpcStatus::BadParams,
                format!("demand_len {demand_len} disagrees with P={p}"),
            ));
        }
        unsafe { std::slice::from_raw_parts(demand, demand_len) }
            .iter()
            .map(|&i| i as usize)
            .collect()
    };
    let demand =
        DemandSet::new(indices, &lib).map_err(|e| fail(MmpcStatus::BadParams, e.to_string()))?;
    relabel(&lib, &demand).map_err(|e| fail(MmpcStatus::BadParams, e.to_string()))?;
    Ok(Instance { lib, demand, q })
}

fn rational_parts(r: &BigRational) -> Result<(u64, u64), MmpcStatus> {
    match (r.numer().to_u64(), r.denom().to_u64()) {
        (Some(num), Some(den)) => Ok((num, den)),
        _ => Err(fail(MmpcStatus::Internal, "rate does not fit in u64/u64")),
    }
}

/// Closed-form measurements and rates for (M, K, P, N). On success the
/// handle must be released with `mmpc_summary_free`.
#[no_mangle]
pub extern "C" fn mmpc_summary_new(
    m: u32,
    k: u32,
    p: u32,
    n: u32,
    out: *mut *mut MmpcSummary,
) -> MmpcStatus {
    guard(|| {
        if out.is_null() {
            return fail(MmpcStatus::NullArg, "out is null");
        }
        let (m, k, p, n) = (m as usize, k as usize, p as usize, n as usize);
        let summary = match plan_summary(m, k, p, n) {
            Ok(s) => s,
            Err(e) => return fail(MmpcStatus::BadParams, e.to_string()),
        };
        let point = match rate_point(m, k, p, n) {
            Ok(pt) => pt,
            Err(e) => return fail(MmpcStatus::BadParams, e.to_string()),
        };
        let handle = Box::new(MmpcSummary { summary, point });
        unsafe { *out = Box::into_raw(handle) };
        MmpcStatus::Ok
    })
}

#[no_mangle]
pub extern "C" fn mmpc_summary_free(handle: *mut MmpcSummary) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Symbols per message; 0 on a null handle.
#[no_mangle]
pub extern "C" fn mmpc_summary_l(handle: *const MmpcSummary) -> u64 {
    unsafe { handle.as_ref() }.map_or(0, |h| h.summary.l)
}

/// Total downloaded symbols; 0 on a null handle.
#[no_mangle]
pub extern "C" fn mmpc_summary_d(handle: *const MmpcSummary) -> u64 {
    unsafe { handle.as_ref() }.map_or(0, |h| h.summary.d)
}

/// Number of rounds M-P+1; 0 on a null handle.
#[no_mangle]
pub extern "C" fn mmpc_summary_rounds(handle: *const MmpcSummary) -> u32 {
    unsafe { handle.as_ref() }.map_or(0, |h| h.summary.alpha.len() as u32)
}

/// Stages per server in round `i` (1-based); 0 out of range.
#[no_mangle]
pub extern "C" fn mmpc_summary_alpha(handle: *const MmpcSummary, i: u32) -> u64 {
    unsafe { handle.as_ref() }
        .and_then(|h| h.summary.alpha.get((i as usize).wrapping_sub(1)))
        .copied()
        .unwrap_or(0)
}

/// Coded downloads per stage in round `i` (1-based); 0 out of range.
#[no_mangle]
pub extern "C" fn mmpc_summary_coded_per_stage(handle: *const MmpcSummary, i: u32) -> u64 {
    unsafe { handle.as_ref() }
        .and_then(|h| h.summary.r_by_round.get((i as usize).wrapping_sub(1)))
        .copied()
        .unwrap_or(0)
}

/// Smallest field size the widest stage tolerates; 0 on a null handle.
#[no_mangle]
pub extern "C" fn mmpc_summary_min_field(handle: *const MmpcSummary) -> u64 {
    unsafe { handle.as_ref() }.map_or(0, |h| min_field_size(&h.summary))
}

/// One of the exact rates as a reduced fraction.
#[no_mangle]
pub extern "C" fn mmpc_rate(
    handle: *const MmpcSummary,
    kind: MmpcRateKind,
    num: *mut u64,
    den: *mut u64,
) -> MmpcStatus {
    guard(|| {
        let Some(h) = (unsafe { handle.as_ref() }) else {
            return fail(MmpcStatus::NullArg, "handle is null");
        };
        if num.is_null() || den.is_null() {
            return fail(MmpcStatus::NullArg, "num or den is null");
        }
        let rate = match kind {
            MmpcRateKind::R1 => &h.point.r1,
            MmpcRateKind::R2 => &h.point.r2,
            MmpcRateKind::Upper => &h.point.r_upper,
            MmpcRateKind::Gap => &h.point.gap,
        };
        match rational_parts(rate) {
            Ok((a, b)) => {
                unsafe {
                    *num = a;
                    *den = b;
                }
                MmpcStatus::Ok
            }
            Err(status) => status,
        }
    })
}

/// Run the full protocol once. Dependent rows are drawn from the seed;
/// `q` may be 0 to pick the smallest usable prime; `demand` may be null for
/// messages 0..P-1 (0-based labels otherwise). Decode or download mismatch
/// comes back as `VerifyFailed`.
#[no_mangle]
pub extern "C" fn mmpc_simulate(
    m: u32,
    k: u32,
    p: u32,
    n: u32,
    q: u64,
    seed: u64,
    demand: *const u32,
    demand_len: usize,
    out: *mut MmpcRunStats,
) -> MmpcStatus {
    guard(|| {
        if out.is_null() {
            return fail(MmpcStatus::NullArg, "out is null");
        }
        let inst = match build_instance(m, k, p, n, q, seed, demand, demand_len) {
            Ok(i) => i,
            Err(status) => return status,
        };
        let run = match run_protocol(&inst.lib, &inst.demand, n as usize, inst.q, seed) {
            Ok(r) => r,
            Err(e) => {
                let status = match &e {
                    ProtocolError::Model(_) | ProtocolError::Plan(_) => MmpcStatus::BadParams,
                    _ => MmpcStatus::VerifyFailed,
                };
                return fail(status, e.to_string());
            }
        };
        let (rate_num, rate_den) = match rational_parts(&run.summary.r2) {
            Ok(parts) => parts,
            Err(status) => return status,
        };
        unsafe {
            *out = MmpcRunStats {
                l: run.summary.l,
                download: run.transcript.total,
                expected: run.summary.d,
                rate_num,
                rate_den,
            };
        }
        MmpcStatus::Ok
    })
}

/// Run the structural privacy checks on a freshly built plan and hand back
/// the report as a JSON array (free with `mmpc_string_free`). Any failing
/// check yields `VerifyFailed` with the report still written.
#[no_mangle]
pub extern "C" fn mmpc_structural_audit(
    m: u32,
    k: u32,
    p: u32,
    n: u32,
    q: u64,
    seed: u64,
    out_json: *mut *mut c_char,
) -> MmpcStatus {
    guard(|| {
        if out_json.is_null() {
            return fail(MmpcStatus::NullArg, "out_json is null");
        }
        let inst = match build_instance(m, k, p, n, q, seed, std::ptr::null(), 0) {
            Ok(i) => i,
            Err(status) => return status,
        };
        let rlib = match relabel(&inst.lib, &inst.demand) {
            Ok(r) => r,
            Err(e) => return fail(MmpcStatus::BadParams, e.to_string()),
        };
        let counts = match stage_counts(m as usize, p as usize, n as usize) {
            Ok(c) => c,
            Err(e) => return fail(MmpcStatus::BadParams, e.to_string()),
        };
        let mut plan = match build_query_plan(&rlib, &counts, n as usize) {
            Ok(pl) => pl,
            Err(e) => return fail(MmpcStatus::Internal, e.to_string()),
        };
        let mut tape = RandomTape::from_seed(seed, plan.l);
        assign_signs(&mut plan, &mut tape);
        shuffle_plan(&mut plan, &mut tape);

        let reports = structural_checks(&plan, &rlib);
        let failed: Vec<&str> = reports
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.check.as_str())
            .collect();
        let json = match serde_json::to_string(&reports) {
            Ok(j) => j,
            Err(e) => return fail(MmpcStatus::Internal, e.to_string()),
        };
        let cstr = match CString::new(json) {
            Ok(c) => c,
            Err(e) => return fail(MmpcStatus::Internal, e.to_string()),
        };
        unsafe { *out_json = cstr.into_raw() };
        if failed.is_empty() {
            MmpcStatus::Ok
        } else {
            fail(
                MmpcStatus::VerifyFailed,
                format!("failing checks: {}", failed.join(", ")),
            )
        }
    })
}

/// Release a string returned by this library.
#[no_mangle]
pub extern "C" fn mmpc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
