//! Exercises the C surface exactly as a foreign caller would: through raw
//! pointers and status codes, never through the underlying crate.

use std::ffi::{c_char, CStr};
use std::ptr;

use mmpc_ffi::{
    mmpc_last_error, mmpc_rate, mmpc_simulate, mmpc_string_free, mmpc_structural_audit,
    mmpc_summary_alpha, mmpc_summary_coded_per_stage, mmpc_summary_d, mmpc_summary_free,
    mmpc_summary_l, mmpc_summary_min_field, mmpc_summary_new, mmpc_summary_rounds, mmpc_version,
    MmpcRateKind, MmpcRunStats, MmpcStatus, MmpcSummary,
};

fn last_error() -> String {
    let needed = mmpc_last_error(ptr::null_mut(), 0);
    let mut buf = vec![0u8; needed + 1];
    mmpc_last_error(buf.as_mut_ptr() as *mut c_char, buf.len());
    String::from_utf8_lossy(&buf[..needed]).into_owned()
}

fn rate(handle: *const MmpcSummary, kind: MmpcRateKind) -> (u64, u64) {
    let (mut num, mut den) = (0u64, 0u64);
    assert_eq!(mmpc_rate(handle, kind, &mut num, &mut den), MmpcStatus::Ok);
    (num, den)
}

#[test]
fn golden_summary_through_the_abi() {
    let mut handle: *mut MmpcSummary = ptr::null_mut();
    assert_eq!(mmpc_summary_new(5, 3, 2, 2, &mut handle), MmpcStatus::Ok);
    assert!(!handle.is_null());

    assert_eq!(mmpc_summary_l(handle), 68);
    assert_eq!(mmpc_summary_d(handle), 184);
    assert_eq!(mmpc_summary_rounds(handle), 4);
    let alpha: Vec<u64> = (1..=4).map(|i| mmpc_summary_alpha(handle, i)).collect();
    assert_eq!(alpha, vec![12, 5, 2, 1]);
    let coded: Vec<u64> = (1..=4)
        .map(|i| mmpc_summary_coded_per_stage(handle, i))
        .collect();
    assert_eq!(coded, vec![3, 8, 7, 2]);
    assert_eq!(mmpc_summary_alpha(handle, 0), 0);
    assert_eq!(mmpc_summary_alpha(handle, 5), 0);
    assert_eq!(mmpc_summary_min_field(handle), 18);

    assert_eq!(rate(handle, MmpcRateKind::R2), (17, 23));
    assert_eq!(rate(handle, MmpcRateKind::R1), (17, 28));
    assert_eq!(rate(handle, MmpcRateKind::Upper), (4, 5));
    assert_eq!(rate(handle, MmpcRateKind::Gap), (92, 85));

    mmpc_summary_free(handle);
}

#[test]
fn nulls_and_bad_params_are_reported() {
    assert_eq!(
        mmpc_summary_new(5, 3, 2, 2, ptr::null_mut()),
        MmpcStatus::NullArg
    );

    let mut handle: *mut MmpcSummary = ptr::null_mut();
    assert_eq!(
        mmpc_summary_new(5, 3, 4, 2, &mut handle),
        MmpcStatus::BadParams
    );
    assert!(handle.is_null());
    assert!(!last_error().is_empty());

    let null: *const MmpcSummary = ptr::null();
    assert_eq!(mmpc_summary_l(null), 0);
    assert_eq!(mmpc_summary_d(null), 0);
    assert_eq!(mmpc_summary_rounds(null), 0);
    let (mut num, mut den) = (0u64, 0u64);
    assert_eq!(
        mmpc_rate(null, MmpcRateKind::R2, &mut num, &mut den),
        MmpcStatus::NullArg
    );

    mmpc_summary_free(ptr::null_mut());
    mmpc_string_free(ptr::null_mut());
}

#[test]
fn simulate_golden_roundtrip() {
    let mut stats = MmpcRunStats::default();
    assert_eq!(
        mmpc_simulate(5, 3, 2, 2, 19, 7, ptr::null(), 0, &mut stats),
        MmpcStatus::Ok
    );
    assert_eq!(stats.l, 68);
    assert_eq!(stats.download, 184);
    assert_eq!(stats.expected, 184);
    assert_eq!((stats.rate_num, stats.rate_den), (17, 23));

    // Explicit demand on the two dependent messages, automatic field.
    let demand = [3u32, 4];
    assert_eq!(
        mmpc_simulate(5, 3, 2, 2, 0, 11, demand.as_ptr(), demand.len(), &mut stats),
        MmpcStatus::Ok
    );
    assert_eq!(stats.download, stats.expected);
}

#[test]
fn simulate_rejects_bad_requests() {
    let mut stats = MmpcRunStats::default();
    assert_eq!(
        mmpc_simulate(5, 3, 2, 2, 7, 1, ptr::null(), 0, &mut stats),
        MmpcStatus::BadParams
    );
    assert!(last_error().contains("field size"));

    let demand = [1u32];
    assert_eq!(
        mmpc_simulate(5, 3, 2, 2, 19, 1, demand.as_ptr(), demand.len(), &mut stats),
        MmpcStatus::BadParams
    );

    let twice = [2u32, 2];
    assert_eq!(
        mmpc_simulate(5, 3, 2, 2, 19, 1, twice.as_ptr(), twice.len(), &mut stats),
        MmpcStatus::BadParams
    );

    assert_eq!(
        mmpc_simulate(5, 3, 2, 2, 19, 1, ptr::null(), 0, ptr::null_mut()),
        MmpcStatus::NullArg
    );
}

#[test]
fn audit_hands_back_passing_json() {
    let mut json: *mut c_char = ptr::null_mut();
    assert_eq!(
        mmpc_structural_audit(5, 3, 2, 2, 0, 3, &mut json),
        MmpcStatus::Ok
    );
    assert!(!json.is_null());
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    mmpc_string_free(json);

    let reports: serde_json::Value = serde_json::from_str(&text).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 4);
    let names: Vec<&str> = reports
        .iter()
        .map(|r| r["check"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        vec![
            "subset-coverage",
            "index-structure",
            "index-disjointness",
            "redundancy-rank"
        ]
    );
    assert!(reports.iter().all(|r| r["pass"].as_bool().unwrap()));
}

#[test]
fn version_and_header_stay_in_sync() {
    let version = unsafe { CStr::from_ptr(mmpc_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));

    let header = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/mmpc.h"
    ))
    .unwrap();
    for symbol in [
        "mmpc_last_error",
        "mmpc_version",
        "mmpc_summary_new",
        "mmpc_summary_free",
        "mmpc_summary_l",
        "mmpc_summary_d",
        "mmpc_summary_rounds",
        "mmpc_summary_alpha",
        "mmpc_summary_coded_per_stage",
        "mmpc_summary_min_field",
        "mmpc_rate",
        "mmpc_simulate",
        "mmpc_structural_audit",
        "mmpc_string_free",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}");
    }
}
