use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use umc_ffi::*;

fn last_error() -> String {
    let mut len = 0usize;
    unsafe { umc_last_error(ptr::null_mut(), 0, &mut len) };
    let mut buf = vec![0 as std::ffi::c_char; len];
    assert_eq!(unsafe { umc_last_error(buf.as_mut_ptr(), len, &mut len) }, UmcStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn text(f: unsafe extern "C" fn(*const UmcReport, *mut std::ffi::c_char, usize, *mut usize) -> UmcStatus, r: *const UmcReport) -> String {
    let mut len = 0usize;
    assert_eq!(unsafe { f(r, ptr::null_mut(), 0, &mut len) }, UmcStatus::BufferTooSmall);
    let mut buf = vec![0u8; len];
    assert_eq!(unsafe { f(r, buf.as_mut_ptr().cast(), len, &mut len) }, UmcStatus::Ok);
    assert_eq!(buf.pop(), Some(0));
    String::from_utf8(buf).unwrap()
}

#[test]
fn episode_through_the_abi_matches_core() {
    let toml = CString::new("timesteps = 2\nn_objects = 4\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { umc_config_from_toml(toml.as_ptr(), &mut cfg) }, UmcStatus::Ok);
    assert_eq!(unsafe { umc_config_set_deltas(cfg, 0.5, 0.5) }, UmcStatus::Ok);
    let mut params = ptr::null_mut();
    assert_eq!(unsafe { umc_params_init(cfg, 7, &mut params) }, UmcStatus::Ok);
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { umc_run_episode(cfg, params, 1, 1, &mut report) }, UmcStatus::Ok);

    let mut cv = 0.0;
    assert_eq!(unsafe { umc_report_communication_volume(report, &mut cv) }, UmcStatus::Ok);
    let dets = text(umc_report_detections_jsonl, report);
    let ledger = text(umc_report_ledger_csv, report);
    assert!(text(umc_report_metrics_csv, report).starts_with("metric,iou,value"));
    assert_eq!(text(umc_report_ground_truth_jsonl, report).lines().count(), 8);

    let core_cfg = umc_core::simulator::ScenarioConfig {
        timesteps: 2,
        n_objects: 4,
        delta_s: 0.5,
        delta_c: 0.5,
        ..Default::default()
    };
    let core_params = umc_core::simulator::init_params(&core_cfg, 7).unwrap();
    let direct = umc_core::simulator::run_episode(&core_cfg, &core_params).unwrap();
    assert_eq!(dets, direct.detections_jsonl());
    assert_eq!(ledger, direct.ledger_csv());
    assert_eq!(cv, direct.communication_volume().unwrap());

    unsafe {
        umc_report_free(report);
        umc_params_free(params);
        umc_config_free(cfg);
    }
}

#[test]
fn config_errors_are_reported() {
    let mut cfg = ptr::null_mut();
    let bad = CString::new("n_agents = 0").unwrap();
    assert_eq!(unsafe { umc_config_from_toml(bad.as_ptr(), &mut cfg) }, UmcStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("n_agents"));

    assert_eq!(unsafe { umc_config_default(&mut cfg) }, UmcStatus::Ok);
    assert_eq!(last_error(), "");
    assert_eq!(unsafe { umc_config_set_deltas(cfg, 0.0, 0.5) }, UmcStatus::Config);
    assert_eq!(unsafe { umc_config_set_timesteps(cfg, 0) }, UmcStatus::Config);
    assert_eq!(unsafe { umc_config_set_seed(ptr::null_mut(), 1) }, UmcStatus::NullPointer);
    assert_eq!(unsafe { umc_config_from_toml(ptr::null(), &mut cfg) }, UmcStatus::NullPointer);

    let mut len = 0;
    assert_eq!(unsafe { umc_config_to_toml(cfg, ptr::null_mut(), 0, &mut len) }, UmcStatus::BufferTooSmall);
    let mut buf = vec![0u8; len];
    assert_eq!(unsafe { umc_config_to_toml(cfg, buf.as_mut_ptr().cast(), len, &mut len) }, UmcStatus::Ok);
    let back = CStr::from_bytes_with_nul(&buf).unwrap();
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { umc_config_from_toml(back.as_ptr(), &mut again) }, UmcStatus::Ok);
    unsafe {
        umc_config_free(again);
        umc_config_free(cfg);
        umc_config_free(ptr::null_mut());
    }
}

#[test]
fn params_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.umcp").to_str().unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    let small = CString::new("ladder = \"8x4x4,4x8x8\"\nencoder = \"4:2,8:2,4:2,8:2\"\n").unwrap();
    assert_eq!(unsafe { umc_config_from_toml(small.as_ptr(), &mut cfg) }, UmcStatus::Ok, "{}", last_error());
    let mut params = ptr::null_mut();
    assert_eq!(unsafe { umc_params_init(cfg, 1, &mut params) }, UmcStatus::Ok);
    assert_eq!(unsafe { umc_params_save(params, path.as_ptr()) }, UmcStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { umc_params_load(path.as_ptr(), &mut loaded) }, UmcStatus::Ok);
    let missing = CString::new(dir.path().join("none.umcp").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_ne!(unsafe { umc_params_load(missing.as_ptr(), &mut none) }, UmcStatus::Ok);
    assert!(none.is_null());
    unsafe {
        umc_params_free(loaded);
        umc_params_free(params);
        umc_config_free(cfg);
    }
}

#[test]
fn packets_decode_and_reject() {
    use umc_core::wire::{encode, PacketEntry, SparsePacket};
    let entries = vec![
        PacketEntry { row: 0, col: 1, values: vec![1.5, -2.0] },
        PacketEntry { row: 2, col: 0, values: vec![0.25, 4.0] },
    ];
    let bytes = encode(&SparsePacket::new(3, 1, 9, 1, 3, 2, 2, entries).unwrap()).unwrap();

    let mut p = ptr::null_mut();
    assert_eq!(unsafe { umc_packet_decode(bytes.as_ptr(), bytes.len(), &mut p) }, UmcStatus::Ok);
    let mut info = UmcPacketInfo::default();
    assert_eq!(unsafe { umc_packet_info(p, &mut info) }, UmcStatus::Ok);
    assert_eq!(
        info,
        UmcPacketInfo {
            sender_id: 3,
            receiver_id: 1,
            timestep: 9,
            resolution_level: 1,
            height: 3,
            width: 2,
            channels: 2,
            entries: 2,
            feature_scalars: 4
        }
    );
    let mut dense = vec![f32::NAN; 12];
    let mut n = 0;
    assert_eq!(unsafe { umc_packet_dense(p, dense.as_mut_ptr(), 12, &mut n) }, UmcStatus::Ok);
    assert_eq!(dense, vec![0.0, 1.5, 0.0, 0.0, 0.25, 0.0, 0.0, -2.0, 0.0, 0.0, 4.0, 0.0]);
    assert_eq!(unsafe { umc_packet_dense(p, dense.as_mut_ptr(), 11, &mut n) }, UmcStatus::BufferTooSmall);

    let mut out = vec![0u8; bytes.len()];
    let mut len = 0;
    assert_eq!(unsafe { umc_packet_encode(p, out.as_mut_ptr(), out.len(), &mut len) }, UmcStatus::Ok);
    assert_eq!(out, bytes);
    unsafe { umc_packet_free(p) };

    let mut q = ptr::null_mut();
    assert_eq!(unsafe { umc_packet_decode(bytes.as_ptr(), bytes.len() - 1, &mut q) }, UmcStatus::Decode);
    assert!(last_error().contains("truncated"));
    assert_eq!(unsafe { umc_packet_decode(ptr::null(), 0, &mut q) }, UmcStatus::Decode);
    assert_eq!(unsafe { umc_packet_decode(ptr::null(), 4, &mut q) }, UmcStatus::NullPointer);
    assert!(q.is_null());
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(umc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "umc.h"

int main(void) {
    UmcConfig *cfg = NULL;
    if (umc_config_from_toml("timesteps = 1\nn_objects = 2\n", &cfg) != UMC_STATUS_OK) return 10;
    if (umc_config_set_deltas(cfg, 0.5, 0.5) != UMC_STATUS_OK) return 11;
    UmcParams *params = NULL;
    if (umc_params_init(cfg, 7, &params) != UMC_STATUS_OK) return 12;
    UmcReport *report = NULL;
    if (umc_run_episode(cfg, params, 1, 1, &report) != UMC_STATUS_OK) return 13;
    double cv = 0.0;
    if (umc_report_communication_volume(report, &cv) != UMC_STATUS_OK || cv <= 0.0) return 14;
    size_t len = 0;
    if (umc_report_metrics_csv(report, NULL, 0, &len) != UMC_STATUS_BUFFER_TOO_SMALL) return 15;
    char buf[4096];
    if (len > sizeof buf || umc_report_metrics_csv(report, buf, sizeof buf, &len) != UMC_STATUS_OK) return 16;
    if (strncmp(buf, "metric,iou,value", 16) != 0) return 17;
    UmcPacket *packet = NULL;
    if (umc_packet_decode((const uint8_t *)"UMCX", 4, &packet) != UMC_STATUS_DECODE || packet) return 18;
    printf("%.6f\n", cv);
    umc_report_free(report);
    umc_params_free(params);
    umc_config_free(cfg);
    return 0;
}
"#;

#[test]
fn header_links_from_c() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libumc_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let built = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(built.status.success(), "{}", String::from_utf8_lossy(&built.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let cv: f64 = String::from_utf8(run.stdout).unwrap().trim().parse().unwrap();
    assert!(cv > 0.0);
}
