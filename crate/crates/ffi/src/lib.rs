//! C ABI over `umc-core`.
//!
//! Every object crosses the boundary as an opaque handle. Constructors write the
//! handle through an out pointer and each type has a matching `_free`.
//! Functions return a `UmcStatus`; on failure `umc_last_error` holds a message
//! for the calling thread. Byte and string getters follow one pattern: the
//! required size (including the trailing NUL for strings) is written to
//! `out_len`, and `UMC_STATUS_BUFFER_TOO_SMALL` is returned when `buf` is null
//! or `cap` is smaller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use umc_core::simulator::{init_params, run_episode_with, EpisodeReport, RunOptions, ScenarioConfig};
use umc_core::tensor::ParamSet;
use umc_core::wire::{self, SparsePacket};
use umc_core::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Decode = 5,
    Shape = 6,
    Param = 7,
    Io = 8,
    Runtime = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Scenario configuration.
pub struct UmcConfig {
    inner: ScenarioConfig,
}

/// Network weights.
pub struct UmcParams {
    inner: ParamSet,
}

/// Outputs of one simulated episode.
pub struct UmcReport {
    inner: EpisodeReport,
}

/// A decoded wire packet.
pub struct UmcPacket {
    inner: SparsePacket,
}

/// Header fields of a packet.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UmcPacketInfo {
    pub sender_id: u16,
    pub receiver_id: u16,
    pub timestep: u32,
    pub resolution_level: u8,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub entries: u64,
    pub feature_scalars: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> UmcStatus {
    match e {
        Error::Config(_) | Error::Skip { .. } => UmcStatus::Config,
        Error::Parse { .. } => UmcStatus::Parse,
        Error::Decode(_) => UmcStatus::Decode,
        Error::Shape(_) | Error::Encode(_) => UmcStatus::Shape,
        Error::Param(_) => UmcStatus::Param,
        Error::Io(_) => UmcStatus::Io,
        _ => UmcStatus::Runtime,
    }
}

fn fail(status: UmcStatus, msg: impl Into<String>) -> UmcStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), UmcStatus>) -> UmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            UmcStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(UmcStatus::Panic, "internal panic"),
    }
}

fn core<T>(r: umc_core::Result<T>) -> Result<T, UmcStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, UmcStatus> {
    p.as_ref().ok_or_else(|| fail(UmcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, UmcStatus> {
    p.as_mut().ok_or_else(|| fail(UmcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, UmcStatus> {
    if p.is_null() {
        return Err(fail(UmcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(UmcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), UmcStatus> {
    let slot = as_mut(out, "out")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies `src` (plus a NUL when asked) if it fits; always reports the size needed.
unsafe fn copy_raw(src: &[u8], nul: bool, buf: *mut u8, cap: usize, out_len: *mut usize) -> Result<(), usize> {
    let need = src.len() + nul as usize;
    if let Some(l) = out_len.as_mut() {
        *l = need;
    }
    if buf.is_null() || cap < need {
        return Err(need);
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    if nul {
        *buf.add(src.len()) = 0;
    }
    Ok(())
}

unsafe fn copy_out(src: &[u8], nul: bool, buf: *mut u8, cap: usize, out_len: *mut usize) -> Result<(), UmcStatus> {
    copy_raw(src, nul, buf, cap, out_len)
        .map_err(|need| fail(UmcStatus::BufferTooSmall, format!("need {need} bytes, have {cap}")))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn umc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message; empty after a success.
/// Does not itself change the stored message.
///
/// # Safety
/// `buf` must be writable for `cap` bytes; `out_len` may be null.
#[no_mangle]
pub unsafe extern "C" fn umc_last_error(buf: *mut c_char, cap: usize, out_len: *mut usize) -> UmcStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_raw(msg.as_bytes(), true, buf.cast(), cap, out_len) {
        Ok(()) => UmcStatus::Ok,
        Err(_) => UmcStatus::BufferTooSmall,
    }
}

/// Default scenario.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umc_config_default(out: *mut *mut UmcConfig) -> UmcStatus {
    guard(|| put(out, UmcConfig { inner: ScenarioConfig::default() }))
}

/// Scenario from TOML text; unset keys keep their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umc_config_from_toml(toml: *const c_char, out: *mut *mut UmcConfig) -> UmcStatus {
    guard(|| {
        let text = as_str(toml, "toml")?;
        put(out, UmcConfig { inner: core(ScenarioConfig::from_toml_str(text))? })
    })
}

/// Serializes the scenario as TOML.
///
/// # Safety
/// `cfg` must be a live handle; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn umc_config_to_toml(
    cfg: *const UmcConfig,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> UmcStatus {
    guard(|| {
        let text = as_ref(cfg, "cfg")?.inner.to_toml_string();
        copy_out(text.as_bytes(), true, buf.cast(), cap, out_len)
    })
}

/// Sets the self and cross keep fractions, each in (0, 1].
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn umc_config_set_deltas(cfg: *mut UmcConfig, delta_s: f64, delta_c: f64) -> UmcStatus {
    guard(|| {
        let cfg = as_mut(cfg, "cfg")?;
        let next = ScenarioConfig { delta_s, delta_c, ..cfg.inner.clone() };
        core(next.validate())?;
        cfg.inner = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn umc_config_set_seed(cfg: *mut UmcConfig, seed: u64) -> UmcStatus {
    guard(|| {
        as_mut(cfg, "cfg")?.inner.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn umc_config_set_timesteps(cfg: *mut UmcConfig, timesteps: u32) -> UmcStatus {
    guard(|| {
        let cfg = as_mut(cfg, "cfg")?;
        let next = ScenarioConfig { timesteps: timesteps as usize, ..cfg.inner.clone() };
        core(next.validate())?;
        cfg.inner = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn umc_config_free(cfg: *mut UmcConfig) {
    free(cfg)
}

/// Seeded weights for every layer the scenario uses.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umc_params_init(cfg: *const UmcConfig, seed: u64, out: *mut *mut UmcParams) -> UmcStatus {
    guard(|| put(out, UmcParams { inner: core(init_params(&as_ref(cfg, "cfg")?.inner, seed))? }))
}

/// Reads a `.umcp` parameter file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umc_params_load(path: *const c_char, out: *mut *mut UmcParams) -> UmcStatus {
    guard(|| {
        let path = as_str(path, "path")?;
        put(out, UmcParams { inner: core(ParamSet::load(path))? })
    })
}

/// Writes a `.umcp` parameter file.
///
/// # Safety
/// `params` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn umc_params_save(params: *const UmcParams, path: *const c_char) -> UmcStatus {
    guard(|| {
        let params = as_ref(params, "params")?;
        core(params.inner.save(as_str(path, "path")?))
    })
}

/// # Safety
/// `params` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn umc_params_free(params: *mut UmcParams) {
    free(params)
}

/// Runs one episode. `selection = 0` sends every cell without queries.
/// `threads = 0` uses every available core.
///
/// # Safety
/// `cfg` and `params` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umc_run_episode(
    cfg: *const UmcConfig,
    params: *const UmcParams,
    selection: i32,
    threads: u32,
    out: *mut *mut UmcReport,
) -> UmcStatus {
    guard(|| {
        let cfg = as_ref(cfg, "cfg")?;
        let params = as_ref(params, "params")?;
        let opts = RunOptions { selection: selection != 0, keep_packets: false, threads: threads as usize };
        put(out, UmcReport { inner: core(run_episode_with(&cfg.inner, &params.inner, &opts))? })
    })
}

/// Mean over agents of the log of transmitted scalars.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umc_report_communication_volume(report: *const UmcReport, out: *mut f64) -> UmcStatus {
    guard(|| {
        let v = core(as_ref(report, "report")?.inner.communication_volume())?;
        *as_mut(out, "out")? = v;
        Ok(())
    })
}

/// Mean feature scalars per feature packet; 0 when nothing was sent.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umc_report_mean_feature_scalars(report: *const UmcReport, out: *mut f64) -> UmcStatus {
    guard(|| {
        let v = as_ref(report, "report")?.inner.mean_feature_scalars_per_transfer().unwrap_or(0.0);
        *as_mut(out, "out")? = v;
        Ok(())
    })
}

unsafe fn report_text(
    report: *const UmcReport,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
    text: fn(&EpisodeReport) -> String,
) -> UmcStatus {
    guard(|| copy_out(text(&as_ref(report, "report")?.inner).as_bytes(), true, buf.cast(), cap, out_len))
}

/// Detections as JSON lines, one record per (frame, agent).
///
/// # Safety
/// `report` must be a live handle; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn umc_report_detections_jsonl(
    report: *const UmcReport,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> UmcStatus {
    report_text(report, buf, cap, out_len, EpisodeReport::detections_jsonl)
}

/// Ground truth as JSON lines.
///
/// # Safety
/// `report` must be a live handle; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn umc_report_ground_truth_jsonl(
    report: *const UmcReport,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> UmcStatus {
    report_text(report, buf, cap, out_len, EpisodeReport::ground_truth_jsonl)
}

/// Metrics as `metric,iou,value` CSV.
///
/// # Safety
/// `report` must be a live handle; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn umc_report_metrics_csv(
    report: *const UmcReport,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> UmcStatus {
    report_text(report, buf, cap, out_len, EpisodeReport::metrics_csv)
}

/// Per-transfer communication ledger as CSV.
///
/// # Safety
/// `report` must be a live handle; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn umc_report_ledger_csv(
    report: *const UmcReport,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> UmcStatus {
    report_text(report, buf, cap, out_len, EpisodeReport::ledger_csv)
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn umc_report_free(report: *mut UmcReport) {
    free(report)
}

/// Decodes packet bytes. Malformed input yields `UMC_STATUS_DECODE`.
///
/// # Safety
/// `bytes` must be readable for `len` bytes and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umc_packet_decode(bytes: *const u8, len: usize, out: *mut *mut UmcPacket) -> UmcStatus {
    guard(|| {
        if bytes.is_null() && len > 0 {
            return Err(fail(UmcStatus::NullPointer, "bytes is null"));
        }
        let slice = if len == 0 { &[][..] } else { std::slice::from_raw_parts(bytes, len) };
        let packet = wire::decode(slice).map_err(|e| fail(UmcStatus::Decode, e.to_string()))?;
        put(out, UmcPacket { inner: packet })
    })
}

/// # Safety
/// `packet` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umc_packet_info(packet: *const UmcPacket, out: *mut UmcPacketInfo) -> UmcStatus {
    guard(|| {
        let p = &as_ref(packet, "packet")?.inner;
        *as_mut(out, "out")? = UmcPacketInfo {
            sender_id: p.sender_id(),
            receiver_id: p.receiver_id(),
            timestep: p.timestep(),
            resolution_level: p.resolution_level(),
            height: p.height() as u32,
            width: p.width() as u32,
            channels: p.channels() as u32,
            entries: p.entries().len() as u64,
            feature_scalars: p.feature_scalars(),
        };
        Ok(())
    })
}

/// Densifies the packet into `buf` as `channels * height * width` floats,
/// channel-major, unsent cells zero. `cap` counts floats.
///
/// # Safety
/// `packet` must be a live handle; `buf` writable for `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn umc_packet_dense(
    packet: *const UmcPacket,
    buf: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> UmcStatus {
    guard(|| {
        let p = &as_ref(packet, "packet")?.inner;
        let (h, w, c) = (p.height(), p.width(), p.channels());
        let need = c * h * w;
        if let Some(l) = out_len.as_mut() {
            *l = need;
        }
        if buf.is_null() || cap < need {
            return Err(fail(UmcStatus::BufferTooSmall, format!("need {need} floats, have {cap}")));
        }
        let out = std::slice::from_raw_parts_mut(buf, need);
        out.fill(0.0);
        for e in p.entries() {
            for (ch, &v) in e.values.iter().enumerate() {
                out[ch * h * w + e.row as usize * w + e.col as usize] = v;
            }
        }
        Ok(())
    })
}

/// Re-encodes the packet to its canonical bytes.
///
/// # Safety
/// `packet` must be a live handle; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn umc_packet_encode(
    packet: *const UmcPacket,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> UmcStatus {
    guard(|| {
        let bytes = core(wire::encode(&as_ref(packet, "packet")?.inner))?;
        copy_out(&bytes, false, buf, cap, out_len)
    })
}

/// # Safety
/// `packet` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn umc_packet_free(packet: *mut UmcPacket) {
    free(packet)
}
