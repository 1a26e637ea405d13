//! C ABI over `bcmf`.
//!
//! Every function returns a [`BcmfStatus`]; on failure the message is
//! available from [`bcmf_last_error`] on the same thread. Networks are
//! opaque handles created by `bcmf_network_build` / `bcmf_network_load` and
//! released with `bcmf_network_free`.
//!
//! Configs are passed as `key = value` text (the same format as the CLI
//! config files); `NULL` means defaults. Images are `f64` in NCHW order,
//! label maps are `u32` row-major with 255 as the ignore index.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bcmf::bcl::{self, BclConfig};
use bcmf::checkpoint;
use bcmf::config::RunConfig;
use bcmf::labels::{LabelMap, DEFAULT_IGNORE_INDEX};
use bcmf::network::{count_cost, Network};
use bcmf::ops::norm::BnMode;
use bcmf::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcmfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Shape = 4,
    NonFinite = 5,
    InvalidArgument = 6,
    Config = 7,
    LabelOutOfRange = 8,
    Backward = 9,
    BnNotCalibrated = 10,
    MalformedHeader = 11,
    UnsupportedMaxval = 12,
    Truncated = 13,
    Checkpoint = 14,
    DigestMismatch = 15,
    EmptyManifest = 16,
    Diverged = 17,
    Io = 18,
    Panic = 99,
}

impl From<&Error> for BcmfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => BcmfStatus::Shape,
            Error::NonFinite(_) => BcmfStatus::NonFinite,
            Error::InvalidArgument(_) => BcmfStatus::InvalidArgument,
            Error::Config(_) => BcmfStatus::Config,
            Error::LabelOutOfRange { .. } => BcmfStatus::LabelOutOfRange,
            Error::Backward(_) => BcmfStatus::Backward,
            Error::BnNotCalibrated(_) => BcmfStatus::BnNotCalibrated,
            Error::MalformedHeader(_) => BcmfStatus::MalformedHeader,
            Error::UnsupportedMaxval(_) => BcmfStatus::UnsupportedMaxval,
            Error::Truncated { .. } => BcmfStatus::Truncated,
            Error::Checkpoint(_) => BcmfStatus::Checkpoint,
            Error::DigestMismatch { .. } => BcmfStatus::DigestMismatch,
            Error::EmptyManifest(_) => BcmfStatus::EmptyManifest,
            Error::Diverged { .. } => BcmfStatus::Diverged,
            Error::Io { .. } => BcmfStatus::Io,
        }
    }
}

/// Boundary loss settings; see `bcmf_bcl_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BcmfBclConfig {
    pub step: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub nms_window: usize,
    pub keep_fraction: f64,
    pub min_kept: usize,
}

impl From<BcmfBclConfig> for BclConfig {
    fn from(c: BcmfBclConfig) -> Self {
        BclConfig {
            step: c.step,
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            alpha: c.alpha,
            nms_window: c.nms_window,
            keep_fraction: c.keep_fraction,
            min_kept: c.min_kept,
        }
    }
}

/// Opaque network handle.
pub struct BcmfNetwork {
    net: Network,
}

struct Failure(BcmfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BcmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BcmfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BcmfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(BcmfStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(BcmfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn parse_config(p: *const c_char) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if !p.is_null() {
        cfg.apply_text(text(p, "config")?)?;
    }
    Ok(cfg)
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn check_len(have: usize, need: usize, what: &str) -> Result<(), Failure> {
    if have < need {
        return Err(Failure(
            BcmfStatus::BufferTooSmall,
            format!("{what} holds {have} elements, {need} needed"),
        ));
    }
    Ok(())
}

unsafe fn label_maps(p: *const u32, n: usize, h: usize, w: usize, m: usize) -> Result<Vec<LabelMap>, Failure> {
    let all = slice(p, n * h * w, "labels")?;
    all.chunks_exact(h * w)
        .map(|c| LabelMap::new(h, w, m, DEFAULT_IGNORE_INDEX, c.to_vec()).map_err(Failure::from))
        .collect()
}

/// Message of the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next `bcmf_*` call on this thread.
#[no_mangle]
pub extern "C" fn bcmf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default boundary loss settings.
#[no_mangle]
pub extern "C" fn bcmf_bcl_default() -> BcmfBclConfig {
    let d = BclConfig::default();
    BcmfBclConfig {
        step: d.step,
        lambda1: d.lambda1,
        lambda2: d.lambda2,
        alpha: d.alpha,
        nms_window: d.nms_window,
        keep_fraction: d.keep_fraction,
        min_kept: d.min_kept,
    }
}

/// Builds a freshly initialized network.
///
/// # Safety
/// `config` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bcmf_network_build(
    config: *const c_char,
    seed: u64,
    out: *mut *mut BcmfNetwork,
) -> BcmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = parse_config(config)?;
        let net = Network::build(cfg.net, seed)?;
        *out = Box::into_raw(Box::new(BcmfNetwork { net }));
        Ok(())
    })
}

/// Loads a checkpoint written for the network described by `config`.
///
/// # Safety
/// `config` is NULL or NUL-terminated; `path` is NUL-terminated; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bcmf_network_load(
    config: *const c_char,
    path: *const c_char,
    out: *mut *mut BcmfNetwork,
) -> BcmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = parse_config(config)?;
        let path = text(path, "path")?;
        let net = checkpoint::load(Path::new(path), &cfg.net)?;
        *out = Box::into_raw(Box::new(BcmfNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `net` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bcmf_network_save(net: *const BcmfNetwork, path: *const c_char) -> BcmfStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        checkpoint::save(Path::new(text(path, "path")?), &net.net)?;
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `net` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcmf_network_free(net: *mut BcmfNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bcmf_network_num_classes(net: *const BcmfNetwork, out: *mut usize) -> BcmfStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = net.net.config().num_classes;
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `net` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bcmf_network_param_count(net: *const BcmfNetwork, out: *mut u64) -> BcmfStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let n: usize = net
            .net
            .params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| e.tensor.numel())
            .sum();
        *out.as_mut().ok_or_else(|| null("out"))? = n as u64;
        Ok(())
    })
}

/// Runs one training-mode pass over `images` (`[n, 3, h, w]`) to update
/// batch-norm running statistics.
///
/// # Safety
/// `net` is a live handle; `images` holds `n*3*h*w` values.
#[no_mangle]
pub unsafe extern "C" fn bcmf_network_calibrate(
    net: *mut BcmfNetwork,
    images: *const f64,
    n: usize,
    h: usize,
    w: usize,
) -> BcmfStatus {
    guard(|| {
        let net = net.as_mut().ok_or_else(|| null("net"))?;
        let x = Tensor::new([n, 3, h, w], slice(images, n * 3 * h * w, "images")?.to_vec())?;
        net.net.calibrate_bn(&x)?;
        Ok(())
    })
}

/// Logits `[n, M, h, w]` for `images` `[n, 3, h, w]`. `train_mode != 0`
/// uses batch statistics instead of running statistics.
///
/// # Safety
/// `net` is a live handle; `images` holds `n*3*h*w` values; `out` holds
/// `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn bcmf_network_logits(
    net: *const BcmfNetwork,
    images: *const f64,
    n: usize,
    h: usize,
    w: usize,
    train_mode: i32,
    out: *mut f64,
    out_len: usize,
) -> BcmfStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let x = Tensor::new([n, 3, h, w], slice(images, n * 3 * h * w, "images")?.to_vec())?;
        let mode = if train_mode != 0 { BnMode::Train } else { BnMode::Eval };
        let y = net.net.logits(&x, mode)?;
        check_len(out_len, y.numel(), "out")?;
        slice_mut(out, out_len, "out")?[..y.numel()].copy_from_slice(y.data());
        Ok(())
    })
}

/// Per-pixel class ids (`h*w`, row-major) for one `[3, h, w]` image, using
/// eval-mode batch norm and lowest-index tie breaking.
///
/// # Safety
/// `net` is a live handle; `image` holds `3*h*w` values; `labels` holds
/// `labels_len` values.
#[no_mangle]
pub unsafe extern "C" fn bcmf_network_predict(
    net: *const BcmfNetwork,
    image: *const f64,
    h: usize,
    w: usize,
    labels: *mut u32,
    labels_len: usize,
) -> BcmfStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let x = Tensor::new([3, h, w], slice(image, 3 * h * w, "image")?.to_vec())?;
        let pred = bcmf::train::predict(&net.net, &x)?;
        check_len(labels_len, h * w, "labels")?;
        slice_mut(labels, labels_len, "labels")?[..h * w].copy_from_slice(pred.labels());
        Ok(())
    })
}

/// `mean CE + alpha * boundary loss` of raw logits `[n, m, h, w]` against
/// `labels` (`n*h*w`).
///
/// # Safety
/// `logits` holds `n*m*h*w` values, `labels` `n*h*w`, `cfg` and `out` are
/// valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bcmf_total_loss(
    logits: *const f64,
    n: usize,
    m: usize,
    h: usize,
    w: usize,
    labels: *const u32,
    cfg: *const BcmfBclConfig,
    out: *mut f64,
) -> BcmfStatus {
    guard(|| {
        let cfg: BclConfig = (*cfg.as_ref().ok_or_else(|| null("cfg"))?).into();
        let x = Tensor::new([n, m, h, w], slice(logits, n * m * h * w, "logits")?.to_vec())?;
        let gt = label_maps(labels, n, h, w, m)?;
        *out.as_mut().ok_or_else(|| null("out"))? = bcl::total_loss(&x, &gt, &cfg)?;
        Ok(())
    })
}

/// Unweighted boundary loss of softmax probabilities `[n, m, h, w]`.
///
/// # Safety
/// As for `bcmf_total_loss`.
#[no_mangle]
pub unsafe extern "C" fn bcmf_boundary_loss(
    probs: *const f64,
    n: usize,
    m: usize,
    h: usize,
    w: usize,
    labels: *const u32,
    cfg: *const BcmfBclConfig,
    out: *mut f64,
) -> BcmfStatus {
    guard(|| {
        let cfg: BclConfig = (*cfg.as_ref().ok_or_else(|| null("cfg"))?).into();
        let p = Tensor::new([n, m, h, w], slice(probs, n * m * h * w, "probs")?.to_vec())?;
        let gt = label_maps(labels, n, h, w, m)?;
        *out.as_mut().ok_or_else(|| null("out"))? = bcl::boundary_loss(&p, &gt, &cfg)?;
        Ok(())
    })
}

/// Parameter and FLOP count of the configured network on an `h`×`w` input.
///
/// # Safety
/// `config` is NULL or NUL-terminated; `params` and `flops` are writable.
#[no_mangle]
pub unsafe extern "C" fn bcmf_count_cost(
    config: *const c_char,
    h: usize,
    w: usize,
    params: *mut u64,
    flops: *mut u64,
) -> BcmfStatus {
    guard(|| {
        let cfg = parse_config(config)?;
        let c = count_cost(&cfg.net, h, w)?;
        *params.as_mut().ok_or_else(|| null("params"))? = c.params;
        *flops.as_mut().ok_or_else(|| null("flops"))? = c.flops;
        Ok(())
    })
}

/// Synthetic sample `index` of the scene described by the `data.*` keys:
/// image `[3, H, W]` into `image`, labels `H*W` into `labels`.
///
/// # Safety
/// `config` is NULL or NUL-terminated; the buffers hold the given lengths.
#[no_mangle]
pub unsafe extern "C" fn bcmf_generate_sample(
    config: *const c_char,
    index: u64,
    image: *mut f64,
    image_len: usize,
    labels: *mut u32,
    labels_len: usize,
) -> BcmfStatus {
    guard(|| {
        let cfg = parse_config(config)?;
        let s = cfg.data.sample(index)?;
        check_len(image_len, s.image.numel(), "image")?;
        check_len(labels_len, s.label.labels().len(), "labels")?;
        slice_mut(image, image_len, "image")?[..s.image.numel()].copy_from_slice(s.image.data());
        slice_mut(labels, labels_len, "labels")?[..s.label.labels().len()].copy_from_slice(s.label.labels());
        Ok(())
    })
}
