//! C ABI over the `bwnkt` core. Every entry point returns a [`BwnktStatus`];
//! on failure the message is available from [`bwnkt_last_error`] on the same
//! thread. Models are opaque handles released with [`bwnkt_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use bwnkt::binarize::{binarize_filter, packed_len};
use bwnkt::network::{self, build_minidark, default_schedule, Model, DEFAULT_ANCHORS};
use bwnkt::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BwnktStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Checksum = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct BwnktModel {
    model: Model,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BwnktDetection {
    pub class_id: u32,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BwnktSize {
    pub payload_bytes: u64,
    pub fp_payload_bytes: u64,
    pub file_bytes: u64,
    pub ratio: f64,
    pub binarized_layers: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> BwnktStatus {
    match e {
        Error::Shape(_) => BwnktStatus::Shape,
        Error::InvalidArgument(_) => BwnktStatus::InvalidArgument,
        Error::Config(_) => BwnktStatus::Config,
        Error::Io { .. } => BwnktStatus::Io,
        Error::Format { .. } => BwnktStatus::Format,
        Error::Checksum { .. } => BwnktStatus::Checksum,
        Error::NonFinite(_) | Error::Divergence { .. } => BwnktStatus::NonFinite,
    }
}

struct Fail(BwnktStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: BwnktStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BwnktStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BwnktStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            BwnktStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(fail(BwnktStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn model_ref<'a>(m: *const BwnktModel) -> Result<&'a Model, Fail> {
    non_null(m, "model")?;
    Ok(&(*m).model)
}

unsafe fn model_mut<'a>(m: *mut BwnktModel) -> Result<&'a mut Model, Fail> {
    non_null(m, "model")?;
    Ok(&mut (*m).model)
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| fail(BwnktStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(Path::new(s))
}

fn hand_out(model: Model, out: *mut *mut BwnktModel) {
    // SAFETY: callers checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(BwnktModel { model })) };
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn bwnkt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Number of bytes [`bwnkt_binarize_filter`] needs for `n` packed signs.
#[no_mangle]
pub extern "C" fn bwnkt_packed_len(n: usize) -> usize {
    packed_len(n)
}

/// Binarizes one filter of `n` weights into its scale and MSB-first sign bits.
///
/// # Safety
/// `weights` must point to `n` floats and `bits` to `bits_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_binarize_filter(
    weights: *const f32,
    n: usize,
    alpha: *mut f32,
    bits: *mut u8,
    bits_len: usize,
) -> BwnktStatus {
    guard(|| {
        non_null(weights, "weights")?;
        non_null(alpha, "alpha")?;
        non_null(bits, "bits")?;
        if n == 0 {
            return Err(fail(BwnktStatus::InvalidArgument, "filter has no weights"));
        }
        if bits_len < packed_len(n) {
            return Err(fail(BwnktStatus::BufferTooSmall, format!("{} bytes needed, {bits_len} given", packed_len(n))));
        }
        let w = Tensor::from_vec(slice::from_raw_parts(weights, n).to_vec());
        let f = binarize_filter(&w)?;
        *alpha = f.alpha;
        ptr::copy_nonoverlapping(f.bits.as_ptr(), bits, f.bits.len());
        Ok(())
    })
}

/// A freshly initialized full-precision detector with the default anchors.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a handle owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_model_new(classes: u32, seed: u64, out: *mut *mut BwnktModel) -> BwnktStatus {
    guard(|| {
        non_null(out, "out")?;
        hand_out(build_minidark(classes as usize, &DEFAULT_ANCHORS, seed)?, out);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_model_load(path: *const c_char, out: *mut *mut BwnktModel) -> BwnktStatus {
    guard(|| {
        non_null(out, "out")?;
        hand_out(network::load_model(path_arg(path)?)?, out);
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_model_save(model: *const BwnktModel, path: *const c_char) -> BwnktStatus {
    guard(|| {
        network::save_model(model_ref(model)?, path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_model_free(model: *mut BwnktModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Applies stage `stage` (0 = M0, 1 = M1, 2 = M2) of the default schedule.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_model_apply_stage(model: *mut BwnktModel, stage: u32) -> BwnktStatus {
    guard(|| {
        model_mut(model)?.apply_stage(&default_schedule(), stage as usize)?;
        Ok(())
    })
}

/// Input `(channels, height, width)` and head length per image.
///
/// # Safety
/// `model` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_model_shape(
    model: *const BwnktModel,
    channels: *mut u32,
    height: *mut u32,
    width: *mut u32,
    head_len: *mut usize,
) -> BwnktStatus {
    guard(|| {
        let m = model_ref(model)?;
        for (p, name) in [(channels, "channels"), (height, "height"), (width, "width")] {
            non_null(p, name)?;
        }
        non_null(head_len, "head_len")?;
        let (c, h, w) = m.meta.input;
        let layout = m.head_layout()?;
        *channels = c as u32;
        *height = h as u32;
        *width = w as u32;
        *head_len = layout.channels() * layout.grid * layout.grid;
        Ok(())
    })
}

fn input_tensor(m: &Model, input: *const f32, batch: usize) -> Result<Tensor, Fail> {
    non_null(input, "input")?;
    if batch == 0 {
        return Err(fail(BwnktStatus::InvalidArgument, "batch is empty"));
    }
    let (c, h, w) = m.meta.input;
    // SAFETY: the caller promises `batch` images of the model's input size.
    let data = unsafe { slice::from_raw_parts(input, batch * c * h * w) }.to_vec();
    Ok(Tensor::new(&[batch, c, h, w], data)?)
}

/// Raw head activations for `batch` NCHW images in inference mode.
///
/// # Safety
/// `input` must hold `batch·c·h·w` floats and `out` `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_model_forward(
    model: *const BwnktModel,
    input: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> BwnktStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        let head = m.predict(&input_tensor(m, input, batch)?)?;
        let data = head.data();
        if out_len < data.len() {
            return Err(fail(BwnktStatus::BufferTooSmall, format!("{} floats needed, {out_len} given", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        Ok(())
    })
}

/// Detections after thresholding and per-class NMS for one CHW image.
/// `count` receives the total; at most `capacity` are written, best first.
///
/// # Safety
/// `image` must hold `c·h·w` floats, `out` `capacity` writable records.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_model_detect(
    model: *const BwnktModel,
    image: *const f32,
    conf_thresh: f64,
    nms_iou: f64,
    out: *mut BwnktDetection,
    capacity: usize,
    count: *mut usize,
) -> BwnktStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(count, "count")?;
        if capacity > 0 {
            non_null(out, "out")?;
        }
        let mut dets = m.detect(&input_tensor(m, image, 1)?, conf_thresh, nms_iou)?.pop().unwrap_or_default();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        *count = dets.len();
        for (i, d) in dets.iter().take(capacity).enumerate() {
            *out.add(i) =
                BwnktDetection { class_id: d.class_id as u32, score: d.score, cx: d.cx, cy: d.cy, w: d.w, h: d.h };
        }
        Ok(())
    })
}

/// Exact byte accounting of the model as it would be saved.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bwnkt_model_size(model: *const BwnktModel, out: *mut BwnktSize) -> BwnktStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        let r = network::size_report(m);
        *out = BwnktSize {
            payload_bytes: r.payload_bytes as u64,
            fp_payload_bytes: r.fp_bytes as u64,
            file_bytes: r.file_bytes() as u64,
            ratio: r.ratio(),
            binarized_layers: m.binarized_layers().len() as u32,
        };
        Ok(())
    })
}
