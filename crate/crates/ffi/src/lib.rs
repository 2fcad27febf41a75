//! C ABI over `oct_adapt`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` or
//! producer functions and released with the matching `*_free`. Every fallible
//! call returns an [`OctStatus`]; on failure a human-readable message is kept
//! per thread and can be read with [`oct_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use oct_adapt::checkpoint::Checkpoint;
use oct_adapt::data::{load_volume, save_volume, ImageTensor, SegMask, Volume};
use oct_adapt::metrics;
use oct_adapt::networks::Generator;
use oct_adapt::noise::{adapt_traditional, TraditionalParams};
use oct_adapt::segmenter::{MiniUNet, Segmenter};
use oct_adapt::trainer::{adapt_with, generator_from_checkpoint, Direction};
use oct_adapt::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OctStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingInput = 4,
    Format = 5,
    Contract = 6,
    Divergence = 7,
    Io = 8,
    /// A Rust panic was caught at the boundary.
    Internal = 9,
}

/// Translation direction for [`oct_generator_load`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OctDirection {
    AToB = 0,
    BToA = 1,
}

/// Opaque volume handle.
pub struct OctVolume(Volume);

/// Opaque generator handle bound to one translation direction.
pub struct OctGenerator {
    net: Generator,
    direction: Direction,
}

/// Opaque segmenter handle.
pub struct OctSegmenter(MiniUNet);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OctMaskMetrics {
    pub accuracy: f64,
    pub dice: f64,
    pub jaccard: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OctTTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> OctStatus {
    match e {
        Error::Config(_) => OctStatus::Config,
        Error::MissingInput(_) => OctStatus::MissingInput,
        Error::Format(_) => OctStatus::Format,
        Error::Contract(_) => OctStatus::Contract,
        Error::Divergence { .. } => OctStatus::Divergence,
        Error::Io(_) => OctStatus::Io,
    }
}

struct Fail(OctStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(OctStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(OctStatus::InvalidArgument, msg.into())
}

/// Run `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OctStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OctStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OctStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(h: *mut T) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn oct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn oct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn oct_volume_load(
    path: *const c_char,
    out: *mut *mut OctVolume,
) -> OctStatus {
    guard(|| {
        let vol = load_volume(path_arg(path)?)?;
        put(out, OctVolume(vol))
    })
}

/// # Safety
/// `vol` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn oct_volume_save(vol: *const OctVolume, path: *const c_char) -> OctStatus {
    guard(|| {
        let v = handle(vol, "volume")?;
        save_volume(path_arg(path)?, &v.0)?;
        Ok(())
    })
}

/// Build a volume from `count` row-major 8-bit B-scans of `height`×`width`
/// stored back to back. `masks` may be null; otherwise it has the same
/// layout with labels 0 (background) or 1 (retina). `domain` is 0 for A and
/// 1 for B.
///
/// # Safety
/// `id` must be NUL-terminated; `pixels` (and `masks` when non-null) must
/// hold `count·height·width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oct_volume_from_u8(
    id: *const c_char,
    domain: u32,
    count: usize,
    height: usize,
    width: usize,
    pixels: *const u8,
    masks: *const u8,
    out: *mut *mut OctVolume,
) -> OctStatus {
    guard(|| {
        if id.is_null() {
            return Err(null("id"));
        }
        let id = CStr::from_ptr(id)
            .to_str()
            .map_err(|_| invalid("id is not UTF-8"))?;
        let domain = match domain {
            0 => oct_adapt::data::Domain::A,
            1 => oct_adapt::data::Domain::B,
            d => return Err(invalid(format!("domain {d} is neither 0 nor 1"))),
        };
        let plane = height
            .checked_mul(width)
            .ok_or_else(|| invalid("dimensions overflow"))?;
        let total = plane
            .checked_mul(count)
            .ok_or_else(|| invalid("dimensions overflow"))?;
        let px = slice(pixels, total, "pixels")?;
        let bscans = px
            .chunks_exact(plane.max(1))
            .map(|c| ImageTensor::from_u8(height, width, c))
            .collect::<Result<Vec<_>, _>>()?;
        let masks = if masks.is_null() {
            None
        } else {
            let m = slice(masks, total, "masks")?;
            Some(
                m.chunks_exact(plane.max(1))
                    .map(|c| SegMask::new(height, width, c.to_vec()))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        };
        put(out, OctVolume(Volume::new(id, domain, bscans, masks)?))
    })
}

/// # Safety
/// `vol` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn oct_volume_free(vol: *mut OctVolume) {
    release(vol)
}

/// # Safety
/// `vol` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn oct_volume_shape(
    vol: *const OctVolume,
    count: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> OctStatus {
    guard(|| {
        let v = &handle(vol, "volume")?.0;
        if count.is_null() || height.is_null() || width.is_null() {
            return Err(null("shape output"));
        }
        let (h, w) = v.dims();
        *count = v.len();
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Nonzero when the volume carries ground-truth masks. A null handle reads
/// as 0.
///
/// # Safety
/// `vol` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn oct_volume_has_masks(vol: *const OctVolume) -> i32 {
    vol.as_ref().map_or(0, |v| i32::from(v.0.masks().is_some()))
}

/// Copy B-scan `index` as 8-bit intensities into `buf` of `len` bytes,
/// which must equal height·width.
///
/// # Safety
/// `vol` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn oct_volume_bscan_u8(
    vol: *const OctVolume,
    index: usize,
    buf: *mut u8,
    len: usize,
) -> OctStatus {
    guard(|| {
        let v = &handle(vol, "volume")?.0;
        let img = v
            .bscans()
            .get(index)
            .ok_or_else(|| invalid(format!("B-scan {index} out of range ({})", v.len())))?;
        let bytes = img.to_u8();
        if bytes.len() != len {
            return Err(invalid(format!(
                "buffer holds {len} bytes, B-scan needs {}",
                bytes.len()
            )));
        }
        slice_mut(buf, len, "buffer")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// Copy the ground-truth mask of B-scan `index` into `buf`.
///
/// # Safety
/// `vol` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn oct_volume_mask(
    vol: *const OctVolume,
    index: usize,
    buf: *mut u8,
    len: usize,
) -> OctStatus {
    guard(|| {
        let v = &handle(vol, "volume")?.0;
        let masks = v
            .masks()
            .ok_or_else(|| Fail(OctStatus::MissingInput, "volume has no masks".into()))?;
        let m = masks
            .get(index)
            .ok_or_else(|| invalid(format!("mask {index} out of range ({})", masks.len())))?;
        if m.labels().len() != len {
            return Err(invalid(format!(
                "buffer holds {len} bytes, mask needs {}",
                m.labels().len()
            )));
        }
        slice_mut(buf, len, "buffer")?.copy_from_slice(m.labels());
        Ok(())
    })
}

/// Rule-based noise adaptation with default rule thresholds and the given
/// noise parameters.
///
/// # Safety
/// `vol` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oct_adapt_traditional(
    vol: *const OctVolume,
    noise_mu: f32,
    noise_sigma: f32,
    seed: u64,
    out: *mut *mut OctVolume,
) -> OctStatus {
    guard(|| {
        let v = &handle(vol, "volume")?.0;
        let p = TraditionalParams {
            noise_mu,
            noise_sigma,
            seed,
            ..TraditionalParams::default()
        };
        put(out, OctVolume(adapt_traditional(v, &p)?))
    })
}

/// Load one generator from a training or generator checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oct_generator_load(
    path: *const c_char,
    direction: OctDirection,
    out: *mut *mut OctGenerator,
) -> OctStatus {
    guard(|| {
        let c = Checkpoint::load(path_arg(path)?)?;
        let direction = match direction {
            OctDirection::AToB => Direction::A2B,
            OctDirection::BToA => Direction::B2A,
        };
        let net = generator_from_checkpoint(&c, direction)?;
        put(out, OctGenerator { net, direction })
    })
}

/// # Safety
/// `g` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn oct_generator_free(g: *mut OctGenerator) {
    release(g)
}

/// Translate every B-scan of `vol`; masks are carried over.
///
/// # Safety
/// `g` and `vol` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oct_generator_adapt(
    g: *const OctGenerator,
    vol: *const OctVolume,
    out: *mut *mut OctVolume,
) -> OctStatus {
    guard(|| {
        let g = handle(g, "generator")?;
        let v = &handle(vol, "volume")?.0;
        put(out, OctVolume(adapt_with(&g.net, v, g.direction)?))
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn oct_segmenter_load(
    path: *const c_char,
    out: *mut *mut OctSegmenter,
) -> OctStatus {
    guard(|| {
        let c = Checkpoint::load(path_arg(path)?)?;
        put(out, OctSegmenter(MiniUNet::from_checkpoint(&c)?))
    })
}

/// # Safety
/// `s` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn oct_segmenter_free(s: *mut OctSegmenter) {
    release(s)
}

/// Segment B-scan `index` of `vol`. `labels` receives 0/1 per pixel;
/// `retina_prob`, when non-null, receives the retina probability. Both
/// buffers hold `len` = height·width elements.
///
/// # Safety
/// Handles must be live; `labels` writable for `len` bytes and
/// `retina_prob` null or writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn oct_segmenter_predict(
    s: *const OctSegmenter,
    vol: *const OctVolume,
    index: usize,
    labels: *mut u8,
    retina_prob: *mut f32,
    len: usize,
) -> OctStatus {
    guard(|| {
        let s = &handle(s, "segmenter")?.0;
        let v = &handle(vol, "volume")?.0;
        let img = v
            .bscans()
            .get(index)
            .ok_or_else(|| invalid(format!("B-scan {index} out of range ({})", v.len())))?;
        let probs = s.predict_probs(img)?;
        let mask = probs.labels();
        if mask.labels().len() != len {
            return Err(invalid(format!(
                "buffers hold {len} elements, B-scan needs {}",
                mask.labels().len()
            )));
        }
        slice_mut(labels, len, "labels")?.copy_from_slice(mask.labels());
        if !retina_prob.is_null() {
            slice_mut(retina_prob, len, "retina_prob")?.copy_from_slice(probs.retina());
        }
        Ok(())
    })
}

/// Accuracy, Dice and Jaccard of two binary masks of `height`×`width`.
///
/// # Safety
/// `pred` and `gt` must hold `height·width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oct_mask_metrics(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut OctMaskMetrics,
) -> OctStatus {
    guard(|| {
        let n = height
            .checked_mul(width)
            .ok_or_else(|| invalid("dimensions overflow"))?;
        let p = SegMask::new(height, width, slice(pred, n, "pred")?.to_vec())?;
        let g = SegMask::new(height, width, slice(gt, n, "gt")?.to_vec())?;
        let m = OctMaskMetrics {
            accuracy: metrics::accuracy(&p, &g)?,
            dice: metrics::dice(&p, &g)?,
            jaccard: metrics::jaccard(&p, &g)?,
        };
        *out.as_mut().ok_or_else(|| null("out"))? = m;
        Ok(())
    })
}

/// ROC AUC of retina probabilities against a binary mask. Fails with
/// `InvalidArgument` when the mask holds a single class.
///
/// # Safety
/// `scores` must hold `height·width` floats, `gt` as many bytes; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn oct_auc(
    scores: *const f32,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> OctStatus {
    guard(|| {
        let n = height
            .checked_mul(width)
            .ok_or_else(|| invalid("dimensions overflow"))?;
        let g = SegMask::new(height, width, slice(gt, n, "gt")?.to_vec())?;
        let a = metrics::auc(slice(scores, n, "scores")?, &g)?
            .ok_or_else(|| invalid("AUC is undefined for single-class ground truth"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = a;
        Ok(())
    })
}

/// Two-tailed Welch t-test of two samples.
///
/// # Safety
/// `a` and `b` must hold `na` and `nb` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oct_welch_ttest(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut OctTTest,
) -> OctStatus {
    guard(|| {
        let r = metrics::ttest(slice(a, na, "a")?, slice(b, nb, "b")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = OctTTest {
            t: r.t,
            df: r.df,
            p: r.p,
        };
        Ok(())
    })
}
