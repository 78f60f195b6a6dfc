//! C ABI over `perturb-core`: load checkpoints, predict, extract attention and
//! saliency, and fit attention clusterings.
//!
//! Handles are opaque pointers released with the matching `*_free` call.
//! Every fallible function returns a [`PtStatus`]; on failure,
//! [`pt_last_error`] describes the problem for the calling thread.
//! Image buffers are 48×48 row-major doubles in `[0, 1]`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use perturb_core::checkpoint::Checkpoint;
use perturb_core::cluster::{kmeans_fit, pixel_distance, ClusterConfig, ClusterModel, PixelPoint};
use perturb_core::data::image::GrayImage;
use perturb_core::nn::analysis::{extract_attention, saliency};
use perturb_core::nn::model::Model;
use perturb_core::Error;

pub const PT_PIXELS: usize = 2304;
pub const PT_NUM_CLASSES: usize = 7;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Shape = 4,
    Numeric = 5,
    Variant = 6,
    Contract = 7,
    Degenerate = 8,
    Checkpoint = 9,
    Panic = 10,
}

/// A loaded model.
pub struct PtModel {
    model: Model,
}

/// A fitted clustering of the 48×48 grid.
pub struct PtCluster {
    model: ClusterModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PtStatus {
    match e {
        Error::Shape(_) => PtStatus::Shape,
        Error::Numeric(_) => PtStatus::Numeric,
        Error::Variant(_) => PtStatus::Variant,
        Error::Contract(_) => PtStatus::Contract,
        Error::Degenerate(_) => PtStatus::Degenerate,
        Error::Checkpoint(_) | Error::Spec(_) => PtStatus::Checkpoint,
        Error::File { .. } | Error::Io(_) => PtStatus::Io,
        _ => PtStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PtStatus, String)>) -> PtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PtStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PtStatus::Panic
        }
    }
}

fn core<T>(r: perturb_core::Result<T>) -> Result<T, (PtStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (PtStatus, String) {
    (PtStatus::NullPointer, format!("{what} is null"))
}

unsafe fn image_from(pixels: *const f64) -> Result<GrayImage, (PtStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let slice = std::slice::from_raw_parts(pixels, PT_PIXELS);
    core(GrayImage::new(slice.to_vec()))
}

unsafe fn out_slice<'a, T>(out: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (PtStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(out, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failure on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn pt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Weighted distance between pixels (i, j, a) and (k, l, b).
#[no_mangle]
pub extern "C" fn pt_pixel_distance(
    i: usize,
    j: usize,
    a: f64,
    k: usize,
    l: usize,
    b: f64,
    lambda: f64,
    alpha: f64,
) -> f64 {
    pixel_distance(&PixelPoint { i, j, a }, &PixelPoint { i: k, j: l, a: b }, lambda, alpha)
}

/// Loads a checkpoint written by the `perturb` tool.
#[no_mangle]
pub unsafe extern "C" fn pt_model_load(path: *const c_char, out: *mut *mut PtModel) -> PtStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (PtStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = core(Checkpoint::load(Path::new(path)).and_then(|c| Model::from_checkpoint(&c)))?;
        *out = Box::into_raw(Box::new(PtModel { model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pt_model_free(model: *mut PtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes 7 class probabilities for one image.
#[no_mangle]
pub unsafe extern "C" fn pt_model_predict(model: *const PtModel, pixels: *const f64, out_probs: *mut f64) -> PtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let image = image_from(pixels)?;
        let probs = core(m.model.predict_proba(&[&image]))?.remove(0);
        out_slice(out_probs, PT_NUM_CLASSES, "out_probs")?.copy_from_slice(&probs);
        Ok(())
    })
}

/// Writes the 48×48 attention map of an attention-classifier model.
#[no_mangle]
pub unsafe extern "C" fn pt_model_extract_attention(
    model: *const PtModel,
    pixels: *const f64,
    out_map: *mut f64,
) -> PtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let image = image_from(pixels)?;
        let map = core(extract_attention(&m.model, &image))?;
        out_slice(out_map, PT_PIXELS, "out_map")?.copy_from_slice(&map.values);
        Ok(())
    })
}

/// Writes the normalized 48×48 gradient saliency of `class_index`.
#[no_mangle]
pub unsafe extern "C" fn pt_model_saliency(
    model: *const PtModel,
    pixels: *const f64,
    class_index: usize,
    out_map: *mut f64,
) -> PtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let image = image_from(pixels)?;
        let map = core(saliency(&m.model, &image, class_index))?;
        out_slice(out_map, PT_PIXELS, "out_map")?.copy_from_slice(&map);
        Ok(())
    })
}

/// Clusters a 48×48 intensity grid with the default iteration settings.
#[no_mangle]
pub unsafe extern "C" fn pt_cluster_fit(
    grid: *const f64,
    k: usize,
    lambda: f64,
    alpha: f64,
    seed: u64,
    out: *mut *mut PtCluster,
) -> PtStatus {
    guard(|| {
        if grid.is_null() {
            return Err(null("grid"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let grid = std::slice::from_raw_parts(grid, PT_PIXELS);
        let cfg = ClusterConfig {
            k,
            lambda,
            alpha,
            seed,
            ..Default::default()
        };
        let model = core(kmeans_fit(grid, &cfg))?;
        *out = Box::into_raw(Box::new(PtCluster { model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pt_cluster_k(cluster: *const PtCluster) -> usize {
    cluster.as_ref().map_or(0, |c| c.model.k())
}

#[no_mangle]
pub unsafe extern "C" fn pt_cluster_inertia(cluster: *const PtCluster, out: *mut f64) -> PtStatus {
    guard(|| {
        let c = cluster.as_ref().ok_or_else(|| null("cluster"))?;
        *out_slice(out, 1, "out")?.first_mut().expect("one slot") = c.model.inertia;
        Ok(())
    })
}

/// Writes 2304 cluster labels in `[0, k)`.
#[no_mangle]
pub unsafe extern "C" fn pt_cluster_assignments(cluster: *const PtCluster, out: *mut u32) -> PtStatus {
    guard(|| {
        let c = cluster.as_ref().ok_or_else(|| null("cluster"))?;
        let dst = out_slice(out, PT_PIXELS, "out")?;
        for (d, &a) in dst.iter_mut().zip(&c.model.assignments) {
            *d = a as u32;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pt_cluster_free(cluster: *mut PtCluster) {
    if !cluster.is_null() {
        drop(Box::from_raw(cluster));
    }
}
