//! C ABI for loading models and running the analysis primitives.
//!
//! Every function returns an `int32_t` status (`NPSC_OK` on success). On
//! failure, `npsc_last_error_message` describes the most recent error on the
//! calling thread. Models are opaque handles released with `npsc_model_free`.
//! Output buffers are caller-allocated; their lengths must match exactly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use npsc::cam::{grad_cam, CamVariant};
use npsc::correlation::kendall_tau_b;
use npsc::model::{forward, load_model, model_from_bytes, ModelSpec, ModelWeights};
use npsc::pathcount::{onoff, pathcount_forward, ClipConfig};
use npsc::{Error, Tensor};

pub const NPSC_OK: i32 = 0;
pub const NPSC_ERR_NULL: i32 = 1;
pub const NPSC_ERR_ARGUMENT: i32 = 2;
pub const NPSC_ERR_SHAPE: i32 = 3;
pub const NPSC_ERR_FORMAT: i32 = 4;
pub const NPSC_ERR_IO: i32 = 5;
pub const NPSC_ERR_NUMERICAL: i32 = 6;
pub const NPSC_ERR_UNDEFINED: i32 = 7;
pub const NPSC_ERR_SIZE: i32 = 8;
pub const NPSC_ERR_CAPABILITY: i32 = 9;
pub const NPSC_ERR_PANIC: i32 = 10;

pub const NPSC_CLIP_ABSOLUTE: i32 = 0;
pub const NPSC_CLIP_MEAN_ABS: i32 = 1;

pub const NPSC_CAM_ACT: i32 = 0;
pub const NPSC_CAM_ONOFF: i32 = 1;
pub const NPSC_CAM_PATHCOUNT: i32 = 2;

/// Opaque loaded model.
pub struct NpscModel {
    spec: ModelSpec,
    weights: ModelWeights,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Shape(_) => NPSC_ERR_SHAPE,
            Error::Spec(_) | Error::Argument(_) => NPSC_ERR_ARGUMENT,
            Error::Format(_) | Error::Json(_) => NPSC_ERR_FORMAT,
            Error::Io { .. } => NPSC_ERR_IO,
            Error::Numerical(_) => NPSC_ERR_NUMERICAL,
            Error::UndefinedCorrelation(_) => NPSC_ERR_UNDEFINED,
            Error::Size(_) => NPSC_ERR_SIZE,
            Error::Capability(_) => NPSC_ERR_CAPABILITY,
        };
        Failure(code, e.to_string())
    }
}

fn fail<T>(code: i32, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(code, msg.into()))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NPSC_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            NPSC_ERR_PANIC
        }
    }
}

unsafe fn model_ref<'a>(m: *const NpscModel) -> Result<&'a NpscModel, Failure> {
    m.as_ref()
        .map_or_else(|| fail(NPSC_ERR_NULL, "model handle is null"), Ok)
}

unsafe fn input_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return fail(NPSC_ERR_NULL, format!("{what} is null"));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output_slice<'a, T>(p: *mut T, len: usize, want: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return fail(NPSC_ERR_NULL, format!("{what} is null"));
    }
    if len != want {
        return fail(NPSC_ERR_SHAPE, format!("{what} has length {len}, expected {want}"));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn input_tensor(m: &NpscModel, input: *const f32, len: usize) -> Result<Tensor, Failure> {
    let data = input_slice(input, len, "input")?;
    Ok(Tensor::new(m.spec.input_shape.clone(), data.to_vec())?)
}

fn clip_config(mode: i32, threshold: f64) -> Result<ClipConfig, Failure> {
    let clip = match mode {
        NPSC_CLIP_ABSOLUTE => ClipConfig::absolute(threshold),
        NPSC_CLIP_MEAN_ABS => ClipConfig::mean_abs(threshold),
        other => return fail(NPSC_ERR_ARGUMENT, format!("unknown clip mode {other}")),
    };
    clip.validate()?;
    Ok(clip)
}

fn check_layer(m: &NpscModel, layer: usize) -> Result<(), Failure> {
    if layer >= m.spec.layers.len() {
        return fail(
            NPSC_ERR_ARGUMENT,
            format!("layer {layer} out of range for {} layers", m.spec.layers.len()),
        );
    }
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn npsc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn npsc_model_load(path: *const c_char, out: *mut *mut NpscModel) -> i32 {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(NPSC_ERR_NULL, "path or out is null");
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(NPSC_ERR_ARGUMENT, "path is not UTF-8".into()))?;
        let (spec, weights) = load_model(path)?;
        *out = Box::into_raw(Box::new(NpscModel { spec, weights }));
        Ok(())
    })
}

/// Parses a model from an in-memory buffer.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn npsc_model_from_bytes(data: *const u8, len: usize, out: *mut *mut NpscModel) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(NPSC_ERR_NULL, "out is null");
        }
        let bytes = input_slice(data, len, "data")?;
        let (spec, weights) = model_from_bytes(bytes)?;
        *out = Box::into_raw(Box::new(NpscModel { spec, weights }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from a load call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn npsc_model_free(model: *mut NpscModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the input shape `[channels, height, width]` to `shape_out`.
///
/// # Safety
/// `model` must be a live handle and `shape_out` must hold 3 elements.
#[no_mangle]
pub unsafe extern "C" fn npsc_model_input_shape(model: *const NpscModel, shape_out: *mut usize) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let out = output_slice(shape_out, 3, 3, "shape_out")?;
        out.copy_from_slice(&m.spec.input_shape);
        Ok(())
    })
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn npsc_model_num_classes(model: *const NpscModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.num_classes)
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn npsc_model_num_layers(model: *const NpscModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.layers.len())
}

/// Number of neurons in the output of `layer`.
///
/// # Safety
/// `model` must be a live handle and `len_out` valid.
#[no_mangle]
pub unsafe extern "C" fn npsc_model_layer_len(model: *const NpscModel, layer: usize, len_out: *mut usize) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        check_layer(m, layer)?;
        if len_out.is_null() {
            return fail(NPSC_ERR_NULL, "len_out is null");
        }
        let shapes = m.spec.shapes()?;
        *len_out = shapes[layer].iter().product();
        Ok(())
    })
}

/// Inference logits for one input laid out as `[C, H, W]`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn npsc_forward(
    model: *const NpscModel,
    input: *const f32,
    input_len: usize,
    logits_out: *mut f32,
    logits_len: usize,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let x = input_tensor(m, input, input_len)?;
        let out = output_slice(logits_out, logits_len, m.spec.num_classes, "logits_out")?;
        let trace = forward(&m.weights, &m.spec, &x)?;
        out.copy_from_slice(trace.logits().data());
        Ok(())
    })
}

/// On-Off pattern (1 where the output is strictly positive) of `layer`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn npsc_onoff(
    model: *const NpscModel,
    input: *const f32,
    input_len: usize,
    layer: usize,
    out: *mut u8,
    out_len: usize,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        check_layer(m, layer)?;
        let x = input_tensor(m, input, input_len)?;
        let trace = forward(&m.weights, &m.spec, &x)?;
        let pattern = onoff(trace.output(layer));
        let out = output_slice(out, out_len, pattern.numel(), "out")?;
        for (o, &v) in out.iter_mut().zip(pattern.data()) {
            *o = u8::from(v > 0.0);
        }
        Ok(())
    })
}

/// Active-path counts for every neuron of `layer`. `exact_out`, if not null,
/// receives 0 when some count exceeded 2^53 and is therefore rounded.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn npsc_pathcount(
    model: *const NpscModel,
    input: *const f32,
    input_len: usize,
    layer: usize,
    clip_mode: i32,
    clip_threshold: f64,
    counts_out: *mut f64,
    counts_len: usize,
    exact_out: *mut u8,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        check_layer(m, layer)?;
        let clip = clip_config(clip_mode, clip_threshold)?;
        let x = input_tensor(m, input, input_len)?;
        let trace = forward(&m.weights, &m.spec, &x)?;
        let pc = pathcount_forward(&m.weights, &m.spec, &trace, &clip)?;
        let counts = &pc.layer(layer).counts;
        let out = output_slice(counts_out, counts_len, counts.len(), "counts_out")?;
        out.copy_from_slice(counts);
        if !exact_out.is_null() {
            *exact_out = u8::from(pc.exact);
        }
        Ok(())
    })
}

/// Kendall tau-b of two length-`n` series. Returns `NPSC_ERR_UNDEFINED`
/// when either series is constant.
///
/// # Safety
/// `x` and `y` must hold `n` elements; `tau_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn npsc_kendall_tau_b(x: *const f64, y: *const f64, n: usize, tau_out: *mut f64) -> i32 {
    guard(|| {
        let x = input_slice(x, n, "x")?;
        let y = input_slice(y, n, "y")?;
        if tau_out.is_null() {
            return fail(NPSC_ERR_NULL, "tau_out is null");
        }
        *tau_out = kendall_tau_b(x, y)?;
        Ok(())
    })
}

/// Max-normalized class activation map at input resolution (`H * W` values).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn npsc_grad_cam(
    model: *const NpscModel,
    input: *const f32,
    input_len: usize,
    target: usize,
    variant: i32,
    clip_mode: i32,
    clip_threshold: f64,
    map_out: *mut f32,
    map_len: usize,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let variant = match variant {
            NPSC_CAM_ACT => CamVariant::Act,
            NPSC_CAM_ONOFF => CamVariant::Onoff,
            NPSC_CAM_PATHCOUNT => CamVariant::Pathcount,
            other => return fail(NPSC_ERR_ARGUMENT, format!("unknown CAM variant {other}")),
        };
        let clip = clip_config(clip_mode, clip_threshold)?;
        let x = input_tensor(m, input, input_len)?;
        let (h, w) = (m.spec.input_shape[1], m.spec.input_shape[2]);
        let out = output_slice(map_out, map_len, h * w, "map_out")?;
        let sal = grad_cam(&m.weights, &m.spec, &x, target, variant, &clip)?;
        out.copy_from_slice(sal.map.data());
        Ok(())
    })
}
