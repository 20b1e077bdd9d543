//! C ABI over the `polyoie` library.
//!
//! Every call returns a [`PolyoieStatus`]. On failure the message is kept
//! per thread and read with [`polyoie_last_error`]. Strings handed out by
//! the library are freed with [`polyoie_string_free`], models with
//! [`polyoie_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use polyoie::evaluation::{self, FactSynset, SlotTuple, Triple};
use polyoie::model::Model;
use polyoie::{checkpoint, vocab, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolyoieStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Data = 4,
    Config = 5,
    Internal = 6,
    Panic = 7,
}

/// Opaque handle to a loaded model.
pub struct PolyoieModel {
    model: Model,
}

/// Precision, recall and F1 of one scoring call.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolyoieScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("no interior nul")));
}

struct Failure(PolyoieStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => PolyoieStatus::Io,
            Error::Config(_) => PolyoieStatus::Config,
            Error::Shape { .. } | Error::NonFinite { .. } => PolyoieStatus::Internal,
            _ => PolyoieStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PolyoieStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PolyoieStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside polyoie");
            PolyoieStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PolyoieStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PolyoieStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(s).map_err(|e| Failure(PolyoieStatus::Data, format!("{what}: {e}")))
}

fn out_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn polyoie_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn polyoie_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn polyoie_model_load(path: *const c_char, out: *mut *mut PolyoieModel) -> PolyoieStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(PolyoieStatus::NullArgument, "out is null".into()));
        }
        let path = text(path, "path")?;
        let model = checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(PolyoieModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`polyoie_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn polyoie_model_free(model: *mut PolyoieModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Whether the model carries an adapter pool.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn polyoie_model_has_pool(model: *const PolyoieModel) -> bool {
    model.as_ref().is_some_and(|m| m.model.pool.is_some())
}

/// Extracts tuples from a whitespace-tokenized sentence. Writes a JSON
/// array of `{"pred": [s, e], "args": [[s, e], ..], "text": ".."}` to `out`,
/// to be released with [`polyoie_string_free`].
///
/// # Safety
/// `model` must be a live handle, `sentence` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn polyoie_model_extract(
    model: *const PolyoieModel,
    sentence: *const c_char,
    use_pool: bool,
    out: *mut *mut c_char,
) -> PolyoieStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return Err(Failure(PolyoieStatus::NullArgument, "model or out is null".into()));
        };
        let tokens = vocab::tokenize(text(sentence, "sentence")?);
        let tuples = m.model.extract(&tokens, use_pool && m.model.pool.is_some())?;
        let items: Vec<serde_json::Value> = tuples
            .iter()
            .map(|t| {
                let mut v = serde_json::to_value(t).expect("tuple serializes");
                v["text"] = t.render(&tokens).into();
                v
            })
            .collect();
        *out = out_string(serde_json::Value::Array(items).to_string());
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn polyoie_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Token-level tuple matching for one sentence. Both inputs are JSON arrays
/// of tuples, each an array of strings: the predicate, then the arguments.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn polyoie_tuple_match(
    predicted_json: *const c_char,
    gold_json: *const c_char,
    out: *mut PolyoieScore,
) -> PolyoieStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(PolyoieStatus::NullArgument, "out is null".into()));
        }
        let parse = |p, what| -> Result<Vec<SlotTuple>, Failure> {
            let raw: Vec<Vec<String>> = json(text(p, what)?, what)?;
            raw.iter()
                .map(|t| match t.split_first() {
                    Some((pred, args)) => Ok(SlotTuple::new(pred, args)),
                    None => Err(Failure(PolyoieStatus::Data, format!("{what}: empty tuple"))),
                })
                .collect()
        };
        let r = evaluation::tuple_match(&parse(predicted_json, "predicted")?, &parse(gold_json, "gold")?);
        *out = PolyoieScore {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        };
        Ok(())
    })
}

/// Fact-synset matching for one sentence. `predicted_json` is an array of
/// `[subject, relation, object]`; `synsets_json` an array of synsets, each
/// an array of such triples with optional `[..]` groups.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn polyoie_fact_synset_match(
    predicted_json: *const c_char,
    synsets_json: *const c_char,
    out: *mut PolyoieScore,
) -> PolyoieStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(PolyoieStatus::NullArgument, "out is null".into()));
        }
        let predicted: Vec<Triple> = json(text(predicted_json, "predicted")?, "predicted")?;
        let synsets: Vec<FactSynset> = json(text(synsets_json, "synsets")?, "synsets")?;
        let r = evaluation::fact_synset_match(&predicted, &synsets)?;
        *out = PolyoieScore {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        };
        Ok(())
    })
}
