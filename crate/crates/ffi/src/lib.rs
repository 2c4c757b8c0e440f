//! C interface to mmlayout.
//!
//! Every handle is opaque and owned by the caller, who releases it with the
//! matching `*_free` function. Functions return an [`MmlStatus`]; on failure
//! [`mml_last_error`] describes the most recent error on the calling thread.
//! Strings returned through `char **` out-parameters are freed with
//! [`mml_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mmlayout::cluster::ClusterParams;
use mmlayout::doc::{boundary_distance, load_document, parse_document, BBox, Page};
use mmlayout::graph::{build_graph, DocumentGraph, Grid};
use mmlayout::model::Model;
use mmlayout::numerics::ParamStore;
use mmlayout::render::render_svg;
use mmlayout::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmlStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    Utf8 = 2,
    /// The document or file failed validation.
    Parse = 3,
    /// An argument or configuration value was rejected.
    Invalid = 4,
    Io = 5,
    Checkpoint = 6,
    Numeric = 7,
    /// An unexpected internal failure, including caught panics.
    Internal = 8,
}

/// A parsed document page.
pub struct MmlDocument {
    page: Page,
}

/// A multi-grained document graph.
pub struct MmlGraph {
    graph: DocumentGraph,
}

/// A trained model with its parameters.
pub struct MmlModel {
    model: Model,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MmlStatus {
    match e {
        Error::Parse(_) | Error::Json(_) => MmlStatus::Parse,
        Error::Invalid(_) | Error::Config(_) => MmlStatus::Invalid,
        Error::Io(_) => MmlStatus::Io,
        Error::Checkpoint(_) => MmlStatus::Checkpoint,
        Error::Numeric(_) => MmlStatus::Numeric,
        _ => MmlStatus::Internal,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), MmlStatus>) -> MmlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmlStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            MmlStatus::Internal
        }
    }
}

fn fail<T>(e: Error) -> Result<T, MmlStatus> {
    set_error(&e.to_string());
    Err(status_of(&e))
}

fn null<T>(what: &str) -> Result<T, MmlStatus> {
    set_error(&format!("{what} is null"));
    Err(MmlStatus::NullArgument)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MmlStatus> {
    if p.is_null() {
        return null(what);
    }
    CStr::from_ptr(p).to_str().or_else(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        Err(MmlStatus::Utf8)
    })
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, MmlStatus> {
    p.as_ref().map_or_else(|| null(what), Ok)
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), MmlStatus> {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            Ok(())
        }
        Err(_) => fail(Error::Invalid("output contains a nul byte".into())),
    }
}

/// Message of the last error on this thread; empty when none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mml_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn mml_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Boundary distance between two boxes given as `[x0, y0, x1, y1]`.
///
/// # Safety
/// `a`, `b` and `out` must point to valid memory (4, 4 and 1 doubles).
#[no_mangle]
pub unsafe extern "C" fn mml_boundary_distance(a: *const f64, b: *const f64, out: *mut f64) -> MmlStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return null("box or output pointer");
        }
        let bx = |p: *const f64| {
            let v = std::slice::from_raw_parts(p, 4);
            let b = BBox::new(v[0], v[1], v[2], v[3]);
            if b.is_valid() {
                Ok(b)
            } else {
                Err(Error::Invalid(format!("malformed box {v:?}")))
            }
        };
        match (bx(a), bx(b)) {
            (Ok(a), Ok(b)) => {
                *out = boundary_distance(&a, &b);
                Ok(())
            }
            (Err(e), _) | (_, Err(e)) => fail(e),
        }
    })
}

/// Parses a document from a JSON string.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mml_document_from_json(json: *const c_char, out: *mut *mut MmlDocument) -> MmlStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        if out.is_null() {
            return null("out");
        }
        let page = parse_document(text.as_bytes()).or_else(fail)?;
        put(out, MmlDocument { page });
        Ok(())
    })
}

/// Loads a document JSON file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mml_document_load(path: *const c_char, out: *mut *mut MmlDocument) -> MmlStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return null("out");
        }
        let page = load_document(Path::new(path)).or_else(fail)?;
        put(out, MmlDocument { page });
        Ok(())
    })
}

/// # Safety
/// `doc` must be a valid document handle.
#[no_mangle]
pub unsafe extern "C" fn mml_document_num_words(doc: *const MmlDocument, out: *mut usize) -> MmlStatus {
    guard(|| {
        let doc = ref_arg(doc, "doc")?;
        if out.is_null() {
            return null("out");
        }
        *out = doc.page.words().len();
        Ok(())
    })
}

/// # Safety
/// `doc` must be a valid document handle.
#[no_mangle]
pub unsafe extern "C" fn mml_document_num_segments(doc: *const MmlDocument, out: *mut usize) -> MmlStatus {
    guard(|| {
        let doc = ref_arg(doc, "doc")?;
        if out.is_null() {
            return null("out");
        }
        *out = doc.page.segments().len();
        Ok(())
    })
}

/// # Safety
/// `doc` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mml_document_free(doc: *mut MmlDocument) {
    if !doc.is_null() {
        drop(Box::from_raw(doc));
    }
}

/// Builds the document graph with clustering radius `radius` and a
/// `cols` × `rows` patch grid. The graph keeps its own copy of the page.
///
/// # Safety
/// `doc` must be a valid document handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mml_graph_build(
    doc: *const MmlDocument,
    radius: f64,
    min_pts: usize,
    cols: usize,
    rows: usize,
    out: *mut *mut MmlGraph,
) -> MmlStatus {
    guard(|| {
        let doc = ref_arg(doc, "doc")?;
        if out.is_null() {
            return null("out");
        }
        if cols == 0 || rows == 0 {
            return fail(Error::Invalid(format!("patch grid {cols}x{rows} is empty")));
        }
        let params = ClusterParams::try_new(radius, min_pts).or_else(fail)?;
        let graph = build_graph(&doc.page, &params, Grid::new(cols, rows)).or_else(fail)?;
        put(out, MmlGraph { graph });
        Ok(())
    })
}

/// # Safety
/// `graph` must be a valid graph handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mml_graph_num_regions(graph: *const MmlGraph, out: *mut usize) -> MmlStatus {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        if out.is_null() {
            return null("out");
        }
        *out = g.graph.regions().len();
        Ok(())
    })
}

/// Graph as JSON: regions, patch grid and parent maps.
///
/// # Safety
/// `graph` must be a valid graph handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mml_graph_to_json(graph: *const MmlGraph, out: *mut *mut c_char) -> MmlStatus {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        if out.is_null() {
            return null("out");
        }
        let text = serde_json::to_string(&g.graph.to_json()).or_else(|e| fail(e.into()))?;
        put_string(out, text)
    })
}

/// SVG drawing of the segments and salient regions.
///
/// # Safety
/// `graph` must be a valid graph handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mml_graph_render_svg(graph: *const MmlGraph, out: *mut *mut c_char) -> MmlStatus {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        if out.is_null() {
            return null("out");
        }
        put_string(out, render_svg(&g.graph))
    })
}

/// # Safety
/// `graph` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mml_graph_free(graph: *mut MmlGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Loads a checkpoint written by `mmlayout train`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mml_model_load(path: *const c_char, out: *mut *mut MmlModel) -> MmlStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return null("out");
        }
        let (model, store, _) = Model::load(Path::new(path)).or_else(fail)?;
        put(out, MmlModel { model, store });
        Ok(())
    })
}

/// Predicted BIO tag per word, as a JSON array of strings.
///
/// # Safety
/// `model` and `doc` must be valid handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mml_model_predict(
    model: *const MmlModel,
    doc: *const MmlDocument,
    out: *mut *mut c_char,
) -> MmlStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let doc = ref_arg(doc, "doc")?;
        if out.is_null() {
            return null("out");
        }
        let prepared = m.model.prepare(&doc.page, None).or_else(fail)?;
        let tags = m.model.predict(&m.store, &prepared).or_else(fail)?;
        put_string(out, serde_json::to_string(&tags).or_else(|e| fail(e.into()))?)
    })
}

/// # Safety
/// `model` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mml_model_free(model: *mut MmlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
