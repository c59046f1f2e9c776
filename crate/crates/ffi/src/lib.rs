//! C ABI for the chaincqg library.
//!
//! Every fallible function returns a [`CqgStatus`]; on failure a message is
//! available from [`cqg_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.
//! Strings handed out by the library are released with [`cqg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use chaincqg::chain::{generate_question, ChainConfig, ParamSet};
use chaincqg::corpus::Dialogue;
use chaincqg::metrics::MetricReport;
use chaincqg::preprocess::{preprocess_dialogue, InputOptions, SubDialogueExample};
use chaincqg::rng;
use chaincqg::sampler::SamplerConfig;
use chaincqg::tokenizer::{tokenize, Vocab};
use chaincqg::trainer::load_params;
use chaincqg::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CqgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Argument = 6,
    Config = 7,
    Capacity = 8,
    Numeric = 9,
    Alignment = 10,
    Diverged = 11,
    Panic = 12,
}

impl From<&Error> for CqgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => CqgStatus::Io,
            Error::Parse { .. } => CqgStatus::Parse,
            Error::Validation(_) => CqgStatus::Validation,
            Error::Argument(_) => CqgStatus::Argument,
            Error::Config(_) => CqgStatus::Config,
            Error::Capacity(_) => CqgStatus::Capacity,
            Error::Numeric { .. } | Error::NonFiniteGradient(_) => CqgStatus::Numeric,
            Error::Alignment(_) => CqgStatus::Alignment,
            Error::Diverged { .. } => CqgStatus::Diverged,
        }
    }
}

/// A loaded vocabulary.
pub struct CqgVocab {
    vocab: Vocab,
}

/// A loaded checkpoint together with its chain settings and vocabulary.
pub struct CqgModel {
    params: ParamSet<f32>,
    chain: ChainConfig,
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(CqgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(CqgStatus::from(&e), e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records any failure or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CqgStatus {
    set_last_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CqgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            CqgStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(CqgStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CqgStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(s).map_err(|e| Failure(CqgStatus::Parse, format!("{what}: {e}")))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string(v).map_err(|e| Failure(CqgStatus::Parse, e.to_string()))
}

/// # Safety
/// `out` is null or valid for writes.
unsafe fn hand_out(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(CqgStatus::NullArgument, "output pointer is null".into()));
    }
    let c = CString::new(s).map_err(|_| Failure(CqgStatus::InvalidUtf8, "output holds a NUL byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn null_out<T>(out: *mut *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure(CqgStatus::NullArgument, "output pointer is null".into()))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn cqg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cqg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or was returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn cqg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a vocabulary file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cqg_vocab_load(path: *const c_char, out: *mut *mut CqgVocab) -> CqgStatus {
    guard(|| {
        null_out(out)?;
        let path = read_str(path, "path")?;
        let vocab = Vocab::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(CqgVocab { vocab }));
        Ok(())
    })
}

/// Number of tokens, specials included. Zero for a null handle.
///
/// # Safety
/// `v` is null or a live handle from [`cqg_vocab_load`].
#[no_mangle]
pub unsafe extern "C" fn cqg_vocab_len(v: *const CqgVocab) -> usize {
    v.as_ref().map_or(0, |v| v.vocab.len())
}

/// # Safety
/// `v` is null or a live handle from [`cqg_vocab_load`].
#[no_mangle]
pub unsafe extern "C" fn cqg_vocab_free(v: *mut CqgVocab) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Loads a checkpoint and the vocabulary it was trained with.
///
/// # Safety
/// Both paths are NUL-terminated strings; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cqg_model_load(
    checkpoint: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut CqgModel,
) -> CqgStatus {
    guard(|| {
        null_out(out)?;
        let checkpoint = read_str(checkpoint, "checkpoint")?;
        let vocab_path = read_str(vocab_path, "vocab_path")?;
        let vocab = Vocab::load(Path::new(vocab_path))?;
        let (params, chain, _) = load_params(Path::new(checkpoint), None)?;
        if params.config().vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "checkpoint vocabulary {} differs from vocabulary file {}",
                params.config().vocab_size,
                vocab.len()
            ))
            .into());
        }
        *out = Box::into_raw(Box::new(CqgModel { params, chain, vocab }));
        Ok(())
    })
}

/// # Safety
/// `m` is null or a live handle from [`cqg_model_load`].
#[no_mangle]
pub unsafe extern "C" fn cqg_model_free(m: *mut CqgModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Generates the final question of a preprocessed example (one JSON object
/// in the preprocessed-example format). `sampler_json` may be null for the
/// default sampler. Writes the question text to `out_question` and whether
/// decoding hit the length limit to `out_truncated` (may be null).
///
/// # Safety
/// `m` is a live model handle; strings are NUL-terminated or null where
/// allowed; output pointers are valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cqg_generate(
    m: *const CqgModel,
    example_json: *const c_char,
    sampler_json: *const c_char,
    out_question: *mut *mut c_char,
    out_truncated: *mut bool,
) -> CqgStatus {
    guard(|| {
        let m = m
            .as_ref()
            .ok_or_else(|| Failure(CqgStatus::NullArgument, "model is null".into()))?;
        let ex: SubDialogueExample = json(read_str(example_json, "example_json")?, "example")?;
        let sampler: SamplerConfig = if sampler_json.is_null() {
            SamplerConfig::default()
        } else {
            json(read_str(sampler_json, "sampler_json")?, "sampler")?
        };
        sampler.validate()?;
        let mut r = rng::seeded(sampler.seed);
        let g = generate_question(&m.chain, &m.params, &ex, &m.vocab, &sampler, &mut r)?;
        let text = m.vocab.decode(&g.ids)?;
        hand_out(out_question, text)?;
        if let Some(t) = out_truncated.as_mut() {
            *t = g.truncated;
        }
        Ok(())
    })
}

/// Expands one dialogue (a line of the corpus format) into sub-dialogue
/// examples, returned as JSON Lines.
///
/// # Safety
/// `dialogue_json` is a NUL-terminated string; `out_jsonl` is valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn cqg_preprocess(
    dialogue_json: *const c_char,
    history: bool,
    highlight: bool,
    aq_order: bool,
    out_jsonl: *mut *mut c_char,
) -> CqgStatus {
    guard(|| {
        let d: Dialogue = json(read_str(dialogue_json, "dialogue_json")?, "dialogue")?;
        let opts = InputOptions {
            history,
            highlight,
            aq_order,
        };
        let mut s = String::new();
        for ex in preprocess_dialogue(&d, opts)? {
            s.push_str(&to_json(&ex)?);
            s.push('\n');
        }
        hand_out(out_jsonl, s)
    })
}

/// Scores candidate questions against references. Both arguments are JSON
/// arrays of strings of equal length; the report comes back as JSON.
///
/// # Safety
/// Both inputs are NUL-terminated strings; `out_report_json` is valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn cqg_score(
    candidates_json: *const c_char,
    references_json: *const c_char,
    out_report_json: *mut *mut c_char,
) -> CqgStatus {
    guard(|| {
        let c: Vec<String> = json(read_str(candidates_json, "candidates_json")?, "candidates")?;
        let r: Vec<String> = json(read_str(references_json, "references_json")?, "references")?;
        let c: Vec<Vec<String>> = c.iter().map(|s| tokenize(s)).collect();
        let r: Vec<Vec<String>> = r.iter().map(|s| tokenize(s)).collect();
        let report = MetricReport::score(&c, &r)?;
        hand_out(out_report_json, to_json(&report)?)
    })
}
