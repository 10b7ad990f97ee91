//! C ABI over `bem-core`.
//!
//! Every fallible function returns a [`BemStatus`]. On failure the message
//! is kept per thread and can be copied out with [`bem_last_error`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bem_core::batchfile::{write_batches, BatchFileHeader, BatchFormat};
use bem_core::corpus::load_corpus;
use bem_core::error::Error;
use bem_core::lexicon::EntityLexicon;
use bem_core::masking::{make_batches, MaskingConfig, Strategy};
use bem_core::metrics::{aggregate_passages, evaluate, read_golds, read_predictions, DatasetKind};
use bem_core::tokenizer::{tokenize, Vocab};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BemStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    InvalidConfig = 5,
    InvalidInput = 6,
    UndefinedMetric = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BemStrategy {
    Stm = 0,
    Bem = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BemFormat {
    Binary = 0,
    Jsonl = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BemDataset {
    Bioasq = 0,
    Covidqa = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BemMaskingOptions {
    pub strategy: BemStrategy,
    pub rho: f64,
    pub seed: u64,
    pub window_len: u32,
    pub batch_size: u32,
    pub background_stm: bool,
}

/// Metric values. Accuracies are NaN when the golds are sentence indices.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BemMetrics {
    pub questions: usize,
    pub p_at_1: f64,
    pub r_at_3: f64,
    pub mrr: f64,
    pub strict_acc: f64,
    pub lenient_acc: f64,
}

pub struct BemVocab(Vocab);

pub struct BemLexicon(EntityLexicon);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(BemStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => BemStatus::Io,
            Error::Format { .. } => BemStatus::Format,
            Error::Config(_) => BemStatus::InvalidConfig,
            Error::UndefinedMetric(_) => BemStatus::UndefinedMetric,
            Error::Invariant(_) => BemStatus::Internal,
            _ => BemStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BemStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BemStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside bem-core".into());
            BemStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(BemStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(BemStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(BemStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(BemStatus::NullArgument, format!("{name} is null")))
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bem_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bem_vocab_load(path: *const c_char, lowercase: bool, out: *mut *mut BemVocab) -> BemStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let vocab = Vocab::load(str_arg(path, "path")?)?.with_lowercase(lowercase);
        *out = Box::into_raw(Box::new(BemVocab(vocab)));
        Ok(())
    })
}

/// # Safety
/// `vocab` must be null or a handle from [`bem_vocab_load`].
#[no_mangle]
pub unsafe extern "C" fn bem_vocab_size(vocab: *const BemVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.len())
}

/// # Safety
/// `vocab` must be null or a handle from [`bem_vocab_load`] not freed yet.
#[no_mangle]
pub unsafe extern "C" fn bem_vocab_free(vocab: *mut BemVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Tokenizes `text` into `ids`. `out_len` always receives the number of
/// tokens; if it exceeds `cap` nothing is written and `BufferTooSmall` is
/// returned.
///
/// # Safety
/// `ids` must point to `cap` writable values (or be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn bem_tokenize(
    vocab: *const BemVocab,
    text: *const c_char,
    ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> BemStatus {
    guard(|| {
        let vocab = ref_arg(vocab, "vocab")?;
        let out_len = out_arg(out_len, "out_len")?;
        let spans = tokenize(str_arg(text, "text")?, &vocab.0);
        *out_len = spans.len();
        if spans.len() > cap {
            return Err(Failure(
                BemStatus::BufferTooSmall,
                format!("{} tokens do not fit in a buffer of {cap}", spans.len()),
            ));
        }
        if !spans.is_empty() {
            if ids.is_null() {
                return Err(Failure(BemStatus::NullArgument, "ids is null".into()));
            }
            let dst = std::slice::from_raw_parts_mut(ids, spans.len());
            for (d, s) in dst.iter_mut().zip(&spans) {
                *d = s.token_id;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bem_lexicon_load(path: *const c_char, out: *mut *mut BemLexicon) -> BemStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let lexicon = EntityLexicon::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(BemLexicon(lexicon)));
        Ok(())
    })
}

/// # Safety
/// `lexicon` must be null or a handle from [`bem_lexicon_load`].
#[no_mangle]
pub unsafe extern "C" fn bem_lexicon_size(lexicon: *const BemLexicon) -> usize {
    lexicon.as_ref().map_or(0, |l| l.0.len())
}

/// # Safety
/// `lexicon` must be null or a handle from [`bem_lexicon_load`] not freed yet.
#[no_mangle]
pub unsafe extern "C" fn bem_lexicon_free(lexicon: *mut BemLexicon) {
    if !lexicon.is_null() {
        drop(Box::from_raw(lexicon));
    }
}

#[no_mangle]
pub extern "C" fn bem_masking_options_default() -> BemMaskingOptions {
    let c = MaskingConfig::bem(0.3, 0);
    BemMaskingOptions {
        strategy: BemStrategy::Stm,
        rho: c.rho,
        seed: c.seed,
        window_len: c.window_len as u32,
        batch_size: c.batch_size as u32,
        background_stm: false,
    }
}

fn masking_config(o: &BemMaskingOptions) -> MaskingConfig {
    let base = match o.strategy {
        BemStrategy::Stm => MaskingConfig::stm(o.seed),
        BemStrategy::Bem => MaskingConfig::bem(o.rho, o.seed),
    };
    MaskingConfig {
        rho: o.rho,
        window_len: o.window_len as usize,
        batch_size: o.batch_size as usize,
        background_stm: o.background_stm,
        ..base
    }
}

/// Masks the corpus JSONL at `corpus_path` and writes a batch file to
/// `out_path`. `lexicon` may be null for the STM strategy.
///
/// # Safety
/// Paths must be NUL-terminated strings; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn bem_mask_corpus(
    corpus_path: *const c_char,
    vocab: *const BemVocab,
    lexicon: *const BemLexicon,
    options: *const BemMaskingOptions,
    format: BemFormat,
    out_path: *const c_char,
) -> BemStatus {
    guard(|| {
        let vocab = &ref_arg(vocab, "vocab")?.0;
        let config = masking_config(ref_arg(options, "options")?);
        config.validate()?;
        if config.strategy == Strategy::Bem && lexicon.is_null() {
            return Err(Failure(BemStatus::InvalidConfig, "the BEM strategy needs a lexicon".into()));
        }
        let corpus = load_corpus(str_arg(corpus_path, "corpus_path")?)?;
        let out = PathBuf::from(str_arg(out_path, "out_path")?);
        let batches = make_batches(&corpus, lexicon.as_ref().map(|l| &l.0), vocab, &config)?;
        let format = match format {
            BemFormat::Binary => BatchFormat::Binary,
            BemFormat::Jsonl => BatchFormat::Jsonl,
        };
        write_batches(&out, format, &BatchFileHeader::new(vocab, &config, None), &batches)?;
        Ok(())
    })
}

/// Evaluates a predictions JSONL against a golds JSONL.
///
/// # Safety
/// Paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bem_evaluate(
    predictions_path: *const c_char,
    golds_path: *const c_char,
    dataset: BemDataset,
    out: *mut BemMetrics,
) -> BemStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let preds = read_predictions(str_arg(predictions_path, "predictions_path")?, None)?;
        let golds = read_golds(str_arg(golds_path, "golds_path")?)?;
        let kind = match dataset {
            BemDataset::Bioasq => DatasetKind::Bioasq,
            BemDataset::Covidqa => DatasetKind::Covidqa,
        };
        let report = evaluate(kind, &aggregate_passages(&preds), &golds)?;
        let m = report.metrics;
        *out = BemMetrics {
            questions: report.questions,
            p_at_1: m.p_at_1,
            r_at_3: m.r_at_3,
            mrr: m.mrr,
            strict_acc: m.strict_acc.unwrap_or(f64::NAN),
            lenient_acc: m.lenient_acc.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}
