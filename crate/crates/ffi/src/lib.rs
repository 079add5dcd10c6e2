//! C ABI over `dna-core`.
//!
//! Objects cross the boundary as opaque handles ([`DnaConfig`],
//! [`DnaDataset`], [`DnaModel`]) created by `dna_*_new`/`_read`/`_generate`
//! style functions and released with the matching `_free`. Every fallible
//! function returns a [`DnaStatus`]; on failure the message is available from
//! [`dna_last_error`] on the same thread until the next failing call.
//! Strings returned as `char *` are owned by the caller and released with
//! [`dna_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dna_core::checkpoint::TensorDump;
use dna_core::config::{RunConfig, KEYS};
use dna_core::encoder::{embed, ParameterSet};
use dna_core::eval::{ari, evaluate_test_split, hungarian_acc, nmi, NeighborAuditor, Partition};
use dna_core::linalg::Matrix;
use dna_core::synthdata::{generate, read_dataset, write_dataset, Dataset, Split};
use dna_core::trainer::{config_meta, run, EpochMetrics, EvalSplit, RunData};
use dna_core::DnaError;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DnaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    MissingKey = 4,
    Structural = 5,
    Numeric = 6,
    Parse = 7,
    Io = 8,
    Panic = 9,
}

impl From<&DnaError> for DnaStatus {
    fn from(e: &DnaError) -> Self {
        match e {
            DnaError::Config(_) => DnaStatus::Config,
            DnaError::MissingKey(_) => DnaStatus::MissingKey,
            DnaError::Structural(_) => DnaStatus::Structural,
            DnaError::Numeric(_) => DnaStatus::Numeric,
            DnaError::Parse { .. } => DnaStatus::Parse,
            DnaError::Io { .. } => DnaStatus::Io,
        }
    }
}

/// Hierarchy spec plus training settings.
pub struct DnaConfig {
    inner: RunConfig,
}

/// A dataset with train and test splits.
pub struct DnaDataset {
    inner: Dataset,
}

/// A trained (or loaded) query encoder with its run history.
pub struct DnaModel {
    params: ParameterSet,
    k: usize,
    seed: u64,
    restarts: usize,
    history: Vec<EpochMetrics>,
}

/// Clustering scores as fractions in `[0, 1]` (ARI may be negative).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DnaScores {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
    /// kNN fine accuracy among test embeddings; NaN when unavailable.
    pub neighbor_acc: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DnaStatus, String);

impl From<DnaError> for Failure {
    fn from(e: DnaError) -> Self {
        Failure(DnaStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DnaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DnaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DnaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DnaStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            DnaStatus::InvalidUtf8,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_raw<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dna_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dna_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_config_default(out: *mut *mut DnaConfig) -> DnaStatus {
    guard(|| {
        *out_arg(out, "out")? = into_raw(DnaConfig {
            inner: RunConfig::default(),
        });
        Ok(())
    })
}

/// Parse a complete `key = value` config text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_config_parse(
    text: *const c_char,
    out: *mut *mut DnaConfig,
) -> DnaStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        let inner = RunConfig::parse(text)?;
        inner.validate()?;
        *out = into_raw(DnaConfig { inner });
        Ok(())
    })
}

/// Set one key using the config-file syntax for its value.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dna_config_set(
    cfg: *mut DnaConfig,
    key: *const c_char,
    value: *const c_char,
) -> DnaStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        if !KEYS.contains(&key) {
            return Err(Failure(DnaStatus::Config, format!("unknown key `{key}`")));
        }
        let text: String = cfg
            .inner
            .to_text()
            .lines()
            .map(|l| match l.split_once('=') {
                Some((k, _)) if k.trim() == key => format!("{key} = {value}\n"),
                _ => format!("{l}\n"),
            })
            .collect();
        let updated = RunConfig::parse(&text)?;
        updated.validate()?;
        cfg.inner = updated;
        Ok(())
    })
}

/// The config in file syntax; free with [`dna_string_free`].
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_config_to_text(
    cfg: *const DnaConfig,
    out: *mut *mut c_char,
) -> DnaStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        *out = CString::new(cfg.inner.to_text())
            .expect("config text has no NUL")
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dna_config_free(cfg: *mut DnaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_dataset_generate(
    cfg: *const DnaConfig,
    out: *mut *mut DnaDataset,
) -> DnaStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        *out = into_raw(DnaDataset {
            inner: generate(&cfg.inner.data)?,
        });
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_dataset_read(
    path: *const c_char,
    out: *mut *mut DnaDataset,
) -> DnaStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = into_raw(DnaDataset {
            inner: read_dataset(path)?,
        });
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dna_dataset_write(
    ds: *const DnaDataset,
    path: *const c_char,
) -> DnaStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        write_dataset(&ds.inner, path)?;
        Ok(())
    })
}

/// Sample counts and input dimension; any output pointer may be NULL.
///
/// # Safety
/// `ds` must be a live handle; non-NULL outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dna_dataset_shape(
    ds: *const DnaDataset,
    num_train: *mut usize,
    num_test: *mut usize,
    input_dim: *mut usize,
) -> DnaStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.inner;
        if let Some(p) = num_train.as_mut() {
            *p = ds.train.len();
        }
        if let Some(p) = num_test.as_mut() {
            *p = ds.test.len();
        }
        if let Some(p) = input_dim.as_mut() {
            *p = ds.input_dim;
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dna_dataset_free(ds: *mut DnaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Pretrain and train on `ds` with the settings in `cfg`.
///
/// # Safety
/// `cfg` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_train(
    cfg: *const DnaConfig,
    ds: *const DnaDataset,
    out: *mut *mut DnaModel,
) -> DnaStatus {
    guard(|| {
        let cfg = &ref_arg(cfg, "cfg")?.inner.train;
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = out_arg(out, "out")?;
        let train = ds.train_view();
        let eval = match ds.fine_labels(Split::Test) {
            Some(l) if !l.is_empty() => Some(EvalSplit::new(ds.inputs(Split::Test), l)?),
            _ => None,
        };
        let auditor = ds.fine_labels(Split::Train).map(NeighborAuditor::new);
        let data = RunData {
            train: &train,
            eval: eval.as_ref(),
            auditor: auditor.as_ref(),
        };
        let outcome = run(cfg, data, &mut ())?;
        *out = into_raw(DnaModel {
            params: outcome.state.params,
            k: cfg.k,
            seed: cfg.seed,
            restarts: cfg.eval_restarts,
            history: outcome.state.history,
        });
        Ok(())
    })
}

/// Load the query encoder from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_model_load(path: *const c_char, out: *mut *mut DnaModel) -> DnaStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let dump = TensorDump::read(path)?;
        let params = dump.read_params("query")?;
        params.validate()?;
        let meta = |key: &str, default: u64| -> Result<u64, Failure> {
            match dump.meta(key) {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| {
                    Failure(
                        DnaStatus::Structural,
                        format!("checkpoint meta `{key}` is not an integer"),
                    )
                }),
            }
        };
        *out = into_raw(DnaModel {
            params,
            k: meta("k", 1)? as usize,
            seed: meta("seed", 0)?,
            restarts: meta("eval_restarts", dna_core::eval::DEFAULT_RESTARTS as u64)? as usize,
            history: Vec::new(),
        });
        Ok(())
    })
}

/// Write the query encoder as a checkpoint readable by [`dna_model_load`]
/// and `dna eval`.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dna_model_save(model: *const DnaModel, path: *const c_char) -> DnaStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let mut d = TensorDump::new();
        d.set_meta("kind", "model");
        let cfg = dna_core::config::TrainConfig {
            k: m.k,
            seed: m.seed,
            eval_restarts: m.restarts,
            ..Default::default()
        };
        config_meta(&mut d, &cfg);
        d.push_params("query", &m.params);
        d.write(path)?;
        Ok(())
    })
}

/// Embedding dimension of the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_model_embed_dim(model: *const DnaModel, out: *mut usize) -> DnaStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.params.embed_dim();
        Ok(())
    })
}

/// Embed `rows` row-major input vectors of width `cols` into `out`, which
/// must hold `rows * embed_dim` doubles (`out_len`).
///
/// # Safety
/// `inputs` must point to `rows * cols` doubles and `out` to `out_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dna_model_embed(
    model: *const DnaModel,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> DnaStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(DnaStatus::Structural, "input size overflows".into()))?;
        let x = Matrix::from_vec(rows, cols, slice_arg(inputs, n, "inputs")?.to_vec())?;
        let emb = embed(&m.params, &x)?;
        if out_len != emb.as_slice().len() {
            return Err(Failure(
                DnaStatus::Structural,
                format!(
                    "output buffer holds {out_len} values, need {}",
                    emb.as_slice().len()
                ),
            ));
        }
        if out_len > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(emb.as_slice());
        }
        Ok(())
    })
}

/// Score the model on the test split of `ds`.
///
/// # Safety
/// `model` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_model_evaluate(
    model: *const DnaModel,
    ds: *const DnaDataset,
    out: *mut DnaScores,
) -> DnaStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = out_arg(out, "out")?;
        let (s, nacc) = evaluate_test_split(&m.params, ds, m.seed, m.k, m.restarts)?;
        *out = DnaScores {
            acc: s.acc,
            ari: s.ari,
            nmi: s.nmi,
            neighbor_acc: nacc.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Number of recorded training epochs (0 for a loaded checkpoint).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_model_num_epochs(
    model: *const DnaModel,
    out: *mut usize,
) -> DnaStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.history.len();
        Ok(())
    })
}

/// Per-epoch metrics as a JSON array; free with [`dna_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dna_model_history_json(
    model: *const DnaModel,
    out: *mut *mut c_char,
) -> DnaStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        let text = serde_json::to_string(&m.history).expect("metrics serialize");
        *out = CString::new(text).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dna_model_free(model: *mut DnaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn partitions(
    pred: *const usize,
    truth: *const usize,
    len: usize,
) -> Result<(Partition, Partition), Failure> {
    let p = slice_arg(pred, len, "pred")?.to_vec();
    let t = slice_arg(truth, len, "truth")?.to_vec();
    Ok((Partition::new(p), Partition::new(t)))
}

/// Hungarian-matched clustering accuracy of two label vectors of length `len`.
///
/// # Safety
/// `pred` and `truth` must point to `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dna_hungarian_acc(
    pred: *const usize,
    truth: *const usize,
    len: usize,
    out: *mut f64,
) -> DnaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (p, t) = partitions(pred, truth, len)?;
        *out = hungarian_acc(&p, &t)?;
        Ok(())
    })
}

/// Adjusted Rand index.
///
/// # Safety
/// As for [`dna_hungarian_acc`].
#[no_mangle]
pub unsafe extern "C" fn dna_ari(
    pred: *const usize,
    truth: *const usize,
    len: usize,
    out: *mut f64,
) -> DnaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (p, t) = partitions(pred, truth, len)?;
        *out = ari(&p, &t)?;
        Ok(())
    })
}

/// Normalized mutual information (arithmetic-mean normalization).
///
/// # Safety
/// As for [`dna_hungarian_acc`].
#[no_mangle]
pub unsafe extern "C" fn dna_nmi(
    pred: *const usize,
    truth: *const usize,
    len: usize,
    out: *mut f64,
) -> DnaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (p, t) = partitions(pred, truth, len)?;
        *out = nmi(&p, &t)?;
        Ok(())
    })
}
