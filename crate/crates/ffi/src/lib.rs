//! C interface to heritkit.
//!
//! Objects are opaque handles created by `hk_*_new`/`hk_*_read` and released
//! with the matching `hk_*_free`. Every fallible call returns an [`HkStatus`];
//! on failure [`hk_last_error`] gives a message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use heritkit::design::{self, CovariateSpec, PhenotypeTable};
use heritkit::gblup::{self, PredictionSet};
use heritkit::geno::{self, GenotypeMatrix, KinshipMatrix, PloidyMode};
use heritkit::gwas::{self, ScanData, ScanOptions};
use heritkit::herit::{self, HeritOptions, HeritabilityEstimate};
use heritkit::io;
use heritkit::reml::Stage;
use heritkit::Error;
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Dimension = 3,
    MissingValues = 4,
    MissingAccession = 5,
    Singular = 6,
    NotEstimable = 7,
    NoConvergence = 8,
    Degenerate = 9,
    Io = 10,
    Parse = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HkMethod {
    Replicates = 0,
    Means = 1,
    Anova = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HkStage {
    One = 0,
    Two = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HkMode {
    Inbred = 0,
    Outbred = 1,
}

/// Point estimate and intervals; `ci_log_*` are NaN when not available.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HkEstimate {
    pub h2: f64,
    pub sigma_a2: f64,
    pub sigma_e2: f64,
    pub ci_std_lo: f64,
    pub ci_std_hi: f64,
    pub ci_log_lo: f64,
    pub ci_log_hi: f64,
    pub monotone: bool,
}

/// Opaque kinship matrix with accession ids.
pub struct HkKinship(KinshipMatrix);

/// Opaque phenotype records with their covariate declarations.
pub struct HkPhenotypes {
    table: PhenotypeTable,
    covariates: Vec<CovariateSpec>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HkStatus {
    match e {
        Error::InvalidInput(_) | Error::AllMonomorphic | Error::NotApplicable(_) | Error::QtlSampling { .. } => {
            HkStatus::InvalidInput
        }
        Error::Dimension(_) => HkStatus::Dimension,
        Error::MissingValues { .. } => HkStatus::MissingValues,
        Error::MissingAccession(_) => HkStatus::MissingAccession,
        Error::Singular(_) => HkStatus::Singular,
        Error::NotEstimable(_) => HkStatus::NotEstimable,
        Error::NoConvergence(_) => HkStatus::NoConvergence,
        Error::DegenerateKinship(_) | Error::Degenerate(_) => HkStatus::Degenerate,
        Error::Io(_) => HkStatus::Io,
        Error::Parse(_) | Error::Csv(_) => HkStatus::Parse,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HkStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HkStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            HkStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            HkStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string(p: *const c_char, what: &'static str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| Failure::Lib(Error::InvalidInput(format!("{what} is not UTF-8"))))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn mode_of(m: HkMode) -> PloidyMode {
    match m {
        HkMode::Inbred => PloidyMode::Inbred,
        HkMode::Outbred => PloidyMode::Outbred,
    }
}

fn stage_of(s: HkStage) -> Stage {
    match s {
        HkStage::One => Stage::Individual,
        HkStage::Two => Stage::Means,
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next heritkit call on the same thread.
#[no_mangle]
pub extern "C" fn hk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Kinship from `n` x `m` row-major allele counts; accessions are named by index.
///
/// # Safety
/// `calls` must hold `n * m` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hk_kinship_from_calls(
    calls: *const f64,
    n: usize,
    m: usize,
    mode: HkMode,
    maf_min: f64,
    scale: bool,
    out: *mut *mut HkKinship,
) -> HkStatus {
    guard(|| {
        let c = slice(calls, n * m, "calls")?;
        let ids = (0..n).map(|i| i.to_string()).collect();
        let markers = (0..m).map(|l| l.to_string()).collect();
        let g = GenotypeMatrix::new(ids, markers, DMatrix::from_row_slice(n, m, c))?;
        let k = geno::kinship_from_genotypes(&g, mode_of(mode), maf_min, scale)?;
        put(out, HkKinship(k))
    })
}

/// Kinship from an `n` x `n` row-major matrix; accessions are named by index.
///
/// # Safety
/// `values` must hold `n * n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hk_kinship_new(values: *const f64, n: usize, out: *mut *mut HkKinship) -> HkStatus {
    guard(|| {
        let v = slice(values, n * n, "values")?;
        let ids = (0..n).map(|i| i.to_string()).collect();
        put(out, HkKinship(KinshipMatrix::new(ids, DMatrix::from_row_slice(n, n, v))?))
    })
}

/// Reads a kinship CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hk_kinship_read(path: *const c_char, out: *mut *mut HkKinship) -> HkStatus {
    guard(|| {
        let p = string(path, "path")?;
        put(out, HkKinship(io::read_kinship(Path::new(&p))?))
    })
}

/// # Safety
/// `k` must be a valid handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn hk_kinship_size(k: *const HkKinship) -> usize {
    k.as_ref().map_or(0, |k| k.0.n())
}

/// Copies the matrix row-major into `buf` of length `len` (at least n * n).
///
/// # Safety
/// `k` must be a valid handle and `buf` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn hk_kinship_values(k: *const HkKinship, buf: *mut f64, len: usize) -> HkStatus {
    guard(|| {
        let k = &deref(k, "kinship")?.0;
        let n = k.n();
        if len < n * n {
            return Err(Error::Dimension(format!("buffer holds {len} values, need {}", n * n)).into());
        }
        let b = slice_mut(buf, len, "buf")?;
        for i in 0..n {
            for j in 0..n {
                b[i * n + j] = k.k[(i, j)];
            }
        }
        Ok(())
    })
}

/// # Safety
/// `k` must be a handle from this library, not yet freed, or NULL.
#[no_mangle]
pub unsafe extern "C" fn hk_kinship_free(k: *mut HkKinship) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// Records without covariates; `genotype[i]` indexes the accessions of `k`.
///
/// # Safety
/// `genotype` and `values` must hold `len` entries; `k` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hk_phenotypes_new(
    k: *const HkKinship,
    genotype: *const usize,
    values: *const f64,
    len: usize,
    out: *mut *mut HkPhenotypes,
) -> HkStatus {
    guard(|| {
        let k = &deref(k, "kinship")?.0;
        let g = slice(genotype, len, "genotype")?;
        let v = slice(values, len, "values")?;
        let ids = g
            .iter()
            .map(|&i| {
                k.accession_ids.get(i).cloned().ok_or_else(|| Error::Dimension(format!("genotype index {i} >= {}", k.n())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let table = PhenotypeTable::without_covariates(ids, v.to_vec())?;
        put(out, HkPhenotypes { table, covariates: Vec::new() })
    })
}

/// Reads a phenotype CSV; `factors` is a comma-separated list or NULL.
///
/// # Safety
/// `path` (and `factors` when not NULL) must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hk_phenotypes_read(
    path: *const c_char,
    factors: *const c_char,
    out: *mut *mut HkPhenotypes,
) -> HkStatus {
    guard(|| {
        let p = string(path, "path")?;
        let f: Vec<String> = if factors.is_null() {
            Vec::new()
        } else {
            string(factors, "factors")?.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
        };
        let (table, covariates) = io::read_phenotypes(Path::new(&p), &f)?;
        put(out, HkPhenotypes { table, covariates })
    })
}

/// # Safety
/// `p` must be a valid handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn hk_phenotypes_len(p: *const HkPhenotypes) -> usize {
    p.as_ref().map_or(0, |p| p.table.len())
}

/// # Safety
/// `p` must be a handle from this library, not yet freed, or NULL.
#[no_mangle]
pub unsafe extern "C" fn hk_phenotypes_free(p: *mut HkPhenotypes) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn estimate_of(e: &HeritabilityEstimate) -> HkEstimate {
    HkEstimate {
        h2: e.h2,
        sigma_a2: e.sigma_a2,
        sigma_e2: e.sigma_e2,
        ci_std_lo: e.ci_standard.lo,
        ci_std_hi: e.ci_standard.hi,
        ci_log_lo: e.ci_log.map_or(f64::NAN, |c| c.lo),
        ci_log_hi: e.ci_log.map_or(f64::NAN, |c| c.hi),
        monotone: e.monotone,
    }
}

fn check_alignment(p: &PhenotypeTable, k: &KinshipMatrix) -> Result<(), Error> {
    let known: std::collections::HashSet<&str> = k.accession_ids.iter().map(String::as_str).collect();
    match p.genotypes().iter().find(|g| !known.contains(g.as_str())) {
        Some(g) => Err(Error::MissingAccession(g.clone())),
        None => Ok(()),
    }
}

/// Heritability by one method; `k` may be NULL for `HkMethod::Anova`.
///
/// # Safety
/// `p` must be valid, `k` valid or NULL, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hk_estimate(
    p: *const HkPhenotypes,
    k: *const HkKinship,
    method: HkMethod,
    alpha: f64,
    out: *mut HkEstimate,
) -> HkStatus {
    guard(|| {
        let p = deref(p, "phenotypes")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let opts = HeritOptions { alpha, ..HeritOptions::default() };
        let est = match method {
            HkMethod::Anova => herit::broad_sense_h2(&p.table, &p.covariates, alpha)?,
            HkMethod::Replicates | HkMethod::Means => {
                let k = &deref(k, "kinship")?.0;
                check_alignment(&p.table, k)?;
                if method == HkMethod::Replicates {
                    herit::h2_replicates(&p.table, k, &p.covariates, &opts)?
                } else {
                    herit::h2_means(&design::compute_blues(&p.table, &p.covariates)?, k, &opts)?
                }
            }
        };
        *out = estimate_of(&est);
        Ok(())
    })
}

/// G-BLUP of every accession of `k`, written to `g_out` in kinship order:
/// phenotyped accessions get their training BLUP, the rest are predicted.
///
/// # Safety
/// `p` and `k` must be valid; `g_out` must hold `len >= hk_kinship_size(k)` values.
#[no_mangle]
pub unsafe extern "C" fn hk_gblup(
    p: *const HkPhenotypes,
    k: *const HkKinship,
    stage: HkStage,
    g_out: *mut f64,
    len: usize,
) -> HkStatus {
    guard(|| {
        let p = deref(p, "phenotypes")?;
        let k = &deref(k, "kinship")?.0;
        if len < k.n() {
            return Err(Error::Dimension(format!("buffer holds {len} values for {} accessions", k.n())).into());
        }
        let out = slice_mut(g_out, len, "g_out")?;
        check_alignment(&p.table, k)?;
        let opts = HeritOptions::default();
        let (model, est, train) = match stage_of(stage) {
            Stage::Individual => (
                herit::individual_model(&p.table, k, &p.covariates)?,
                herit::h2_replicates(&p.table, k, &p.covariates, &opts)?,
                p.table.genotype_ids(),
            ),
            Stage::Means => {
                let m = design::compute_blues(&p.table, &p.covariates)?;
                (herit::means_model(&m, k)?, herit::h2_means(&m, k, &opts)?, m.genotype_ids)
            }
        };
        let fit = gblup::fit_blup(&model, est.sigma_a2 / est.sigma_e2)?;
        let trained: std::collections::HashSet<&str> = train.iter().map(String::as_str).collect();
        let rest: Vec<String> = k.accession_ids.iter().filter(|id| !trained.contains(id.as_str())).cloned().collect();
        let pred = gblup::predict_unobserved(&fit, PredictionSet::from_kinship(k, &train, &rest)?)?;
        let mut value: std::collections::HashMap<&str, f64> =
            train.iter().map(String::as_str).zip(fit.g_hat.iter().copied()).collect();
        value.extend(rest.iter().map(String::as_str).zip(pred.g_pred_hat.iter().copied()));
        for (i, id) in k.accession_ids.iter().enumerate() {
            out[i] = value[id.as_str()];
        }
        Ok(())
    })
}

/// GLS scan of `m` markers. `calls` is row-major with one row per accession of
/// `k`, in kinship order. Untestable markers get NaN in every output.
///
/// # Safety
/// `calls` must hold `hk_kinship_size(k) * m` values; `effect_out` and
/// `p_out` must hold `m` values; `p` and `k` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hk_gwas(
    p: *const HkPhenotypes,
    k: *const HkKinship,
    calls: *const f64,
    m: usize,
    stage: HkStage,
    maf_min: f64,
    effect_out: *mut f64,
    p_out: *mut f64,
) -> HkStatus {
    guard(|| {
        let p = deref(p, "phenotypes")?;
        let k = &deref(k, "kinship")?.0;
        let n = k.n();
        let c = slice(calls, n * m, "calls")?;
        let effect = slice_mut(effect_out, m, "effect_out")?;
        let pv = slice_mut(p_out, m, "p_out")?;
        check_alignment(&p.table, k)?;
        let g = GenotypeMatrix::new(k.accession_ids.clone(), (0..m).map(|l| l.to_string()).collect(), DMatrix::from_row_slice(n, m, c))?;
        let data = match stage_of(stage) {
            Stage::Individual => ScanData::one_stage(&p.table, k, &p.covariates)?,
            Stage::Means => ScanData::two_stage(&design::compute_blues(&p.table, &p.covariates)?, k)?,
        };
        let opts = ScanOptions { maf_min, ..ScanOptions::default() };
        let null = gwas::fit_null(&data, &opts.reml)?;
        let scan = gwas::gls_scan(&data, &g, &null, &opts)?;
        for (l, r) in scan.markers.iter().enumerate() {
            effect[l] = if r.testable { r.effect } else { f64::NAN };
            pv[l] = if r.testable { r.p } else { f64::NAN };
        }
        Ok(())
    })
}
