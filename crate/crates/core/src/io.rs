//! CSV readers and writers for genotypes, kinship, phenotypes and results,
//! plus the run manifest written next to every output.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::warn;
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::design::{CovariateSpec, GenotypicMeans, PhenotypeTable};
use crate::error::{invalid, Error, Result};
use crate::gblup::CvRecord;
use crate::geno::{GenotypeMatrix, KinshipMatrix};
use crate::gwas::ScanResult;
use crate::herit::{AsymptoticRow, HeritabilityEstimate};
use crate::reml::Stage;
use crate::sim::StudyReport;

/// Formats with 10 significant digits, dropping trailing zeros.
pub fn sig10(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    let s = if (-5..10).contains(&exp) {
        format!("{:.*}", (9 - exp).max(0) as usize, v)
    } else {
        format!("{v:.9e}")
    };
    trim_zeros(&s)
}

fn trim_zeros(s: &str) -> String {
    let (mantissa, exponent) = match s.find('e') {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let m = if mantissa.contains('.') { mantissa.trim_end_matches('0').trim_end_matches('.') } else { mantissa };
    format!("{m}{exponent}")
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(file))
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn parse_call(cell: &str, row: usize, col: usize) -> Result<Option<f64>> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    cell.parse::<i64>()
        .map(|v| Some(v as f64))
        .map_err(|_| Error::Parse(format!("genotype call `{cell}` at row {}, column {} is not an integer", row + 1, col + 1)))
}

/// Reads `accession,marker1,...` (or the transposed layout with markers as rows).
pub fn read_genotypes(path: &Path, markers_as_rows: bool, impute_mean: bool) -> Result<GenotypeMatrix> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut row_ids = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        row_ids.push(rec[0].to_string());
        cells.push(rec.iter().skip(1).enumerate().map(|(c, v)| parse_call(v, r, c + 1)).collect::<Result<_>>()?);
    }
    let (n_rows, n_cols) = (row_ids.len(), header.len());
    let (accessions, markers, calls) = if markers_as_rows {
        (header, row_ids, DMatrix::from_fn(n_cols, n_rows, |i, l| cells[l][i]))
    } else {
        (row_ids, header, DMatrix::from_fn(n_rows, n_cols, |i, l| cells[i][l]))
    };
    GenotypeMatrix::from_partial(accessions, markers, calls, impute_mean)
}

pub fn write_genotypes(path: &Path, g: &GenotypeMatrix) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(std::iter::once("accession").chain(g.marker_ids().iter().map(String::as_str)))?;
    for (i, id) in g.accession_ids().iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(g.calls().row(i).iter().map(|v| format!("{}", *v as i64)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_square(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let ids: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let n = ids.len();
    let mut m = DMatrix::zeros(n, n);
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i >= n {
            return Err(Error::Parse(format!("{}: more than {n} rows", path.display())));
        }
        for (j, v) in rec.iter().enumerate() {
            m[(i, j)] = v.parse().map_err(|_| Error::Parse(format!("{}: `{v}` at row {}, column {} is not a number", path.display(), i + 1, j + 1)))?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Parse(format!("{}: {rows} rows for {n} ids", path.display())));
    }
    Ok((ids, m))
}

fn write_square(path: &Path, ids: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(ids)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|&v| sig10(v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_kinship(path: &Path) -> Result<KinshipMatrix> {
    let (ids, k) = read_square(path)?;
    KinshipMatrix::new(ids, k)
}

pub fn write_kinship(path: &Path, k: &KinshipMatrix) -> Result<()> {
    write_square(path, &k.accession_ids, &k.k)
}

/// Reads `genotype,value[,covariates]`; columns named in `factors` are
/// categorical and all other covariates numeric. Records without a value are
/// dropped; a genotype left without records is an error.
pub fn read_phenotypes(path: &Path, factors: &[String]) -> Result<(PhenotypeTable, Vec<CovariateSpec>)> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return invalid(format!("{}: expected at least the columns genotype,value", path.display()));
    }
    let cov_names: Vec<String> = header[2..].to_vec();
    for f in factors {
        if !cov_names.contains(f) {
            return invalid(format!("factor `{f}` is not a column of {}", path.display()));
        }
    }
    let mut genotype = Vec::new();
    let mut value = Vec::new();
    let mut cov_cols: Vec<Vec<String>> = vec![Vec::new(); cov_names.len()];
    let mut seen = Vec::new();
    let mut seen_set: HashSet<String> = HashSet::new();
    let mut kept: HashSet<String> = HashSet::new();
    let mut dropped = 0usize;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let g = rec[0].to_string();
        if seen_set.insert(g.clone()) {
            seen.push(g.clone());
        }
        let v = &rec[1];
        if v.is_empty() || v.eq_ignore_ascii_case("na") {
            dropped += 1;
            continue;
        }
        let v: f64 = v.parse().map_err(|_| Error::Parse(format!("{}: value `{v}` in row {} is not a number", path.display(), r + 2)))?;
        for (j, col) in cov_cols.iter_mut().enumerate() {
            let c = &rec[j + 2];
            if c.is_empty() {
                return Err(Error::MissingValues { what: format!("covariate `{}`", cov_names[j]), row: r, column: j + 2 });
            }
            col.push(c.to_string());
        }
        kept.insert(g.clone());
        genotype.push(g);
        value.push(v);
    }
    if dropped > 0 {
        warn!("dropped {dropped} records without a phenotype value");
    }
    if let Some(g) = seen.iter().find(|g| !kept.contains(*g)) {
        return invalid(format!("genotype `{g}` has no observed replicates"));
    }
    let specs: Vec<CovariateSpec> = cov_names
        .iter()
        .map(|c| if factors.contains(c) { CovariateSpec::factor(c) } else { CovariateSpec::numeric(c) })
        .collect();
    let table = PhenotypeTable::new(genotype, value, cov_names, cov_cols)?;
    Ok((table, specs))
}

pub fn write_phenotypes(path: &Path, p: &PhenotypeTable) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["genotype".to_string(), "value".to_string()];
    header.extend(p.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..p.len() {
        let mut row = vec![p.genotypes()[i].clone(), fmt(p.values()[i])];
        for name in p.covariate_names() {
            row.push(p.covariate(name).map(|c| c[i].clone()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_means(path: &Path, m: &GenotypicMeans) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["genotype", "mean", "replicates"])?;
    for (i, id) in m.genotype_ids.iter().enumerate() {
        w.write_record([id.clone(), fmt(m.g_hat[i]), m.replicates[i].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_residual_matrix(path: &Path, m: &GenotypicMeans) -> Result<()> {
    write_square(path, &m.genotype_ids, &m.r)
}

pub fn write_estimates(path: &Path, rows: &[HeritabilityEstimate]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "h2", "sigma_A2", "sigma_E2", "ci_std_lo", "ci_std_hi", "ci_log_lo", "ci_log_hi", "monotone"])?;
    for e in rows {
        w.write_record([
            e.method.name().to_string(),
            fmt(e.h2),
            fmt(e.sigma_a2),
            fmt(e.sigma_e2),
            fmt(e.ci_standard.lo),
            fmt(e.ci_standard.hi),
            fmt_opt(e.ci_log.map(|c| c.lo)),
            fmt_opt(e.ci_log.map(|c| c.hi)),
            e.monotone.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Profile log-likelihood rows as (method, h2, loglik).
pub fn write_profile(path: &Path, rows: &[(&str, f64, f64)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "h2", "loglik"])?;
    for (m, h, l) in rows {
        w.write_record([m.to_string(), fmt(*h), fmt(*l)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_asymptotic(path: &Path, rows: &[AsymptoticRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["r", "h2", "sd_individual", "sd_means", "ratio"])?;
    for r in rows {
        w.write_record([r.r.to_string(), fmt(r.h2), fmt(r.sd_individual), fmt(r.sd_means), fmt(r.ratio())])?;
    }
    w.flush()?;
    Ok(())
}

pub fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Individual => "one",
        Stage::Means => "two",
    }
}

/// One row of a G-BLUP output table.
#[derive(Debug, Clone, PartialEq)]
pub struct BlupRow {
    pub genotype: String,
    pub set: &'static str,
    pub g_hat: f64,
    pub pev: Option<f64>,
}

pub fn write_blup(path: &Path, rows: &[BlupRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["genotype", "set", "g_hat", "pev"])?;
    for r in rows {
        w.write_record([r.genotype.clone(), r.set.to_string(), fmt(r.g_hat), fmt_opt(r.pev)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cv(path: &Path, rows: &[CvRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["repeat", "stage", "h2_hat", "r_train", "r_valid"])?;
    for r in rows {
        w.write_record([r.repeat.to_string(), stage_name(r.stage).to_string(), fmt(r.h2_hat), fmt(r.r_train), fmt(r.r_valid)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scan(path: &Path, scan: &ScanResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["marker", "maf", "effect", "se", "F", "p", "testable"])?;
    for m in &scan.markers {
        w.write_record([m.marker.clone(), fmt(m.maf), fmt(m.effect), fmt(m.se), fmt(m.f), fmt(m.p), m.testable.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an id list: comma separated, or `@file` with one or more ids per line.
pub fn read_id_list(spec: &str) -> Result<Vec<String>> {
    let text = match spec.strip_prefix('@') {
        Some(p) => fs::read_to_string(p)?,
        None => spec.to_string(),
    };
    Ok(text.split([',', '\n', '\r']).map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect())
}

/// Writes every study table into `dir`; returns the files written.
pub fn write_study(dir: &Path, report: &StudyReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let path = dir.join("precision.csv");
    let mut w = writer(&path)?;
    w.write_record(["h2", "estimator", "mean", "bias", "sd", "relative_sd"])?;
    for r in report.precision_table() {
        w.write_record([fmt(r.h2), r.label.to_string(), fmt(r.mean), fmt(r.bias), fmt(r.sd), fmt(r.relative_sd)])?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("coverage.csv");
    let mut w = writer(&path)?;
    w.write_record(["h2", "interval", "coverage", "width"])?;
    for r in report.coverage_table() {
        w.write_record([fmt(r.h2), r.label.to_string(), fmt(r.coverage), fmt(r.width)])?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("accuracy.csv");
    let mut w = writer(&path)?;
    w.write_record([
        "h2",
        "interval",
        "share_replicates",
        "share_means",
        "r_train_replicates",
        "r_train_means",
        "r_valid_replicates",
        "r_valid_means",
    ])?;
    for r in report.accuracy_table() {
        w.write_record([
            fmt(r.h2),
            r.interval.clone(),
            fmt(r.share_replicates),
            fmt(r.share_means),
            fmt(r.r_train_replicates),
            fmt(r.r_train_means),
            fmt(r.r_valid_replicates),
            fmt(r.r_valid_means),
        ])?;
    }
    w.flush()?;
    written.push(path);

    let gwas_rows = report.gwas_table();
    let path = dir.join("gwas.csv");
    let mut w = writer(&path)?;
    w.write_record(["h2", "stage", "auc", "type1_error", "markers"])?;
    for r in &gwas_rows {
        w.write_record([fmt(r.h2), stage_name(r.stage).to_string(), fmt(r.auc), fmt(r.type1_error), r.markers.to_string()])?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("roc.csv");
    let mut w = writer(&path)?;
    w.write_record(["h2", "stage", "threshold", "fp", "tp"])?;
    for r in &gwas_rows {
        for p in report.roc(r.h2, r.stage) {
            w.write_record([fmt(r.h2), stage_name(r.stage).to_string(), fmt(p.threshold), p.fp.to_string(), p.tp.to_string()])?;
        }
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("traits.csv");
    let mut w = writer(&path)?;
    w.write_record(["h2", "sim", "estimator", "h2_hat", "ci_std_lo", "ci_std_hi", "ci_log_lo", "ci_log_hi", "monotone", "r_train", "r_valid", "error"])?;
    for t in &report.traits {
        let h = fmt(t.h2_target);
        let sim = t.sim.to_string();
        if let Some(e) = &t.error {
            w.write_record([h.as_str(), sim.as_str(), "", "", "", "", "", "", "", "", "", e.as_str()])?;
            continue;
        }
        for e in &t.estimates {
            w.write_record([
                h.clone(),
                sim.clone(),
                e.method.name().to_string(),
                fmt(e.h2),
                fmt(e.ci_standard.lo),
                fmt(e.ci_standard.hi),
                fmt_opt(e.ci_log.map(|c| c.lo)),
                fmt_opt(e.ci_log.map(|c| c.hi)),
                e.monotone.to_string(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        for a in &t.accuracy {
            w.write_record([
                h.clone(),
                sim.clone(),
                format!("gblup_{}", stage_name(a.stage)),
                fmt(a.h2_hat),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                fmt(a.r_train),
                fmt(a.r_valid),
                String::new(),
            ])?;
        }
    }
    w.flush()?;
    written.push(path);

    if report.scenario.keep_traits {
        let tdir = dir.join("traits");
        for t in &report.traits {
            if let Some(s) = &t.simulated {
                let stem = format!("h{}_sim{:05}", t.h2_target, t.sim);
                let p = tdir.join(format!("{stem}_pheno.csv"));
                write_phenotypes(&p, &s.phenotypes)?;
                written.push(p);
                let p = tdir.join(format!("{stem}_truth.csv"));
                let mut w = writer(&p)?;
                w.write_record(["genotype", "set", "true_g"])?;
                for (i, id) in s.train_ids.iter().chain(&s.valid_ids).enumerate() {
                    let set = if i < s.train_ids.len() { "train" } else { "valid" };
                    w.write_record([id.clone(), set.to_string(), fmt(s.true_g[i])])?;
                }
                w.flush()?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command_line: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub parameters: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_time_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Collects manifest fields while a command runs.
#[derive(Debug)]
pub struct ManifestBuilder {
    command_line: Vec<String>,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
    parameters: BTreeMap<String, String>,
    started: SystemTime,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn new(command_line: Vec<String>) -> Self {
        ManifestBuilder {
            command_line,
            inputs: Vec::new(),
            seed: None,
            parameters: BTreeMap::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn parameter(&mut self, key: &str, value: impl ToString) {
        self.parameters.insert(key.to_string(), value.to_string());
    }

    pub fn finish(&self, outputs: &[PathBuf]) -> Result<RunManifest> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: sha256_file(p)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command_line: self.command_line.clone(),
            inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            seed: self.seed,
            parameters: self.parameters.clone(),
            started_unix: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_time_seconds: self.clock.elapsed().as_secs_f64(),
        })
    }
}

/// `out.csv` gets `out.csv.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, m).map_err(|e| Error::Io(e.into()))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
