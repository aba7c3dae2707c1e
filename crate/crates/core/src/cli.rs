//! Command-line front end. Exit codes: 0 success, 1 usage or I/O error,
//! 2 data or model error (reported on stderr as `ERROR: <code>: <message>`).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::design::{self, CovariateSpec, PhenotypeTable};
use crate::error::{Error, Result};
use crate::gblup::{self, CvOptions, PredictionSet};
use crate::geno::{self, KinshipMatrix, PloidyMode};
use crate::gwas::{self, ScanData, ScanOptions};
use crate::herit::{self, HeritOptions, HeritabilityEstimate};
use crate::io::{self, BlupRow, ManifestBuilder};
use crate::reml::{self, RemlOptions, Stage};
use crate::sim::{self, Scenario};

#[derive(Debug, Parser)]
#[command(name = "heritkit", version, about = "Heritability, G-BLUP and association scans for replicated trials")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Marker-based kinship from a genotype CSV.
    Kinship(KinshipArgs),
    /// Genotypic means (BLUEs) and their residual matrix R.
    Means(MeansArgs),
    /// Narrow- and broad-sense heritability with confidence intervals.
    Estimate(EstimateArgs),
    /// Asymptotic standard deviations of the two REML estimators.
    Asympt(AsymptArgs),
    /// G-BLUP of training and unobserved genotypes.
    Gblup(GblupArgs),
    /// Repeated train/validation splits of G-BLUP.
    Cv(CvArgs),
    /// GLS association scan.
    Gwas(GwasArgs),
    /// Simulation study from a scenario file.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Inbred,
    Outbred,
}

impl From<ModeArg> for PloidyMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Inbred => PloidyMode::Inbred,
            ModeArg::Outbred => PloidyMode::Outbred,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    One,
    Two,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::One => Stage::Individual,
            StageArg::Two => Stage::Means,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    Replicates,
    Means,
    Anova,
    All,
}

#[derive(Debug, Args)]
struct GenoArgs {
    #[arg(long)]
    geno: PathBuf,
    #[arg(long, value_enum, default_value = "inbred")]
    mode: ModeArg,
    /// Genotype file has one row per marker.
    #[arg(long)]
    markers_as_rows: bool,
    /// Replace missing calls by twice the marker frequency.
    #[arg(long)]
    impute_mean: bool,
}

#[derive(Debug, Args)]
struct PhenoArgs {
    #[arg(long)]
    pheno: PathBuf,
    /// Comma-separated covariate columns treated as factors.
    #[arg(long, value_delimiter = ',')]
    factors: Vec<String>,
}

#[derive(Debug, Args)]
struct RemlArgs {
    #[arg(long, default_value_t = RemlOptions::default().max_iter)]
    max_iter: usize,
    #[arg(long, default_value_t = RemlOptions::default().tol_loglik)]
    tol_loglik: f64,
    #[arg(long, default_value_t = RemlOptions::default().tol_param)]
    tol_param: f64,
}

impl RemlArgs {
    fn options(&self) -> RemlOptions {
        RemlOptions { max_iter: self.max_iter, tol_loglik: self.tol_loglik, tol_param: self.tol_param, ..RemlOptions::default() }
    }
}

#[derive(Debug, Args)]
struct KinshipArgs {
    #[command(flatten)]
    geno: GenoArgs,
    #[arg(long)]
    out: PathBuf,
    /// Keep the unscaled kinship.
    #[arg(long)]
    no_scale: bool,
    #[arg(long, default_value_t = 0.0)]
    maf_min: f64,
}

#[derive(Debug, Args)]
struct MeansArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    #[arg(long)]
    out_means: PathBuf,
    #[arg(long = "out-R")]
    out_r: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    /// Required unless --method anova.
    #[arg(long)]
    kinship: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    method: MethodArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write the profile log-likelihood on a 99-point grid.
    #[arg(long)]
    dump_profile: Option<PathBuf>,
    #[command(flatten)]
    reml: RemlArgs,
}

#[derive(Debug, Args)]
struct AsymptArgs {
    #[arg(long)]
    kinship: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    reps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.8")]
    h2: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GblupArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    #[arg(long)]
    kinship: PathBuf,
    /// Accessions to predict: comma-separated ids or @file.
    #[arg(long)]
    predict: Option<String>,
    #[arg(long, value_enum, default_value = "one")]
    stage: StageArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    reml: RemlArgs,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    #[arg(long)]
    kinship: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 100)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    reml: RemlArgs,
}

#[derive(Debug, Args)]
struct GwasArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    #[command(flatten)]
    geno: GenoArgs,
    #[arg(long)]
    kinship: PathBuf,
    #[arg(long, value_enum, default_value = "one")]
    stage: StageArg,
    #[arg(long, default_value_t = 0.05)]
    maf_min: f64,
    /// Re-estimate variance components for every marker.
    #[arg(long)]
    refit: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    reml: RemlArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write phenotypes and true genetic values of every trait.
    #[arg(long)]
    keep_traits: bool,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    log::set_max_level(level);

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = cli.threads {
        pool = pool.num_threads(k);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("ERROR: threads: {e}");
            return 1;
        }
    };
    let command_line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match pool.install(|| dispatch(&cli, ManifestBuilder::new(command_line))) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR: {}: {e}", e.code());
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cli: &Cli, mut manifest: ManifestBuilder) -> Result<()> {
    if let Some(s) = cli.seed {
        manifest.seed(s);
    }
    let outputs = match &cli.command {
        Command::Kinship(a) => kinship(a, &mut manifest)?,
        Command::Means(a) => means(a, &mut manifest)?,
        Command::Estimate(a) => estimate(a, &mut manifest)?,
        Command::Asympt(a) => asympt(a, &mut manifest)?,
        Command::Gblup(a) => blup(a, &mut manifest)?,
        Command::Cv(a) => cv(a, cli.seed.unwrap_or(1), &mut manifest)?,
        Command::Gwas(a) => scan(a, &mut manifest)?,
        Command::Simulate(a) => {
            let (dir, written) = simulate(a, cli.seed, &mut manifest)?;
            io::write_manifest(&dir.join("manifest.json"), &manifest.finish(&written)?)?;
            return Ok(());
        }
    };
    io::write_manifest(&io::manifest_path_for(&outputs[0]), &manifest.finish(&outputs)?)
}

fn load_pheno(a: &PhenoArgs, manifest: &mut ManifestBuilder) -> Result<(PhenotypeTable, Vec<CovariateSpec>)> {
    manifest.input(&a.pheno);
    if !a.factors.is_empty() {
        manifest.parameter("factors", a.factors.join(","));
    }
    io::read_phenotypes(&a.pheno, &a.factors)
}

fn load_kinship(path: &Path, manifest: &mut ManifestBuilder) -> Result<KinshipMatrix> {
    manifest.input(path);
    io::read_kinship(path)
}

/// Every phenotyped genotype must be in the kinship; the first absent one is reported.
fn check_alignment(pheno: &PhenotypeTable, k: &KinshipMatrix) -> Result<()> {
    let known: std::collections::HashSet<&str> = k.accession_ids.iter().map(String::as_str).collect();
    match pheno.genotypes().iter().find(|g| !known.contains(g.as_str())) {
        Some(g) => Err(Error::MissingAccession(g.clone())),
        None => Ok(()),
    }
}

fn kinship(a: &KinshipArgs, manifest: &mut ManifestBuilder) -> Result<Vec<PathBuf>> {
    manifest.input(&a.geno.geno);
    manifest.parameter("mode", format!("{:?}", a.geno.mode).to_lowercase());
    manifest.parameter("maf_min", a.maf_min);
    manifest.parameter("scale", !a.no_scale);
    let g = io::read_genotypes(&a.geno.geno, a.geno.markers_as_rows, a.geno.impute_mean)?;
    let k = geno::kinship_from_genotypes(&g, a.geno.mode.into(), a.maf_min, !a.no_scale)?;
    io::write_kinship(&a.out, &k)?;
    Ok(vec![a.out.clone()])
}

fn means(a: &MeansArgs, manifest: &mut ManifestBuilder) -> Result<Vec<PathBuf>> {
    let (pheno, covs) = load_pheno(&a.pheno, manifest)?;
    let m = design::compute_blues(&pheno, &covs)?;
    io::write_means(&a.out_means, &m)?;
    let mut out = vec![a.out_means.clone()];
    if let Some(p) = &a.out_r {
        io::write_residual_matrix(p, &m)?;
        out.push(p.clone());
    }
    Ok(out)
}

fn report_monotone(e: &HeritabilityEstimate) {
    if e.monotone {
        warn!("{}: the likelihood is monotone on (0,1); h2 is at the boundary and the interval is [0,1]", e.method.name());
    }
}

fn estimate(a: &EstimateArgs, manifest: &mut ManifestBuilder) -> Result<Vec<PathBuf>> {
    let (pheno, covs) = load_pheno(&a.pheno, manifest)?;
    manifest.parameter("method", format!("{:?}", a.method).to_lowercase());
    manifest.parameter("alpha", a.alpha);
    let opts = HeritOptions { alpha: a.alpha, reml: a.reml.options() };
    let want = |m: MethodArg| a.method == m || a.method == MethodArg::All;
    let k = match &a.kinship {
        Some(p) => {
            let k = load_kinship(p, manifest)?;
            check_alignment(&pheno, &k)?;
            Some(k)
        }
        None if want(MethodArg::Replicates) || want(MethodArg::Means) => {
            return Err(Error::InvalidInput("--kinship is required for the replicates and means methods".into()))
        }
        None => None,
    };
    let grid = reml::h2_grid(99);
    let mut rows = Vec::new();
    let mut profile = Vec::new();
    if let Some(k) = &k {
        if want(MethodArg::Replicates) {
            rows.push(herit::h2_replicates(&pheno, k, &covs, &opts)?);
            if a.dump_profile.is_some() {
                let model = herit::individual_model(&pheno, k, &covs)?;
                let ll = reml::profile_loglik(&model, &grid)?;
                profile.extend(grid.iter().zip(ll).map(|(&h, l)| ("replicates", h, l)));
            }
        }
        if want(MethodArg::Means) {
            let m = design::compute_blues(&pheno, &covs)?;
            rows.push(herit::h2_means(&m, k, &opts)?);
            if a.dump_profile.is_some() {
                let model = herit::means_model(&m, k)?;
                let ll = reml::profile_loglik(&model, &grid)?;
                profile.extend(grid.iter().zip(ll).map(|(&h, l)| ("means", h, l)));
            }
        }
    }
    if want(MethodArg::Anova) {
        rows.push(herit::broad_sense_h2(&pheno, &covs, a.alpha)?);
    }
    rows.iter().for_each(report_monotone);
    io::write_estimates(&a.out, &rows)?;
    let mut out = vec![a.out.clone()];
    if let Some(p) = &a.dump_profile {
        io::write_profile(p, &profile)?;
        out.push(p.clone());
    }
    Ok(out)
}

fn asympt(a: &AsymptArgs, manifest: &mut ManifestBuilder) -> Result<Vec<PathBuf>> {
    let k = load_kinship(&a.kinship, manifest)?;
    manifest.parameter("reps", format!("{:?}", a.reps));
    manifest.parameter("h2", format!("{:?}", a.h2));
    let rows = herit::asymptotic_table(&k.k, &a.reps, &a.h2)?;
    io::write_asymptotic(&a.out, &rows)?;
    Ok(vec![a.out.clone()])
}

fn blup(a: &GblupArgs, manifest: &mut ManifestBuilder) -> Result<Vec<PathBuf>> {
    let (pheno, covs) = load_pheno(&a.pheno, manifest)?;
    let k = load_kinship(&a.kinship, manifest)?;
    check_alignment(&pheno, &k)?;
    let stage: Stage = a.stage.into();
    manifest.parameter("stage", io::stage_name(stage));
    let opts = HeritOptions { alpha: 0.05, reml: a.reml.options() };
    let (model, est, train_ids) = match stage {
        Stage::Individual => {
            let model = herit::individual_model(&pheno, &k, &covs)?;
            let est = herit::h2_replicates(&pheno, &k, &covs, &opts)?;
            (model, est, pheno.genotype_ids())
        }
        Stage::Means => {
            let m = design::compute_blues(&pheno, &covs)?;
            let model = herit::means_model(&m, &k)?;
            let est = herit::h2_means(&m, &k, &opts)?;
            (model, est, m.genotype_ids)
        }
    };
    report_monotone(&est);
    info!("h2 = {}, delta = {}", est.h2, est.sigma_a2 / est.sigma_e2);
    let fit = gblup::fit_blup(&model, est.sigma_a2 / est.sigma_e2)?;
    let pev = |r: Result<nalgebra::DMatrix<f64>>| match r {
        Ok(p) => Some(p.diagonal()),
        Err(e) => {
            warn!("prediction error variances not available: {e}");
            None
        }
    };
    let train_pev = pev(gblup::pev_training(&model, est.sigma_a2, est.sigma_e2));
    let mut rows: Vec<BlupRow> = train_ids
        .iter()
        .enumerate()
        .map(|(i, id)| BlupRow { genotype: id.clone(), set: "train", g_hat: fit.g_hat[i], pev: train_pev.as_ref().map(|p| p[i]) })
        .collect();
    if let Some(spec) = &a.predict {
        let ids = io::read_id_list(spec)?;
        if let Some(id) = ids.iter().find(|id| !k.accession_ids.contains(id)) {
            return Err(Error::MissingAccession(id.clone()));
        }
        let pred = gblup::predict_unobserved(&fit, PredictionSet::from_kinship(&k, &train_ids, &ids)?)?;
        let pred_pev = if train_pev.is_some() {
            pev(gblup::pev_validation(&model, &pred.k_pred_obs, &pred.k_pred_pred, est.sigma_a2, est.sigma_e2))
        } else {
            None
        };
        rows.extend(pred.ids.iter().enumerate().map(|(i, id)| BlupRow {
            genotype: id.clone(),
            set: "predict",
            g_hat: pred.g_pred_hat[i],
            pev: pred_pev.as_ref().map(|p| p[i]),
        }));
    }
    io::write_blup(&a.out, &rows)?;
    Ok(vec![a.out.clone()])
}

fn cv(a: &CvArgs, seed: u64, manifest: &mut ManifestBuilder) -> Result<Vec<PathBuf>> {
    let (pheno, covs) = load_pheno(&a.pheno, manifest)?;
    let k = load_kinship(&a.kinship, manifest)?;
    check_alignment(&pheno, &k)?;
    manifest.seed(seed);
    manifest.parameter("folds", a.folds);
    manifest.parameter("repeats", a.repeats);
    let opts = CvOptions {
        folds: a.folds,
        repeats: a.repeats,
        seed,
        herit: HeritOptions { alpha: 0.05, reml: a.reml.options() },
    };
    let rows = gblup::cross_validate(&pheno, &k, &covs, &opts)?;
    io::write_cv(&a.out, &rows)?;
    Ok(vec![a.out.clone()])
}

fn scan(a: &GwasArgs, manifest: &mut ManifestBuilder) -> Result<Vec<PathBuf>> {
    let (pheno, covs) = load_pheno(&a.pheno, manifest)?;
    let k = load_kinship(&a.kinship, manifest)?;
    check_alignment(&pheno, &k)?;
    manifest.input(&a.geno.geno);
    let g = io::read_genotypes(&a.geno.geno, a.geno.markers_as_rows, a.geno.impute_mean)?;
    let stage: Stage = a.stage.into();
    manifest.parameter("stage", io::stage_name(stage));
    manifest.parameter("maf_min", a.maf_min);
    let data = match stage {
        Stage::Individual => ScanData::one_stage(&pheno, &k, &covs)?,
        Stage::Means => ScanData::two_stage(&design::compute_blues(&pheno, &covs)?, &k)?,
    };
    let reml = a.reml.options();
    let null = gwas::fit_null(&data, &reml)?;
    let opts = ScanOptions { maf_min: a.maf_min, mode: a.geno.mode.into(), refit: a.refit, reml };
    let result = gwas::gls_scan(&data, &g, &null, &opts)?;
    io::write_scan(&a.out, &result)?;
    Ok(vec![a.out.clone()])
}

fn simulate(a: &SimulateArgs, seed: Option<u64>, manifest: &mut ManifestBuilder) -> Result<(PathBuf, Vec<PathBuf>)> {
    manifest.input(&a.scenario);
    let mut scenario = Scenario::from_file(&a.scenario)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    scenario.keep_traits |= a.keep_traits;
    manifest.seed(scenario.seed);
    let report = sim::run_study(&scenario)?;
    let failed = report.failures().count();
    if failed > 0 {
        warn!("{failed} of {} traits failed; see traits.csv", report.traits.len());
    }
    let written = io::write_study(&a.out_dir, &report)?;
    Ok((a.out_dir.clone(), written))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(run(["heritkit", "estimate"]), 1);
        assert_eq!(run(["heritkit", "frobnicate"]), 1);
        assert_eq!(run(["heritkit", "--help"]), 0);
        assert_eq!(run(["heritkit", "--version"]), 0);
    }
}
