//! Heritability estimators, their intervals and asymptotic standard deviations.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::design::{self, CovariateSpec, GenotypicMeans, PhenotypeTable};
use crate::error::{invalid, Error, Result};
use crate::geno::KinshipMatrix;
use crate::reml::{self, Boundary, RemlFit, RemlOptions, Stage, VarianceModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Replicates,
    Means,
    BroadSense,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Replicates => "replicates",
            Method::Means => "means",
            Method::BroadSense => "anova",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn clipped(lo: f64, hi: f64) -> Interval {
        Interval { lo: lo.clamp(0.0, 1.0), hi: hi.clamp(0.0, 1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct HeritabilityEstimate {
    pub method: Method,
    pub h2: f64,
    /// Delta-method interval, or the F-based interval for the ANOVA estimator.
    pub ci_standard: Interval,
    pub ci_log: Option<Interval>,
    /// The log interval was replaced by the standard one (a component at its floor).
    pub ci_log_fallback: bool,
    /// sigma_A^2, or sigma_G^2 for the ANOVA estimator.
    pub sigma_a2: f64,
    /// sigma_E^2 on the per-plant scale, or sigma_Env^2 for the ANOVA estimator.
    pub sigma_e2: f64,
    pub monotone: bool,
    pub fit: Option<RemlFit>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeritOptions {
    pub alpha: f64,
    pub reml: RemlOptions,
}

impl Default for HeritOptions {
    fn default() -> Self {
        HeritOptions { alpha: 0.05, reml: RemlOptions::default() }
    }
}

/// Individual-level model for replicate data, with genotypes in sorted id order.
pub fn individual_model(pheno: &PhenotypeTable, k: &KinshipMatrix, covariates: &[CovariateSpec]) -> Result<VarianceModel> {
    let design = design::build_design(pheno, covariates)?;
    let ks = k.subset(&design.genotype_ids)?;
    VarianceModel::individual(
        DVector::from_column_slice(pheno.values()),
        design.intercept_and_covariates(),
        design.genotype_of.clone(),
        ks.k,
    )
}

/// Means-level model: intercept only, residual covariance R.
pub fn means_model(means: &GenotypicMeans, k: &KinshipMatrix) -> Result<VarianceModel> {
    let ks = k.subset(&means.genotype_ids)?;
    let n = means.g_hat.len();
    VarianceModel::means(means.g_hat.clone(), DMatrix::from_element(n, 1, 1.0), ks.k, means.r.clone())
}

pub fn h2_replicates(
    pheno: &PhenotypeTable,
    k: &KinshipMatrix,
    covariates: &[CovariateSpec],
    opts: &HeritOptions,
) -> Result<HeritabilityEstimate> {
    let model = individual_model(pheno, k, covariates)?;
    let fit = reml::reml_fit(&model, &opts.reml)?;
    from_fit(Method::Replicates, fit, opts.alpha)
}

pub fn h2_means(means: &GenotypicMeans, k: &KinshipMatrix, opts: &HeritOptions) -> Result<HeritabilityEstimate> {
    let model = means_model(means, k)?;
    let fit = reml::reml_fit(&model, &opts.reml)?;
    from_fit(Method::Means, fit, opts.alpha)
}

/// Wraps a REML fit with both delta-method intervals.
pub fn from_fit(method: Method, fit: RemlFit, alpha: f64) -> Result<HeritabilityEstimate> {
    let ci_standard = ci_delta_standard(&fit, alpha)?;
    let (ci_log, fallback) = ci_delta_log(&fit, alpha)?;
    Ok(HeritabilityEstimate {
        method,
        h2: fit.h2(),
        ci_standard,
        ci_log: Some(ci_log),
        ci_log_fallback: fallback,
        sigma_a2: fit.sigma_a2,
        sigma_e2: fit.sigma_e2,
        monotone: fit.monotone,
        fit: Some(fit),
    })
}

fn z_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha {alpha} outside (0,1)"));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

fn quadratic(g: &Vector2<f64>, s: &Matrix2<f64>) -> f64 {
    (g.transpose() * s * g)[(0, 0)]
}

/// Delta-method standard deviation of sigma_A^2 / (sigma_A^2 + sigma_E^2).
pub fn delta_sd(sigma_a2: f64, sigma_e2: f64, cov: &Matrix2<f64>) -> f64 {
    let s = sigma_a2 + sigma_e2;
    let b = Vector2::new(sigma_e2, -sigma_a2) / (s * s);
    quadratic(&b, cov).max(0.0).sqrt()
}

pub fn ci_delta_standard(fit: &RemlFit, alpha: f64) -> Result<Interval> {
    let z = z_quantile(alpha)?;
    if fit.monotone {
        return Ok(Interval::UNIT);
    }
    let s = fit.sigma_a2 + fit.sigma_e2;
    let b = Vector2::new(fit.sigma_e2, -fit.sigma_a2) / (s * s);
    let var = quadratic(&b, &fit.ai_matrix);
    if !(var >= 0.0) || !var.is_finite() {
        return Err(Error::Degenerate("AI covariance is not positive definite".into()));
    }
    let h = fit.h2();
    let half = z * var.sqrt();
    Ok(Interval::clipped(h - half, h + half))
}

/// Interval for log(sigma_A^2 / sigma_E^2) mapped back through the logistic.
/// The flag reports a fallback to the standard interval.
pub fn ci_delta_log(fit: &RemlFit, alpha: f64) -> Result<(Interval, bool)> {
    let z = z_quantile(alpha)?;
    if fit.monotone {
        return Ok((Interval::UNIT, false));
    }
    if fit.boundary != Boundary::None || !(fit.sigma_a2 > 0.0 && fit.sigma_e2 > 0.0) {
        return Ok((ci_delta_standard(fit, alpha)?, true));
    }
    let g = Vector2::new(1.0 / fit.sigma_a2, -1.0 / fit.sigma_e2);
    let var = quadratic(&g, &fit.ai_matrix);
    if !(var >= 0.0) || !var.is_finite() {
        return Err(Error::Degenerate("AI covariance is not positive definite".into()));
    }
    let t = (fit.sigma_a2 / fit.sigma_e2).ln();
    let half = z * var.sqrt();
    let logistic = |v: f64| 1.0 / (1.0 + (-v).exp());
    Ok((Interval { lo: logistic(t - half), hi: logistic(t + half) }, false))
}

pub fn ci_broad_sense(ms_g: f64, ms_env: f64, df_g: usize, df_env: usize, r_bar: f64, alpha: f64) -> Result<Interval> {
    if df_g == 0 || df_env == 0 {
        return invalid("F interval needs positive degrees of freedom");
    }
    if !(ms_env > 0.0) {
        return invalid("F interval needs MS(Env) > 0");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha {alpha} outside (0,1)"));
    }
    let f = ms_g / ms_env;
    let dist = FisherSnedecor::new(df_g as f64, df_env as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let bound = |q: f64| {
        let ratio = f / dist.inverse_cdf(q);
        (ratio - 1.0) / (ratio + r_bar - 1.0)
    };
    Ok(Interval::clipped(bound(1.0 - alpha / 2.0), bound(alpha / 2.0)))
}

/// ANOVA estimator from sequential mean squares.
pub fn broad_sense_h2(pheno: &PhenotypeTable, covariates: &[CovariateSpec], alpha: f64) -> Result<HeritabilityEstimate> {
    let a = design::anova_summary(pheno, covariates)?;
    broad_sense_from_anova(&a, alpha)
}

pub fn broad_sense_from_anova(a: &design::AnovaSummary, alpha: f64) -> Result<HeritabilityEstimate> {
    let r_bar = design::effective_replicates(&a.replicates)?;
    let ms_env_zero = a.ms_env <= 1e-14 * a.ms_g.abs();
    if a.ms_g <= 0.0 && a.ms_env <= 0.0 {
        return Err(Error::Degenerate("both mean squares are zero".into()));
    }
    let sigma_g2 = ((a.ms_g - a.ms_env) / r_bar).max(0.0);
    let sigma_env2 = if ms_env_zero { 0.0 } else { a.ms_env };
    let h2 = sigma_g2 / (sigma_g2 + sigma_env2);
    let ci = if ms_env_zero {
        Interval { lo: 1.0, hi: 1.0 }
    } else {
        ci_broad_sense(a.ms_g, a.ms_env, a.df_g, a.df_env, r_bar, alpha)?
    };
    Ok(HeritabilityEstimate {
        method: Method::BroadSense,
        h2,
        ci_standard: ci,
        ci_log: None,
        ci_log_fallback: false,
        sigma_a2: sigma_g2,
        sigma_e2: sigma_env2,
        monotone: false,
        fit: None,
    })
}

#[derive(Debug, Clone)]
pub struct AsymptoticQuery<'a> {
    pub kinship: &'a DMatrix<f64>,
    /// One entry (balanced) or one per genotype.
    pub replicates: Vec<usize>,
    pub h2: f64,
    pub stage: Stage,
}

/// Asymptotic sd of the REML heritability estimator from the inverse of the
/// expected information, at the true components (sigma_A^2, sigma_E^2) = (h2, 1 - h2).
pub fn asymptotic_sd(q: &AsymptoticQuery) -> Result<f64> {
    asymptotic_sd_scaled(q, 1.0)
}

/// As [`asymptotic_sd`] with both components multiplied by `scale`.
pub fn asymptotic_sd_scaled(q: &AsymptoticQuery, scale: f64) -> Result<f64> {
    let n = q.kinship.nrows();
    if !(q.h2 > 0.0 && q.h2 < 1.0) {
        return invalid(format!("h2 {} outside (0,1)", q.h2));
    }
    let reps: Vec<usize> = match q.replicates.len() {
        1 => vec![q.replicates[0]; n],
        len if len == n => q.replicates.clone(),
        len => return Err(Error::Dimension(format!("{len} replicate counts for {n} genotypes"))),
    };
    if reps.contains(&0) {
        return invalid("replicate counts must be at least one");
    }
    let model = match q.stage {
        Stage::Individual => {
            let genotype_of: Vec<usize> = reps.iter().enumerate().flat_map(|(i, &r)| std::iter::repeat_n(i, r)).collect();
            let n_obs = genotype_of.len();
            VarianceModel::individual(DVector::zeros(n_obs), DMatrix::from_element(n_obs, 1, 1.0), genotype_of, q.kinship.clone())?
        }
        Stage::Means => {
            let r = DMatrix::from_diagonal(&DVector::from_iterator(n, reps.iter().map(|&r| 1.0 / r as f64)));
            VarianceModel::means(DVector::zeros(n), DMatrix::from_element(n, 1, 1.0), q.kinship.clone(), r)?
        }
    };
    let sa = q.h2 * scale;
    let se = (1.0 - q.h2) * scale;
    let spectral = reml::SpectralModel::new(&model)?;
    let info = spectral.evaluate(sa, se, true)?.expected.expect("requested");
    let det = info.determinant();
    if !(det > 1e-12 * info[(0, 0)].abs() * info[(1, 1)].abs()) {
        return Err(Error::Singular("trace matrix is singular (kinship close to compound symmetry)".into()));
    }
    let cov = info.try_inverse().ok_or_else(|| Error::Singular("trace matrix".into()))?;
    Ok(delta_sd(sa, se, &cov))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticRow {
    pub r: usize,
    pub h2: f64,
    pub sd_individual: f64,
    pub sd_means: f64,
}

impl AsymptoticRow {
    pub fn ratio(&self) -> f64 {
        self.sd_individual / self.sd_means
    }
}

pub fn asymptotic_table(kinship: &DMatrix<f64>, reps: &[usize], h2s: &[f64]) -> Result<Vec<AsymptoticRow>> {
    let mut rows = Vec::new();
    for &r in reps {
        for &h2 in h2s {
            let sd = |stage| asymptotic_sd(&AsymptoticQuery { kinship, replicates: vec![r], h2, stage });
            rows.push(AsymptoticRow { r, h2, sd_individual: sd(Stage::Individual)?, sd_means: sd(Stage::Means)? });
        }
    }
    Ok(rows)
}
