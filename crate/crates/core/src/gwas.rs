//! Marker scans by generalized least squares with variance components fixed
//! from a no-marker model, and ROC summaries for simulated traits.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::beta::beta_reg;

use crate::design::{CovariateSpec, GenotypicMeans, PhenotypeTable};
use crate::error::{Error, Result};
use crate::geno::{self, GenotypeMatrix, KinshipMatrix, PloidyMode};
use crate::herit;
use crate::linalg;
use crate::reml::{self, Prepared, RemlFit, RemlOptions, SpectralModel, Stage, VarianceModel};

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerResult {
    pub marker: String,
    pub maf: f64,
    pub effect: f64,
    pub se: f64,
    pub f: f64,
    pub p: f64,
    pub testable: bool,
}

#[derive(Debug, Clone)]
pub struct ScanResult {
    pub markers: Vec<MarkerResult>,
    pub stage: Stage,
    pub sigma_a2: f64,
    pub sigma_e2: f64,
    pub df_den: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub maf_min: f64,
    pub mode: PloidyMode,
    /// Re-estimate the variance components with each marker in the model.
    pub refit: bool,
    pub reml: RemlOptions,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { maf_min: 0.05, mode: PloidyMode::Inbred, refit: false, reml: RemlOptions::default() }
    }
}

/// Scan input: a model plus the genotype order of its kinship rows.
#[derive(Debug, Clone)]
pub struct ScanData {
    pub model: VarianceModel,
    pub genotype_ids: Vec<String>,
}

impl ScanData {
    pub fn one_stage(pheno: &PhenotypeTable, k: &KinshipMatrix, covariates: &[CovariateSpec]) -> Result<Self> {
        Ok(ScanData { model: herit::individual_model(pheno, k, covariates)?, genotype_ids: pheno.genotype_ids() })
    }

    pub fn two_stage(means: &GenotypicMeans, k: &KinshipMatrix) -> Result<Self> {
        Ok(ScanData { model: herit::means_model(means, k)?, genotype_ids: means.genotype_ids.clone() })
    }
}

pub fn fit_null(data: &ScanData, opts: &RemlOptions) -> Result<RemlFit> {
    let fit = reml::reml_fit(&data.model, opts)?;
    if fit.monotone {
        warn!("null model has a monotone likelihood; scanning with boundary variance components");
    }
    Ok(fit)
}

/// Upper tail of F(1, df) at `f`.
pub fn f_test_p(f: f64, df: f64) -> f64 {
    if !(f > 0.0) {
        return 1.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + f)).clamp(f64::MIN_POSITIVE, 1.0)
}

struct Base {
    w: DVector<f64>,
    c_inv: DMatrix<f64>,
    xwy: DVector<f64>,
    rss0: f64,
}

impl Base {
    fn new(s: &SpectralModel, a: f64, e: f64) -> Result<Self> {
        let w = s.lambda.map(|l| 1.0 / (a * l + e));
        let q = s.n_fixed();
        let mut c = DMatrix::zeros(q, q);
        let mut b = DVector::zeros(q);
        let mut yy = 0.0;
        for k in 0..s.y.len() {
            let xk = s.x.row(k).transpose();
            c.ger(w[k], &xk, &xk, 1.0);
            b.axpy(w[k] * s.y[k], &xk, 1.0);
            yy += w[k] * s.y[k] * s.y[k];
        }
        if let Some(nb) = &s.null {
            c += &nb.xx / e;
            b += &nb.xy / e;
            yy += nb.yy / e;
        }
        let c_inv = if q == 0 {
            DMatrix::zeros(0, 0)
        } else {
            let mut inv = linalg::cholesky(&c, "X'V^-1X")?.inverse();
            linalg::symmetrize(&mut inv);
            inv
        };
        let rss0 = yy - b.dot(&(&c_inv * &b));
        Ok(Base { w, c_inv, xwy: b, rss0 })
    }

    /// GLS fit of the marker given the base design (Frisch-Waugh update).
    fn test(&self, s: &SpectralModel, xr: &DVector<f64>, df: f64) -> (f64, f64, f64, f64, bool) {
        let q = s.n_fixed();
        let mut xwx = 0.0;
        let mut xwy = 0.0;
        let mut xw_base = DVector::zeros(q);
        for k in 0..xr.len() {
            let wx = self.w[k] * xr[k];
            xwx += wx * xr[k];
            xwy += wx * s.y[k];
            xw_base.axpy(wx, &s.x.row(k).transpose(), 1.0);
        }
        let cx = &self.c_inv * &xw_base;
        let sxx = xwx - xw_base.dot(&cx);
        let sxy = xwy - cx.dot(&self.xwy);
        if !(sxx > 1e-10 * xwx) || !(xwx > 0.0) {
            return (f64::NAN, f64::NAN, f64::NAN, 1.0, false);
        }
        let gamma = sxy / sxx;
        let rss = (self.rss0 - sxy * sxy / sxx).max(0.0);
        let sigma2 = rss / df;
        let se = (sigma2 / sxx).sqrt();
        let f = gamma * gamma * sxx / sigma2;
        (gamma, se, f, f_test_p(f, df), se > 0.0)
    }
}

/// Scans the columns of `calls` (rows aligned with the kinship rows of `s`).
pub fn gls_scan_spectral(
    s: &SpectralModel,
    calls: &DMatrix<f64>,
    testable: &[bool],
    sigma_a2: f64,
    sigma_e2: f64,
    refit: Option<&RemlOptions>,
) -> Result<Vec<(f64, f64, f64, f64, bool)>> {
    let df = s.n_obs() as f64 - s.n_fixed() as f64 - 1.0;
    if !(df >= 1.0) {
        return Err(Error::Degenerate("no denominator degrees of freedom for the marker test".into()));
    }
    let base = Base::new(s, sigma_a2, sigma_e2)?;
    const BLOCK: usize = 256;
    let p = calls.ncols();
    let blocks: Vec<usize> = (0..p).step_by(BLOCK).collect();
    let out: Vec<Vec<(f64, f64, f64, f64, bool)>> = blocks
        .par_iter()
        .map(|&start| {
            let width = BLOCK.min(p - start);
            let rotated = s.basis.rotate_genotype_matrix(&calls.columns(start, width).into_owned());
            (0..width)
                .map(|j| {
                    if !testable[start + j] {
                        return Ok((f64::NAN, f64::NAN, f64::NAN, 1.0, false));
                    }
                    let xr = rotated.column(j).into_owned();
                    match refit {
                        None => Ok(base.test(s, &xr, df)),
                        Some(opts) => {
                            let aug = augment(s, &xr);
                            if linalg::numerical_rank(&aug.x) < aug.x.ncols() {
                                return Ok((f64::NAN, f64::NAN, f64::NAN, 1.0, false));
                            }
                            let fit = reml::fit_prepared(&Prepared::Spectral(aug), s.stage, opts)?;
                            Ok(Base::new(s, fit.sigma_a2, fit.sigma_e2)?.test(s, &xr, df))
                        }
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().flatten().collect())
}

fn augment(s: &SpectralModel, xr: &DVector<f64>) -> SpectralModel {
    let q = s.n_fixed();
    let mut x = DMatrix::zeros(s.x.nrows(), q + 1);
    x.columns_mut(0, q).copy_from(&s.x);
    x.set_column(q, xr);
    let null = s.null.as_ref().map(|nb| {
        let mut xx = DMatrix::zeros(q + 1, q + 1);
        xx.view_mut((0, 0), (q, q)).copy_from(&nb.xx);
        let mut xy = DVector::zeros(q + 1);
        xy.rows_mut(0, q).copy_from(&nb.xy);
        reml::NullBlock { m: nb.m, yy: nb.yy, xy, xx }
    });
    SpectralModel { x, null, ..s.clone() }
}

/// GLS F-test of every marker of `g` with components fixed at the null fit.
pub fn gls_scan(data: &ScanData, g: &GenotypeMatrix, null: &RemlFit, opts: &ScanOptions) -> Result<ScanResult> {
    let g = g.select_accessions(&data.genotype_ids)?;
    let freqs = geno::allele_frequencies(&g, opts.mode)?;
    let testable: Vec<bool> = (0..g.n_markers()).map(|l| freqs.maf[l] > opts.maf_min).collect();
    let s = SpectralModel::new(&data.model)?;
    let stats = gls_scan_spectral(&s, g.calls(), &testable, null.sigma_a2, null.sigma_e2, opts.refit.then_some(&opts.reml))?;
    let markers = stats
        .into_iter()
        .enumerate()
        .map(|(l, (effect, se, f, p, ok))| MarkerResult {
            marker: g.marker_ids()[l].clone(),
            maf: freqs.maf[l],
            effect,
            se,
            f,
            p,
            testable: ok,
        })
        .collect();
    Ok(ScanResult {
        markers,
        stage: data.model.stage,
        sigma_a2: null.sigma_a2,
        sigma_e2: null.sigma_e2,
        df_den: data.model.n_obs() - data.model.n_fixed() - 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fp: usize,
    pub tp: usize,
}

/// Cumulative (FP, TP) counts as the p-value threshold sweeps upward.
pub fn roc_from_labels(labelled: &[(f64, bool)]) -> Vec<RocPoint> {
    let mut sorted: Vec<(f64, bool)> = labelled.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![RocPoint { threshold: 0.0, fp: 0, tp: 0 }];
    let (mut fp, mut tp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint { threshold: t, fp, tp });
    }
    out
}

/// Pairs each marker's p-value with whether it lies within `window` positions of a QTL.
pub fn label_markers(scan: &ScanResult, true_qtl_ids: &[String], window: usize) -> Vec<(f64, bool)> {
    let qtl_pos: Vec<usize> = scan
        .markers
        .iter()
        .enumerate()
        .filter(|(_, m)| true_qtl_ids.contains(&m.marker))
        .map(|(i, _)| i)
        .collect();
    scan.markers
        .iter()
        .enumerate()
        .map(|(i, m)| (m.p, qtl_pos.iter().any(|&q| q.abs_diff(i) <= window)))
        .collect()
}

pub fn roc_curve(scan: &ScanResult, true_qtl_ids: &[String], window: usize) -> Vec<RocPoint> {
    roc_from_labels(&label_markers(scan, true_qtl_ids, window))
}

/// Area under the curve after scaling both axes to [0, 1].
pub fn roc_auc(curve: &[RocPoint]) -> f64 {
    let Some(last) = curve.last() else { return f64::NAN };
    if last.fp == 0 || last.tp == 0 {
        return f64::NAN;
    }
    let (nf, nt) = (last.fp as f64, last.tp as f64);
    curve
        .windows(2)
        .map(|w| {
            let dx = (w[1].fp - w[0].fp) as f64 / nf;
            dx * (w[1].tp + w[0].tp) as f64 / (2.0 * nt)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn setup(n: usize, r: usize, p: usize, seed: u64) -> (PhenotypeTable, GenotypeMatrix, KinshipMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..n).map(|i| format!("a{i:03}")).collect();
        let calls = DMatrix::from_fn(n, p, |_, _| if rng.random::<f64>() < 0.4 { 2.0 } else { 0.0 });
        let g = GenotypeMatrix::new(ids.clone(), (0..p).map(|l| format!("m{l}")).collect(), calls).unwrap();
        let k = geno::kinship_from_genotypes(&g, PloidyMode::Inbred, 0.0, true).unwrap();
        let gv: Vec<f64> = (0..n).map(|i| 0.8 * g.calls()[(i, 0)] + rng.sample::<f64, _>(StandardNormal)).collect();
        let mut gen = Vec::new();
        let mut val = Vec::new();
        for i in 0..n {
            for _ in 0..r {
                gen.push(ids[i].clone());
                val.push(gv[i] + rng.sample::<f64, _>(StandardNormal));
            }
        }
        (PhenotypeTable::without_covariates(gen, val).unwrap(), g, k)
    }

    #[test]
    fn one_and_two_stage_effects_agree_on_balanced_data() {
        let (p, g, k) = setup(40, 3, 30, 1);
        let one = ScanData::one_stage(&p, &k, &[]).unwrap();
        let means = crate::design::compute_blues(&p, &[]).unwrap();
        let two = ScanData::two_stage(&means, &k).unwrap();
        let null = fit_null(&one, &RemlOptions::default()).unwrap();
        let a = gls_scan(&one, &g, &null, &ScanOptions::default()).unwrap();
        let b = gls_scan(&two, &g, &null, &ScanOptions::default()).unwrap();
        assert_eq!(a.df_den, 120 - 2);
        assert_eq!(b.df_den, 40 - 2);
        for (x, y) in a.markers.iter().zip(&b.markers) {
            assert_eq!(x.testable, y.testable);
            if x.testable {
                assert!((x.effect - y.effect).abs() < 1e-8, "{} vs {}", x.effect, y.effect);
            }
        }
    }

    #[test]
    fn matches_dense_per_marker_solves() {
        let (p, g, k) = setup(25, 2, 50, 2);
        let data = ScanData::one_stage(&p, &k, &[]).unwrap();
        let null = fit_null(&data, &RemlOptions::default()).unwrap();
        let scan = gls_scan(&data, &g, &null, &ScanOptions { maf_min: 0.0, ..Default::default() }).unwrap();
        let v = data.model.g0() * null.sigma_a2 + data.model.r0() * null.sigma_e2;
        let vinv = v.try_inverse().unwrap();
        let reml::Structure::Replicated { genotype_of, .. } = &data.model.structure else { unreachable!() };
        let n_obs = genotype_of.len();
        for (l, m) in scan.markers.iter().enumerate() {
            if !m.testable {
                continue;
            }
            let x = DMatrix::from_fn(n_obs, 2, |i, j| if j == 0 { 1.0 } else { g.calls()[(genotype_of[i], l)] });
            let c = (x.transpose() * &vinv * &x).try_inverse().unwrap();
            let beta = &c * x.transpose() * &vinv * &data.model.y;
            let res = &data.model.y - &x * &beta;
            let sigma2 = (res.transpose() * &vinv * &res)[(0, 0)] / (n_obs - 2) as f64;
            let se = (sigma2 * c[(1, 1)]).sqrt();
            let f = (beta[1] / se).powi(2);
            let pd = f_test_p(f, (n_obs - 2) as f64);
            assert!((m.effect - beta[1]).abs() < 1e-9);
            assert!((m.se - se).abs() < 1e-9);
            assert!((m.p - pd).abs() < 1e-10);
        }
    }

    #[test]
    fn monomorphic_and_duplicate_markers_untestable() {
        let (p, g, k) = setup(20, 2, 10, 3);
        let mut calls = g.calls().clone();
        calls.column_mut(4).fill(2.0);
        let g2 = GenotypeMatrix::new(g.accession_ids().to_vec(), g.marker_ids().to_vec(), calls).unwrap();
        let data = ScanData::one_stage(&p, &k, &[]).unwrap();
        let null = fit_null(&data, &RemlOptions::default()).unwrap();
        let scan = gls_scan(&data, &g2, &null, &ScanOptions::default()).unwrap();
        assert!(!scan.markers[4].testable);
        assert_eq!(scan.markers[4].p, 1.0);
        assert_eq!(scan.markers.len(), 10);
        for m in &scan.markers {
            assert!(m.p > 0.0 && m.p <= 1.0);
        }
    }

    #[test]
    fn zero_genetic_variance_reduces_to_ols() {
        let (p, g, k) = setup(30, 2, 5, 4);
        let data = ScanData::one_stage(&p, &k, &[]).unwrap();
        let mut null = fit_null(&data, &RemlOptions::default()).unwrap();
        null.sigma_a2 = 0.0;
        null.sigma_e2 = 1.0;
        let scan = gls_scan(&data, &g, &null, &ScanOptions { maf_min: 0.0, ..Default::default() }).unwrap();
        let reml::Structure::Replicated { genotype_of, .. } = &data.model.structure else { unreachable!() };
        for (l, m) in scan.markers.iter().enumerate() {
            let x = DMatrix::from_fn(60, 2, |i, j| if j == 0 { 1.0 } else { g.calls()[(genotype_of[i], l)] });
            let (beta, _) = linalg::ols(&x, &data.model.y).unwrap();
            assert!((m.effect - beta[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn refit_mode_runs_and_matches_on_large_effect() {
        let (p, g, k) = setup(30, 2, 4, 5);
        let data = ScanData::one_stage(&p, &k, &[]).unwrap();
        let null = fit_null(&data, &RemlOptions::default()).unwrap();
        let fixed = gls_scan(&data, &g, &null, &ScanOptions::default()).unwrap();
        let exact = gls_scan(&data, &g, &null, &ScanOptions { refit: true, ..Default::default() }).unwrap();
        assert_eq!(fixed.markers.len(), exact.markers.len());
        assert!(exact.markers[0].p < 0.05);
        assert!((exact.markers[0].effect - fixed.markers[0].effect).abs() < 0.5);
    }

    #[test]
    fn roc_examples() {
        let flat = roc_from_labels(&[(1.0, true), (1.0, false), (1.0, false)]);
        assert_eq!(flat[0], RocPoint { threshold: 0.0, fp: 0, tp: 0 });
        assert_eq!(flat.len(), 2);
        assert_eq!(flat[1], RocPoint { threshold: 1.0, fp: 2, tp: 1 });

        let perfect = roc_from_labels(&[(0.001, true), (0.002, true), (0.5, false), (0.9, false)]);
        assert_eq!(perfect[2], RocPoint { threshold: 0.002, fp: 0, tp: 2 });
        assert!((roc_auc(&perfect) - 1.0).abs() < 1e-12);
        let worst = roc_from_labels(&[(0.001, false), (0.002, false), (0.5, true), (0.9, true)]);
        assert!(roc_auc(&worst).abs() < 1e-12);
    }

    #[test]
    fn roc_window_counts_neighbours() {
        let scan = ScanResult {
            markers: (0..5)
                .map(|i| MarkerResult {
                    marker: format!("m{i}"),
                    maf: 0.3,
                    effect: 0.0,
                    se: 1.0,
                    f: 0.0,
                    p: 0.1 * (i + 1) as f64,
                    testable: true,
                })
                .collect(),
            stage: Stage::Individual,
            sigma_a2: 1.0,
            sigma_e2: 1.0,
            df_den: 10,
        };
        let exact = roc_curve(&scan, &["m2".into()], 0);
        assert_eq!(exact.last().unwrap().tp, 1);
        let wide = roc_curve(&scan, &["m2".into()], 1);
        assert_eq!(wide.last().unwrap().tp, 3);
    }

    #[test]
    fn f_tail_matches_known_values() {
        // F(1, inf) tail equals the two-sided normal tail
        assert!((f_test_p(3.841458820694124, 1e9) - 0.05).abs() < 1e-6);
        assert_eq!(f_test_p(0.0, 10.0), 1.0);
        // t(10) two-sided 5% point is 2.228139
        assert!((f_test_p(2.228138851986274f64.powi(2), 10.0) - 0.05).abs() < 1e-9);
    }
}
