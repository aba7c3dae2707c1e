//! G-BLUP for observed and unobserved genotypes, prediction-error variances
//! and cross-validation.

use std::collections::{HashMap, HashSet};

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::design::{self, CovariateSpec, PhenotypeTable};
use crate::error::{invalid, Error, Result};
use crate::geno::KinshipMatrix;
use crate::herit::{self, HeritOptions};
use crate::linalg;
use crate::reml::{Stage, Structure, VarianceModel};

#[derive(Debug, Clone)]
pub struct BlupFit {
    pub g_hat: DVector<f64>,
    pub beta_hat: DVector<f64>,
    /// sigma_A^2 / sigma_E^2.
    pub delta: f64,
    pub stage: Stage,
    /// Z' H^{-1} (y - X beta), so that G_hat = delta K alpha.
    pub alpha: DVector<f64>,
}

/// Solver for H = delta Z K Z' + I (individual) or delta K + R (means).
enum HSolver {
    Replicated {
        genotype_of: Vec<usize>,
        sqrt_r: DVector<f64>,
        /// delta D^{1/2} K D^{1/2}
        dm: DMatrix<f64>,
        c: Cholesky<f64, Dyn>,
    },
    Dense(Cholesky<f64, Dyn>),
}

impl HSolver {
    fn new(model: &VarianceModel, delta: f64) -> Result<Self> {
        match &model.structure {
            Structure::Replicated { genotype_of, kinship } => {
                let n = kinship.nrows();
                let mut reps = vec![0usize; n];
                for &g in genotype_of {
                    reps[g] += 1;
                }
                let sqrt_r = DVector::from_iterator(n, reps.iter().map(|&r| (r as f64).sqrt()));
                let dm = DMatrix::from_fn(n, n, |i, j| delta * sqrt_r[i] * kinship[(i, j)] * sqrt_r[j]);
                let c = linalg::cholesky(&(DMatrix::identity(n, n) + &dm), "I + delta D^1/2 K D^1/2")?;
                Ok(HSolver::Replicated { genotype_of: genotype_of.clone(), sqrt_r, dm, c })
            }
            Structure::Means { kinship, residual } => {
                let h = kinship * delta + residual;
                Ok(HSolver::Dense(linalg::cholesky(&h, "delta K + R")?))
            }
            Structure::Dense { .. } => Err(Error::NotApplicable("BLUP needs a replicated or means-level structure".into())),
        }
    }

    fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            HSolver::Replicated { genotype_of, sqrt_r, dm, c } => {
                // H^{-1} = I - Q (I + dM)^{-1} dM Q' with Q = Z D^{-1/2}
                let mut s = DVector::zeros(sqrt_r.len());
                for (obs, &g) in genotype_of.iter().enumerate() {
                    s[g] += v[obs];
                }
                s.component_div_assign(sqrt_r);
                let t = c.solve(&(dm * s));
                let mut out = v.clone();
                for (obs, &g) in genotype_of.iter().enumerate() {
                    out[obs] -= t[g] / sqrt_r[g];
                }
                out
            }
            HSolver::Dense(ch) => ch.solve(v),
        }
    }

    fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            out.set_column(j, &self.solve(&m.column(j).into_owned()));
        }
        out
    }
}

fn kinship_of(model: &VarianceModel) -> Result<&DMatrix<f64>> {
    match &model.structure {
        Structure::Replicated { kinship, .. } | Structure::Means { kinship, .. } => Ok(kinship),
        Structure::Dense { .. } => Err(Error::NotApplicable("dense structure has no kinship".into())),
    }
}

fn incidence_transpose(model: &VarianceModel, v: &DVector<f64>) -> DVector<f64> {
    match &model.structure {
        Structure::Replicated { genotype_of, kinship } => {
            let mut s = DVector::zeros(kinship.nrows());
            for (obs, &g) in genotype_of.iter().enumerate() {
                s[g] += v[obs];
            }
            s
        }
        _ => v.clone(),
    }
}

/// BLUP of G and BLUE of beta at shrinkage `delta` = sigma_A^2 / sigma_E^2.
pub fn fit_blup(model: &VarianceModel, delta: f64) -> Result<BlupFit> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return invalid(format!("shrinkage {delta} must be finite and non-negative"));
    }
    let k = kinship_of(model)?;
    let solver = HSolver::new(model, delta)?;
    let q = model.n_fixed();
    let beta = if q == 0 {
        DVector::zeros(0)
    } else {
        let hx = solver.solve_matrix(&model.x);
        let c = model.x.tr_mul(&hx);
        linalg::cholesky(&c, "X'H^-1X")?.solve(&hx.tr_mul(&model.y))
    };
    let e = &model.y - &model.x * &beta;
    let alpha = incidence_transpose(model, &solver.solve(&e));
    let g_hat = if delta == 0.0 { DVector::zeros(k.nrows()) } else { k * &alpha * delta };
    Ok(BlupFit { g_hat, beta_hat: beta, delta, stage: model.stage, alpha })
}

impl BlupFit {
    /// Fitted values X beta + Z G of the training records.
    pub fn fitted(&self, model: &VarianceModel) -> DVector<f64> {
        let mut f = &model.x * &self.beta_hat;
        match &model.structure {
            Structure::Replicated { genotype_of, .. } => {
                for (obs, &g) in genotype_of.iter().enumerate() {
                    f[obs] += self.g_hat[g];
                }
            }
            _ => f += &self.g_hat,
        }
        f
    }
}

#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub ids: Vec<String>,
    /// m x n kinship of unobserved versus training genotypes.
    pub k_pred_obs: DMatrix<f64>,
    pub k_pred_pred: DMatrix<f64>,
    pub g_pred_hat: DVector<f64>,
    pub pev: Option<DMatrix<f64>>,
}

impl PredictionSet {
    pub fn new(ids: Vec<String>, k_pred_obs: DMatrix<f64>, k_pred_pred: DMatrix<f64>) -> Result<Self> {
        let m = ids.len();
        if k_pred_obs.nrows() != m || k_pred_pred.shape() != (m, m) {
            return Err(Error::Dimension("prediction kinship blocks do not match the id list".into()));
        }
        Ok(PredictionSet { ids, k_pred_obs, k_pred_pred, g_pred_hat: DVector::zeros(m), pev: None })
    }

    /// Blocks taken from a kinship covering both sets.
    pub fn from_kinship(k: &KinshipMatrix, train: &[String], pred: &[String]) -> Result<Self> {
        Self::new(pred.to_vec(), k.cross(pred, train)?, k.cross(pred, pred)?)
    }
}

/// Conditional means delta K_pred.obs alpha of unobserved genotypes.
pub fn predict_unobserved(fit: &BlupFit, mut pred: PredictionSet) -> Result<PredictionSet> {
    if pred.k_pred_obs.ncols() != fit.alpha.len() {
        return Err(Error::Dimension(format!(
            "cross-kinship has {} columns for {} training genotypes",
            pred.k_pred_obs.ncols(),
            fit.alpha.len()
        )));
    }
    pred.g_pred_hat = if fit.delta == 0.0 {
        DVector::zeros(pred.ids.len())
    } else {
        &pred.k_pred_obs * &fit.alpha * fit.delta
    };
    Ok(pred)
}

/// X_pred beta + Z_pred G.
pub fn predict_observations(
    beta: &DVector<f64>,
    x_pred: &DMatrix<f64>,
    z_pred: &DMatrix<f64>,
    g: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x_pred.ncols() != beta.len() || z_pred.ncols() != g.len() || x_pred.nrows() != z_pred.nrows() {
        return Err(Error::Dimension("prediction design does not match the fit".into()));
    }
    Ok(x_pred * beta + z_pred * g)
}

fn invert_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = linalg::cholesky(m, what)?.inverse();
    linalg::symmetrize(&mut inv);
    Ok(inv)
}

/// E(G_hat - G)(G_hat - G)' for the training genotypes with delta known:
/// sigma_E^2 (Z'R^-1 Z + K^-1/delta - Z'R^-1 X (X'R^-1 X)^-1 X'R^-1 Z)^-1.
pub fn pev_training(model: &VarianceModel, sigma_a2: f64, sigma_e2: f64) -> Result<DMatrix<f64>> {
    if !(sigma_a2 > 0.0 && sigma_e2 > 0.0) {
        return invalid("training PEV needs positive variance components");
    }
    let k = kinship_of(model)?;
    let k_inv = invert_spd(k, "kinship").map_err(|_| Error::Singular("kinship is singular".into()))?;
    let delta = sigma_a2 / sigma_e2;
    let (ztz, ztx) = match &model.structure {
        Structure::Replicated { genotype_of, .. } => {
            let n = k.nrows();
            let mut ztz = DMatrix::zeros(n, n);
            let mut ztx = DMatrix::zeros(n, model.n_fixed());
            for (obs, &g) in genotype_of.iter().enumerate() {
                ztz[(g, g)] += 1.0;
                for j in 0..model.n_fixed() {
                    ztx[(g, j)] += model.x[(obs, j)];
                }
            }
            (ztz, ztx)
        }
        Structure::Means { residual, .. } => {
            let r_inv = invert_spd(residual, "R")?;
            let rx = &r_inv * &model.x;
            (r_inv, rx)
        }
        Structure::Dense { .. } => unreachable!("rejected by kinship_of"),
    };
    let xrx = match &model.structure {
        Structure::Replicated { .. } => model.x.tr_mul(&model.x),
        _ => model.x.tr_mul(&ztx),
    };
    let mut c = ztz + k_inv / delta;
    if model.n_fixed() > 0 {
        c -= &ztx * invert_spd(&xrx, "X'R^-1X")? * ztx.transpose();
    }
    linalg::symmetrize(&mut c);
    let inv = invert_spd(&c, "PEV coefficient matrix").map_err(|_| Error::Singular("PEV coefficient matrix".into()))?;
    Ok(inv * sigma_e2)
}

/// A PEV_train A' + sigma_A^2 (K_pp - K_po K^-1 K_po') with A = K_po K^-1.
pub fn pev_validation(
    model: &VarianceModel,
    k_pred_obs: &DMatrix<f64>,
    k_pred_pred: &DMatrix<f64>,
    sigma_a2: f64,
    sigma_e2: f64,
) -> Result<DMatrix<f64>> {
    let k = kinship_of(model)?;
    let train = pev_training(model, sigma_a2, sigma_e2)?;
    let kch = linalg::cholesky(k, "kinship").map_err(|_| Error::Singular("kinship is singular".into()))?;
    let a = kch.solve(&k_pred_obs.transpose()).transpose();
    let mut out = &a * train * a.transpose() + (k_pred_pred - &a * k_pred_obs.transpose()) * sigma_a2;
    linalg::symmetrize(&mut out);
    Ok(out)
}

/// Var(G_hat - G) for balanced means with mu = 0 when the BLUP uses a possibly
/// wrong per-mean shrinkage `delta_hat` (sigma_A^2 / (sigma_E^2 / r)); `f64::INFINITY`
/// means no shrinkage.
pub fn pev_misspecified(k: &DMatrix<f64>, r: usize, sigma_a2: f64, sigma_e2: f64, delta_hat: f64) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    if r == 0 || !(delta_hat >= 0.0) {
        return invalid("need r >= 1 and a non-negative shrinkage");
    }
    let s = if delta_hat.is_infinite() {
        DMatrix::identity(n, n)
    } else {
        let m = k * delta_hat + DMatrix::identity(n, n);
        // S = delta K (delta K + I)^{-1} = I - (delta K + I)^{-1}
        DMatrix::identity(n, n) - invert_spd(&m, "delta K + I")?
    };
    let var_ybar = k * sigma_a2 + DMatrix::identity(n, n) * (sigma_e2 / r as f64);
    let cross = &s * k * sigma_a2;
    let mut out = k * sigma_a2 - &cross - cross.transpose() + &s * var_ybar * s.transpose();
    linalg::symmetrize(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRecord {
    pub repeat: usize,
    pub stage: Stage,
    pub h2_hat: f64,
    pub monotone: bool,
    pub r_train: f64,
    pub r_valid: f64,
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub herit: HeritOptions,
}

/// Predictions of one stage for a train/validation split.
#[derive(Debug, Clone)]
pub struct SplitPrediction {
    pub h2_hat: f64,
    pub monotone: bool,
    pub delta: f64,
    /// Genetic values of the training genotypes, in `train_ids` order.
    pub g_train: DVector<f64>,
    pub g_valid: DVector<f64>,
    /// Fixed part (intercept and covariates) of each requested record.
    pub fixed_valid: Vec<Option<f64>>,
    pub fixed_train: Vec<Option<f64>>,
}

/// Fits one stage on `train` and predicts genetic values of `valid_ids`.
pub fn predict_split(
    train: &PhenotypeTable,
    k: &KinshipMatrix,
    covariates: &[CovariateSpec],
    valid_ids: &[String],
    valid_records: Option<&PhenotypeTable>,
    stage: Stage,
    opts: &HeritOptions,
) -> Result<SplitPrediction> {
    let design = design::build_design(train, covariates)?;
    let train_ids = design.genotype_ids.clone();
    let k_po = k.cross(valid_ids, &train_ids)?;
    let (est, blup, beta_c, mu) = match stage {
        Stage::Individual => {
            let model = herit::individual_model(train, k, covariates)?;
            let est = herit::h2_replicates(train, k, covariates, opts)?;
            let fit = fit_blup(&model, est.sigma_a2 / est.sigma_e2)?;
            let mu = fit.beta_hat[0];
            let beta_c = fit.beta_hat.rows(1, fit.beta_hat.len() - 1).into_owned();
            (est, fit, beta_c, mu)
        }
        Stage::Means => {
            let means = design::compute_blues_from_design(&design, train.values())?;
            let model = herit::means_model(&means, k)?;
            let est = herit::h2_means(&means, k, opts)?;
            let fit = fit_blup(&model, est.sigma_a2 / est.sigma_e2)?;
            let mu = fit.beta_hat[0];
            (est, fit, means.beta_c.clone(), mu)
        }
    };
    let g_valid = if blup.delta == 0.0 { DVector::zeros(valid_ids.len()) } else { &k_po * &blup.alpha * blup.delta };
    let fixed_of = |records: &PhenotypeTable| -> Result<Vec<Option<f64>>> {
        Ok(design
            .encode_covariates(records)?
            .into_iter()
            .map(|row| row.map(|x| mu + x.dot(&beta_c)))
            .collect())
    };
    let fixed_valid = match valid_records {
        Some(p) => fixed_of(p)?,
        None => Vec::new(),
    };
    let fixed_train = fixed_of(train)?;
    Ok(SplitPrediction {
        h2_hat: est.h2,
        monotone: est.monotone,
        delta: blup.delta,
        g_train: blup.g_hat,
        g_valid,
        fixed_valid,
        fixed_train,
    })
}

fn record_correlation(
    records: &PhenotypeTable,
    fixed: &[Option<f64>],
    g: &HashMap<&str, f64>,
) -> f64 {
    let mut pred = Vec::new();
    let mut obs = Vec::new();
    let mut dropped = 0usize;
    for (i, f) in fixed.iter().enumerate() {
        match f {
            Some(f) => {
                pred.push(f + g[records.genotypes()[i].as_str()]);
                obs.push(records.values()[i]);
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        warn!("{dropped} validation records have covariate levels unseen in training and were dropped");
    }
    if pred.len() < 2 {
        return f64::NAN;
    }
    linalg::correlation(&pred, &obs)
}

/// Repeated random genotype-level splits; part 0 of `folds` is the validation set.
pub fn cross_validate(
    pheno: &PhenotypeTable,
    k: &KinshipMatrix,
    covariates: &[CovariateSpec],
    opts: &CvOptions,
) -> Result<Vec<CvRecord>> {
    if opts.folds < 2 {
        return invalid("cross-validation needs at least two folds");
    }
    let ids = pheno.genotype_ids();
    let n_valid = ids.len().div_ceil(opts.folds);
    if n_valid < 2 || ids.len() - n_valid < 2 {
        return invalid(format!("{} genotypes cannot be split into {} folds", ids.len(), opts.folds));
    }
    let per_repeat: Vec<Result<Vec<CvRecord>>> = (0..opts.repeats)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(rep as u64);
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut rng);
            let valid: Vec<String> = shuffled.iter().step_by(opts.folds).cloned().collect();
            let valid_set: HashSet<String> = valid.iter().cloned().collect();
            let train_set: HashSet<String> = ids.iter().filter(|i| !valid_set.contains(*i)).cloned().collect();
            let train = pheno.filter_genotypes(&train_set);
            let held_out = pheno.filter_genotypes(&valid_set);
            let mut valid_sorted = valid.clone();
            valid_sorted.sort();
            let train_ids = train.genotype_ids();
            let mut out = Vec::new();
            for stage in [Stage::Individual, Stage::Means] {
                let sp = predict_split(&train, k, covariates, &valid_sorted, Some(&held_out), stage, &opts.herit)?;
                let g_v: HashMap<&str, f64> =
                    valid_sorted.iter().map(|s| s.as_str()).zip(sp.g_valid.iter().copied()).collect();
                let g_t: HashMap<&str, f64> =
                    train_ids.iter().map(|s| s.as_str()).zip(sp.g_train.iter().copied()).collect();
                out.push(CvRecord {
                    repeat: rep,
                    stage,
                    h2_hat: sp.h2_hat,
                    monotone: sp.monotone,
                    r_train: record_correlation(&train, &sp.fixed_train, &g_t),
                    r_valid: record_correlation(&held_out, &sp.fixed_valid, &g_v),
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_repeat {
        records.extend(r?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pd_kinship(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let w = DMatrix::from_fn(n, 2 * n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut k = &w * w.transpose() / (2 * n) as f64 + DMatrix::identity(n, n) * 0.1;
        linalg::symmetrize(&mut k);
        k
    }

    fn replicated(n: usize, reps: &[usize], q: usize, rng: &mut ChaCha8Rng) -> VarianceModel {
        let k = pd_kinship(n, rng);
        let mut gof = Vec::new();
        for i in 0..n {
            for _ in 0..reps[i % reps.len()] {
                gof.push(i);
            }
        }
        let nn = gof.len();
        let y = DVector::from_fn(nn, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(nn, q, |_, j| if j == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
        VarianceModel::individual(y, x, gof, k).unwrap()
    }

    /// Direct closed forms with explicit N x N inverses.
    fn dense_blup(model: &VarianceModel, delta: f64) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let g0 = model.g0();
        let h = &g0 * delta + model.r0();
        let hinv = h.try_inverse().unwrap();
        let x = &model.x;
        let beta = (x.transpose() * &hinv * x).try_inverse().unwrap() * x.transpose() * &hinv * &model.y;
        let e = &model.y - x * &beta;
        let (z, k) = match &model.structure {
            Structure::Replicated { genotype_of, kinship } => {
                (DMatrix::from_fn(genotype_of.len(), kinship.nrows(), |i, j| (genotype_of[i] == j) as u8 as f64), kinship.clone())
            }
            Structure::Means { kinship, .. } => (DMatrix::identity(kinship.nrows(), kinship.nrows()), kinship.clone()),
            _ => unreachable!(),
        };
        let g = &k * z.transpose() * &hinv * e * delta;
        (g, beta, z)
    }

    #[test]
    fn matches_dense_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for reps in [&[1usize][..], &[3][..], &[1, 2, 4][..]] {
            let model = replicated(15, reps, 2, &mut rng);
            for delta in [0.3, 2.0] {
                let fit = fit_blup(&model, delta).unwrap();
                let (g, beta, _) = dense_blup(&model, delta);
                assert!((&fit.g_hat - g).amax() < 1e-10);
                assert!((&fit.beta_hat - beta).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn means_stage_matches_dense_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 12;
        let k = pd_kinship(n, &mut rng);
        let r = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 1.0 / (1 + i % 3) as f64));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let model = VarianceModel::means(y, DMatrix::from_element(n, 1, 1.0), k, r).unwrap();
        let fit = fit_blup(&model, 1.5).unwrap();
        let (g, beta, _) = dense_blup(&model, 1.5);
        assert!((&fit.g_hat - g).amax() < 1e-10);
        assert!((&fit.beta_hat - beta).amax() < 1e-10);
    }

    #[test]
    fn mixed_model_equations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = replicated(10, &[2, 3], 2, &mut rng);
        let delta = 0.7;
        let fit = fit_blup(&model, delta).unwrap();
        let (_, _, z) = dense_blup(&model, delta);
        let Structure::Replicated { kinship, .. } = &model.structure else { unreachable!() };
        // X'(y - X b - Z g) = 0 and Z'(y - X b - Z g) = K^-1 g / delta
        let resid = &model.y - &model.x * &fit.beta_hat - &z * &fit.g_hat;
        assert!((model.x.transpose() * &resid).amax() < 1e-9);
        let kinv = kinship.clone().try_inverse().unwrap();
        assert!((z.transpose() * &resid - kinv * &fit.g_hat / delta).amax() < 1e-8);
    }

    #[test]
    fn zero_shrinkage_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = replicated(10, &[3], 1, &mut rng);
        let fit = fit_blup(&model, 0.0).unwrap();
        assert!(fit.g_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_shrinkage_recovers_genotype_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = replicated(20, &[3], 0, &mut rng);
        let fit = fit_blup(&model, 1e6).unwrap();
        let Structure::Replicated { genotype_of, .. } = &model.structure else { unreachable!() };
        let mut means = DVector::zeros(20);
        for (obs, &g) in genotype_of.iter().enumerate() {
            means[g] += model.y[obs] / 3.0;
        }
        let sd = linalg::variance(model.y.as_slice()).sqrt();
        assert!((&fit.g_hat - means).amax() < 1e-3 * sd);
    }

    #[test]
    fn prediction_of_unrelated_and_duplicated_genotypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = replicated(8, &[2], 1, &mut rng);
        let fit = fit_blup(&model, 1.2).unwrap();
        let Structure::Replicated { kinship, .. } = &model.structure else { unreachable!() };
        let pred = PredictionSet::new(vec!["u".into()], DMatrix::zeros(1, 8), DMatrix::identity(1, 1)).unwrap();
        assert_eq!(predict_unobserved(&fit, pred).unwrap().g_pred_hat[0], 0.0);
        let dup = PredictionSet::new(vec!["d".into()], kinship.rows(3, 1).into_owned(), DMatrix::from_element(1, 1, kinship[(3, 3)]))
            .unwrap();
        let p = predict_unobserved(&fit, dup).unwrap();
        assert!((p.g_pred_hat[0] - fit.g_hat[3]).abs() < 1e-10);
    }

    #[test]
    fn prediction_equals_kinship_regression_on_g_hat() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = replicated(12, &[1, 3], 1, &mut rng);
        let fit = fit_blup(&model, 0.8).unwrap();
        let Structure::Replicated { kinship, .. } = &model.structure else { unreachable!() };
        let k_po = DMatrix::from_fn(4, 12, |_, _| rng.random::<f64>() * 0.2);
        let p = predict_unobserved(&fit, PredictionSet::new(vec!["a".into(); 4], k_po.clone(), DMatrix::identity(4, 4)).unwrap())
            .unwrap();
        let oracle = &k_po * kinship.clone().try_inverse().unwrap() * &fit.g_hat;
        assert!((p.g_pred_hat - oracle).amax() < 1e-8);
    }

    #[test]
    fn training_fitted_values_and_mean_only_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = replicated(6, &[2], 1, &mut rng);
        let fit = fit_blup(&model, 1.0).unwrap();
        let Structure::Replicated { genotype_of, .. } = &model.structure else { unreachable!() };
        let z = DMatrix::from_fn(12, 6, |i, j| (genotype_of[i] == j) as u8 as f64);
        let yhat = predict_observations(&fit.beta_hat, &model.x, &z, &fit.g_hat).unwrap();
        assert!((yhat - fit.fitted(&model)).amax() < 1e-12);
        let mu_only = predict_observations(&fit.beta_hat, &DMatrix::from_element(1, 1, 1.0), &DMatrix::zeros(1, 1), &DVector::zeros(1))
            .unwrap();
        assert_eq!(mu_only[0], fit.beta_hat[0]);
    }

    #[test]
    fn misspecified_pev_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = pd_kinship(10, &mut rng);
        let (sa, se, r) = (0.7, 1.3, 3);
        let none = pev_misspecified(&k, r, sa, se, f64::INFINITY).unwrap();
        assert!((none - DMatrix::identity(10, 10) * (se / r as f64)).amax() < 1e-12);
        let total = pev_misspecified(&k, r, sa, se, 0.0).unwrap();
        assert!((total - &k * sa).amax() < 1e-12);
        // at the true shrinkage it equals the training PEV of the mu-free means model
        let delta_true = sa / (se / r as f64);
        let at_truth = pev_misspecified(&k, r, sa, se, delta_true).unwrap();
        let oracle = ((&k * sa).try_inverse().unwrap() + DMatrix::identity(10, 10) * (r as f64 / se)).try_inverse().unwrap();
        assert!((at_truth - oracle).amax() < 1e-10);
    }

    #[test]
    fn training_pev_balanced_matches_paper_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 8;
        let r = 1;
        let model = replicated(n, &[r], 1, &mut rng);
        let Structure::Replicated { kinship, .. } = &model.structure else { unreachable!() };
        let (sa, se) = (1.0, 1.0);
        let pev = pev_training(&model, sa, se).unwrap();
        let j = DMatrix::from_element(n, n, 1.0 / n as f64);
        let paper = (DMatrix::identity(n, n) * r as f64 + kinship.clone().try_inverse().unwrap() / (sa / se) - j)
            .try_inverse()
            .unwrap();
        assert!((pev - paper).amax() < 1e-10);
    }

    #[test]
    fn validation_pev_is_psd_and_exceeds_conditional_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 14;
        let full = pd_kinship(n + 4, &mut rng);
        let k = full.view((0, 0), (n, n)).into_owned();
        let k_po = full.view((n, 0), (4, n)).into_owned();
        let k_pp = full.view((n, n), (4, 4)).into_owned();
        let gof: Vec<usize> = (0..n).flat_map(|i| [i, i]).collect();
        let y = DVector::from_fn(2 * n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let model = VarianceModel::individual(y, DMatrix::from_element(2 * n, 1, 1.0), gof, k.clone()).unwrap();
        let pev = pev_validation(&model, &k_po, &k_pp, 0.8, 1.1).unwrap();
        let (vals, _) = linalg::symmetric_eigen(&pev);
        assert!(vals[0] > -1e-8);
        let cond = (&k_pp - &k_po * k.try_inverse().unwrap() * k_po.transpose()) * 0.8;
        for i in 0..4 {
            assert!(pev[(i, i)] >= cond[(i, i)] - 1e-12);
        }
    }

    fn cv_table(n: usize, r: usize, noiseless: bool, rng: &mut ChaCha8Rng) -> (PhenotypeTable, KinshipMatrix) {
        let k = pd_kinship(n, rng);
        let (vals, vecs) = linalg::symmetric_eigen(&k);
        let z = DVector::from_fn(n, |i, _| vals[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let g = vecs * z;
        let ids: Vec<String> = (0..n).map(|i| format!("a{i:03}")).collect();
        let mut gen = Vec::new();
        let mut v = Vec::new();
        for i in 0..n {
            for _ in 0..r {
                gen.push(ids[i].clone());
                v.push(g[i] + if noiseless { 0.0 } else { rng.sample::<f64, _>(StandardNormal) });
            }
        }
        (PhenotypeTable::without_covariates(gen, v).unwrap(), KinshipMatrix::new(ids, k).unwrap())
    }

    #[test]
    fn noiseless_trait_fits_training_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (p, k) = cv_table(30, 2, true, &mut rng);
        let opts = CvOptions { folds: 5, repeats: 2, seed: 1, herit: HeritOptions::default() };
        let recs = cross_validate(&p, &k, &[], &opts).unwrap();
        for r in recs.iter().filter(|r| r.stage == Stage::Individual) {
            assert!((r.r_train - 1.0).abs() < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn cross_validation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (p, k) = cv_table(25, 2, false, &mut rng);
        let opts = CvOptions { folds: 5, repeats: 3, seed: 99, herit: HeritOptions::default() };
        let a = cross_validate(&p, &k, &[], &opts).unwrap();
        let b = cross_validate(&p, &k, &[], &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(cross_validate(&p, &k, &[], &CvOptions { folds: 1, ..opts }).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn shrinkage_is_monotone(seed in 0u64..1000, d1 in 0.01f64..5.0, factor in 1.01f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = replicated(10, &[3], 1, &mut rng);
            let a = fit_blup(&model, d1).unwrap();
            let b = fit_blup(&model, d1 * factor).unwrap();
            prop_assert!(a.g_hat.norm() <= b.g_hat.norm() + 1e-12);
        }

        #[test]
        fn pev_is_psd(seed in 0u64..1000, sa in 0.1f64..3.0, se in 0.1f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = replicated(9, &[1, 2], 1, &mut rng);
            let pev = pev_training(&model, sa, se).unwrap();
            let (vals, _) = linalg::symmetric_eigen(&pev);
            prop_assert!(vals[0] > -1e-8);
            prop_assert!(linalg::relative_asymmetry(&pev) < 1e-12);
        }
    }
}
