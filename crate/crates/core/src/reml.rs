//! Two-component REML: y ~ N(Xb, sigma_A^2 G0 + sigma_E^2 R0).
//!
//! Fits run on a rotated model in which V is diagonal whenever R0 can be
//! whitened cheaply; otherwise a dense Cholesky evaluator is used.

use std::f64::consts::PI;

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{invalid, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stage {
    #[default]
    Individual,
    Means,
}

#[derive(Debug, Clone)]
pub enum Structure {
    /// G0 = Z K Z', R0 = I; `genotype_of[obs]` indexes rows of K.
    Replicated { genotype_of: Vec<usize>, kinship: DMatrix<f64> },
    /// G0 = K, R0 = R.
    Means { kinship: DMatrix<f64>, residual: DMatrix<f64> },
    Dense { g0: DMatrix<f64>, r0: DMatrix<f64> },
}

#[derive(Debug, Clone)]
pub struct VarianceModel {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub structure: Structure,
    pub stage: Stage,
}

impl VarianceModel {
    pub fn individual(y: DVector<f64>, x: DMatrix<f64>, genotype_of: Vec<usize>, kinship: DMatrix<f64>) -> Result<Self> {
        if genotype_of.len() != y.len() {
            return Err(Error::Dimension(format!("{} genotype labels for {} observations", genotype_of.len(), y.len())));
        }
        let n = kinship.nrows();
        if let Some(&bad) = genotype_of.iter().find(|&&g| g >= n) {
            return Err(Error::Dimension(format!("genotype index {bad} outside kinship of size {n}")));
        }
        let mut seen = vec![false; n];
        for &g in &genotype_of {
            seen[g] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return invalid(format!("kinship row {i} has no observations"));
        }
        check_square_symmetric(&kinship, "kinship")?;
        Self::checked(VarianceModel { y, x, structure: Structure::Replicated { genotype_of, kinship }, stage: Stage::Individual })
    }

    pub fn means(y: DVector<f64>, x: DMatrix<f64>, kinship: DMatrix<f64>, residual: DMatrix<f64>) -> Result<Self> {
        check_square_symmetric(&kinship, "kinship")?;
        check_square_symmetric(&residual, "residual covariance")?;
        if kinship.nrows() != y.len() || residual.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "means model with {} values, kinship {}, residual {}",
                y.len(),
                kinship.nrows(),
                residual.nrows()
            )));
        }
        Self::checked(VarianceModel { y, x, structure: Structure::Means { kinship, residual }, stage: Stage::Means })
    }

    pub fn dense(y: DVector<f64>, x: DMatrix<f64>, g0: DMatrix<f64>, r0: DMatrix<f64>, stage: Stage) -> Result<Self> {
        check_square_symmetric(&g0, "G0")?;
        check_square_symmetric(&r0, "R0")?;
        if g0.nrows() != y.len() || r0.nrows() != y.len() {
            return Err(Error::Dimension("G0/R0 do not match the response length".into()));
        }
        Self::checked(VarianceModel { y, x, structure: Structure::Dense { g0, r0 }, stage })
    }

    fn checked(self) -> Result<Self> {
        let n = self.y.len();
        if self.x.nrows() != n {
            return Err(Error::Dimension(format!("X has {} rows for {n} observations", self.x.nrows())));
        }
        if n <= self.x.ncols() {
            return invalid(format!("{n} observations cannot support {} fixed effects", self.x.ncols()));
        }
        if linalg::numerical_rank(&self.x) < self.x.ncols() {
            return Err(Error::Singular("fixed-effect design is rank deficient".into()));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return invalid("response contains non-finite values");
        }
        Ok(self)
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.y.len() {
            return Err(Error::Dimension("replacement response has the wrong length".into()));
        }
        Ok(VarianceModel { y, ..self.clone() })
    }

    pub fn g0(&self) -> DMatrix<f64> {
        match &self.structure {
            Structure::Replicated { genotype_of, kinship } => {
                let n = genotype_of.len();
                DMatrix::from_fn(n, n, |i, j| kinship[(genotype_of[i], genotype_of[j])])
            }
            Structure::Means { kinship, .. } => kinship.clone(),
            Structure::Dense { g0, .. } => g0.clone(),
        }
    }

    pub fn r0(&self) -> DMatrix<f64> {
        match &self.structure {
            Structure::Replicated { genotype_of, .. } => DMatrix::identity(genotype_of.len(), genotype_of.len()),
            Structure::Means { residual, .. } => residual.clone(),
            Structure::Dense { r0, .. } => r0.clone(),
        }
    }
}

fn check_square_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{what} is not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return invalid(format!("{what} has non-finite entries"));
    }
    if linalg::relative_asymmetry(m) > 1e-10 {
        return invalid(format!("{what} is not symmetric"));
    }
    Ok(())
}

fn is_identity(m: &DMatrix<f64>) -> bool {
    (m - DMatrix::identity(m.nrows(), m.ncols())).amax() < 1e-12
}

/// Maps genotype-level vectors into the rotated coordinates.
#[derive(Debug, Clone)]
pub enum Basis {
    /// Coordinates U' D^{-1/2} Z'; the remaining within-genotype contrasts are implicit.
    Replicated { u: DMatrix<f64>, sqrt_r: DVector<f64> },
    /// Coordinates U' L^{-1} with R = LL'.
    Whitened { u: DMatrix<f64>, l: DMatrix<f64> },
    Eigen { u: DMatrix<f64> },
}

impl Basis {
    /// Rotates a genotype-level covariate (one value per kinship row).
    pub fn rotate_genotype_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Basis::Replicated { u, sqrt_r } => u.tr_mul(&v.component_mul(sqrt_r)),
            Basis::Whitened { u, l } => {
                let w = l.solve_lower_triangular(v).expect("Cholesky factor has a positive diagonal");
                u.tr_mul(&w)
            }
            Basis::Eigen { u } => u.tr_mul(v),
        }
    }

    pub fn rotate_genotype_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Basis::Replicated { u, sqrt_r } => {
                let mut s = m.clone();
                for (i, mut row) in s.row_iter_mut().enumerate() {
                    row *= sqrt_r[i];
                }
                u.tr_mul(&s)
            }
            Basis::Whitened { u, l } => {
                let w = l.solve_lower_triangular(m).expect("Cholesky factor has a positive diagonal");
                u.tr_mul(&w)
            }
            Basis::Eigen { u } => u.tr_mul(m),
        }
    }
}

/// Sufficient statistics of coordinates whose eigenvalue is exactly zero.
#[derive(Debug, Clone)]
pub struct NullBlock {
    pub m: usize,
    pub yy: f64,
    pub xy: DVector<f64>,
    pub xx: DMatrix<f64>,
}

/// Model in coordinates where V = sigma_A^2 diag(lambda) + sigma_E^2 I.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub null: Option<NullBlock>,
    /// log|R0|, so that log|V| = sum log d + offset.
    pub offset: f64,
    pub basis: Basis,
    pub stage: Stage,
}

/// Rotates an individual-stage model with R0 = I so that V is diagonal.
pub fn spectral_prepare(model: &VarianceModel) -> Result<SpectralModel> {
    match &model.structure {
        Structure::Means { residual, .. } if !is_identity(residual) => {
            Err(Error::NotApplicable("residual structure is not the identity".into()))
        }
        Structure::Dense { r0, .. } if !is_identity(r0) => {
            Err(Error::NotApplicable("residual structure is not the identity".into()))
        }
        _ => SpectralModel::new(model),
    }
}

impl SpectralModel {
    /// Builds the rotated model; a means-stage residual R is whitened first.
    pub fn new(model: &VarianceModel) -> Result<Self> {
        let q = model.n_fixed();
        match &model.structure {
            Structure::Replicated { genotype_of, kinship } => {
                let n = kinship.nrows();
                let n_obs = genotype_of.len();
                let mut reps = vec![0usize; n];
                for &g in genotype_of {
                    reps[g] += 1;
                }
                let sqrt_r = DVector::from_iterator(n, reps.iter().map(|&r| (r as f64).sqrt()));
                let m = DMatrix::from_fn(n, n, |i, j| sqrt_r[i] * kinship[(i, j)] * sqrt_r[j]);
                let (lambda, u) = eigen_clamped(&m);

                let mut sum_y = DVector::zeros(n);
                let mut sum_x = DMatrix::zeros(n, q);
                for (obs, &g) in genotype_of.iter().enumerate() {
                    sum_y[g] += model.y[obs];
                    for j in 0..q {
                        sum_x[(g, j)] += model.x[(obs, j)];
                    }
                }
                let mut z_y = sum_y.clone();
                let mut z_x = sum_x.clone();
                for g in 0..n {
                    z_y[g] /= sqrt_r[g];
                    for j in 0..q {
                        z_x[(g, j)] /= sqrt_r[g];
                    }
                }
                let null = (n_obs > n).then(|| {
                    // within-genotype deviations
                    let mut yy = 0.0;
                    let mut xy = DVector::zeros(q);
                    let mut xx = DMatrix::zeros(q, q);
                    let mut dx = DVector::zeros(q);
                    for (obs, &g) in genotype_of.iter().enumerate() {
                        let r = reps[g] as f64;
                        let dy = model.y[obs] - sum_y[g] / r;
                        for j in 0..q {
                            dx[j] = model.x[(obs, j)] - sum_x[(g, j)] / r;
                        }
                        yy += dy * dy;
                        xy.axpy(dy, &dx, 1.0);
                        xx.ger(1.0, &dx, &dx, 1.0);
                    }
                    NullBlock { m: n_obs - n, yy, xy, xx }
                });
                Ok(SpectralModel {
                    y: u.tr_mul(&z_y),
                    x: u.tr_mul(&z_x),
                    lambda,
                    null,
                    offset: 0.0,
                    basis: Basis::Replicated { u, sqrt_r },
                    stage: model.stage,
                })
            }
            Structure::Means { kinship, residual } => {
                let ch = linalg::cholesky(residual, "residual covariance R")?;
                let offset = linalg::chol_logdet(&ch);
                let l = ch.l();
                let lk = l.solve_lower_triangular(kinship).expect("positive diagonal");
                let mut m = l.solve_lower_triangular(&lk.transpose()).expect("positive diagonal");
                linalg::symmetrize(&mut m);
                let (lambda, u) = eigen_clamped(&m);
                let wy = l.solve_lower_triangular(&model.y).expect("positive diagonal");
                let wx = l.solve_lower_triangular(&model.x).expect("positive diagonal");
                Ok(SpectralModel {
                    y: u.tr_mul(&wy),
                    x: u.tr_mul(&wx),
                    lambda,
                    null: None,
                    offset,
                    basis: Basis::Whitened { u, l },
                    stage: model.stage,
                })
            }
            Structure::Dense { g0, r0 } => {
                if !is_identity(r0) {
                    return Err(Error::NotApplicable("dense model with non-identity R0".into()));
                }
                let (lambda, u) = eigen_clamped(g0);
                Ok(SpectralModel {
                    y: u.tr_mul(&model.y),
                    x: u.tr_mul(&model.x),
                    lambda,
                    null: None,
                    offset: 0.0,
                    basis: Basis::Eigen { u },
                    stage: model.stage,
                })
            }
        }
    }

    pub fn n_obs(&self) -> usize {
        self.y.len() + self.null.as_ref().map_or(0, |b| b.m)
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    /// Same rotation applied to a new response (given in original coordinates).
    pub fn with_rotated_response(&self, y: DVector<f64>, null: Option<NullBlock>) -> Self {
        SpectralModel { y, null, ..self.clone() }
    }

    fn weighted(&self, a: f64, e: f64) -> Result<Weighted> {
        let q = self.n_fixed();
        let d = DVector::from_iterator(self.lambda.len(), self.lambda.iter().map(|&l| a * l + e));
        if d.iter().any(|&v| !(v > 0.0)) || !(e > 0.0 || self.null.is_none()) {
            return Err(Error::Singular("V is not positive definite".into()));
        }
        let w = d.map(|v| 1.0 / v);
        let mut c = DMatrix::zeros(q, q);
        let mut b = DVector::zeros(q);
        for k in 0..self.y.len() {
            let xk = self.x.row(k).transpose();
            c.ger(w[k], &xk, &xk, 1.0);
            b.axpy(w[k] * self.y[k], &xk, 1.0);
        }
        if let Some(nb) = &self.null {
            c += &nb.xx / e;
            b += &nb.xy / e;
        }
        let (beta, c_inv, logdet_c) = if q == 0 {
            (DVector::zeros(0), DMatrix::zeros(0, 0), 0.0)
        } else {
            let ch = linalg::cholesky(&c, "X'V^-1X")?;
            (ch.solve(&b), ch.inverse(), linalg::chol_logdet(&ch))
        };
        let r = &self.y - &self.x * &beta;
        let (null_r2, null_g) = match &self.null {
            Some(nb) => {
                let r2 = nb.yy - 2.0 * beta.dot(&nb.xy) + (&nb.xx * &beta).dot(&beta);
                (r2.max(0.0), &nb.xy - &nb.xx * &beta)
            }
            None => (0.0, DVector::zeros(q)),
        };
        Ok(Weighted { d, w, c_inv, logdet_c, beta, r, null_r2, null_g })
    }

    pub fn loglik(&self, a: f64, e: f64) -> Result<f64> {
        Ok(self.evaluate(a, e, false)?.loglik)
    }

    /// Log-likelihood, score, AI matrix and (optionally) expected information.
    pub fn evaluate(&self, a: f64, e: f64, expected: bool) -> Result<Evaluation> {
        let wt = self.weighted(a, e)?;
        let n_obs = self.n_obs() as f64;
        let q = self.n_fixed();
        let (m, nb_xx) = match &self.null {
            Some(nb) => (nb.m as f64, Some(&nb.xx)),
            None => (0.0, None),
        };
        let n_e = self.y.len();
        let lam = &self.lambda;
        let vk = |i: usize, k: usize| if i == 0 { lam[k] } else { 1.0 };
        let v0 = [0.0, 1.0];

        let logdet_v = wt.d.iter().map(|v| v.ln()).sum::<f64>() + m * if m > 0.0 { e.ln() } else { 0.0 } + self.offset;
        let ypy = (0..n_e).map(|k| wt.r[k] * wt.r[k] * wt.w[k]).sum::<f64>() + if m > 0.0 { wt.null_r2 / e } else { 0.0 };
        let loglik = -0.5 * ((n_obs - q as f64) * (2.0 * PI).ln() + logdet_v + wt.logdet_c + ypy);

        let mut score = Vector2::zeros();
        let mut a_mats: Vec<DMatrix<f64>> = Vec::with_capacity(2);
        // X'W u_i with u_i = V_i P y
        let mut xwu: Vec<DVector<f64>> = Vec::with_capacity(2);
        for i in 0..2 {
            let mut tr_wv = 0.0;
            let mut ypvpy = 0.0;
            let mut ai = DMatrix::zeros(q, q);
            let mut g = DVector::zeros(q);
            for k in 0..n_e {
                let v = vk(i, k);
                let w = wt.w[k];
                tr_wv += w * v;
                ypvpy += v * (w * wt.r[k]).powi(2);
                let xk = self.x.row(k).transpose();
                ai.ger(w * w * v, &xk, &xk, 1.0);
                g.axpy(w * v * w * wt.r[k], &xk, 1.0);
            }
            if m > 0.0 && v0[i] > 0.0 {
                tr_wv += m / e;
                ypvpy += wt.null_r2 / (e * e);
                if let Some(xx) = nb_xx {
                    ai += xx / (e * e);
                }
                g += &wt.null_g / (e * e);
            }
            let tr_pv = tr_wv - (&wt.c_inv * &ai).trace();
            score[i] = -0.5 * (tr_pv - ypvpy);
            a_mats.push(ai);
            xwu.push(g);
        }

        let mut ai_matrix = Matrix2::zeros();
        for i in 0..2 {
            for j in i..2 {
                let mut s = 0.0;
                for k in 0..n_e {
                    let w = wt.w[k];
                    s += w * (vk(i, k) * w * wt.r[k]) * (vk(j, k) * w * wt.r[k]);
                }
                if m > 0.0 {
                    s += v0[i] * v0[j] * wt.null_r2 / (e * e * e);
                }
                s -= xwu[i].dot(&(&wt.c_inv * &xwu[j]));
                ai_matrix[(i, j)] = 0.5 * s;
                ai_matrix[(j, i)] = 0.5 * s;
            }
        }

        let expected_info = expected.then(|| {
            let mut info = Matrix2::zeros();
            for i in 0..2 {
                for j in i..2 {
                    let mut t1 = 0.0;
                    let mut bij = DMatrix::zeros(q, q);
                    for k in 0..n_e {
                        let w = wt.w[k];
                        let vv = vk(i, k) * vk(j, k);
                        t1 += w * w * vv;
                        let xk = self.x.row(k).transpose();
                        bij.ger(w * w * w * vv, &xk, &xk, 1.0);
                    }
                    if m > 0.0 {
                        let vv = v0[i] * v0[j];
                        t1 += m * vv / (e * e);
                        if let Some(xx) = nb_xx {
                            bij += xx * (vv / (e * e * e));
                        }
                    }
                    let t2 = (&wt.c_inv * &bij).trace();
                    let t3 = (&wt.c_inv * &a_mats[i] * &wt.c_inv * &a_mats[j]).trace();
                    let v = 0.5 * (t1 - 2.0 * t2 + t3);
                    info[(i, j)] = v;
                    info[(j, i)] = v;
                }
            }
            info
        });

        Ok(Evaluation { loglik, score, ai: ai_matrix, expected: expected_info, beta: wt.beta })
    }

    /// Profile log-likelihood at ratio h; returns (loglik, profiled sigma^2).
    pub fn profile(&self, h: f64) -> Result<(f64, f64)> {
        let wt = self.weighted(h, 1.0 - h)?;
        let n_obs = self.n_obs() as f64;
        let df = n_obs - self.n_fixed() as f64;
        let m = self.null.as_ref().map_or(0.0, |b| b.m as f64);
        let ypy = (0..self.y.len()).map(|k| wt.r[k] * wt.r[k] * wt.w[k]).sum::<f64>()
            + if m > 0.0 { wt.null_r2 / (1.0 - h) } else { 0.0 };
        let sigma2 = ypy / df;
        let logdet_h = wt.d.iter().map(|v| v.ln()).sum::<f64>() + if m > 0.0 { m * (1.0 - h).ln() } else { 0.0 };
        let ll = -0.5 * (df * ((2.0 * PI).ln() + sigma2.ln() + 1.0) + logdet_h + self.offset + wt.logdet_c);
        Ok((ll, sigma2))
    }
}

fn eigen_clamped(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (mut lambda, u) = linalg::symmetric_eigen(m);
    lambda.iter_mut().for_each(|v| *v = v.max(0.0));
    (lambda, u)
}

struct Weighted {
    d: DVector<f64>,
    w: DVector<f64>,
    c_inv: DMatrix<f64>,
    logdet_c: f64,
    beta: DVector<f64>,
    r: DVector<f64>,
    null_r2: f64,
    null_g: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    /// d loglik / d(sigma_A^2, sigma_E^2).
    pub score: Vector2<f64>,
    /// Average information, 1/2 y'P V_i P V_j P y.
    pub ai: Matrix2<f64>,
    /// Expected information, 1/2 tr(P V_i P V_j).
    pub expected: Option<Matrix2<f64>>,
    pub beta: DVector<f64>,
}

/// Direct evaluator based on the Cholesky factor of V.
#[derive(Debug, Clone)]
pub struct DenseModel {
    y: DVector<f64>,
    x: DMatrix<f64>,
    g0: DMatrix<f64>,
    r0: DMatrix<f64>,
}

impl DenseModel {
    pub fn new(model: &VarianceModel) -> Result<Self> {
        linalg::cholesky(&model.r0(), "R0")?;
        Ok(DenseModel { y: model.y.clone(), x: model.x.clone(), g0: model.g0(), r0: model.r0() })
    }

    fn projector(&self, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64, f64, DVector<f64>)> {
        let ch = linalg::cholesky(v, "V")?;
        let logdet_v = linalg::chol_logdet(&ch);
        let vinv = ch.inverse();
        let q = self.x.ncols();
        if q == 0 {
            return Ok((vinv, logdet_v, 0.0, DVector::zeros(0)));
        }
        let vx = &vinv * &self.x;
        let c = self.x.tr_mul(&vx);
        let cch = linalg::cholesky(&c, "X'V^-1X")?;
        let p = &vinv - &vx * cch.solve(&vx.transpose());
        let beta = cch.solve(&vx.tr_mul(&self.y));
        Ok((p, logdet_v, linalg::chol_logdet(&cch), beta))
    }

    pub fn loglik(&self, a: f64, e: f64) -> Result<f64> {
        Ok(self.evaluate(a, e, false)?.loglik)
    }

    pub fn evaluate(&self, a: f64, e: f64, expected: bool) -> Result<Evaluation> {
        let v = &self.g0 * a + &self.r0 * e;
        let (p, logdet_v, logdet_c, beta) = self.projector(&v)?;
        let n = self.y.len() as f64;
        let q = self.x.ncols() as f64;
        let py = &p * &self.y;
        let ypy = self.y.dot(&py);
        let loglik = -0.5 * ((n - q) * (2.0 * PI).ln() + logdet_v + logdet_c + ypy);
        let vs = [&self.g0, &self.r0];
        let pv: Vec<DMatrix<f64>> = vs.iter().map(|vi| &p * *vi).collect();
        let u: Vec<DVector<f64>> = vs.iter().map(|vi| *vi * &py).collect();
        let mut score = Vector2::zeros();
        let mut ai = Matrix2::zeros();
        let mut info = Matrix2::zeros();
        for i in 0..2 {
            score[i] = -0.5 * (pv[i].trace() - py.dot(&u[i]));
            for j in 0..2 {
                ai[(i, j)] = 0.5 * u[i].dot(&(&p * &u[j]));
                if expected {
                    info[(i, j)] = 0.5 * (&pv[i] * &pv[j]).trace();
                }
            }
        }
        Ok(Evaluation { loglik, score, ai, expected: expected.then_some(info), beta })
    }

    pub fn profile(&self, h: f64) -> Result<(f64, f64)> {
        let v = &self.g0 * h + &self.r0 * (1.0 - h);
        let (p, logdet_h, logdet_c, _) = self.projector(&v)?;
        let df = self.y.len() as f64 - self.x.ncols() as f64;
        let sigma2 = self.y.dot(&(&p * &self.y)) / df;
        let ll = -0.5 * (df * ((2.0 * PI).ln() + sigma2.ln() + 1.0) + logdet_h + logdet_c);
        Ok((ll, sigma2))
    }
}

/// A model ready for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub enum Prepared {
    Spectral(SpectralModel),
    Dense(DenseModel),
}

impl Prepared {
    pub fn new(model: &VarianceModel) -> Result<Self> {
        match SpectralModel::new(model) {
            Ok(s) => Ok(Prepared::Spectral(s)),
            Err(Error::NotApplicable(_)) => Ok(Prepared::Dense(DenseModel::new(model)?)),
            Err(e) => Err(e),
        }
    }

    pub fn evaluate(&self, a: f64, e: f64, expected: bool) -> Result<Evaluation> {
        match self {
            Prepared::Spectral(s) => s.evaluate(a, e, expected),
            Prepared::Dense(d) => d.evaluate(a, e, expected),
        }
    }

    pub fn profile(&self, h: f64) -> Result<(f64, f64)> {
        match self {
            Prepared::Spectral(s) => s.profile(h),
            Prepared::Dense(d) => d.profile(h),
        }
    }

    pub fn loglik(&self, a: f64, e: f64) -> Result<f64> {
        Ok(self.evaluate(a, e, false)?.loglik)
    }

    fn response_scale(&self) -> Result<f64> {
        let (y, x, extra) = match self {
            Prepared::Spectral(s) => (&s.y, &s.x, s.null.as_ref()),
            Prepared::Dense(d) => (&d.y, &d.x, None),
        };
        // residual sum of squares after the fixed effects
        let (_, mut rss) = linalg::ols(x, y)?;
        let mut n = y.len() as f64;
        if let Some(nb) = extra {
            let c = x.tr_mul(x) + &nb.xx;
            let b = x.tr_mul(y) + &nb.xy;
            let yy = y.norm_squared() + nb.yy;
            let beta = if x.ncols() == 0 { DVector::zeros(0) } else { linalg::cholesky(&c, "X'X")?.solve(&b) };
            rss = (yy - beta.dot(&b)).max(0.0);
            n += nb.m as f64;
        }
        let df = n - x.ncols() as f64;
        Ok(rss / df)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemlOptions {
    pub max_iter: usize,
    pub tol_loglik: f64,
    pub tol_param: f64,
    pub h2_min: f64,
    pub h2_max: f64,
    pub floor_ratio: f64,
    /// Starting (sigma_A^2, sigma_E^2); defaults to Var(y)/2 each.
    pub start: Option<(f64, f64)>,
    pub grid_points: usize,
}

impl Default for RemlOptions {
    fn default() -> Self {
        RemlOptions {
            max_iter: 100,
            tol_loglik: 1e-8,
            tol_param: 1e-6,
            h2_min: 1e-6,
            h2_max: 1.0 - 1e-6,
            floor_ratio: 1e-10,
            start: None,
            grid_points: 99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    None,
    Genetic,
    Residual,
}

#[derive(Debug, Clone)]
pub struct RemlFit {
    pub sigma_a2: f64,
    pub sigma_e2: f64,
    /// Inverse average information: covariance of (sigma_A^2, sigma_E^2).
    pub ai_matrix: Matrix2<f64>,
    /// The average-information matrix itself.
    pub information: Matrix2<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub monotone: bool,
    pub boundary: Boundary,
    pub beta: DVector<f64>,
    pub stage: Stage,
}

impl RemlFit {
    pub fn h2(&self) -> f64 {
        self.sigma_a2 / (self.sigma_a2 + self.sigma_e2)
    }

    /// sigma_A^2 / sigma_E^2.
    pub fn delta(&self) -> f64 {
        self.sigma_a2 / self.sigma_e2
    }
}

pub fn reml_fit(model: &VarianceModel, opts: &RemlOptions) -> Result<RemlFit> {
    let prepared = Prepared::new(model)?;
    fit_prepared(&prepared, model.stage, opts)
}

pub fn profile_loglik(model: &VarianceModel, h2_grid: &[f64]) -> Result<Vec<f64>> {
    let prepared = Prepared::new(model)?;
    h2_grid
        .iter()
        .map(|&h| {
            if !(h > 0.0 && h < 1.0) {
                return invalid(format!("grid value {h} outside (0,1)"));
            }
            Ok(prepared.profile(h)?.0)
        })
        .collect()
}

/// Evenly spaced interior grid k/(points+1), k = 1..points.
pub fn h2_grid(points: usize) -> Vec<f64> {
    (1..=points).map(|k| k as f64 / (points + 1) as f64).collect()
}

struct Climb {
    a: f64,
    e: f64,
    iterations: usize,
    converged: bool,
}

fn project(a: f64, e: f64, floor: f64, opts: &RemlOptions) -> (f64, f64) {
    let a = a.max(floor);
    let e = e.max(floor);
    let s = a + e;
    let h = (a / s).clamp(opts.h2_min, opts.h2_max);
    (h * s, (1.0 - h) * s)
}

fn positive_definite_inverse(m: &Matrix2<f64>) -> Matrix2<f64> {
    let scale = m.diagonal().abs().max().max(f64::MIN_POSITIVE);
    let mut ridge = 0.0;
    for _ in 0..40 {
        let mr = m + Matrix2::identity() * ridge;
        if let Some(ch) = mr.cholesky() {
            return ch.inverse();
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
    }
    Matrix2::identity() * (1.0 / scale)
}

fn climb(p: &Prepared, start: (f64, f64), floor: f64, opts: &RemlOptions) -> Result<Climb> {
    let (mut a, mut e) = project(start.0, start.1, floor, opts);
    let mut ev = p.evaluate(a, e, false)?;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let step = positive_definite_inverse(&ev.ai) * ev.score;
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-10 {
            let (an, en) = project(a + t * step[0], e + t * step[1], floor, opts);
            if let Ok(evn) = p.evaluate(an, en, false) {
                if evn.loglik >= ev.loglik - 1e-12 * ev.loglik.abs() {
                    accepted = Some((an, en, evn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((an, en, evn)) = accepted else {
            converged = true;
            break;
        };
        let dll = (evn.loglik - ev.loglik).abs() / ev.loglik.abs().max(1.0);
        let dpar = ((an - a).abs().max((en - e).abs())) / (an + en);
        a = an;
        e = en;
        ev = evn;
        if dll < opts.tol_loglik && dpar < opts.tol_param {
            converged = true;
            break;
        }
    }
    debug!("AI-REML: {iterations} iterations, converged {converged}, h2 {:.6}", a / (a + e));
    Ok(Climb { a, e, iterations, converged })
}

/// Golden-section maximisation of the profile on [lo, hi].
fn golden(p: &Prepared, mut lo: f64, mut hi: f64) -> Result<(f64, f64)> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = p.profile(x1)?.0;
    let mut f2 = p.profile(x2)?.0;
    while hi - lo > 1e-9 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = p.profile(x2)?.0;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = p.profile(x1)?.0;
        }
    }
    let h = 0.5 * (lo + hi);
    Ok((h, p.profile(h)?.0))
}

pub fn fit_prepared(p: &Prepared, stage: Stage, opts: &RemlOptions) -> Result<RemlFit> {
    let scale = p.response_scale()?;
    if !(scale > 1e-300) || !scale.is_finite() {
        return Err(Error::Degenerate("response has no variation beyond the fixed effects".into()));
    }
    // equals the sample variance of y when X is an intercept
    let var_y = scale;
    let floor = opts.floor_ratio * var_y;
    let start = opts.start.unwrap_or((var_y / 2.0, var_y / 2.0));

    let grid = h2_grid(opts.grid_points);
    let grid_ll: Vec<f64> = grid.iter().map(|&h| p.profile(h).map(|v| v.0)).collect::<Result<_>>()?;
    let (g_best, &g_best_ll) = grid_ll.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty grid");
    let ll_hmax = p.profile(opts.h2_max)?.0;
    let ll_hmin = p.profile(opts.h2_min)?.0;

    let mut c = climb(p, start, floor, opts)?;
    let mut h = c.a / (c.a + c.e);
    let mut ll = p.profile(h)?.0;
    let mut converged = c.converged;
    let mut iterations = c.iterations;

    let best_anchor = [(g_best_ll, grid[g_best]), (ll_hmax, opts.h2_max), (ll_hmin, opts.h2_min)]
        .into_iter()
        .max_by(|x, y| x.0.total_cmp(&y.0))
        .expect("three anchors");
    if best_anchor.0 > ll + 1e-6 {
        let (ll0, s2) = p.profile(best_anchor.1)?;
        debug!("restarting AI-REML from h2 {:.4} ({ll0:.6} > {ll:.6})", best_anchor.1);
        c = climb(p, (best_anchor.1 * s2, (1.0 - best_anchor.1) * s2), floor, opts)?;
        iterations += c.iterations;
        h = c.a / (c.a + c.e);
        ll = p.profile(h)?.0;
        converged = c.converged;
        if best_anchor.0 > ll + 1e-6 || !converged {
            let step = 1.0 / (opts.grid_points + 1) as f64;
            let lo = (best_anchor.1 - step).max(opts.h2_min);
            let hi = (best_anchor.1 + step).min(opts.h2_max);
            let (hg, llg) = golden(p, lo, hi)?;
            let (h_end, ll_end) = [(hg, llg), (best_anchor.1, best_anchor.0)]
                .into_iter()
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .expect("two candidates");
            h = h_end;
            ll = ll_end;
            converged = true;
        }
    }

    let tol = 1e-7 * ll.abs().max(1.0);
    let nondecreasing = grid_ll.windows(2).all(|w| w[1] >= w[0] - tol);
    let range = grid_ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - grid_ll.iter().cloned().fold(f64::INFINITY, f64::min);
    let flat = range < 1e-6 && (ll_hmax - g_best_ll).abs() < 1e-6;
    let mut boundary = Boundary::None;
    let mut monotone = false;
    if flat || (nondecreasing && h >= 1.0 - 1e-4 && ll_hmax >= ll - tol) {
        monotone = true;
        h = opts.h2_max;
        boundary = Boundary::Residual;
    } else if h >= 1.0 - 1e-4 {
        boundary = Boundary::Residual;
    } else if h <= 1e-4 {
        boundary = Boundary::Genetic;
    }

    let (ll_final, s2) = p.profile(h)?;
    let (a, e) = (h * s2, (1.0 - h) * s2);
    let ev = p.evaluate(a, e, false)?;
    Ok(RemlFit {
        sigma_a2: a,
        sigma_e2: e,
        ai_matrix: positive_definite_inverse(&ev.ai),
        information: ev.ai,
        loglik: ll_final,
        iterations,
        converged,
        monotone,
        boundary,
        beta: ev.beta,
        stage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_kinship(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let w = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut k = &w * w.transpose() / p as f64;
        linalg::symmetrize(&mut k);
        k
    }

    fn simulate_replicated(
        n: usize,
        reps: &[usize],
        k: &DMatrix<f64>,
        sa: f64,
        se: f64,
        rng: &mut ChaCha8Rng,
    ) -> (DVector<f64>, Vec<usize>) {
        let (vals, vecs) = linalg::symmetric_eigen(k);
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = &vecs * DVector::from_fn(n, |i, _| vals[i].max(0.0).sqrt() * z[i]) * sa.sqrt();
        let mut y = Vec::new();
        let mut gof = Vec::new();
        for i in 0..n {
            for _ in 0..reps[i % reps.len()] {
                y.push(1.0 + g[i] + se.sqrt() * rng.sample::<f64, _>(StandardNormal));
                gof.push(i);
            }
        }
        (DVector::from_vec(y), gof)
    }

    fn individual_model(seed: u64, n: usize, reps: &[usize]) -> VarianceModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = random_kinship(n, 2 * n, &mut rng);
        let (y, gof) = simulate_replicated(n, reps, &k, 1.0, 1.0, &mut rng);
        let x = DMatrix::from_element(y.len(), 1, 1.0);
        VarianceModel::individual(y, x, gof, k).unwrap()
    }

    fn dense_of(model: &VarianceModel) -> DenseModel {
        DenseModel::new(model).unwrap()
    }

    #[test]
    fn spectral_matches_dense_balanced_and_unbalanced() {
        for reps in [&[3usize][..], &[1, 2, 3, 4][..], &[1][..]] {
            let model = individual_model(5, 50, reps);
            let s = SpectralModel::new(&model).unwrap();
            let d = dense_of(&model);
            for (a, e) in [(1.0, 1.0), (0.2, 3.0), (5.0, 0.1)] {
                let es = s.evaluate(a, e, true).unwrap();
                let ed = d.evaluate(a, e, true).unwrap();
                assert!((es.loglik - ed.loglik).abs() < 1e-8, "{} vs {}", es.loglik, ed.loglik);
                assert!((es.score - ed.score).amax() < 1e-8);
                assert!((es.ai - ed.ai).amax() < 1e-8);
                assert!((es.expected.unwrap() - ed.expected.unwrap()).amax() < 1e-8);
                let (ps, _) = s.profile(a / (a + e)).unwrap();
                let (pd, _) = d.profile(a / (a + e)).unwrap();
                assert!((ps - pd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn means_whitening_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let k = random_kinship(n, 60, &mut rng);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 0.1);
        let r = &b * b.transpose() + DMatrix::identity(n, n) * 0.3;
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_element(n, 1, 1.0);
        let model = VarianceModel::means(y, x, k, r).unwrap();
        let s = SpectralModel::new(&model).unwrap();
        let d = dense_of(&model);
        for (a, e) in [(1.0, 1.0), (0.5, 2.0)] {
            let es = s.evaluate(a, e, true).unwrap();
            let ed = d.evaluate(a, e, true).unwrap();
            assert!((es.loglik - ed.loglik).abs() < 1e-8);
            assert!((es.ai - ed.ai).amax() < 1e-8);
        }
        assert!(matches!(spectral_prepare(&model), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn identity_replicates_reduce_to_kinship_eigen() {
        let model = individual_model(2, 20, &[1]);
        let s = spectral_prepare(&model).unwrap();
        let Structure::Replicated { kinship, .. } = &model.structure else { unreachable!() };
        let (vals, _) = linalg::symmetric_eigen(kinship);
        assert!((&s.lambda - vals.map(|v| v.max(0.0))).amax() < 1e-10);
        assert!(s.null.is_none());
    }

    #[test]
    fn profile_matches_fit_loglik() {
        let model = individual_model(9, 60, &[3]);
        let fit = reml_fit(&model, &RemlOptions::default()).unwrap();
        let prof = profile_loglik(&model, &[fit.h2()]).unwrap();
        assert!((prof[0] - fit.loglik).abs() < 1e-6);
        let direct = Prepared::new(&model).unwrap().loglik(fit.sigma_a2, fit.sigma_e2).unwrap();
        assert!((direct - fit.loglik).abs() < 1e-6);
        assert!(fit.converged);
    }

    #[test]
    fn fit_agrees_with_fine_grid() {
        for seed in 0..5 {
            let model = individual_model(100 + seed, 40, &[2]);
            let fit = reml_fit(&model, &RemlOptions::default()).unwrap();
            let grid = h2_grid(999);
            let ll = profile_loglik(&model, &grid).unwrap();
            let best = ll.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert!((fit.h2() - grid[best]).abs() <= 1e-3, "seed {seed}: {} vs {}", fit.h2(), grid[best]);
        }
    }

    #[test]
    fn score_vanishes_at_interior_optimum() {
        let model = individual_model(21, 80, &[3]);
        let fit = reml_fit(&model, &RemlOptions::default()).unwrap();
        assert_eq!(fit.boundary, Boundary::None);
        let ev = Prepared::new(&model).unwrap().evaluate(fit.sigma_a2, fit.sigma_e2, false).unwrap();
        let scale = fit.sigma_a2 + fit.sigma_e2;
        assert!(ev.score.amax() * scale < 1e-3, "{:?}", ev.score);
    }

    #[test]
    fn ai_covariance_close_to_numerical_hessian() {
        let model = individual_model(33, 100, &[3]);
        let p = Prepared::new(&model).unwrap();
        let fit = reml_fit(&model, &RemlOptions::default()).unwrap();
        let th = [fit.sigma_a2, fit.sigma_e2];
        let f = |a: f64, e: f64| p.loglik(a, e).unwrap();
        let hs = [th[0] * 1e-3, th[1] * 1e-3];
        let mut hess = Matrix2::zeros();
        for i in 0..2 {
            for j in 0..2 {
                let pt = |si: f64, sj: f64| {
                    let mut t = th;
                    t[i] += si * hs[i];
                    t[j] += sj * hs[j];
                    f(t[0], t[1])
                };
                hess[(i, j)] = (pt(1.0, 1.0) - pt(1.0, -1.0) - pt(-1.0, 1.0) + pt(-1.0, -1.0)) / (4.0 * hs[i] * hs[j]);
            }
        }
        let cov_h = (-hess).try_inverse().unwrap();
        for i in 0..2 {
            let rel = (fit.ai_matrix[(i, i)] - cov_h[(i, i)]).abs() / cov_h[(i, i)];
            assert!(rel < 0.05, "component {i}: {rel}");
        }
    }

    #[test]
    fn anova_equivalence_for_identity_kinship() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, r) = (30, 4);
        let k = DMatrix::identity(n, n);
        let (y, gof) = simulate_replicated(n, &[r], &k, 2.0, 1.0, &mut rng);
        let x = DMatrix::from_element(y.len(), 1, 1.0);
        let model = VarianceModel::individual(y.clone(), x, gof.clone(), k).unwrap();
        let fit = reml_fit(&model, &RemlOptions::default()).unwrap();
        let mut means = vec![0.0; n];
        for (i, &g) in gof.iter().enumerate() {
            means[g] += y[i] / r as f64;
        }
        let grand = y.mean();
        let ssg: f64 = means.iter().map(|m| r as f64 * (m - grand).powi(2)).sum();
        let sse: f64 = gof.iter().enumerate().map(|(i, &g)| (y[i] - means[g]).powi(2)).sum();
        let msg = ssg / (n - 1) as f64;
        let mse = sse / (n * (r - 1)) as f64;
        assert!(msg > mse);
        assert!((fit.sigma_e2 - mse).abs() < 1e-6);
        assert!((fit.sigma_a2 - (msg - mse) / r as f64).abs() < 1e-6);
    }

    #[test]
    fn compound_symmetry_is_flat_and_monotone() {
        let n = 30;
        let k = DMatrix::identity(n, n) + DMatrix::from_element(n, n, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = DMatrix::identity(n, n) / 3.0;
        let model = VarianceModel::means(y, DMatrix::from_element(n, 1, 1.0), k, r).unwrap();
        let prof = profile_loglik(&model, &h2_grid(99)).unwrap();
        let range = prof.iter().cloned().fold(f64::MIN, f64::max) - prof.iter().cloned().fold(f64::MAX, f64::min);
        assert!(range < 1e-6);
        let fit = reml_fit(&model, &RemlOptions::default()).unwrap();
        assert!(fit.monotone);
        assert_eq!(fit.boundary, Boundary::Residual);
    }

    #[test]
    fn zero_variance_response_is_degenerate() {
        let model = individual_model(1, 10, &[2]);
        let flat = model.with_response(DVector::from_element(20, 3.0)).unwrap();
        assert!(matches!(reml_fit(&flat, &RemlOptions::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn no_within_genotype_noise_gives_upper_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 25;
        let k = random_kinship(n, 50, &mut rng);
        let (g, gof) = simulate_replicated(n, &[1], &k, 1.0, 0.0, &mut rng);
        let y: Vec<f64> = (0..n).flat_map(|i| [g[i], g[i]]).collect();
        let gof2: Vec<usize> = (0..n).flat_map(|i| [gof[i], gof[i]]).collect();
        let model =
            VarianceModel::individual(DVector::from_vec(y), DMatrix::from_element(2 * n, 1, 1.0), gof2, k).unwrap();
        let fit = reml_fit(&model, &RemlOptions::default()).unwrap();
        assert!(fit.h2() > 0.9999);
        assert_eq!(fit.boundary, Boundary::Residual);
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(VarianceModel::dense(y, x, DMatrix::identity(3, 3), DMatrix::identity(3, 3), Stage::Means).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn scale_equivariance(seed in 0u64..500, c in prop::sample::select(vec![0.1, 10.0])) {
            let model = individual_model(seed, 30, &[2]);
            let fit = reml_fit(&model, &RemlOptions::default()).unwrap();
            let scaled = model.with_response(&model.y * c).unwrap();
            let fit_c = reml_fit(&scaled, &RemlOptions::default()).unwrap();
            prop_assert!((fit_c.h2() - fit.h2()).abs() < 1e-8 || (fit.monotone && fit_c.monotone));
            let tol = 1e-6 * (fit.sigma_a2 + fit.sigma_e2) * c * c;
            prop_assert!((fit_c.sigma_a2 - c * c * fit.sigma_a2).abs() < tol.max(1e-8 * c * c));
            prop_assert!((fit_c.sigma_e2 - c * c * fit.sigma_e2).abs() < tol.max(1e-8 * c * c));
        }

        #[test]
        fn monotone_implies_nondecreasing_grid(seed in 0u64..500) {
            let model = individual_model(seed, 15, &[1, 2]);
            let fit = reml_fit(&model, &RemlOptions::default()).unwrap();
            prop_assert!(fit.sigma_a2 >= 0.0 && fit.sigma_e2 >= 0.0);
            prop_assert!((fit.ai_matrix - fit.ai_matrix.transpose()).amax() < 1e-12 * fit.ai_matrix.amax().max(1.0));
            if fit.monotone {
                let prof = profile_loglik(&model, &h2_grid(99)).unwrap();
                let tol = 1e-7 * fit.loglik.abs().max(1.0);
                prop_assert!(prof.windows(2).all(|w| w[1] >= w[0] - tol));
            }
        }
    }
}
