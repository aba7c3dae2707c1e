//! Replicate-level phenotypes, fixed-effect designs, genotypic BLUEs and ANOVA.

use std::collections::{BTreeSet, HashMap, HashSet};

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateKind {
    Factor,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

impl CovariateSpec {
    pub fn factor(name: &str) -> Self {
        Self { name: name.into(), kind: CovariateKind::Factor }
    }

    pub fn numeric(name: &str) -> Self {
        Self { name: name.into(), kind: CovariateKind::Numeric }
    }
}

/// Long-format observations: one record per plant or plot.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeTable {
    genotype: Vec<String>,
    value: Vec<f64>,
    covariate_names: Vec<String>,
    /// One column of raw values per covariate.
    covariates: Vec<Vec<String>>,
}

impl PhenotypeTable {
    pub fn new(
        genotype: Vec<String>,
        value: Vec<f64>,
        covariate_names: Vec<String>,
        covariates: Vec<Vec<String>>,
    ) -> Result<Self> {
        if genotype.len() != value.len() {
            return Err(Error::Dimension(format!("{} genotype ids for {} values", genotype.len(), value.len())));
        }
        if covariate_names.len() != covariates.len() {
            return Err(Error::Dimension("covariate names and columns differ in number".into()));
        }
        for (name, col) in covariate_names.iter().zip(&covariates) {
            if col.len() != value.len() {
                return Err(Error::Dimension(format!("covariate `{name}` has {} values for {} records", col.len(), value.len())));
            }
            if let Some(i) = col.iter().position(|v| v.trim().is_empty()) {
                return invalid(format!("covariate `{name}` is missing in record {i}"));
            }
        }
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite phenotype value in record {i}"));
        }
        if let Some(i) = genotype.iter().position(|g| g.is_empty()) {
            return invalid(format!("empty genotype id in record {i}"));
        }
        Ok(Self { genotype, value, covariate_names, covariates })
    }

    pub fn without_covariates(genotype: Vec<String>, value: Vec<f64>) -> Result<Self> {
        Self::new(genotype, value, vec![], vec![])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn genotypes(&self) -> &[String] {
        &self.genotype
    }

    pub fn values(&self) -> &[f64] {
        &self.value
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate(&self, name: &str) -> Option<&[String]> {
        self.covariate_names.iter().position(|n| n == name).map(|j| self.covariates[j].as_slice())
    }

    /// Distinct genotype ids in sorted order.
    pub fn genotype_ids(&self) -> Vec<String> {
        self.genotype.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Distinct genotype ids in first-appearance order.
    pub fn genotype_ids_in_order(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.genotype.iter().filter(|g| seen.insert(g.as_str())).cloned().collect()
    }

    pub fn with_values(&self, value: Vec<f64>) -> Result<Self> {
        Self::new(self.genotype.clone(), value, self.covariate_names.clone(), self.covariates.clone())
    }

    /// Records whose genotype is in `keep`, original order preserved.
    pub fn filter_genotypes(&self, keep: &HashSet<String>) -> PhenotypeTable {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.genotype[i])).collect();
        self.select_records(&idx)
    }

    pub fn select_records(&self, idx: &[usize]) -> PhenotypeTable {
        PhenotypeTable {
            genotype: idx.iter().map(|&i| self.genotype[i].clone()).collect(),
            value: idx.iter().map(|&i| self.value[i]).collect(),
            covariate_names: self.covariate_names.clone(),
            covariates: self.covariates.iter().map(|c| idx.iter().map(|&i| c[i].clone()).collect()).collect(),
        }
    }
}

/// One column of the covariate design.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateColumn {
    Level { covariate: String, level: String },
    Numeric { covariate: String },
}

/// Fixed-effect design of the first-stage linear model.
///
/// The intercept is absorbed into the genotype incidence `x_g`, which also
/// serves as the random-effect incidence `Z` of the mixed models.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub genotype_ids: Vec<String>,
    pub genotype_of: Vec<usize>,
    pub replicates: Vec<usize>,
    pub x_g: DMatrix<f64>,
    pub x_c: DMatrix<f64>,
    pub covariate_columns: Vec<CovariateColumn>,
    /// Dropped reference level of each factor.
    pub baseline_levels: Vec<(String, String)>,
    pub rank: usize,
}

impl DesignMatrices {
    pub fn n_obs(&self) -> usize {
        self.genotype_of.len()
    }

    pub fn n_genotypes(&self) -> usize {
        self.genotype_ids.len()
    }

    /// `[1 | X_C]`, the fixed effects of the individual-level mixed model.
    pub fn intercept_and_covariates(&self) -> DMatrix<f64> {
        let n = self.n_obs();
        let mut x = DMatrix::zeros(n, 1 + self.x_c.ncols());
        x.column_mut(0).fill(1.0);
        x.columns_mut(1, self.x_c.ncols()).copy_from(&self.x_c);
        x
    }

    /// Encodes covariate rows of `pheno` with this design's columns.
    ///
    /// Records with a factor level the design has never seen cannot be
    /// predicted; they come back as `None`.
    pub fn encode_covariates(&self, pheno: &PhenotypeTable) -> Result<Vec<Option<DVector<f64>>>> {
        let mut known: HashMap<&str, HashSet<&str>> = HashMap::new();
        for (covariate, _) in &self.baseline_levels {
            known.entry(covariate.as_str()).or_default();
        }
        for col in &self.covariate_columns {
            if let CovariateColumn::Level { covariate, level } = col {
                known.entry(covariate.as_str()).or_default().insert(level.as_str());
            }
        }
        let mut out = Vec::with_capacity(pheno.len());
        for i in 0..pheno.len() {
            let mut row = DVector::zeros(self.covariate_columns.len());
            let mut ok = true;
            for (j, col) in self.covariate_columns.iter().enumerate() {
                match col {
                    CovariateColumn::Numeric { covariate } => {
                        let raw = pheno
                            .covariate(covariate)
                            .ok_or_else(|| Error::InvalidInput(format!("covariate `{covariate}` not in records")))?;
                        row[j] = raw[i]
                            .trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Parse(format!("covariate `{covariate}` value `{}` is not numeric", raw[i])))?;
                    }
                    CovariateColumn::Level { covariate, level } => {
                        let raw = pheno
                            .covariate(covariate)
                            .ok_or_else(|| Error::InvalidInput(format!("covariate `{covariate}` not in records")))?;
                        if raw[i] == *level {
                            row[j] = 1.0;
                        }
                    }
                }
            }
            // an unseen level is one that is neither a column nor the dropped baseline
            for (name, levels) in &known {
                let raw = pheno
                    .covariate(name)
                    .ok_or_else(|| Error::InvalidInput(format!("covariate `{name}` not in records")))?;
                if !levels.contains(raw[i].as_str()) && !self.is_baseline(name, &raw[i]) {
                    ok = false;
                }
            }
            out.push(if ok { Some(row) } else { None });
        }
        Ok(out)
    }

    fn is_baseline(&self, covariate: &str, level: &str) -> bool {
        self.baseline_levels.iter().any(|(c, l)| c == covariate && l == level)
    }
}

/// Sorted-genotype design.
pub fn build_design(pheno: &PhenotypeTable, covariates: &[CovariateSpec]) -> Result<DesignMatrices> {
    build_design_ordered(pheno, covariates, &pheno.genotype_ids())
}

/// Design with genotype columns in the given order; every id in `order`
/// must have at least one record and every record's genotype must be listed.
pub fn build_design_ordered(
    pheno: &PhenotypeTable,
    covariates: &[CovariateSpec],
    order: &[String],
) -> Result<DesignMatrices> {
    if pheno.is_empty() {
        return invalid("no phenotype records");
    }
    let index: HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if index.len() != order.len() {
        return invalid("duplicate genotype ids in design order");
    }
    let n_obs = pheno.len();
    let n = order.len();
    let mut genotype_of = Vec::with_capacity(n_obs);
    for g in pheno.genotypes() {
        match index.get(g.as_str()) {
            Some(&i) => genotype_of.push(i),
            None => return Err(Error::MissingAccession(g.clone())),
        }
    }
    let mut replicates = vec![0usize; n];
    for &i in &genotype_of {
        replicates[i] += 1;
    }
    if let Some(i) = replicates.iter().position(|&r| r == 0) {
        return invalid(format!("genotype `{}` has no records", order[i]));
    }
    let x_g = DMatrix::from_fn(n_obs, n, |row, col| if genotype_of[row] == col { 1.0 } else { 0.0 });

    let mut columns = Vec::new();
    let mut baseline_levels = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for spec in covariates {
        let raw = pheno
            .covariate(&spec.name)
            .ok_or_else(|| Error::InvalidInput(format!("covariate `{}` not present in phenotype records", spec.name)))?;
        match spec.kind {
            CovariateKind::Numeric => {
                let col = raw
                    .iter()
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Parse(format!("covariate `{}` value `{v}` is not numeric", spec.name)))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                columns.push(CovariateColumn::Numeric { covariate: spec.name.clone() });
                values.push(col);
            }
            CovariateKind::Factor => {
                let levels: BTreeSet<&String> = raw.iter().collect();
                let mut it = levels.into_iter();
                if let Some(base) = it.next() {
                    baseline_levels.push((spec.name.clone(), base.clone()));
                }
                for level in it {
                    columns.push(CovariateColumn::Level { covariate: spec.name.clone(), level: level.clone() });
                    values.push(raw.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect());
                }
            }
        }
    }
    let mut x_c = DMatrix::from_fn(n_obs, values.len(), |i, j| values[j][i]);

    // redundant covariate columns are dropped, aliasing with genotype is fatal
    if x_c.ncols() > 0 {
        let keep = linalg::independent_columns(&x_c, 1e-9);
        if keep.iter().any(|k| !k) {
            let dropped: Vec<String> = keep
                .iter()
                .zip(&columns)
                .filter(|(k, _)| !**k)
                .map(|(_, c)| format!("{c:?}"))
                .collect();
            warn!("dropping linearly dependent covariate columns: {}", dropped.join(", "));
            x_c = linalg::select_columns(&x_c, &keep);
            columns = columns.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| c).collect();
        }
        let mut joint = DMatrix::zeros(n_obs, x_c.ncols() + n);
        joint.columns_mut(0, x_c.ncols()).copy_from(&x_c);
        joint.columns_mut(x_c.ncols(), n).copy_from(&x_g);
        let keep = linalg::independent_columns(&joint, 1e-9);
        if let Some(j) = keep[x_c.ncols()..].iter().position(|k| !k) {
            return Err(Error::NotEstimable(format!(
                "genotype `{}` is confounded with the covariates",
                order[j]
            )));
        }
    }
    let rank = n + x_c.ncols();
    Ok(DesignMatrices {
        genotype_ids: order.to_vec(),
        genotype_of,
        replicates,
        x_g,
        x_c,
        covariate_columns: columns,
        rank,
        baseline_levels,
    })
}

/// First-stage genotypic means and the covariance scale of their estimates.
#[derive(Debug, Clone)]
pub struct GenotypicMeans {
    pub genotype_ids: Vec<String>,
    /// Least-squares genotype effects (intercept absorbed).
    pub g_hat: DVector<f64>,
    /// Var(g_hat) = R * sigma_E^2.
    pub r: DMatrix<f64>,
    /// Least-squares covariate effects.
    pub beta_c: DVector<f64>,
    /// RSS / (N - rank); `None` when the linear model has no residual df.
    pub sigma_e2_stage1: Option<f64>,
    pub replicates: Vec<usize>,
    pub rss: f64,
}

pub fn compute_blues(pheno: &PhenotypeTable, covariates: &[CovariateSpec]) -> Result<GenotypicMeans> {
    let design = build_design(pheno, covariates)?;
    compute_blues_from_design(&design, pheno.values())
}

/// Solves the first-stage normal equations through the Schur complement of
/// the covariate block, so R is diag(1/r_i) exactly without covariates.
pub fn compute_blues_from_design(design: &DesignMatrices, y: &[f64]) -> Result<GenotypicMeans> {
    let n = design.n_genotypes();
    let n_obs = design.n_obs();
    if y.len() != n_obs {
        return Err(Error::Dimension(format!("{} values for {n_obs} design rows", y.len())));
    }
    let y = DVector::from_column_slice(y);
    let k = design.x_c.ncols();
    let mut sums = DVector::zeros(n);
    for (obs, &g) in design.genotype_of.iter().enumerate() {
        sums[g] += y[obs];
    }

    let (g_hat, beta_c, r) = if k == 0 {
        let g_hat = DVector::from_fn(n, |i, _| sums[i] / design.replicates[i] as f64);
        let r = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 1.0 / design.replicates[i] as f64));
        (g_hat, DVector::zeros(0), r)
    } else {
        let xc = &design.x_c;
        // B = X_G' X_C: per-genotype column sums of the covariates
        let mut b = DMatrix::zeros(n, k);
        for (obs, &g) in design.genotype_of.iter().enumerate() {
            for j in 0..k {
                b[(g, j)] += xc[(obs, j)];
            }
        }
        let c = xc.transpose() * xc;
        let c_chol = linalg::cholesky(&c, "X_C'X_C").map_err(|_| Error::Singular("covariate normal equations".into()))?;
        let xcty = xc.transpose() * &y;
        let c_inv_bt = c_chol.solve(&b.transpose());
        let mut schur = -(&b * &c_inv_bt);
        for i in 0..n {
            schur[(i, i)] += design.replicates[i] as f64;
        }
        linalg::symmetrize(&mut schur);
        let s_chol = linalg::cholesky(&schur, "genotype Schur complement")
            .map_err(|_| Error::Singular("first-stage normal equations".into()))?;
        let rhs = &sums - &b * c_chol.solve(&xcty);
        let g_hat = s_chol.solve(&rhs);
        let beta_c = c_chol.solve(&(xcty - b.transpose() * &g_hat));
        let mut r = s_chol.inverse();
        linalg::symmetrize(&mut r);
        (g_hat, beta_c, r)
    };

    let mut rss = 0.0;
    for obs in 0..n_obs {
        let mut fit = g_hat[design.genotype_of[obs]];
        for j in 0..k {
            fit += design.x_c[(obs, j)] * beta_c[j];
        }
        rss += (y[obs] - fit).powi(2);
    }
    let df = n_obs as i64 - design.rank as i64;
    Ok(GenotypicMeans {
        genotype_ids: design.genotype_ids.clone(),
        g_hat,
        r,
        beta_c,
        sigma_e2_stage1: (df > 0).then(|| rss / df as f64),
        replicates: design.replicates.clone(),
        rss,
    })
}

/// Effective number of replicates of an unbalanced one-way layout.
pub fn effective_replicates(r: &[usize]) -> Result<f64> {
    let n = r.len();
    if n < 2 {
        return invalid("effective replicates need at least two genotypes");
    }
    if r.contains(&0) {
        return invalid("replicate counts must be at least one");
    }
    let s1: f64 = r.iter().map(|&v| v as f64).sum();
    let s2: f64 = r.iter().map(|&v| (v * v) as f64).sum();
    Ok((s1 - s2 / s1) / (n - 1) as f64)
}

/// Sequential ANOVA mean squares, covariates fitted before genotype.
#[derive(Debug, Clone, PartialEq)]
pub struct AnovaSummary {
    pub ms_g: f64,
    pub ms_env: f64,
    pub df_g: usize,
    pub df_env: usize,
    pub replicates: Vec<usize>,
}

pub fn anova_summary(pheno: &PhenotypeTable, covariates: &[CovariateSpec]) -> Result<AnovaSummary> {
    let design = build_design(pheno, covariates)?;
    anova_from_design(&design, pheno.values())
}

pub fn anova_from_design(design: &DesignMatrices, y: &[f64]) -> Result<AnovaSummary> {
    let n = design.n_genotypes();
    if n < 2 {
        return invalid("ANOVA needs at least two genotypes");
    }
    let n_obs = design.n_obs();
    if n_obs <= design.rank {
        return Err(Error::Degenerate("no residual degrees of freedom for MS(Env)".into()));
    }
    let full = compute_blues_from_design(design, y)?;
    let yv = DVector::from_column_slice(y);
    let reduced = design.intercept_and_covariates();
    let (_, rss0) = linalg::ols(&reduced, &yv)?;
    let df_g = design.rank - reduced.ncols();
    let df_env = n_obs - design.rank;
    let ss_g = (rss0 - full.rss).max(0.0);
    Ok(AnovaSummary {
        ms_g: ss_g / df_g as f64,
        ms_env: full.rss / df_env as f64,
        df_g,
        df_env,
        replicates: design.replicates.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn table(rows: &[(&str, f64)]) -> PhenotypeTable {
        PhenotypeTable::without_covariates(
            rows.iter().map(|r| r.0.to_string()).collect(),
            rows.iter().map(|r| r.1).collect(),
        )
        .unwrap()
    }

    fn rcbd(n: usize, r: usize, rng: &mut ChaCha8Rng) -> PhenotypeTable {
        let mut g = Vec::new();
        let mut v = Vec::new();
        let mut block = Vec::new();
        for b in 0..r {
            for i in 0..n {
                g.push(format!("g{i:03}"));
                v.push(rng.sample::<f64, _>(StandardNormal) + b as f64);
                block.push(format!("b{b}"));
            }
        }
        PhenotypeTable::new(g, v, vec!["block".into()], vec![block]).unwrap()
    }

    /// Generic inverse of the full normal equations, genotype block extracted.
    fn oracle_blues(design: &DesignMatrices, y: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = design.n_genotypes();
        let mut x = DMatrix::zeros(design.n_obs(), n + design.x_c.ncols());
        x.columns_mut(0, n).copy_from(&design.x_g);
        x.columns_mut(n, design.x_c.ncols()).copy_from(&design.x_c);
        let inv = (x.transpose() * &x).try_inverse().unwrap();
        let coef = &inv * x.transpose() * DVector::from_column_slice(y);
        (coef.rows(0, n).into_owned(), inv.view((0, 0), (n, n)).into_owned())
    }

    #[test]
    fn crd_design_shapes() {
        let p = table(&[("a", 1.0), ("a", 2.0), ("b", 3.0), ("b", 5.0)]);
        let d = build_design(&p, &[]).unwrap();
        assert_eq!(d.x_g.shape(), (4, 2));
        assert_eq!(d.x_c.ncols(), 0);
        for i in 0..4 {
            assert_eq!(d.x_g.row(i).sum(), 1.0);
        }
        assert_eq!(d.genotype_ids, vec!["a", "b"]);
    }

    #[test]
    fn rcbd_design_has_r_minus_one_block_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rcbd(3, 2, &mut rng);
        let d = build_design(&p, &[CovariateSpec::factor("block")]).unwrap();
        assert_eq!(d.x_c.shape(), (6, 1));
        assert_eq!(d.rank, 4);
    }

    #[test]
    fn genotype_confounded_with_block_is_rejected() {
        let p = PhenotypeTable::new(
            vec!["A".into(), "A".into(), "B".into(), "B".into()],
            vec![1.0, 2.0, 3.0, 4.0],
            vec!["block".into()],
            vec![vec!["1".into(), "1".into(), "2".into(), "2".into()]],
        )
        .unwrap();
        match build_design(&p, &[CovariateSpec::factor("block")]) {
            Err(Error::NotEstimable(msg)) => assert!(msg.contains("`B`")),
            other => panic!("expected estimability error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_covariate_is_error() {
        let p = table(&[("a", 1.0), ("b", 2.0)]);
        assert!(build_design(&p, &[CovariateSpec::factor("row")]).is_err());
    }

    #[test]
    fn crd_blues_are_means() {
        let p = table(&[("a", 1.0), ("a", 2.0), ("a", 6.0), ("b", 3.0), ("b", 5.0), ("c", 7.0)]);
        let m = compute_blues(&p, &[]).unwrap();
        assert_eq!(m.g_hat.as_slice(), &[3.0, 4.0, 7.0]);
        assert_eq!(m.r, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / 3.0, 0.5, 1.0])));
        // RSS = 14 + 2 + 0 over N - n = 3 df
        assert!((m.sigma_e2_stage1.unwrap() - 16.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rcbd_r_matrix_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = rcbd(200, 3, &mut rng);
        let m = compute_blues(&p, &[CovariateSpec::factor("block")]).unwrap();
        assert!((m.r[(0, 0)] - 0.336667).abs() < 1e-6);
        assert!((m.r[(0, 1)] - 0.003333).abs() < 1e-6);
        assert!((m.r[(17, 150)] - 0.003333).abs() < 1e-6);
    }

    #[test]
    fn unbalanced_blues_match_generic_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Vec::new();
        let mut v = Vec::new();
        let mut block = Vec::new();
        let mut temp = Vec::new();
        for i in 0..5 {
            let reps = 1 + i % 3 + (i == 2) as usize;
            for j in 0..reps {
                g.push(format!("g{i}"));
                v.push(rng.sample::<f64, _>(StandardNormal));
                block.push(format!("b{}", (i + j) % 3));
                temp.push(format!("{:.3}", rng.random::<f64>()));
            }
        }
        let p = PhenotypeTable::new(g, v, vec!["block".into(), "temp".into()], vec![block, temp]).unwrap();
        let spec = [CovariateSpec::factor("block"), CovariateSpec::numeric("temp")];
        let d = build_design(&p, &spec).unwrap();
        let m = compute_blues_from_design(&d, p.values()).unwrap();
        let (g_oracle, r_oracle) = oracle_blues(&d, p.values());
        assert!((&m.g_hat - g_oracle).amax() < 1e-10);
        assert!((&m.r - r_oracle).amax() < 1e-10);
    }

    #[test]
    fn effective_replicate_examples() {
        assert_eq!(effective_replicates(&[3, 3, 3]).unwrap(), 3.0);
        assert!((effective_replicates(&[1, 2, 3]).unwrap() - 11.0 / 6.0).abs() < 1e-12);
        assert_eq!(effective_replicates(&[1, 1]).unwrap(), 1.0);
        assert!(effective_replicates(&[4]).is_err());
        for r in 1..=10 {
            assert!((effective_replicates(&[r; 7]).unwrap() - r as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn anova_examples() {
        let p = table(&[("a", 0.0), ("a", 0.0), ("b", 1.0), ("b", 1.0)]);
        let a = anova_summary(&p, &[]).unwrap();
        assert_eq!((a.df_g, a.df_env), (1, 2));
        assert!(a.ms_env.abs() < 1e-14);
        assert!((a.ms_g - 1.0).abs() < 1e-12);

        let p = table(&[("a", 2.0), ("a", 2.0), ("b", 2.0), ("b", 2.0)]);
        let a = anova_summary(&p, &[]).unwrap();
        assert!(a.ms_g.abs() < 1e-14 && a.ms_env.abs() < 1e-14);

        let p = table(&[("a", 2.0), ("b", 2.0)]);
        assert!(anova_summary(&p, &[]).is_err());
    }

    #[test]
    fn anova_matches_textbook_one_way() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, r) = (10, 3);
        let mut rows = Vec::new();
        for i in 0..n {
            let gi: f64 = rng.sample(StandardNormal);
            for _ in 0..r {
                rows.push((format!("g{i:02}"), gi + rng.sample::<f64, _>(StandardNormal)));
            }
        }
        let p = PhenotypeTable::without_covariates(
            rows.iter().map(|r| r.0.clone()).collect(),
            rows.iter().map(|r| r.1).collect(),
        )
        .unwrap();
        let a = anova_summary(&p, &[]).unwrap();
        // direct sums of squares
        let grand = rows.iter().map(|r| r.1).sum::<f64>() / (n * r) as f64;
        let mut ssb = 0.0;
        let mut ssw = 0.0;
        for i in 0..n {
            let vals: Vec<f64> = rows[i * r..(i + 1) * r].iter().map(|r| r.1).collect();
            let m = linalg::mean(&vals);
            ssb += r as f64 * (m - grand).powi(2);
            ssw += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>();
        }
        assert!((a.ms_g - ssb / (n - 1) as f64).abs() < 1e-10);
        assert!((a.ms_env - ssw / (n * (r - 1)) as f64).abs() < 1e-10);
    }

    #[test]
    fn null_mean_squares_have_equal_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut sg, mut se) = (0.0, 0.0);
        for _ in 0..500 {
            let rows: Vec<(String, f64)> =
                (0..60).map(|k| (format!("g{}", k / 3), rng.sample::<f64, _>(StandardNormal))).collect();
            let p = PhenotypeTable::without_covariates(
                rows.iter().map(|r| r.0.clone()).collect(),
                rows.iter().map(|r| r.1).collect(),
            )
            .unwrap();
            let a = anova_summary(&p, &[]).unwrap();
            sg += a.ms_g;
            se += a.ms_env;
        }
        assert!((sg / se - 1.0).abs() < 0.1, "ratio {}", sg / se);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn residuals_orthogonal_to_design(seed in 0u64..1000, n in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Vec::new();
            let mut v = Vec::new();
            let mut block = Vec::new();
            for i in 0..n {
                for b in 0..3 {
                    if i == 0 || rng.random::<f64>() < 0.8 {
                        g.push(format!("g{i}"));
                        v.push(rng.sample::<f64, _>(StandardNormal) * 3.0);
                        block.push(format!("b{b}"));
                    }
                }
            }
            let p = PhenotypeTable::new(g, v, vec!["block".into()], vec![block]).unwrap();
            if let Ok(d) = build_design(&p, &[CovariateSpec::factor("block")]) {
                let m = compute_blues_from_design(&d, p.values()).unwrap();
                let fit = &d.x_g * &m.g_hat + &d.x_c * &m.beta_c;
                let resid = DVector::from_column_slice(p.values()) - fit;
                prop_assert!((d.x_g.transpose() * &resid).amax() < 1e-8);
                prop_assert!((d.x_c.transpose() * &resid).amax() < 1e-8);
                let (_, r_oracle) = oracle_blues(&d, p.values());
                prop_assert!((&m.r - r_oracle).amax() < 1e-10);
            }
        }
    }
}
