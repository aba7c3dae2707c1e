//! Simulated replicated trials: synthetic populations, QTL sampling under
//! approximate linkage equilibrium, polygenic backgrounds and study summaries.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::design::{self, PhenotypeTable};
use crate::error::{invalid, Error, Result};
use crate::gblup;
use crate::geno::{self, GenotypeMatrix, KinshipMatrix, PloidyMode};
use crate::gwas::{self, RocPoint, ScanData, ScanOptions};
use crate::herit::{self, HeritOptions, Interval, Method};
use crate::linalg;
use crate::reml::Stage;

pub const MAX_QTL_ATTEMPTS: usize = 10_000;

/// Balding-Nichols population: ancestral frequencies uniform on `freq_range`,
/// subpopulation frequencies Beta-distributed around them with divergence
/// `fst`, and optionally family frequencies drawn the same way around their
/// subpopulation with divergence `fst_family`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationConfig {
    pub markers: usize,
    pub subpops: usize,
    pub fst: f64,
    /// Families per subpopulation.
    pub families: usize,
    pub fst_family: f64,
    pub freq_range: (f64, f64),
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig { markers: 2000, subpops: 2, fst: 0.25, families: 1, fst_family: 0.0, freq_range: (0.05, 0.95) }
    }
}

fn diverge(p: f64, fst: f64, groups: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if fst == 0.0 {
        return Ok(vec![p; groups]);
    }
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    let s = (1.0 - fst) / fst;
    let beta = Beta::new(p * s, (1.0 - p) * s).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok((0..groups).map(|_| beta.sample(rng)).collect())
}

/// Accession `i` belongs to subpopulation `i % subpops` and, within it, to
/// family `(i / subpops) % families`.
pub fn simulate_population(
    cfg: &PopulationConfig,
    n_accessions: usize,
    mode: PloidyMode,
    rng: &mut impl Rng,
) -> Result<GenotypeMatrix> {
    if cfg.subpops == 0 || cfg.families == 0 {
        return invalid("a population needs at least one subpopulation and one family");
    }
    for (what, f) in [("fst", cfg.fst), ("fst_family", cfg.fst_family)] {
        if !(0.0..1.0).contains(&f) {
            return invalid(format!("{what} {f} outside [0, 1)"));
        }
    }
    let (lo, hi) = cfg.freq_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return invalid(format!("ancestral frequency range ({lo}, {hi}) must lie inside (0, 1)"));
    }
    let group = |i: usize| (i % cfg.subpops) * cfg.families + (i / cfg.subpops) % cfg.families;
    let mut calls = DMatrix::zeros(n_accessions, cfg.markers);
    for l in 0..cfg.markers {
        let p = rng.random_range(lo..=hi);
        let mut freqs = Vec::with_capacity(cfg.subpops * cfg.families);
        for ps in diverge(p, cfg.fst, cfg.subpops, rng)? {
            freqs.extend(diverge(ps, cfg.fst_family, cfg.families, rng)?);
        }
        for i in 0..n_accessions {
            let f = freqs[group(i)];
            calls[(i, l)] = match mode {
                PloidyMode::Inbred => {
                    if rng.random_bool(f) {
                        2.0
                    } else {
                        0.0
                    }
                }
                PloidyMode::Outbred => (rng.random_bool(f) as u8 + rng.random_bool(f) as u8) as f64,
            };
        }
    }
    GenotypeMatrix::new(
        (0..n_accessions).map(|i| format!("acc{i:05}")).collect(),
        (0..cfg.markers).map(|l| format!("snp{l:06}")).collect(),
        calls,
    )
}

/// Training and validation genotypes with their scaled kinship matrices.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub train: GenotypeMatrix,
    pub valid: GenotypeMatrix,
    pub k_train: KinshipMatrix,
    /// Kinship over training followed by validation accessions.
    pub k_total: KinshipMatrix,
}

impl Fixture {
    /// Splits `all` into its first `n` accessions (training) and the rest.
    pub fn from_genotypes(all: &GenotypeMatrix, n: usize, mode: PloidyMode) -> Result<Self> {
        let ids = all.accession_ids();
        if n < 2 || n > ids.len() {
            return invalid(format!("cannot take {n} training accessions from {}", ids.len()));
        }
        let train = all.select_accessions(&ids[..n])?;
        let valid = all.select_accessions(&ids[n..])?;
        let k_train = geno::kinship_from_genotypes(&train, mode, 0.0, true)?;
        let k_total = geno::kinship_from_genotypes(all, mode, 0.0, true)?;
        Ok(Fixture { train, valid, k_train, k_total })
    }

    pub fn synthetic(pop: &PopulationConfig, n: usize, m: usize, mode: PloidyMode, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = simulate_population(pop, n + m, mode, &mut rng)?;
        Self::from_genotypes(&all, n, mode)
    }

    /// Unrelated accessions: K = I and no markers.
    pub fn identity(n: usize, m: usize) -> Result<Self> {
        let ids: Vec<String> = (0..n + m).map(|i| format!("acc{i:05}")).collect();
        let empty = |ids: &[String]| GenotypeMatrix::new(ids.to_vec(), Vec::new(), DMatrix::zeros(ids.len(), 0));
        let k_total = geno::scale_kinship(&KinshipMatrix::new(ids.clone(), DMatrix::identity(n + m, n + m))?)?;
        let k_train = geno::scale_kinship(&KinshipMatrix::new(ids[..n].to_vec(), DMatrix::identity(n, n))?)?;
        Ok(Fixture { train: empty(&ids[..n])?, valid: empty(&ids[n..])?, k_train, k_total })
    }

    pub fn n(&self) -> usize {
        self.train.n_accessions()
    }

    pub fn m(&self) -> usize {
        self.valid.n_accessions()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub q: usize,
    /// Share of the genetic variance carried by the QTLs.
    pub gamma: f64,
    pub h2_target: f64,
    pub maf_min: f64,
    pub le_ratio: f64,
    pub sigma_e2: f64,
    pub seed: u64,
    pub mode: PloidyMode,
    pub max_attempts: usize,
}

impl SimConfig {
    pub fn new(n: usize, m: usize, r: usize, q: usize, gamma: f64, h2_target: f64) -> Self {
        SimConfig {
            n,
            m,
            r,
            q,
            gamma,
            h2_target,
            maf_min: 0.10,
            le_ratio: 0.97,
            sigma_e2: 1.0,
            seed: 0,
            mode: PloidyMode::Inbred,
            max_attempts: MAX_QTL_ATTEMPTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return invalid(format!("need at least 2 training genotypes, got {}", self.n));
        }
        if self.r == 0 {
            return invalid("need at least one replicate");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return invalid(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.h2_target > 0.0 && self.h2_target < 1.0) {
            return invalid(format!("target heritability {} outside (0, 1)", self.h2_target));
        }
        if self.gamma > 0.0 && self.q == 0 {
            return invalid("gamma > 0 needs at least one QTL");
        }
        if !(self.sigma_e2 > 0.0) {
            return invalid("sigma_e2 must be positive");
        }
        if !(self.le_ratio > 0.0 && self.le_ratio <= 1.0) {
            return invalid(format!("le_ratio {} outside (0, 1]", self.le_ratio));
        }
        Ok(())
    }

    /// Total additive variance giving `h2_target` on a kinship with tr(PKP) = n - 1.
    pub fn sigma_a2(&self) -> f64 {
        genetic_variance(self.n, self.h2_target, self.sigma_e2)
    }
}

pub fn genetic_variance(n: usize, h2: f64, sigma_e2: f64) -> f64 {
    let n = n as f64;
    sigma_e2 * h2 * (n - 1.0) / ((1.0 - h2) * n)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QtlSet {
    /// Marker columns in the genotype matrix.
    pub markers: Vec<usize>,
    pub ids: Vec<String>,
    pub effects: Vec<f64>,
    pub maf: Vec<f64>,
    /// Variance expected under linkage equilibrium.
    pub v1: f64,
    /// Realized variance of the QTL sum over the sampled genotypes.
    pub v2: f64,
    pub attempts: usize,
}

impl QtlSet {
    pub fn ratio(&self) -> f64 {
        self.v1.min(self.v2) / self.v1.max(self.v2)
    }
}

fn qtl_candidates(maf: &[f64], maf_min: f64) -> Vec<usize> {
    (0..maf.len()).filter(|&l| maf[l] > maf_min).collect()
}

fn minor_frequencies(g: &GenotypeMatrix, mode: PloidyMode) -> Result<Vec<f64>> {
    if g.n_markers() == 0 {
        return Ok(Vec::new());
    }
    Ok(geno::allele_frequencies(g, mode)?.maf)
}

/// QTL positions and effects for a trait with total genetic variance `sigma_a2`.
pub fn sample_qtls(g: &GenotypeMatrix, cfg: &SimConfig, sigma_a2: f64, rng: &mut impl Rng) -> Result<QtlSet> {
    let maf = minor_frequencies(g, cfg.mode)?;
    let candidates = qtl_candidates(&maf, cfg.maf_min);
    sample_from(g, &maf, &candidates, cfg, sigma_a2, rng)
}

fn sample_from(
    g: &GenotypeMatrix,
    maf: &[f64],
    candidates: &[usize],
    cfg: &SimConfig,
    sigma_a2: f64,
    rng: &mut impl Rng,
) -> Result<QtlSet> {
    if cfg.gamma == 0.0 || cfg.q == 0 {
        return Ok(QtlSet::default());
    }
    if candidates.len() < cfg.q {
        return invalid(format!(
            "{} QTLs requested but only {} markers have MAF > {}",
            cfg.q,
            candidates.len(),
            cfg.maf_min
        ));
    }
    let c = cfg.mode.variance_constant();
    let q = cfg.q as f64;
    let n = g.n_accessions();
    let target = cfg.gamma * sigma_a2;
    for attempt in 1..=cfg.max_attempts {
        let markers: Vec<usize> = index::sample(rng, candidates.len(), cfg.q).into_iter().map(|i| candidates[i]).collect();
        let freqs: Vec<f64> = markers.iter().map(|&l| maf[l]).collect();
        let effects: Vec<f64> = freqs
            .iter()
            .map(|&f| {
                let size = (target / (c * q * f * (1.0 - f))).sqrt();
                if rng.random_bool(0.5) {
                    size
                } else {
                    -size
                }
            })
            .collect();
        let v1: f64 = freqs.iter().zip(&effects).map(|(f, a)| c * f * (1.0 - f) * a * a).sum();
        let mut sum = DVector::zeros(n);
        for (&l, &a) in markers.iter().zip(&effects) {
            sum.axpy(a, &g.calls().column(l), 1.0);
        }
        let mean = sum.mean();
        let v2 = sum.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        if v1.min(v2) / v1.max(v2) > cfg.le_ratio {
            return Ok(QtlSet {
                ids: markers.iter().map(|&l| g.marker_ids()[l].clone()).collect(),
                markers,
                effects,
                maf: freqs,
                v1,
                v2,
                attempts: attempt,
            });
        }
    }
    Err(Error::QtlSampling { attempts: cfg.max_attempts, le_ratio: cfg.le_ratio })
}

#[derive(Debug, Clone)]
pub struct SimulatedTrait {
    /// Replicated observations of the training genotypes.
    pub phenotypes: PhenotypeTable,
    /// Genetic values of training then validation genotypes.
    pub true_g: DVector<f64>,
    pub train_ids: Vec<String>,
    pub valid_ids: Vec<String>,
    pub qtls: QtlSet,
    /// Total additive variance the trait was calibrated to.
    pub sigma_a2: f64,
    /// Polygenic part of `sigma_a2`.
    pub sigma_poly2: f64,
}

impl SimulatedTrait {
    pub fn realized_sigma_a2(&self) -> f64 {
        self.sigma_poly2 + self.qtls.v2
    }

    pub fn true_g_train(&self) -> &[f64] {
        &self.true_g.as_slice()[..self.train_ids.len()]
    }

    pub fn true_g_valid(&self) -> &[f64] {
        &self.true_g.as_slice()[self.train_ids.len()..]
    }
}

/// Reusable simulator: the kinship factorization and QTL candidates are
/// computed once per fixture.
#[derive(Debug, Clone)]
pub struct TraitSimulator<'a> {
    cfg: SimConfig,
    train: &'a GenotypeMatrix,
    valid: &'a GenotypeMatrix,
    factor: DMatrix<f64>,
    maf: Vec<f64>,
    candidates: Vec<usize>,
}

impl<'a> TraitSimulator<'a> {
    pub fn new(
        train: &'a GenotypeMatrix,
        valid: &'a GenotypeMatrix,
        k_total: &KinshipMatrix,
        cfg: &SimConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.n_accessions() != cfg.n || valid.n_accessions() != cfg.m {
            return Err(Error::Dimension(format!(
                "configuration asks for {} training and {} validation genotypes, got {} and {}",
                cfg.n,
                cfg.m,
                train.n_accessions(),
                valid.n_accessions()
            )));
        }
        if train.marker_ids() != valid.marker_ids() {
            return invalid("training and validation genotypes must share their markers");
        }
        let ids: Vec<String> = train.accession_ids().iter().chain(valid.accession_ids()).cloned().collect();
        let k = k_total.subset(&ids)?;
        let (vals, vecs) = linalg::symmetric_eigen(&k.k);
        let mut cols = Vec::new();
        for (j, &v) in vals.iter().enumerate() {
            if v <= -1e-8 {
                return invalid(format!("kinship is not positive semi-definite (eigenvalue {v:e})"));
            }
            if v > 0.0 {
                cols.push(vecs.column(j) * v.sqrt());
            }
        }
        let factor = if cols.is_empty() { DMatrix::zeros(ids.len(), 0) } else { DMatrix::from_columns(&cols) };
        let maf = minor_frequencies(train, cfg.mode)?;
        let candidates = qtl_candidates(&maf, cfg.maf_min);
        Ok(TraitSimulator { cfg: *cfg, train, valid, factor, maf, candidates })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn simulate(&self, rng: &mut impl Rng) -> Result<SimulatedTrait> {
        let cfg = &self.cfg;
        let (n, m) = (cfg.n, cfg.m);
        let sigma_a2 = cfg.sigma_a2();
        let sigma_poly2 = (1.0 - cfg.gamma) * sigma_a2;
        let qtls = sample_from(self.train, &self.maf, &self.candidates, cfg, sigma_a2, rng)?;
        let mut true_g = DVector::zeros(n + m);
        for (&l, &a) in qtls.markers.iter().zip(&qtls.effects) {
            for i in 0..n {
                true_g[i] += a * self.train.calls()[(i, l)];
            }
            for i in 0..m {
                true_g[n + i] += a * self.valid.calls()[(i, l)];
            }
        }
        if sigma_poly2 > 0.0 {
            let z = DVector::from_fn(self.factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            true_g.axpy(sigma_poly2.sqrt(), &(&self.factor * z), 1.0);
        }
        let sd_e = cfg.sigma_e2.sqrt();
        let mut genotype = Vec::with_capacity(n * cfg.r);
        let mut value = Vec::with_capacity(n * cfg.r);
        for (i, id) in self.train.accession_ids().iter().enumerate() {
            for _ in 0..cfg.r {
                genotype.push(id.clone());
                value.push(true_g[i] + sd_e * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(SimulatedTrait {
            phenotypes: PhenotypeTable::without_covariates(genotype, value)?,
            true_g,
            train_ids: self.train.accession_ids().to_vec(),
            valid_ids: self.valid.accession_ids().to_vec(),
            qtls,
            sigma_a2,
            sigma_poly2,
        })
    }
}

/// One trait drawn from a generator seeded with `cfg.seed`.
pub fn simulate_trait(
    train: &GenotypeMatrix,
    valid: &GenotypeMatrix,
    k_total: &KinshipMatrix,
    cfg: &SimConfig,
) -> Result<SimulatedTrait> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    TraitSimulator::new(train, valid, k_total, cfg)?.simulate(&mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    Replicates,
    Means,
    Anova,
    Gblup,
    Gwas,
}

impl Estimator {
    pub const ALL: [Estimator; 5] =
        [Estimator::Replicates, Estimator::Means, Estimator::Anova, Estimator::Gblup, Estimator::Gwas];

    fn parse(s: &str) -> Result<Vec<Estimator>> {
        Ok(match s {
            "replicates" => vec![Estimator::Replicates],
            "means" => vec![Estimator::Means],
            "anova" => vec![Estimator::Anova],
            "gblup" => vec![Estimator::Gblup],
            "gwas" => vec![Estimator::Gwas],
            "all" => Estimator::ALL.to_vec(),
            other => return Err(Error::Parse(format!("unknown estimator `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KinshipSource {
    Synthetic,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n: usize,
    pub m: usize,
    pub population: PopulationConfig,
    pub kinship: KinshipSource,
    pub mode: PloidyMode,
    pub q: usize,
    pub gamma: f64,
    pub h2: Vec<f64>,
    pub r: usize,
    pub maf_min: f64,
    pub le_ratio: f64,
    pub sigma_e2: f64,
    pub n_sims: usize,
    pub estimators: Vec<Estimator>,
    pub seed: u64,
    pub alpha: f64,
    /// Markers within this many positions of a QTL count as true positives.
    pub window: usize,
    pub scan_maf_min: f64,
    pub keep_traits: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n: 200,
            m: 50,
            population: PopulationConfig::default(),
            kinship: KinshipSource::Synthetic,
            mode: PloidyMode::Inbred,
            q: 20,
            gamma: 0.5,
            h2: vec![0.2, 0.5, 0.8],
            r: 3,
            maf_min: 0.10,
            le_ratio: 0.97,
            sigma_e2: 1.0,
            n_sims: 100,
            estimators: vec![Estimator::Replicates, Estimator::Means, Estimator::Anova],
            seed: 1,
            alpha: 0.05,
            window: 0,
            scan_maf_min: 0.05,
            keep_traits: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Parse(format!("[{section}] {key} = `{v}` is not a valid value")))
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_value(section, key, s)).collect()
}

impl Scenario {
    /// Reads `key = value` lines grouped under `[population]`, `[trait]` and
    /// `[study]`; keys left out keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut s = Scenario::default();
        for (section, props) in ini.iter() {
            let sec = section.unwrap_or("");
            for (key, v) in props.iter() {
                match (sec, key) {
                    ("population", "n") => s.n = parse_value(sec, key, v)?,
                    ("population", "m") => s.m = parse_value(sec, key, v)?,
                    ("population", "markers") => s.population.markers = parse_value(sec, key, v)?,
                    ("population", "fst") => s.population.fst = parse_value(sec, key, v)?,
                    ("population", "subpops") => s.population.subpops = parse_value(sec, key, v)?,
                    ("population", "families") => s.population.families = parse_value(sec, key, v)?,
                    ("population", "fst_family") => s.population.fst_family = parse_value(sec, key, v)?,
                    ("population", "kinship") => {
                        s.kinship = match v.trim() {
                            "synthetic" => KinshipSource::Synthetic,
                            "identity" => KinshipSource::Identity,
                            other => return Err(Error::Parse(format!("unknown kinship source `{other}`"))),
                        }
                    }
                    ("population", "mode") => {
                        s.mode = match v.trim() {
                            "inbred" => PloidyMode::Inbred,
                            "outbred" => PloidyMode::Outbred,
                            other => return Err(Error::Parse(format!("unknown mode `{other}`"))),
                        }
                    }
                    ("trait", "q") => s.q = parse_value(sec, key, v)?,
                    ("trait", "gamma") => s.gamma = parse_value(sec, key, v)?,
                    ("trait", "h2") => s.h2 = parse_list(sec, key, v)?,
                    ("trait", "r") => s.r = parse_value(sec, key, v)?,
                    ("trait", "maf_min") => s.maf_min = parse_value(sec, key, v)?,
                    ("trait", "le_ratio") => s.le_ratio = parse_value(sec, key, v)?,
                    ("trait", "sigma_e2") => s.sigma_e2 = parse_value(sec, key, v)?,
                    ("study", "n_sims") => s.n_sims = parse_value(sec, key, v)?,
                    ("study", "seed") => s.seed = parse_value(sec, key, v)?,
                    ("study", "alpha") => s.alpha = parse_value(sec, key, v)?,
                    ("study", "window") => s.window = parse_value(sec, key, v)?,
                    ("study", "scan_maf_min") => s.scan_maf_min = parse_value(sec, key, v)?,
                    ("study", "keep_traits") => s.keep_traits = parse_value(sec, key, v)?,
                    ("study", "estimators") => {
                        let mut est = Vec::new();
                        for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                            for e in Estimator::parse(name)? {
                                if !est.contains(&e) {
                                    est.push(e);
                                }
                            }
                        }
                        s.estimators = est;
                    }
                    _ => return Err(Error::Parse(format!("unknown key `{key}` in section [{sec}]"))),
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinship == KinshipSource::Identity && (self.gamma > 0.0 || self.estimators.contains(&Estimator::Gwas))
        {
            return invalid("an identity kinship has no markers: use gamma = 0 and no gwas estimator");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha {} outside (0, 1)", self.alpha));
        }
        for &h2 in &self.h2 {
            self.config(h2, 0).validate()?;
        }
        Ok(())
    }

    pub fn config(&self, h2: f64, seed: u64) -> SimConfig {
        SimConfig {
            n: self.n,
            m: self.m,
            r: self.r,
            q: self.q,
            gamma: self.gamma,
            h2_target: h2,
            maf_min: self.maf_min,
            le_ratio: self.le_ratio,
            sigma_e2: self.sigma_e2,
            seed,
            mode: self.mode,
            max_attempts: MAX_QTL_ATTEMPTS,
        }
    }

    pub fn fixture(&self) -> Result<Fixture> {
        match self.kinship {
            KinshipSource::Identity => Fixture::identity(self.n, self.m),
            KinshipSource::Synthetic => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(u64::MAX);
                let all = simulate_population(&self.population, self.n + self.m, self.mode, &mut rng)?;
                Fixture::from_genotypes(&all, self.n, self.mode)
            }
        }
    }

    fn wants(&self, e: Estimator) -> bool {
        self.estimators.contains(&e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSummary {
    pub method: Method,
    pub h2: f64,
    pub ci_standard: Interval,
    pub ci_log: Option<Interval>,
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracySummary {
    pub stage: Stage,
    pub h2_hat: f64,
    pub r_train: f64,
    pub r_valid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GwasSummary {
    pub stage: Stage,
    /// (p, near a QTL) for every testable marker.
    pub labelled: Vec<(f64, bool)>,
}

#[derive(Debug, Clone)]
pub struct TraitOutcome {
    pub h2_target: f64,
    pub sim: usize,
    pub estimates: Vec<EstimateSummary>,
    pub accuracy: Vec<AccuracySummary>,
    pub gwas: Vec<GwasSummary>,
    pub error: Option<String>,
    pub simulated: Option<SimulatedTrait>,
}

impl TraitOutcome {
    pub fn estimate(&self, method: Method) -> Option<&EstimateSummary> {
        self.estimates.iter().find(|e| e.method == method)
    }

    pub fn accuracy(&self, stage: Stage) -> Option<&AccuracySummary> {
        self.accuracy.iter().find(|a| a.stage == stage)
    }
}

fn summarize(est: &herit::HeritabilityEstimate) -> EstimateSummary {
    EstimateSummary {
        method: est.method,
        h2: est.h2,
        ci_standard: est.ci_standard,
        ci_log: est.ci_log,
        monotone: est.monotone,
    }
}

type Evaluated = (Vec<EstimateSummary>, Vec<AccuracySummary>, Vec<GwasSummary>);

/// Runs the scenario's estimators on one simulated trait.
pub fn evaluate_trait(fixture: &Fixture, t: &SimulatedTrait, scenario: &Scenario) -> Result<Evaluated> {
    let opts = HeritOptions { alpha: scenario.alpha, ..HeritOptions::default() };
    let pheno = &t.phenotypes;
    let mut estimates = Vec::new();
    let mut accuracy = Vec::new();
    let mut scans = Vec::new();
    let means = if scenario.wants(Estimator::Means) || scenario.wants(Estimator::Gwas) {
        Some(design::compute_blues(pheno, &[])?)
    } else {
        None
    };
    if scenario.wants(Estimator::Anova) {
        estimates.push(summarize(&herit::broad_sense_h2(pheno, &[], scenario.alpha)?));
    }
    if scenario.wants(Estimator::Replicates) {
        estimates.push(summarize(&herit::h2_replicates(pheno, &fixture.k_train, &[], &opts)?));
    }
    if let (true, Some(means)) = (scenario.wants(Estimator::Means), &means) {
        estimates.push(summarize(&herit::h2_means(means, &fixture.k_train, &opts)?));
    }
    if scenario.wants(Estimator::Gblup) {
        let position: HashMap<&str, usize> = t.train_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        for stage in [Stage::Individual, Stage::Means] {
            let sp = gblup::predict_split(pheno, &fixture.k_total, &[], &t.valid_ids, None, stage, &opts)?;
            let truth: Vec<f64> = pheno.genotype_ids().iter().map(|id| t.true_g[position[id.as_str()]]).collect();
            accuracy.push(AccuracySummary {
                stage,
                h2_hat: sp.h2_hat,
                r_train: linalg::correlation(sp.g_train.as_slice(), &truth),
                r_valid: if t.valid_ids.len() < 2 {
                    f64::NAN
                } else {
                    linalg::correlation(sp.g_valid.as_slice(), t.true_g_valid())
                },
            });
        }
    }
    if let (true, Some(means)) = (scenario.wants(Estimator::Gwas), &means) {
        let scan_opts = ScanOptions { maf_min: scenario.scan_maf_min, mode: scenario.mode, ..ScanOptions::default() };
        for (stage, data) in [
            (Stage::Individual, ScanData::one_stage(pheno, &fixture.k_train, &[])?),
            (Stage::Means, ScanData::two_stage(means, &fixture.k_train)?),
        ] {
            let null = gwas::fit_null(&data, &scan_opts.reml)?;
            let scan = gwas::gls_scan(&data, &fixture.train, &null, &scan_opts)?;
            let labels = gwas::label_markers(&scan, &t.qtls.ids, scenario.window);
            let labelled =
                scan.markers.iter().zip(labels).filter(|(m, _)| m.testable).map(|(_, l)| l).collect();
            scans.push(GwasSummary { stage, labelled });
        }
    }
    Ok((estimates, accuracy, scans))
}

/// Simulates and evaluates every trait of the scenario on its own fixture.
pub fn run_study(scenario: &Scenario) -> Result<StudyReport> {
    scenario.validate()?;
    if scenario.n_sims == 0 || scenario.h2.is_empty() {
        return Ok(StudyReport { scenario: scenario.clone(), traits: Vec::new() });
    }
    let fixture = scenario.fixture()?;
    run_study_on(&fixture, scenario)
}

/// Trait `s` of heritability level `l` draws from stream `(l << 32) | s`.
pub fn run_study_on(fixture: &Fixture, scenario: &Scenario) -> Result<StudyReport> {
    scenario.validate()?;
    let mut sims = Vec::new();
    for &h2 in &scenario.h2 {
        let cfg = scenario.config(h2, scenario.seed);
        sims.push(TraitSimulator::new(&fixture.train, &fixture.valid, &fixture.k_total, &cfg)?);
    }
    let jobs: Vec<(usize, usize)> =
        (0..scenario.h2.len()).flat_map(|l| (0..scenario.n_sims).map(move |s| (l, s))).collect();
    let traits: Vec<TraitOutcome> = jobs
        .par_iter()
        .map(|&(l, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
            rng.set_stream(((l as u64) << 32) | s as u64);
            let mut out = TraitOutcome {
                h2_target: scenario.h2[l],
                sim: s,
                estimates: Vec::new(),
                accuracy: Vec::new(),
                gwas: Vec::new(),
                error: None,
                simulated: None,
            };
            let result = sims[l].simulate(&mut rng).and_then(|t| {
                let ev = evaluate_trait(fixture, &t, scenario)?;
                Ok((t, ev))
            });
            match result {
                Ok((t, (est, acc, gw))) => {
                    out.estimates = est;
                    out.accuracy = acc;
                    out.gwas = gw;
                    if scenario.keep_traits {
                        out.simulated = Some(t);
                    }
                }
                Err(e) => {
                    warn!("trait {s} at h2 = {} failed: {e}", scenario.h2[l]);
                    out.error = Some(e.to_string());
                }
            }
            out
        })
        .collect();
    Ok(StudyReport { scenario: scenario.clone(), traits })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionRow {
    pub h2: f64,
    pub label: &'static str,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    /// Relative to the means-level estimator when it was run.
    pub relative_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub h2: f64,
    pub label: &'static str,
    pub coverage: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub h2: f64,
    pub interval: String,
    pub share_replicates: f64,
    pub share_means: f64,
    pub r_train_replicates: f64,
    pub r_train_means: f64,
    pub r_valid_replicates: f64,
    pub r_valid_means: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GwasRow {
    pub h2: f64,
    pub stage: Stage,
    pub auc: f64,
    pub type1_error: f64,
    pub markers: usize,
}

pub const ACCURACY_BINS: [(f64, f64); 6] = [(0.0, 0.1), (0.1, 0.3), (0.3, 0.5), (0.5, 0.7), (0.7, 0.9), (0.9, 1.0)];

fn in_bin(h: f64, (lo, hi): (f64, f64)) -> bool {
    h >= lo && (h < hi || (hi == 1.0 && h <= 1.0))
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    linalg::variance(v).sqrt()
}

fn finite_mean(v: impl Iterator<Item = f64>) -> f64 {
    let x: Vec<f64> = v.filter(|x| x.is_finite()).collect();
    if x.is_empty() {
        f64::NAN
    } else {
        linalg::mean(&x)
    }
}

fn method_label(m: Method) -> &'static str {
    match m {
        Method::BroadSense => "broad-sense",
        Method::Replicates => "individual level",
        Method::Means => "means",
    }
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub traits: Vec<TraitOutcome>,
}

impl StudyReport {
    /// Traits of one heritability level that were simulated and evaluated.
    pub fn level(&self, h2: f64) -> impl Iterator<Item = &TraitOutcome> {
        self.traits.iter().filter(move |t| t.h2_target == h2 && t.error.is_none())
    }

    pub fn failures(&self) -> impl Iterator<Item = &TraitOutcome> {
        self.traits.iter().filter(|t| t.error.is_some())
    }

    pub fn estimates(&self, h2: f64, method: Method) -> Vec<f64> {
        self.level(h2).filter_map(|t| t.estimate(method)).map(|e| e.h2).collect()
    }

    pub fn precision_table(&self) -> Vec<PrecisionRow> {
        let mut rows = Vec::new();
        for &h2 in &self.scenario.h2 {
            let methods = [Method::BroadSense, Method::Replicates, Method::Means];
            let sds: Vec<(Method, Vec<f64>)> = methods.iter().map(|&m| (m, self.estimates(h2, m))).collect();
            let reference = sample_sd(&sds[2].1);
            for (m, v) in &sds {
                if v.is_empty() {
                    continue;
                }
                let mean = linalg::mean(v);
                let sd = sample_sd(v);
                rows.push(PrecisionRow { h2, label: method_label(*m), mean, bias: mean - h2, sd, relative_sd: sd / reference });
            }
        }
        rows
    }

    pub fn coverage_table(&self) -> Vec<CoverageRow> {
        let mut rows = Vec::new();
        for &h2 in &self.scenario.h2 {
            let specs: [(Method, bool, &'static str); 5] = [
                (Method::BroadSense, false, "broad-sense"),
                (Method::Replicates, false, "individual level (standard)"),
                (Method::Replicates, true, "individual level (log-transformed)"),
                (Method::Means, false, "means (standard)"),
                (Method::Means, true, "means (log-transformed)"),
            ];
            for (m, log, label) in specs {
                let cis: Vec<Interval> = self
                    .level(h2)
                    .filter_map(|t| t.estimate(m))
                    .filter_map(|e| if log { e.ci_log } else { Some(e.ci_standard) })
                    .collect();
                if cis.is_empty() {
                    continue;
                }
                let k = cis.len() as f64;
                rows.push(CoverageRow {
                    h2,
                    label,
                    coverage: cis.iter().filter(|c| c.contains(h2)).count() as f64 / k,
                    width: cis.iter().map(|c| c.width()).sum::<f64>() / k,
                });
            }
        }
        rows
    }

    pub fn accuracy_table(&self) -> Vec<AccuracyRow> {
        let mut rows = Vec::new();
        for &h2 in &self.scenario.h2 {
            let acc: Vec<(&AccuracySummary, &AccuracySummary)> = self
                .level(h2)
                .filter_map(|t| Some((t.accuracy(Stage::Individual)?, t.accuracy(Stage::Means)?)))
                .collect();
            if acc.is_empty() {
                continue;
            }
            let total = acc.len() as f64;
            let mut bins: Vec<(String, (f64, f64))> =
                ACCURACY_BINS.iter().map(|&(lo, hi)| (format!("[{lo},{hi}{}", if hi == 1.0 { "]" } else { ")" }), (lo, hi))).collect();
            bins.push(("[0,1]".to_string(), (0.0, 1.0)));
            for (interval, bin) in bins {
                let reps: Vec<&AccuracySummary> = acc.iter().map(|a| a.0).filter(|a| in_bin(a.h2_hat, bin)).collect();
                let means: Vec<&AccuracySummary> = acc.iter().map(|a| a.1).filter(|a| in_bin(a.h2_hat, bin)).collect();
                rows.push(AccuracyRow {
                    h2,
                    interval,
                    share_replicates: reps.len() as f64 / total,
                    share_means: means.len() as f64 / total,
                    r_train_replicates: finite_mean(reps.iter().map(|a| a.r_train)),
                    r_train_means: finite_mean(means.iter().map(|a| a.r_train)),
                    r_valid_replicates: finite_mean(reps.iter().map(|a| a.r_valid)),
                    r_valid_means: finite_mean(means.iter().map(|a| a.r_valid)),
                });
            }
        }
        rows
    }

    /// (p, label) pairs of every trait at one level, pooled per stage.
    pub fn pooled_labels(&self, h2: f64, stage: Stage) -> Vec<(f64, bool)> {
        self.level(h2)
            .flat_map(|t| t.gwas.iter().filter(move |g| g.stage == stage))
            .flat_map(|g| g.labelled.iter().copied())
            .collect()
    }

    pub fn roc(&self, h2: f64, stage: Stage) -> Vec<RocPoint> {
        gwas::roc_from_labels(&self.pooled_labels(h2, stage))
    }

    pub fn gwas_table(&self) -> Vec<GwasRow> {
        let mut rows = Vec::new();
        for &h2 in &self.scenario.h2 {
            for stage in [Stage::Individual, Stage::Means] {
                let pooled = self.pooled_labels(h2, stage);
                if pooled.is_empty() {
                    continue;
                }
                let nulls: Vec<f64> = pooled.iter().filter(|l| !l.1).map(|l| l.0).collect();
                rows.push(GwasRow {
                    h2,
                    stage,
                    auc: gwas::roc_auc(&gwas::roc_from_labels(&pooled)),
                    type1_error: nulls.iter().filter(|&&p| p < self.scenario.alpha).count() as f64 / nulls.len() as f64,
                    markers: pooled.len(),
                });
            }
        }
        rows
    }
}
