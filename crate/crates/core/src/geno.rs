//! Genotype ingestion, allele frequencies and marker-based kinship.

use std::collections::{HashMap, HashSet};

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::linalg;

/// Allowed call sets and the variance constant of the standardised scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PloidyMode {
    /// Homozygous lines, calls in {0, 2}.
    #[default]
    Inbred,
    /// Outbreeders under Hardy-Weinberg equilibrium, calls in {0, 1, 2}.
    Outbred,
}

impl PloidyMode {
    /// Variance of a marker score with minor allele frequency `f` is `c f (1 - f)`.
    pub fn variance_constant(self) -> f64 {
        match self {
            PloidyMode::Inbred => 4.0,
            PloidyMode::Outbred => 2.0,
        }
    }

    fn allows(self, call: f64) -> bool {
        match self {
            PloidyMode::Inbred => call == 0.0 || call == 2.0,
            PloidyMode::Outbred => call == 0.0 || call == 1.0 || call == 2.0,
        }
    }
}

impl std::str::FromStr for PloidyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inbred" => Ok(PloidyMode::Inbred),
            "outbred" => Ok(PloidyMode::Outbred),
            other => invalid(format!("unknown ploidy mode `{other}` (expected inbred|outbred)")),
        }
    }
}

/// Accessions x markers allele-count matrix without missing calls.
#[derive(Debug, Clone)]
pub struct GenotypeMatrix {
    accession_ids: Vec<String>,
    marker_ids: Vec<String>,
    calls: DMatrix<f64>,
    imputed: HashSet<(usize, usize)>,
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return invalid(format!("duplicate {what} id `{id}`"));
        }
    }
    Ok(())
}

impl GenotypeMatrix {
    pub fn new(accession_ids: Vec<String>, marker_ids: Vec<String>, calls: DMatrix<f64>) -> Result<Self> {
        if calls.nrows() != accession_ids.len() || calls.ncols() != marker_ids.len() {
            return Err(Error::Dimension(format!(
                "calls are {}x{} but there are {} accessions and {} markers",
                calls.nrows(),
                calls.ncols(),
                accession_ids.len(),
                marker_ids.len()
            )));
        }
        check_unique(&accession_ids, "accession")?;
        check_unique(&marker_ids, "marker")?;
        if let Some(pos) = calls.iter().position(|v| !v.is_finite()) {
            let n = calls.nrows();
            return Err(Error::MissingValues {
                what: "genotype calls".into(),
                row: pos % n,
                column: pos / n,
            });
        }
        Ok(Self {
            accession_ids,
            marker_ids,
            calls,
            imputed: HashSet::new(),
        })
    }

    /// Builds a complete matrix from calls that may be missing.
    ///
    /// Without `impute_mean` the first missing cell is reported as an error.
    /// With it, each missing cell becomes `2 f_l` computed from the observed
    /// calls of its marker.
    pub fn from_partial(
        accession_ids: Vec<String>,
        marker_ids: Vec<String>,
        calls: DMatrix<Option<f64>>,
        impute_mean: bool,
    ) -> Result<Self> {
        let (n, p) = calls.shape();
        let mut full = DMatrix::zeros(n, p);
        let mut imputed = HashSet::new();
        for l in 0..p {
            let observed: Vec<f64> = (0..n).filter_map(|i| calls[(i, l)]).collect();
            let fill = if observed.is_empty() { 0.0 } else { linalg::mean(&observed) };
            for i in 0..n {
                match calls[(i, l)] {
                    Some(v) => full[(i, l)] = v,
                    None if impute_mean => {
                        if observed.is_empty() {
                            return invalid(format!("marker `{}` has no observed calls", marker_ids[l]));
                        }
                        full[(i, l)] = fill;
                        imputed.insert((i, l));
                    }
                    None => {
                        return Err(Error::MissingValues {
                            what: "genotype calls".into(),
                            row: i,
                            column: l,
                        })
                    }
                }
            }
        }
        if !imputed.is_empty() {
            info!("imputed {} missing genotype calls with marker means", imputed.len());
        }
        let mut g = Self::new(accession_ids, marker_ids, full)?;
        g.imputed = imputed;
        Ok(g)
    }

    pub fn n_accessions(&self) -> usize {
        self.calls.nrows()
    }

    pub fn n_markers(&self) -> usize {
        self.calls.ncols()
    }

    pub fn accession_ids(&self) -> &[String] {
        &self.accession_ids
    }

    pub fn marker_ids(&self) -> &[String] {
        &self.marker_ids
    }

    pub fn calls(&self) -> &DMatrix<f64> {
        &self.calls
    }

    pub fn n_imputed(&self) -> usize {
        self.imputed.len()
    }

    /// Rows for the given accessions, in the given order.
    pub fn select_accessions(&self, ids: &[String]) -> Result<GenotypeMatrix> {
        let index: HashMap<&str, usize> =
            self.accession_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let rows = ids
            .iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::MissingAccession(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        let calls = self.calls.select_rows(rows.iter());
        Ok(GenotypeMatrix {
            accession_ids: ids.to_vec(),
            marker_ids: self.marker_ids.clone(),
            calls,
            imputed: HashSet::new(),
        })
    }

    pub fn select_markers(&self, cols: &[usize]) -> GenotypeMatrix {
        GenotypeMatrix {
            accession_ids: self.accession_ids.clone(),
            marker_ids: cols.iter().map(|&l| self.marker_ids[l].clone()).collect(),
            calls: self.calls.select_columns(cols.iter()),
            imputed: HashSet::new(),
        }
    }
}

/// Minor allele frequencies, one per marker.
#[derive(Debug, Clone, PartialEq)]
pub struct AlleleFrequencies {
    /// Frequency of the minor allele, in [0, 0.5].
    pub maf: Vec<f64>,
    /// Marker whose counted allele was the major one; its calls read as `2 - x`.
    pub flipped: Vec<bool>,
}

impl AlleleFrequencies {
    pub fn len(&self) -> usize {
        self.maf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maf.is_empty()
    }

    pub fn is_monomorphic(&self, l: usize) -> bool {
        self.maf[l] == 0.0
    }

    /// Frequency of the allele actually counted in the stored calls.
    pub fn counted_frequency(&self, l: usize) -> f64 {
        if self.flipped[l] {
            1.0 - self.maf[l]
        } else {
            self.maf[l]
        }
    }
}

pub fn allele_frequencies(g: &GenotypeMatrix, mode: PloidyMode) -> Result<AlleleFrequencies> {
    let (n, p) = g.calls.shape();
    if n == 0 || p == 0 {
        return invalid("empty genotype matrix");
    }
    let mut maf = Vec::with_capacity(p);
    let mut flipped = Vec::with_capacity(p);
    for l in 0..p {
        let col = g.calls.column(l);
        for (i, &x) in col.iter().enumerate() {
            if !mode.allows(x) && !g.imputed.contains(&(i, l)) {
                return invalid(format!(
                    "call {x} at accession `{}`, marker `{}` is not allowed in {mode:?} mode",
                    g.accession_ids[i], g.marker_ids[l]
                ));
            }
        }
        let f = col.sum() / (2.0 * n as f64);
        if f > 0.5 {
            maf.push(1.0 - f);
            flipped.push(true);
        } else {
            maf.push(f);
            flipped.push(false);
        }
    }
    Ok(AlleleFrequencies { maf, flipped })
}

/// Drops markers with minor allele frequency `<= maf_min` (monomorphic ones
/// always) and recodes the survivors so the calls count the minor allele.
pub fn filter_markers(
    g: &GenotypeMatrix,
    freqs: &AlleleFrequencies,
    maf_min: f64,
) -> Result<(GenotypeMatrix, AlleleFrequencies)> {
    if freqs.len() != g.n_markers() {
        return Err(Error::Dimension(format!(
            "{} frequencies for {} markers",
            freqs.len(),
            g.n_markers()
        )));
    }
    let keep: Vec<usize> = (0..freqs.len()).filter(|&l| freqs.maf[l] > 0.0 && freqs.maf[l] > maf_min).collect();
    let removed = freqs.len() - keep.len();
    if removed > 0 {
        info!("removed {removed} markers with MAF <= {maf_min} (monomorphic included)");
    }
    if keep.is_empty() {
        return Err(Error::AllMonomorphic);
    }
    let mut out = g.select_markers(&keep);
    for (j, &l) in keep.iter().enumerate() {
        if freqs.flipped[l] {
            out.calls.column_mut(j).apply(|x| *x = 2.0 - *x);
        }
    }
    let out_freqs = AlleleFrequencies {
        maf: keep.iter().map(|&l| freqs.maf[l]).collect(),
        flipped: vec![false; keep.len()],
    };
    Ok((out, out_freqs))
}

/// Symmetric relatedness matrix over a fixed accession order.
#[derive(Debug, Clone)]
pub struct KinshipMatrix {
    pub accession_ids: Vec<String>,
    pub k: DMatrix<f64>,
    pub scaled: bool,
    pub scale_factor: f64,
}

impl KinshipMatrix {
    /// Wraps an externally supplied matrix after checking symmetry and
    /// positive semi-definiteness.
    pub fn new(accession_ids: Vec<String>, k: DMatrix<f64>) -> Result<Self> {
        let n = accession_ids.len();
        if k.nrows() != n || k.ncols() != n {
            return Err(Error::Dimension(format!("kinship is {}x{} for {n} accessions", k.nrows(), k.ncols())));
        }
        check_unique(&accession_ids, "accession")?;
        if k.iter().any(|v| !v.is_finite()) {
            return invalid("kinship contains non-finite entries");
        }
        if linalg::relative_asymmetry(&k) > 1e-10 {
            return invalid("kinship matrix is not symmetric");
        }
        let mut k = k;
        linalg::symmetrize(&mut k);
        let (vals, _) = linalg::symmetric_eigen(&k);
        let norm = k.norm();
        if n > 0 && vals[0] < -1e-8 * norm {
            return invalid(format!("kinship matrix is not positive semi-definite (smallest eigenvalue {:e})", vals[0]));
        }
        Ok(Self {
            accession_ids,
            k,
            scaled: false,
            scale_factor: 1.0,
        })
    }

    pub fn n(&self) -> usize {
        self.accession_ids.len()
    }

    /// Rows and columns for `ids`, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<KinshipMatrix> {
        let index: HashMap<&str, usize> =
            self.accession_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let idx = ids
            .iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::MissingAccession(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        let k = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.k[(idx[i], idx[j])]);
        Ok(KinshipMatrix {
            accession_ids: ids.to_vec(),
            k,
            scaled: self.scaled,
            scale_factor: self.scale_factor,
        })
    }

    /// Block of rows `rows` and columns `cols` (both by id).
    pub fn cross(&self, rows: &[String], cols: &[String]) -> Result<DMatrix<f64>> {
        let index: HashMap<&str, usize> =
            self.accession_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let lookup = |ids: &[String]| {
            ids.iter()
                .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::MissingAccession(id.clone())))
                .collect::<Result<Vec<_>>>()
        };
        let r = lookup(rows)?;
        let c = lookup(cols)?;
        Ok(DMatrix::from_fn(r.len(), c.len(), |i, j| self.k[(r[i], c[j])]))
    }
}

const MARKER_BLOCK: usize = 512;

/// Standardised cross-products of centred marker scores, averaged over markers.
///
/// Scores are centred at twice the allele frequency so that every marker
/// column sums to zero; markers are reduced in blocks whose partial sums are
/// added in a fixed order, so the result does not depend on the thread count.
pub fn compute_kinship(g: &GenotypeMatrix, freqs: &AlleleFrequencies, mode: PloidyMode) -> Result<KinshipMatrix> {
    let (n, p) = g.calls.shape();
    if freqs.len() != p {
        return Err(Error::Dimension(format!("{} frequencies for {p} markers", freqs.len())));
    }
    if p == 0 {
        return Err(Error::AllMonomorphic);
    }
    if let Some(l) = (0..p).find(|&l| freqs.maf[l] <= 0.0 || freqs.maf[l] >= 1.0) {
        if (0..p).all(|l| freqs.maf[l] <= 0.0) {
            return Err(Error::AllMonomorphic);
        }
        return invalid(format!("marker `{}` is monomorphic; filter markers first", g.marker_ids[l]));
    }
    let c = mode.variance_constant();
    let blocks: Vec<(usize, usize)> = (0..p).step_by(MARKER_BLOCK).map(|s| (s, (s + MARKER_BLOCK).min(p))).collect();
    let wave = rayon::current_num_threads().max(1) * 2;
    let mut k = DMatrix::<f64>::zeros(n, n);
    for chunk in blocks.chunks(wave) {
        let partials: Vec<DMatrix<f64>> = chunk
            .par_iter()
            .map(|&(start, end)| {
                let mut w = DMatrix::<f64>::zeros(n, end - start);
                for (j, l) in (start..end).enumerate() {
                    let f = freqs.counted_frequency(l);
                    let sd = (c * f * (1.0 - f)).sqrt();
                    for i in 0..n {
                        w[(i, j)] = (g.calls[(i, l)] - 2.0 * f) / sd;
                    }
                }
                &w * w.transpose()
            })
            .collect();
        for part in partials {
            k += part;
        }
    }
    k /= p as f64;
    linalg::symmetrize(&mut k);
    Ok(KinshipMatrix {
        accession_ids: g.accession_ids.clone(),
        k,
        scaled: false,
        scale_factor: 1.0,
    })
}

/// Divides every entry by tr(PKP)/(n-1), P the centering projector.
pub fn scale_kinship(k: &KinshipMatrix) -> Result<KinshipMatrix> {
    let n = k.n();
    if n < 2 {
        return invalid("kinship scaling needs at least two accessions");
    }
    let tr = linalg::centered_trace(&k.k);
    if tr <= 1e-12 {
        return Err(Error::DegenerateKinship(tr));
    }
    let factor = tr / (n - 1) as f64;
    Ok(KinshipMatrix {
        accession_ids: k.accession_ids.clone(),
        k: &k.k / factor,
        scaled: true,
        scale_factor: factor,
    })
}

/// Frequencies, marker filtering, kinship and optional scaling in one call.
pub fn kinship_from_genotypes(
    g: &GenotypeMatrix,
    mode: PloidyMode,
    maf_min: f64,
    scale: bool,
) -> Result<KinshipMatrix> {
    let freqs = allele_frequencies(g, mode)?;
    let (filtered, ffreqs) = filter_markers(g, &freqs, maf_min)?;
    let k = compute_kinship(&filtered, &ffreqs, mode)?;
    if scale {
        scale_kinship(&k)
    } else {
        Ok(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn geno(rows: &[&[f64]]) -> GenotypeMatrix {
        let n = rows.len();
        let p = rows[0].len();
        let calls = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        GenotypeMatrix::new(ids("a", n), ids("m", p), calls).unwrap()
    }

    /// Element-by-element evaluation of the kinship definition.
    fn naive_kinship(calls: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
        let (n, p) = calls.shape();
        let mut used = Vec::new();
        for l in 0..p {
            let f = calls.column(l).sum() / (2.0 * n as f64);
            if f > 0.0 && f < 1.0 {
                used.push((l, f));
            }
        }
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for &(l, f) in &used {
                    s += (calls[(i, l)] - 2.0 * f) * (calls[(j, l)] - 2.0 * f) / (c * f * (1.0 - f));
                }
                k[(i, j)] = s / used.len() as f64;
            }
        }
        k
    }

    #[test]
    fn frequency_examples() {
        let f = allele_frequencies(&geno(&[&[0.0], &[2.0]]), PloidyMode::Inbred).unwrap();
        assert_eq!(f.maf, vec![0.5]);
        let f = allele_frequencies(&geno(&[&[0.0], &[0.0], &[0.0], &[2.0]]), PloidyMode::Inbred).unwrap();
        assert_eq!(f.maf, vec![0.25]);
        let g = geno(&[&[0.0, 2.0], &[0.0, 0.0], &[0.0, 2.0], &[0.0, 2.0]]);
        let f = allele_frequencies(&g, PloidyMode::Inbred).unwrap();
        assert!(f.is_monomorphic(0));
        assert_eq!(f.maf[1], 0.25);
        assert!(f.flipped[1]);
        let (kept, kf) = filter_markers(&g, &f, 0.0).unwrap();
        assert_eq!(kept.marker_ids(), &["m1".to_string()]);
        assert_eq!(kept.calls().column(0).as_slice(), &[0.0, 2.0, 0.0, 0.0]);
        assert_eq!(kf.maf, vec![0.25]);
    }

    #[test]
    fn frequency_rejects_bad_calls() {
        assert!(allele_frequencies(&geno(&[&[1.0], &[2.0]]), PloidyMode::Inbred).is_err());
        assert!(allele_frequencies(&geno(&[&[1.0], &[2.0]]), PloidyMode::Outbred).is_ok());
        assert!(allele_frequencies(&geno(&[&[3.0], &[2.0]]), PloidyMode::Outbred).is_err());
        let empty = GenotypeMatrix::new(vec![], vec![], DMatrix::zeros(0, 0)).unwrap();
        assert!(allele_frequencies(&empty, PloidyMode::Inbred).is_err());
    }

    #[test]
    fn missing_calls_rejected_or_imputed() {
        let calls = DMatrix::from_row_slice(3, 1, &[Some(0.0), None, Some(2.0)]);
        let err = GenotypeMatrix::from_partial(ids("a", 3), ids("m", 1), calls.clone(), false).unwrap_err();
        assert!(matches!(err, Error::MissingValues { row: 1, column: 0, .. }));
        let g = GenotypeMatrix::from_partial(ids("a", 3), ids("m", 1), calls, true).unwrap();
        assert_eq!(g.calls()[(1, 0)], 1.0);
        assert_eq!(g.n_imputed(), 1);
        // the imputed cell is exempt from the call-set check
        assert!(allele_frequencies(&g, PloidyMode::Inbred).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = GenotypeMatrix::new(vec!["a".into(), "a".into()], ids("m", 1), DMatrix::zeros(2, 1));
        assert!(err.is_err());
    }

    #[test]
    fn kinship_two_accessions() {
        let g = geno(&[&[0.0], &[2.0]]);
        let f = allele_frequencies(&g, PloidyMode::Inbred).unwrap();
        let k = compute_kinship(&g, &f, PloidyMode::Inbred).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((k.k - &expected).amax() < 1e-14);
        assert!(!k.scaled);
    }

    #[test]
    fn kinship_three_by_two_matches_naive() {
        let g = geno(&[&[0.0, 0.0], &[2.0, 2.0], &[0.0, 2.0]]);
        let f = allele_frequencies(&g, PloidyMode::Inbred).unwrap();
        let (g2, f2) = filter_markers(&g, &f, 0.0).unwrap();
        let k = compute_kinship(&g2, &f2, PloidyMode::Inbred).unwrap();
        let oracle = naive_kinship(g.calls(), 4.0);
        assert!((k.k - oracle).amax() < 1e-12);
    }

    #[test]
    fn all_monomorphic_is_error() {
        let g = geno(&[&[2.0, 0.0], &[2.0, 0.0], &[2.0, 0.0]]);
        let f = allele_frequencies(&g, PloidyMode::Inbred).unwrap();
        assert!(matches!(filter_markers(&g, &f, 0.0), Err(Error::AllMonomorphic)));
        assert!(matches!(compute_kinship(&g, &f, PloidyMode::Inbred), Err(Error::AllMonomorphic)));
    }

    #[test]
    fn scale_examples() {
        let k = KinshipMatrix::new(ids("a", 2), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])).unwrap();
        let s = scale_kinship(&k).unwrap();
        assert!((s.scale_factor - 2.0).abs() < 1e-14);
        assert!((s.k[(0, 1)] + 0.5).abs() < 1e-14 && (s.k[(0, 0)] - 0.5).abs() < 1e-14);
        assert!(s.scaled);

        // already satisfies tr(PKP) = n - 1
        let p3 = DMatrix::identity(3, 3) - DMatrix::from_element(3, 3, 1.0 / 3.0);
        let k = KinshipMatrix::new(ids("a", 3), &p3 * 1.0).unwrap();
        let s = scale_kinship(&k).unwrap();
        assert!((s.scale_factor - 1.0).abs() < 1e-14);
        assert!((s.k - p3).amax() < 1e-14);

        let j = KinshipMatrix::new(ids("a", 4), DMatrix::from_element(4, 4, 1.0)).unwrap();
        assert!(matches!(scale_kinship(&j), Err(Error::DegenerateKinship(_))));
    }

    #[test]
    fn external_kinship_validation() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(KinshipMatrix::new(ids("a", 2), asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(KinshipMatrix::new(ids("a", 2), indef).is_err());
    }

    #[test]
    fn subset_reorders_and_reports_missing() {
        let k = KinshipMatrix::new(ids("a", 3), DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.1 * (i + j) as f64 })).unwrap();
        let s = k.subset(&["a2".to_string(), "a0".to_string()]).unwrap();
        assert_eq!(s.k[(0, 1)], k.k[(2, 0)]);
        assert_eq!(s.k[(0, 0)], k.k[(2, 2)]);
        match k.subset(&["zz".to_string()]) {
            Err(Error::MissingAccession(id)) => assert_eq!(id, "zz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn random_calls(n: usize, p: usize, allowed: &'static [f64]) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(proptest::sample::select(allowed), n * p)
            .prop_map(move |v| DMatrix::from_vec(n, p, v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kinship_matches_naive_loop(calls in random_calls(10, 50, &[0.0, 2.0])) {
            let g = GenotypeMatrix::new(ids("a", 10), ids("m", 50), calls.clone()).unwrap();
            let f = allele_frequencies(&g, PloidyMode::Inbred).unwrap();
            if let Ok((g2, f2)) = filter_markers(&g, &f, 0.0) {
                let k = compute_kinship(&g2, &f2, PloidyMode::Inbred).unwrap();
                let oracle = naive_kinship(&calls, 4.0);
                prop_assert!((&k.k - oracle).amax() < 1e-10);
                // centred scores: rows sum to zero
                for i in 0..10 {
                    prop_assert!(k.k.row(i).sum().abs() < 1e-8 * 10.0);
                }
                // outbred constant halves the variance, doubling K
                let ko = compute_kinship(&g2, &f2, PloidyMode::Outbred).unwrap();
                prop_assert!((&ko.k - &k.k * 2.0).amax() < 1e-10);
                if let Ok(s) = scale_kinship(&k) {
                    let tr = linalg::centered_trace(&s.k);
                    prop_assert!((tr - 9.0).abs() < 1e-8 * 9.0);
                    let again = scale_kinship(&s).unwrap();
                    prop_assert!((again.scale_factor - 1.0).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn outbred_kinship_matches_naive_loop(calls in random_calls(8, 30, &[0.0, 1.0, 2.0])) {
            let g = GenotypeMatrix::new(ids("a", 8), ids("m", 30), calls.clone()).unwrap();
            let f = allele_frequencies(&g, PloidyMode::Outbred).unwrap();
            if let Ok((g2, f2)) = filter_markers(&g, &f, 0.0) {
                let k = compute_kinship(&g2, &f2, PloidyMode::Outbred).unwrap();
                prop_assert!((&k.k - naive_kinship(&calls, 2.0)).amax() < 1e-10);
            }
        }
    }
}
