//! Covariate ingestion, standardization and the spectral structure of the
//! mean-difference covariance.

use std::collections::HashSet;
use std::io::Read;
use std::ops::Deref;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, fix_signs, numerical_rank, spectral_map, sym_eigen_desc};
use crate::rerandomizer::Assignment;

/// Raw covariates, one row per unit.
#[derive(Clone, Debug)]
pub struct CovariateMatrix {
    values: DMatrix<f64>,
    unit_ids: Vec<String>,
    column_names: Vec<String>,
}

impl CovariateMatrix {
    pub fn new(values: DMatrix<f64>, unit_ids: Vec<String>, column_names: Vec<String>) -> Result<Self> {
        let (n, d) = values.shape();
        if n < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 units, got {n}")));
        }
        if d < 1 {
            return Err(Error::InvalidParameter("need at least one covariate".into()));
        }
        if unit_ids.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: unit_ids.len() });
        }
        if column_names.len() != d {
            return Err(Error::LengthMismatch { expected: d, got: column_names.len() });
        }
        for i in 0..n {
            for j in 0..d {
                if !values[(i, j)].is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &unit_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateUnitId(id.clone()));
            }
        }
        Ok(Self { values, unit_ids, column_names })
    }

    /// Builds a matrix with generated ids (`u0`, `u1`, ...) and names (`x0`, ...).
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        let ids = (0..values.nrows()).map(|i| format!("u{i}")).collect();
        let names = (0..values.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(values, ids, names)
    }

    /// Reads CSV with a header row; the first column holds unit ids.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 2 {
            return Err(Error::SchemaViolation("covariate CSV needs an id column and at least one covariate".into()));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let d = names.len();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(Error::SchemaViolation(format!(
                    "row {} has {} fields, expected {}",
                    row + 1,
                    rec.len(),
                    d + 1
                )));
            }
            ids.push(rec[0].to_string());
            for (col, field) in rec.iter().skip(1).enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Parse(format!("row {}, column `{}`: `{field}` is not a number", row + 1, names[col]))
                })?;
                data.push(v);
            }
        }
        let n = ids.len();
        Self::new(DMatrix::from_row_slice(n, d, &data), ids, names)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_csv_reader(file)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn n_units(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.values.ncols()
    }

    /// Indices of columns whose sample variance is numerically zero.
    pub fn zero_variance_columns(&self) -> Vec<usize> {
        (0..self.n_covariates()).filter(|&j| column_sd(&self.values.column(j).into_owned()).is_none()).collect()
    }

    /// Copy without the zero-variance columns, plus the names removed.
    pub fn drop_zero_variance(&self) -> Result<(Self, Vec<String>)> {
        let drop = self.zero_variance_columns();
        if drop.is_empty() {
            return Ok((self.clone(), Vec::new()));
        }
        let keep: Vec<usize> = (0..self.n_covariates()).filter(|j| !drop.contains(j)).collect();
        let values = self.values.select_columns(&keep);
        let names = keep.iter().map(|&j| self.column_names[j].clone()).collect();
        let dropped = drop.iter().map(|&j| self.column_names[j].clone()).collect();
        Ok((Self::new(values, self.unit_ids.clone(), names)?, dropped))
    }
}

/// Mean and sample standard deviation, `None` when the column is constant.
fn column_sd(col: &DVector<f64>) -> Option<(f64, f64)> {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sd == 0.0 || sd <= 1e-12 * scale {
        None
    } else {
        Some((mean, sd))
    }
}

/// Σ together with its eigen and singular-vector structure.
#[derive(Clone, Debug, Serialize)]
pub struct SigmaGeometry {
    sigma: DMatrix<f64>,
    lambda: DVector<f64>,
    gamma: DMatrix<f64>,
    svd_v: DMatrix<f64>,
    #[serde(skip)]
    sqrt: DMatrix<f64>,
    rank: usize,
}

impl SigmaGeometry {
    /// Geometry of a population covariance given directly. The principal
    /// axes are taken to be the eigenvectors.
    pub fn from_sigma(sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() || sigma.nrows() == 0 {
            return Err(Error::DimensionMismatch { expected: sigma.nrows(), got: sigma.ncols() });
        }
        if linalg::max_asymmetry(&sigma) > 1e-8 * sigma.amax().max(1.0) {
            return Err(Error::NotPsd("covariance is not symmetric".into()));
        }
        let eig = linalg::check_psd(&sigma, "covariance")?;
        let v = eig.vectors.clone();
        Ok(Self::assemble(linalg::symmetrize(&sigma), eig, v))
    }

    fn assemble(sigma: DMatrix<f64>, eig: linalg::SymEigen, svd_v: DMatrix<f64>) -> Self {
        let lambda = eig.values.map(|v| v.max(0.0));
        let rank = numerical_rank(&lambda);
        let sqrt = spectral_map(&eig.vectors, &lambda, f64::sqrt);
        Self { sigma, lambda, gamma: eig.vectors, svd_v, sqrt, rank }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Eigenvalues of Σ, descending.
    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    /// Orthonormal eigenvectors of Σ, in the order of `lambda`.
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// Principal axes (right singular vectors of the standardized data).
    pub fn svd_v(&self) -> &DMatrix<f64> {
        &self.svd_v
    }

    pub fn sigma_sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.dim()
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        if !self.is_full_rank() {
            return Err(Error::SingularSigma { min: self.lambda[self.dim() - 1], max: self.lambda[0] });
        }
        Ok(spectral_map(&self.gamma, &self.lambda, |v| 1.0 / v))
    }
}

/// Standardized covariates with the treated share and the spectral
/// structure used throughout.
#[derive(Clone, Debug)]
pub struct DesignModel {
    x_std: DMatrix<f64>,
    rows: Vec<f64>,
    unit_ids: Vec<String>,
    column_names: Vec<String>,
    n1: usize,
    n0: usize,
    p: f64,
    geometry: SigmaGeometry,
    svd_d: DVector<f64>,
}

impl Deref for DesignModel {
    type Target = SigmaGeometry;

    fn deref(&self) -> &SigmaGeometry {
        &self.geometry
    }
}

impl DesignModel {
    pub fn n(&self) -> usize {
        self.x_std.nrows()
    }

    pub fn d(&self) -> usize {
        self.x_std.ncols()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn x_std(&self) -> &DMatrix<f64> {
        &self.x_std
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn svd_d(&self) -> &DVector<f64> {
        &self.svd_d
    }

    pub fn geometry(&self) -> &SigmaGeometry {
        &self.geometry
    }

    /// Row `i` of the standardized covariates.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.rows[i * d..(i + 1) * d]
    }

    /// Treated-minus-control mean difference for a 0/1 mask. The mask is
    /// assumed to have `n1` ones.
    pub(crate) fn diff_from_mask(&self, mask: &[u8]) -> DVector<f64> {
        let d = self.d();
        let mut t = vec![0.0; d];
        let mut c = vec![0.0; d];
        for (i, &wi) in mask.iter().enumerate() {
            let acc = if wi == 1 { &mut t } else { &mut c };
            for (a, x) in acc.iter_mut().zip(self.row(i)) {
                *a += x;
            }
        }
        let (n1, n0) = (self.n1 as f64, self.n0 as f64);
        DVector::from_iterator(d, t.iter().zip(&c).map(|(a, b)| a / n1 - b / n0))
    }
}

/// Centers and scales each covariate, then builds Σ = Cov(X)/(p(1−p)).
pub fn standardize(raw: &CovariateMatrix, p: f64) -> Result<DesignModel> {
    let (n, d) = raw.values.shape();
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("treated proportion {p} outside (0, 1)")));
    }
    let np = n as f64 * p;
    let n1 = np.round();
    if (np - n1).abs() > 1e-9 * np.max(1.0) || n1 < 1.0 || n1 >= n as f64 {
        return Err(Error::NonIntegerGroupSize(np));
    }
    let n1 = n1 as usize;

    let mut x_std = raw.values.clone();
    let mut sds = Vec::with_capacity(d);
    for j in 0..d {
        let col = raw.values.column(j).into_owned();
        let (mean, sd) = column_sd(&col).ok_or_else(|| Error::ZeroVarianceColumn(raw.column_names[j].clone()))?;
        sds.push(sd);
        for i in 0..n {
            x_std[(i, j)] = (raw.values[(i, j)] - mean) / sd;
        }
    }
    let (lo, hi) = sds.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &s| (l.min(s), h.max(s)));
    if hi > 10.0 * lo {
        log::info!("covariate scales differ by a factor of {:.1}; columns were standardized", hi / lo);
    }

    let pq = p * (1.0 - p);
    let cov = x_std.transpose() * &x_std / (n as f64 - 1.0);
    let sigma = linalg::symmetrize(&(cov / pq));
    let eig = sym_eigen_desc(&sigma);

    let (svd_v, svd_d) = if n >= d {
        let svd = x_std.clone().svd(false, true);
        let vt = svd.v_t.expect("right singular vectors requested");
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut v = DMatrix::zeros(d, d);
        for (k, &i) in order.iter().enumerate() {
            v.set_column(k, &vt.row(i).transpose());
        }
        fix_signs(&mut v);
        let s = DVector::from_iterator(d, order.iter().map(|&i| svd.singular_values[i]));
        (v, s)
    } else {
        // fewer units than covariates: the thin SVD lacks a full basis, so
        // the eigenvectors of Σ stand in for the trailing axes
        let s = eig.values.map(|l| (l.max(0.0) * (n as f64 - 1.0) * pq).sqrt());
        (eig.vectors.clone(), s)
    };

    let rows = (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| x_std[(i, j)]).collect();
    Ok(DesignModel {
        x_std,
        rows,
        unit_ids: raw.unit_ids.clone(),
        column_names: raw.column_names.clone(),
        n1,
        n0: n - n1,
        p,
        geometry: SigmaGeometry::assemble(sigma, eig, svd_v),
        svd_d,
    })
}

/// `X̄_T − X̄_C` and its `√n` scaling.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanDifference {
    pub tau_x: DVector<f64>,
    pub scaled: DVector<f64>,
}

impl MeanDifference {
    pub fn new(tau_x: DVector<f64>, n: usize) -> Self {
        let scaled = &tau_x * (n as f64).sqrt();
        Self { tau_x, scaled }
    }
}

pub fn mean_difference(design: &DesignModel, w: &Assignment) -> Result<MeanDifference> {
    if w.n() != design.n() {
        return Err(Error::LengthMismatch { expected: design.n(), got: w.n() });
    }
    if w.n1() != design.n1() {
        return Err(Error::GroupCountMismatch { expected: design.n1(), got: w.n1() });
    }
    Ok(MeanDifference::new(design.diff_from_mask(w.w()), design.n()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> CovariateMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        CovariateMatrix::from_values(m).unwrap()
    }

    #[test]
    fn standardized_two_columns_give_diagonal_four() {
        let raw =
            CovariateMatrix::from_values(DMatrix::from_row_slice(4, 2, &[-1.5, 1.0, -0.5, -1.0, 0.5, -1.0, 1.5, 1.0]))
                .unwrap();
        let design = standardize(&raw, 0.5).unwrap();
        assert_relative_eq!(design.sigma()[(0, 0)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(design.sigma()[(1, 1)], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicate_columns_are_rank_deficient() {
        let mut m = gaussian(30, 2, 3).values().clone();
        let c0 = m.column(0).into_owned();
        m.set_column(1, &c0);
        let design = standardize(&CovariateMatrix::from_values(m).unwrap(), 0.5).unwrap();
        assert!(design.lambda()[1].abs() < 1e-10 * design.lambda()[0]);
        assert_eq!(design.rank(), 1);
        assert!(matches!(design.inverse(), Err(Error::SingularSigma { .. })));
    }

    #[test]
    fn invariants_on_gaussian_input() {
        let design = standardize(&gaussian(100, 3, 11), 0.3).unwrap();
        let x = design.x_std();
        for col in x.column_iter() {
            let mean = col.sum() / 100.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-8);
        }
        let g = design.gamma();
        assert!((g.transpose() * g - DMatrix::identity(3, 3)).amax() <= 1e-10);
        let back = g * DMatrix::from_diagonal(design.lambda()) * g.transpose();
        assert!((back - design.sigma()).amax() <= 1e-8);
        assert_relative_eq!(design.sigma().trace() * 0.21, 3.0, epsilon = 1e-8);
        for j in 0..3 {
            let implied = design.svd_d()[j].powi(2) / (99.0 * 0.21);
            assert_relative_eq!(implied, design.lambda()[j], max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_variance_and_group_size_errors() {
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 2.0, 3.0, 2.0, 4.0, 2.0]);
        let raw = CovariateMatrix::from_values(m).unwrap();
        assert!(matches!(standardize(&raw, 0.5), Err(Error::ZeroVarianceColumn(ref c)) if c == "x1"));
        let raw = gaussian(5, 1, 1);
        assert!(matches!(standardize(&raw, 0.5), Err(Error::NonIntegerGroupSize(_))));
        assert!(matches!(standardize(&raw, 1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn hand_computed_mean_difference() {
        let raw = CovariateMatrix::from_values(DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5])).unwrap();
        let design = standardize(&raw, 0.5).unwrap();
        let sd = (5.0f64 / 3.0).sqrt();
        let w = Assignment::new(vec![1, 1, 0, 0]).unwrap();
        let md = mean_difference(&design, &w).unwrap();
        // treated mean (-1)/sd, control mean 1/sd
        assert_relative_eq!(md.tau_x[0], -2.0 / sd, epsilon = 1e-14);
        assert_relative_eq!(md.scaled[0], -4.0 / sd, epsilon = 1e-14);
        let flipped = mean_difference(&design, &w.flipped()).unwrap();
        assert_eq!(flipped.tau_x, -md.tau_x);
    }

    #[test]
    fn mean_difference_rejects_bad_assignments() {
        let design = standardize(&gaussian(6, 2, 5), 0.5).unwrap();
        let short = Assignment::new(vec![1, 0, 1, 0]).unwrap();
        assert!(matches!(mean_difference(&design, &short), Err(Error::LengthMismatch { .. })));
        let unbalanced = Assignment::new(vec![1, 1, 1, 1, 0, 0]).unwrap();
        assert!(matches!(mean_difference(&design, &unbalanced), Err(Error::GroupCountMismatch { .. })));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let text = "id,a,b\nu1,1.0,2\nu2,2.5,-1\nu3,0,0.5\n";
        let m = CovariateMatrix::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(m.unit_ids(), ["u1", "u2", "u3"]);
        assert_eq!(m.column_names(), ["a", "b"]);
        assert_eq!(m.values()[(1, 1)], -1.0);
        let dup = "id,a\nu1,1\nu1,2\n";
        assert!(matches!(CovariateMatrix::from_csv_reader(dup.as_bytes()), Err(Error::DuplicateUnitId(_))));
        let bad = "id,a\nu1,1\nu2,x\n";
        assert!(matches!(CovariateMatrix::from_csv_reader(bad.as_bytes()), Err(Error::Parse(_))));
        let nan = "id,a\nu1,1\nu2,NaN\n";
        assert!(matches!(CovariateMatrix::from_csv_reader(nan.as_bytes()), Err(Error::NonFinite { .. })));
    }
}
