//! Quadratic-form balance criteria `Q_A(v) = vᵀ A v` and their spectra.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariate::{MeanDifference, SigmaGeometry};
use crate::error::{Error, Result};
use crate::linalg::{self, numerical_rank, spectral_map, sym_eigen_desc};

/// Which matrix `A` a criterion uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum CriterionKind {
    Mahalanobis,
    Euclidean,
    SquaredEuclidean { exponent: f64 },
    Ridge { lambda: f64 },
    WeightedEuclidean { weights: Vec<f64> },
    PcaRestricted { k: usize, inner: Box<CriterionKind> },
    Oracle { beta: Vec<f64> },
    Custom { matrix: Vec<Vec<f64>> },
}

impl CriterionKind {
    /// Short human-readable name.
    pub fn label(&self) -> String {
        match self {
            CriterionKind::Mahalanobis => "mahalanobis".into(),
            CriterionKind::Euclidean => "euclidean".into(),
            CriterionKind::SquaredEuclidean { exponent } => format!("squared_euclidean(c={exponent})"),
            CriterionKind::Ridge { lambda } => format!("ridge({lambda})"),
            CriterionKind::WeightedEuclidean { .. } => "weighted_euclidean".into(),
            CriterionKind::PcaRestricted { k, inner } => format!("pca(k={k}, {})", inner.label()),
            CriterionKind::Oracle { .. } => "oracle".into(),
            CriterionKind::Custom { .. } => "custom".into(),
        }
    }

    pub fn pca_mahalanobis(k: usize) -> Self {
        CriterionKind::PcaRestricted { k, inner: Box::new(CriterionKind::Mahalanobis) }
    }
}

/// Extra structure kept for criteria restricted to the leading principal
/// components.
#[derive(Clone, Debug)]
pub struct PcaParts {
    pub k: usize,
    /// Eigenvectors of `Λ_k^{1/2} A_inner Λ_k^{1/2}`.
    pub omega_k: DMatrix<f64>,
    pub eta_k: DVector<f64>,
}

/// A materialized criterion with the spectrum of `Σ^{1/2} A Σ^{1/2}`.
#[derive(Clone, Debug)]
pub struct BalanceCriterion {
    kind: CriterionKind,
    a_matrix: DMatrix<f64>,
    eta: DVector<f64>,
    omega: DMatrix<f64>,
    rank: usize,
    pca: Option<PcaParts>,
}

impl BalanceCriterion {
    pub fn kind(&self) -> &CriterionKind {
        &self.kind
    }

    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a_matrix
    }

    /// Eigenvalues of `Σ^{1/2} A Σ^{1/2}`, descending and nonnegative.
    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn pca_parts(&self) -> Option<&PcaParts> {
        self.pca.as_ref()
    }

    /// The nonzero eigenvalues, which are all that matter for the law of Q.
    pub fn active_eta(&self) -> &[f64] {
        &self.eta.as_slice()[..self.rank]
    }

    /// Common value of the nonzero eigenvalues when they are all equal.
    pub fn constant_spectrum(&self) -> Option<f64> {
        let act = self.active_eta();
        let first = *act.first()?;
        act.iter().all(|&e| (e - first).abs() <= 1e-8 * first).then_some(first)
    }

    /// Stable hash of the spectrum, used to match variance factors to the
    /// criterion they were computed for.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.eta.len() as u64);
        for &e in self.eta.iter() {
            // rounded so harmless last-bit noise does not change the hash
            eat((e * 1e9).round().to_bits());
        }
        h
    }

    /// Same criterion with `A` multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.a_matrix *= c;
        out.eta *= c;
        out.rank = numerical_rank(&out.eta);
        out.kind = CriterionKind::Custom { matrix: matrix_rows(&out.a_matrix) };
        if let Some(p) = out.pca.as_mut() {
            p.eta_k *= c;
        }
        out
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn custom_matrix(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: rows.len() });
    }
    let mut m = DMatrix::zeros(d, d);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: r.len() });
        }
        for (j, &v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
            m[(i, j)] = v;
        }
    }
    let scale = m.amax().max(1.0);
    if linalg::max_asymmetry(&m) > 1e-8 * scale {
        return Err(Error::NotPsd(format!("matrix is asymmetric by {:e}", linalg::max_asymmetry(&m))));
    }
    let m = linalg::symmetrize(&m);
    linalg::check_psd(&m, "custom matrix")?;
    Ok(m)
}

/// `A` for a criterion acting on a space whose covariance has eigenpairs
/// `(vectors, values)`.
fn plain_matrix(kind: &CriterionKind, vectors: &DMatrix<f64>, values: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = values.len();
    let rank = numerical_rank(values);
    match kind {
        CriterionKind::Mahalanobis => {
            if rank < d {
                return Err(Error::SingularSigma { min: values[d - 1], max: values[0] });
            }
            Ok(spectral_map(vectors, values, |v| 1.0 / v))
        }
        CriterionKind::Euclidean => Ok(DMatrix::identity(d, d)),
        CriterionKind::SquaredEuclidean { exponent } => {
            if !(exponent.is_finite() && *exponent >= 0.0) {
                return Err(Error::InvalidParameter(format!("exponent must be >= 0, got {exponent}")));
            }
            let c = *exponent;
            Ok(spectral_map(vectors, values, |v| {
                if v > 0.0 {
                    v.powf(c)
                } else if c == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        CriterionKind::Ridge { lambda } => {
            if !(lambda.is_finite() && *lambda >= 0.0) {
                return Err(Error::InvalidParameter(format!("ridge lambda must be >= 0, got {lambda}")));
            }
            if *lambda == 0.0 && rank < d {
                return Err(Error::SingularSigma { min: values[d - 1], max: values[0] });
            }
            Ok(spectral_map(vectors, values, |v| 1.0 / (v + lambda)))
        }
        CriterionKind::WeightedEuclidean { weights } => {
            if weights.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: weights.len() });
            }
            if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::InvalidParameter("weights must be positive and finite".into()));
            }
            Ok(DMatrix::from_diagonal(&DVector::from_column_slice(weights)))
        }
        CriterionKind::Custom { matrix } => custom_matrix(matrix, d),
        CriterionKind::Oracle { beta } => {
            if beta.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: beta.len() });
            }
            let b = DVector::from_column_slice(beta);
            if b.iter().any(|v| !v.is_finite()) || b.norm() == 0.0 {
                return Err(Error::ZeroBeta);
            }
            Ok(&b * b.transpose())
        }
        CriterionKind::PcaRestricted { .. } => Err(Error::InvalidParameter("PCA restriction cannot be nested".into())),
    }
}

fn spectrum(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, usize) {
    let eig = sym_eigen_desc(m);
    let top = eig.values.iter().fold(0.0f64, |a, v| a.max(*v));
    let eta = eig.values.map(|v| if v < 1e-10 * top { v.max(0.0) } else { v });
    let rank = numerical_rank(&eta);
    (eta, eig.vectors, rank)
}

/// Materializes `A` for the given geometry and computes its spectrum.
pub fn build_criterion(kind: &CriterionKind, geometry: &SigmaGeometry) -> Result<BalanceCriterion> {
    let d = geometry.dim();
    if let CriterionKind::PcaRestricted { k, inner } = kind {
        let k = *k;
        if k == 0 || k > d {
            return Err(Error::InvalidParameter(format!("k must be in 1..={d}, got {k}")));
        }
        if k > geometry.rank() {
            return Err(Error::RankTooLarge { k, rank: geometry.rank() });
        }
        if matches!(**inner, CriterionKind::Oracle { .. }) {
            return Err(Error::InvalidParameter("oracle criterion cannot be PCA-restricted".into()));
        }
        let lam_k = geometry.lambda().rows(0, k).into_owned();
        let a_inner = plain_matrix(inner, &DMatrix::identity(k, k), &lam_k)?;
        let root = lam_k.map(f64::sqrt);
        let inner_m = DMatrix::from_diagonal(&root) * &a_inner * DMatrix::from_diagonal(&root);
        let (eta_k, omega_k, _) = spectrum(&linalg::symmetrize(&inner_m));

        let v = geometry.svd_v();
        let v_k = v.columns(0, k);
        let a_matrix = linalg::symmetrize(&(v_k * &a_inner * v_k.transpose()));

        let mut eta = DVector::zeros(d);
        eta.rows_mut(0, k).copy_from(&eta_k);
        let mut block = DMatrix::identity(d, d);
        block.view_mut((0, 0), (k, k)).copy_from(&omega_k);
        let omega = v * block;
        let rank = numerical_rank(&eta);
        return Ok(BalanceCriterion {
            kind: kind.clone(),
            a_matrix,
            eta,
            omega,
            rank,
            pca: Some(PcaParts { k, omega_k, eta_k }),
        });
    }

    let a_matrix = plain_matrix(kind, geometry.gamma(), geometry.lambda())?;
    let root = geometry.sigma_sqrt();
    let m = linalg::symmetrize(&(root * &a_matrix * root));
    let (eta, omega, rank) = spectrum(&m);
    Ok(BalanceCriterion { kind: kind.clone(), a_matrix, eta, omega, rank, pca: None })
}

/// `vᵀ A v` for a dense symmetric `A`, floored at zero.
pub fn quadratic_form(a: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let d = v.len();
    let mut total = 0.0;
    for j in 0..d {
        let col = a.column(j);
        let mut s = 0.0;
        for i in 0..d {
            s += col[i] * v[i];
        }
        total += s * v[j];
    }
    total.max(0.0)
}

pub fn qform_value(criterion: &BalanceCriterion, md: &MeanDifference) -> Result<f64> {
    if md.scaled.len() != criterion.dim() {
        return Err(Error::DimensionMismatch { expected: criterion.dim(), got: md.scaled.len() });
    }
    Ok(quadratic_form(&criterion.a_matrix, &md.scaled))
}

/// Number of eigenvalues strictly above their mean, at least one.
pub fn choose_k_kaiser(geometry: &SigmaGeometry) -> usize {
    let lam = geometry.lambda();
    let mean = lam.mean();
    lam.iter().filter(|&&l| l > mean * (1.0 + 1e-12)).count().max(1)
}

/// Smallest k whose leading eigenvalues explain at least `frac` of the total.
pub fn choose_k_variance_explained(geometry: &SigmaGeometry, frac: f64) -> Result<usize> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::InvalidParameter(format!("fraction must be in (0, 1], got {frac}")));
    }
    let lam = geometry.lambda();
    let total = lam.sum();
    let mut acc = 0.0;
    for (j, l) in lam.iter().enumerate() {
        acc += l;
        if acc >= frac * total * (1.0 - 1e-12) {
            return Ok(j + 1);
        }
    }
    Ok(lam.len())
}

/// How the weighted-eigenvalue rule evaluates the variance factor of a
/// Mahalanobis criterion on `j` components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KRuleNu {
    /// Truncated chi-square ratio, exact for this criterion.
    Exact,
    /// Small-ellipsoid approximation.
    Approx,
    /// Monte Carlo with the given draws and seed.
    MonteCarlo { draws: usize, seed: u64 },
}

/// Variance factor of PCA-Mahalanobis on `j` components at acceptance `alpha`.
pub fn mahalanobis_nu(j: usize, alpha: f64, method: KRuleNu) -> Result<f64> {
    use crate::special::{ball_constant, chi2_quantile, truncated_chi2_factor};
    match method {
        KRuleNu::Exact => Ok(truncated_chi2_factor(j, chi2_quantile(j as f64, alpha))),
        KRuleNu::Approx => Ok((ball_constant(j) * alpha.powf(2.0 / j as f64)).min(1.0)),
        KRuleNu::MonteCarlo { draws, seed } => {
            let eta = vec![1.0; j];
            let a = chi2_quantile(j as f64, alpha);
            let est =
                crate::diagnostics::weighted_chisq_nu(&eta, a, draws, crate::rng::derive_seed(seed, &[j as u64]))?;
            Ok(est.nu.iter().sum::<f64>() / j as f64)
        }
    }
}

/// Objective of the weighted-eigenvalue rule for each candidate `k = 1..=d`.
pub fn weighted_eigenvalue_objective(
    geometry: &SigmaGeometry,
    alpha: f64,
    beta_z: Option<&DVector<f64>>,
    method: KRuleNu,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let lam = geometry.lambda();
    let d = lam.len();
    let rank = geometry.rank();
    let weights: Vec<f64> = match beta_z {
        Some(b) => {
            if b.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: b.len() });
            }
            b.iter().map(|v| v * v).collect()
        }
        None => vec![1.0; d],
    };
    let wl: Vec<f64> = (0..d).map(|i| weights[i] * lam[i]).collect();
    let nu: Vec<f64> = (1..=rank)
        .map(|j| mahalanobis_nu(j, alpha, method))
        .collect::<Result<_>>()
        .map_err(|e| Error::NuEstimationFailed(e.to_string()))?;
    let nu_full = nu[rank - 1];
    Ok((1..=d)
        .map(|j| {
            if j > rank {
                return f64::NEG_INFINITY;
            }
            let kept: f64 = wl[..j].iter().sum::<f64>() * (nu_full - nu[j - 1]);
            let dropped: f64 = wl[j..].iter().sum::<f64>() * (1.0 - nu_full);
            kept - dropped
        })
        .collect())
}

/// Number of components maximizing the weighted-eigenvalue objective, ties
/// going to the smaller k.
pub fn choose_k_weighted_eigenvalue(
    geometry: &SigmaGeometry,
    alpha: f64,
    beta_z: Option<&DVector<f64>>,
    method: KRuleNu,
) -> Result<usize> {
    let obj = weighted_eigenvalue_objective(geometry, alpha, beta_z, method)?;
    let mut best = 0;
    for (j, &v) in obj.iter().enumerate() {
        if v > obj[best] + 1e-12 * obj[best].abs().max(1e-300) {
            best = j;
        }
    }
    Ok(best + 1)
}
