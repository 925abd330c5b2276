//! Core domain types: covariance specifications, data sets, and the
//! exchangeable third-moment summary used by the expansion formulas.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

/// Pivot tolerance for the positive-definiteness check of dense specs.
pub const PD_PIVOT_TOL: f64 = 1e-10;

/// Structured description of a covariance matrix. The structured variants
/// unlock closed-form and one-dimensional quadrature paths downstream; the
/// dense variant falls back to quadrature (small d) or Monte Carlo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CovKind {
    /// `sigma^2 * I_d`.
    IdentityScaled { sigma: f64 },
    /// Unit-free equicorrelation: `sigma^2 * (rho 11^T + (1-rho) I_d)`.
    Equicorrelation { rho: f64, sigma: f64 },
    /// Entry `(j,k) = rho^|j-k|`, unit diagonal.
    Ar1 { rho: f64 },
    /// Explicit symmetric positive definite matrix.
    Dense {
        #[serde(with = "dense_matrix_serde")]
        matrix: Array2<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub d: usize,
    pub kind: CovKind,
}

impl CovarianceSpec {
    pub fn identity_scaled(d: usize, sigma: f64) -> Result<Self> {
        let spec = CovarianceSpec {
            d,
            kind: CovKind::IdentityScaled { sigma },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn equicorrelation(d: usize, rho: f64, sigma: f64) -> Result<Self> {
        let spec = CovarianceSpec {
            d,
            kind: CovKind::Equicorrelation { rho, sigma },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ar1(d: usize, rho: f64) -> Result<Self> {
        let spec = CovarianceSpec {
            d,
            kind: CovKind::Ar1 { rho },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Dense specs are validated eagerly: symmetry and positive definiteness
    /// (via a pivoted factorization) are required before any use of
    /// `phi_Sigma` or `Sigma^{-1}` downstream.
    pub fn dense(matrix: Array2<f64>) -> Result<Self> {
        let d = matrix.nrows();
        let spec = CovarianceSpec {
            d,
            kind: CovKind::Dense { matrix },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::validation("dimension must be positive"));
        }
        match &self.kind {
            CovKind::IdentityScaled { sigma } => {
                if !(*sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::validation("IdentityScaled requires sigma > 0"));
                }
            }
            CovKind::Equicorrelation { rho, sigma } => {
                if !(*sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::validation("Equicorrelation requires sigma > 0"));
                }
                if !(*rho >= 0.0 && *rho < 1.0) {
                    return Err(Error::validation(format!(
                        "Equicorrelation requires rho in [0,1), got {rho}"
                    )));
                }
            }
            CovKind::Ar1 { rho } => {
                if !(rho.abs() < 1.0) {
                    return Err(Error::validation(format!(
                        "AR1 requires |rho| < 1, got {rho}"
                    )));
                }
            }
            CovKind::Dense { matrix } => {
                if matrix.nrows() != self.d || matrix.ncols() != self.d {
                    return Err(Error::validation("dense matrix shape does not match d"));
                }
                for i in 0..self.d {
                    if !(matrix[[i, i]] > 0.0) {
                        return Err(Error::validation(
                            "dense matrix must have positive diagonal entries",
                        ));
                    }
                    for j in 0..self.d {
                        if !matrix[[i, j]].is_finite() {
                            return Err(Error::validation("dense matrix has non-finite entries"));
                        }
                        if (matrix[[i, j]] - matrix[[j, i]]).abs()
                            > 1e-12 * (1.0 + matrix[[i, i]].abs())
                        {
                            return Err(Error::validation("dense matrix is not symmetric"));
                        }
                    }
                }
                numeric::cholesky(matrix, PD_PIVOT_TOL)
                    .map_err(|_| Error::validation("dense matrix is not positive definite"))?;
            }
        }
        Ok(())
    }

    /// True when all diagonal entries are equal and all off-diagonal entries
    /// are equal; such specs admit the pattern-compressed integral paths.
    pub fn is_exchangeable(&self) -> bool {
        matches!(
            self.kind,
            CovKind::IdentityScaled { .. } | CovKind::Equicorrelation { .. }
        ) || self.d == 1
    }

    /// Common standard deviation of the coordinates for exchangeable specs.
    pub fn exchangeable_sigma(&self) -> Option<f64> {
        match self.kind {
            CovKind::IdentityScaled { sigma } => Some(sigma),
            CovKind::Equicorrelation { sigma, .. } => Some(sigma),
            CovKind::Ar1 { .. } => Some(1.0),
            CovKind::Dense { ref matrix } if self.d == 1 => Some(matrix[[0, 0]].sqrt()),
            _ => None,
        }
    }

    /// Correlation parameter of the exchangeable representation
    /// (0 for identity-scaled specs).
    pub fn exchangeable_rho(&self) -> Option<f64> {
        match self.kind {
            CovKind::IdentityScaled { .. } => Some(0.0),
            CovKind::Equicorrelation { rho, .. } => Some(rho),
            _ if self.d == 1 => Some(0.0),
            _ => None,
        }
    }
}

/// Materialize the full matrix described by a spec.
pub fn materialize_cov(spec: &CovarianceSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let d = spec.d;
    let m = match &spec.kind {
        CovKind::IdentityScaled { sigma } => Array2::eye(d) * (sigma * sigma),
        CovKind::Equicorrelation { rho, sigma } => {
            let s2 = sigma * sigma;
            Array2::from_shape_fn((d, d), |(j, k)| if j == k { s2 } else { s2 * rho })
        }
        CovKind::Ar1 { rho } => {
            Array2::from_shape_fn((d, d), |(j, k)| rho.powi((j as i32 - k as i32).abs()))
        }
        CovKind::Dense { matrix } => matrix.clone(),
    };
    Ok(m)
}

/// An n x d matrix of observations, one row per observation.
#[derive(Debug, Clone)]
pub struct DataSet {
    values: Array2<f64>,
}

impl DataSet {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::validation("data set must have n >= 1 and d >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("data set contains non-finite entries"));
        }
        Ok(DataSet { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(i)
    }
}

/// The three index-pattern contractions of the empirical third-moment tensor:
/// `s1` over triples with one distinct index, `s2` over ordered pairs with a
/// repeated index, `s3` over ordered triples of distinct indices. Together
/// with pattern-compressed rectangle integrals these give O(nd) contractions
/// for exchangeable covariances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThirdMomentSummary {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub n: usize,
    pub d: usize,
}

impl ThirdMomentSummary {
    /// s1 + 3 s2 + s3 = mean of (row sum)^3; handy for sanity checks.
    pub fn total(&self) -> f64 {
        self.s1 + 3.0 * self.s2 + self.s3
    }
}

/// Compute the pattern sums in O(nd) using the row-sum identities.
pub fn third_moment_summary(data: &DataSet) -> ThirdMomentSummary {
    let n = data.n();
    let d = data.dim();
    let mut s1 = 0.0;
    let mut sum_q = 0.0; // (1/n) sum_i (sum_j x_ij^2) * s_i
    let mut sum_c = 0.0; // (1/n) sum_i s_i^3
    for row in data.values().rows() {
        let mut s = 0.0;
        let mut q = 0.0;
        let mut c = 0.0;
        for &x in row {
            s += x;
            q += x * x;
            c += x * x * x;
        }
        s1 += c;
        sum_q += q * s;
        sum_c += s * s * s;
    }
    let nf = n as f64;
    s1 /= nf;
    sum_q /= nf;
    sum_c /= nf;
    let s2 = sum_q - s1;
    let s3 = sum_c - 3.0 * s2 - s1;
    ThirdMomentSummary { s1, s2, s3, n, d }
}

mod dense_matrix_serde {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect())
            .map_err(serde::de::Error::custom)
    }
}
