//! Data-generating processes for the experiments: Gaussian copula models
//! with gamma marginals (asymmetric and symmetrized) and the one-factor
//! model, plus the scalar laws they are built from.
//!
//! Structured correlation matrices are sampled in O(d) per draw (scalar
//! factor for equicorrelation, first-order recursion for AR(1)); no d x d
//! factorization is touched on those paths.

use ndarray::Array2;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovKind, CovarianceSpec, DataSet};
use crate::numeric;

/// A standardized scalar law (mean 0, variance 1) with known third moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScalarLaw {
    StandardNormal,
    /// `E - 1` with `E ~ Exp(1)`; third moment 2.
    StandardizedExponential,
    /// `(G - shape)/sqrt(shape)` with `G ~ Gamma(shape, 1)`; third moment
    /// `2/sqrt(shape)`.
    StandardizedGamma { shape: f64 },
}

impl ScalarLaw {
    pub fn third_moment(&self) -> f64 {
        match self {
            ScalarLaw::StandardNormal => 0.0,
            ScalarLaw::StandardizedExponential => 2.0,
            ScalarLaw::StandardizedGamma { shape } => 2.0 / shape.sqrt(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ScalarLaw::StandardNormal => rng.sample(rand_distr::StandardNormal),
            ScalarLaw::StandardizedExponential => {
                let e: f64 = rand_distr::Exp1.sample(rng);
                e - 1.0
            }
            ScalarLaw::StandardizedGamma { shape } => {
                let g = rand_distr::Gamma::new(*shape, 1.0).expect("positive shape");
                (g.sample(rng) - shape) / shape.sqrt()
            }
        }
    }

    /// Difference of two independent draws, rescaled to unit variance.
    /// Kills the third moment while keeping the law in the same family.
    pub fn sample_symmetrized<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        (self.sample(rng) - self.sample(rng)) * std::f64::consts::FRAC_1_SQRT_2
    }
}

/// Configuration of the Gaussian copula model: latent `Z ~ N(0, R)` pushed
/// through gamma marginal quantiles, centered at the analytic gamma mean.
/// With `symmetrize` set, each row is the difference of two independent
/// copula draws (no centering needed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CopulaConfig {
    pub corr: CovarianceSpec,
    pub marginal_shape: f64,
    pub marginal_scale: f64,
    pub symmetrize: bool,
    pub n: usize,
    pub d: usize,
}

impl CopulaConfig {
    pub fn validate(&self) -> Result<()> {
        self.corr.validate()?;
        if self.corr.d != self.d {
            return Err(Error::validation("copula corr dimension does not match d"));
        }
        if !(self.marginal_shape > 0.0 && self.marginal_scale > 0.0) {
            return Err(Error::validation(
                "copula marginal shape and scale must be positive",
            ));
        }
        if self.n == 0 || self.d == 0 {
            return Err(Error::validation("copula requires n >= 1 and d >= 1"));
        }
        check_unit_diagonal(&self.corr)
    }
}

/// One-factor model: row = sqrt(rho) U 1_d + sqrt(1-rho) V with scalar U and
/// coordinatewise independent V, both standardized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorConfig {
    pub rho: f64,
    pub d: usize,
    pub n: usize,
    pub u_law: ScalarLaw,
    pub v_law: ScalarLaw,
}

impl FactorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::validation(format!(
                "factor model requires rho in (0,1), got {}",
                self.rho
            )));
        }
        if self.n == 0 || self.d == 0 {
            return Err(Error::validation("factor model requires n, d >= 1"));
        }
        Ok(())
    }
}

fn check_unit_diagonal(corr: &CovarianceSpec) -> Result<()> {
    let ok = match &corr.kind {
        CovKind::IdentityScaled { sigma } => (*sigma - 1.0).abs() < 1e-12,
        CovKind::Equicorrelation { sigma, .. } => (*sigma - 1.0).abs() < 1e-12,
        CovKind::Ar1 { .. } => true,
        CovKind::Dense { matrix } => (0..corr.d).all(|j| (matrix[[j, j]] - 1.0).abs() < 1e-10),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::validation(
            "copula parameter matrix must have unit diagonal",
        ))
    }
}

/// Prepared sampler for `Z ~ N(0, R)`.
#[derive(Debug, Clone)]
pub enum CorrSampler {
    Independent { d: usize },
    Factor { sqrt_rho: f64, sqrt_1m: f64, d: usize },
    Ar1 { rho: f64, noise: f64, d: usize },
    Dense { chol: Array2<f64> },
}

impl CorrSampler {
    pub fn new(corr: &CovarianceSpec) -> Result<Self> {
        corr.validate()?;
        check_unit_diagonal(corr)?;
        Ok(match &corr.kind {
            CovKind::IdentityScaled { .. } => CorrSampler::Independent { d: corr.d },
            CovKind::Equicorrelation { rho, .. } => {
                if *rho == 0.0 {
                    CorrSampler::Independent { d: corr.d }
                } else {
                    CorrSampler::Factor {
                        sqrt_rho: rho.sqrt(),
                        sqrt_1m: (1.0 - rho).sqrt(),
                        d: corr.d,
                    }
                }
            }
            CovKind::Ar1 { rho } => CorrSampler::Ar1 {
                rho: *rho,
                noise: (1.0 - rho * rho).sqrt(),
                d: corr.d,
            },
            CovKind::Dense { matrix } => CorrSampler::Dense {
                chol: numeric::cholesky(matrix, crate::model::PD_PIVOT_TOL)
                    .map_err(|_| Error::validation("dense corr matrix is not positive definite"))?,
            },
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            CorrSampler::Independent { d }
            | CorrSampler::Factor { d, .. }
            | CorrSampler::Ar1 { d, .. } => *d,
            CorrSampler::Dense { chol } => chol.nrows(),
        }
    }

    /// Fill `out` with one draw of `Z`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            CorrSampler::Independent { .. } => {
                for z in out.iter_mut() {
                    *z = rng.sample(rand_distr::StandardNormal);
                }
            }
            CorrSampler::Factor { sqrt_rho, sqrt_1m, .. } => {
                let zeta: f64 = rng.sample(rand_distr::StandardNormal);
                let common = sqrt_rho * zeta;
                for z in out.iter_mut() {
                    let eps: f64 = rng.sample(rand_distr::StandardNormal);
                    *z = common + sqrt_1m * eps;
                }
            }
            CorrSampler::Ar1 { rho, noise, .. } => {
                let mut prev: f64 = rng.sample(rand_distr::StandardNormal);
                out[0] = prev;
                for z in out.iter_mut().skip(1) {
                    let eps: f64 = rng.sample(rand_distr::StandardNormal);
                    prev = rho * prev + noise * eps;
                    *z = prev;
                }
            }
            CorrSampler::Dense { chol } => {
                let d = chol.nrows();
                let eps: Vec<f64> = (0..d)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..=j {
                        acc += chol[[j, k]] * eps[k];
                    }
                    out[j] = acc;
                }
            }
        }
    }
}

/// One draw of `Z ~ N(0, R)`.
pub fn sample_corr_gaussian<R: Rng + ?Sized>(
    corr: &CovarianceSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sampler = CorrSampler::new(corr)?;
    let mut out = vec![0.0; sampler.dim()];
    sampler.sample_into(rng, &mut out);
    Ok(out)
}

/// Quantile of Gamma(shape, scale 1). Shape 1 and 1/2 use closed forms
/// (exponential and half chi-square); other shapes invert the regularized
/// incomplete gamma numerically to 1e-12.
pub fn gamma_quantile(shape: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation(format!(
            "gamma quantile requires p in (0,1), got {p}"
        )));
    }
    if !(shape > 0.0) {
        return Err(Error::validation("gamma quantile requires shape > 0"));
    }
    if shape == 1.0 {
        return Ok(-(-p).ln_1p());
    }
    if shape == 0.5 {
        let z = numeric::norm_quantile(0.5 * (1.0 + p))?;
        return Ok(0.5 * z * z);
    }
    // Wilson-Hilferty starting point, then safeguarded Newton on the
    // regularized lower incomplete gamma.
    let z = numeric::norm_quantile(p)?;
    let wh = 1.0 - 1.0 / (9.0 * shape) + z / (3.0 * shape.sqrt());
    let mut x = (shape * wh.powi(3)).max(1e-300);
    let cdf = |x: f64| statrs::function::gamma::gamma_lr(shape, x);
    let ln_gamma = statrs::function::gamma::ln_gamma(shape);
    let pdf = |x: f64| ((shape - 1.0) * x.ln() - x - ln_gamma).exp();
    let (mut lo, mut hi) = (0.0_f64, x.max(1.0));
    while cdf(hi) < p {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::validation("gamma quantile failed to bracket"));
        }
    }
    x = x.clamp(f64::MIN_POSITIVE, hi);
    for _ in 0..100 {
        let err = cdf(x) - p;
        if err.abs() <= 1e-12 {
            return Ok(x);
        }
        if err > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = pdf(x);
        let step = if dens > 0.0 { err / dens } else { 0.0 };
        let mut next = x - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        x = next;
    }
    Ok(x)
}

/// Gamma(shape, 1) quantile at `p = Phi(z)`, complement-aware so large `|z|`
/// keeps tail precision on the closed-form shapes.
fn gamma_quantile_from_normal(shape: f64, z: f64) -> Result<f64> {
    if shape == 1.0 {
        // -ln(1 - Phi(z)) = -ln(Phi(-z))
        let q = numeric::norm_sf(z).max(f64::MIN_POSITIVE);
        return Ok(-q.ln());
    }
    let p = numeric::norm_cdf(z).clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
    gamma_quantile(shape, p)
}

/// Generate a copula data set. Asymmetric mode subtracts the analytic gamma
/// mean `shape * scale`; symmetric mode returns the difference of two
/// independent copula draws.
pub fn gen_copula<R: Rng + ?Sized>(cfg: &CopulaConfig, rng: &mut R) -> Result<DataSet> {
    cfg.validate()?;
    let sampler = CorrSampler::new(&cfg.corr)?;
    let mut values = Array2::<f64>::zeros((cfg.n, cfg.d));
    let mut z = vec![0.0; cfg.d];
    let mean = cfg.marginal_shape * cfg.marginal_scale;
    for mut row in values.rows_mut() {
        if cfg.symmetrize {
            sampler.sample_into(rng, &mut z);
            for (x, &zj) in row.iter_mut().zip(&z) {
                *x = cfg.marginal_scale * gamma_quantile_from_normal(cfg.marginal_shape, zj)?;
            }
            sampler.sample_into(rng, &mut z);
            for (x, &zj) in row.iter_mut().zip(&z) {
                *x -= cfg.marginal_scale * gamma_quantile_from_normal(cfg.marginal_shape, zj)?;
            }
        } else {
            sampler.sample_into(rng, &mut z);
            for (x, &zj) in row.iter_mut().zip(&z) {
                *x =
                    cfg.marginal_scale * gamma_quantile_from_normal(cfg.marginal_shape, zj)? - mean;
            }
        }
    }
    DataSet::new(values)
}

/// Test hook: run the marginal transform on externally supplied latent
/// matrices instead of fresh draws. Asymmetric mode uses `z1`; symmetric mode
/// uses the pair.
pub fn gen_copula_from_latent(
    cfg: &CopulaConfig,
    z1: &Array2<f64>,
    z2: Option<&Array2<f64>>,
) -> Result<DataSet> {
    cfg.validate()?;
    if z1.nrows() != cfg.n || z1.ncols() != cfg.d {
        return Err(Error::validation("latent matrix shape mismatch"));
    }
    let mean = cfg.marginal_shape * cfg.marginal_scale;
    let mut values = Array2::<f64>::zeros((cfg.n, cfg.d));
    for i in 0..cfg.n {
        for j in 0..cfg.d {
            values[[i, j]] =
                cfg.marginal_scale * gamma_quantile_from_normal(cfg.marginal_shape, z1[[i, j]])?;
        }
    }
    if cfg.symmetrize {
        let z2 =
            z2.ok_or_else(|| Error::validation("symmetric mode needs a second latent matrix"))?;
        if z2.dim() != z1.dim() {
            return Err(Error::validation("latent matrix shape mismatch"));
        }
        for i in 0..cfg.n {
            for j in 0..cfg.d {
                values[[i, j]] -= cfg.marginal_scale
                    * gamma_quantile_from_normal(cfg.marginal_shape, z2[[i, j]])?;
            }
        }
    } else {
        values -= mean;
    }
    DataSet::new(values)
}

/// Generate a one-factor data set.
pub fn gen_factor<R: Rng + ?Sized>(cfg: &FactorConfig, rng: &mut R) -> Result<DataSet> {
    cfg.validate()?;
    let sr = cfg.rho.sqrt();
    let si = (1.0 - cfg.rho).sqrt();
    let mut values = Array2::<f64>::zeros((cfg.n, cfg.d));
    for mut row in values.rows_mut() {
        let u = cfg.u_law.sample(rng);
        let common = sr * u;
        for x in row.iter_mut() {
            *x = common + si * cfg.v_law.sample(rng);
        }
    }
    DataSet::new(values)
}

/// Rows of i.i.d. standardized coordinates (the spherical design). With
/// `symmetrize`, each coordinate is a symmetrized draw of the law.
pub fn gen_iid<R: Rng + ?Sized>(
    law: &ScalarLaw,
    n: usize,
    d: usize,
    symmetrize: bool,
    rng: &mut R,
) -> Result<DataSet> {
    if n == 0 || d == 0 {
        return Err(Error::validation("iid design requires n, d >= 1"));
    }
    let mut values = Array2::<f64>::zeros((n, d));
    for x in values.iter_mut() {
        *x = if symmetrize {
            law.sample_symmetrized(rng)
        } else {
            law.sample(rng)
        };
    }
    DataSet::new(values)
}
