//! Gaussian-max analytics: Hermite-based derivatives of the normal density,
//! rectangle integrals of density gradients, the CDF/density/quantile of
//! `max_j Z_j`, and diagnostic quantities.
//!
//! Rectangle integrals `int_{(-inf,t]^d} grad^r phi_Sigma(z) dz` come in two
//! representations:
//!
//! - **Pattern** (identity-scaled and equicorrelation Sigma): entries depend
//!   only on the multiplicity pattern of the indices. Equicorrelation values
//!   are one-dimensional Gauss–Hermite integrals over the scalar factor,
//!   obtained by differentiating `P(Z - x in A(t))` at `x = 0`.
//! - **Dense** (d <= 12): tensor-product Gauss–Legendre quadrature of the
//!   analytic derivatives, with the node budget shrinking geometrically in d.
//!   This is the small-d oracle the pattern path is verified against.
//!
//! Thresholds beyond 40 marginal standard deviations are treated as exact
//! 0/1 tails; quadrature boxes are truncated at 12 standard deviations where
//! the density is below 1e-31.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{materialize_cov, CovKind, CovarianceSpec, PD_PIVOT_TOL};
use crate::numeric::{self, norm_cdf, norm_pdf, norm_quantile};
use crate::random::{Purpose, StreamKey};

/// Dimension cap for the dense tensor-product quadrature path.
pub const DENSE_DIM_CAP: usize = 12;

/// Gauss–Hermite node count for equicorrelation factor integrals.
const FACTOR_GH_NODES: usize = 200;

/// Stability cap for Hermite-polynomial orders.
const HERMITE_ORDER_CAP: usize = 20;

/// Beyond this many standard deviations the CDF is treated as exactly 0/1.
const TAIL_CUTOFF_SD: f64 = 40.0;

/// Quadrature boxes stop here: the standard normal density at 12 is ~2e-32.
const BOX_SD: f64 = 12.0;

/// Probabilists' Hermite polynomial by the three-term recurrence
/// `H_{m+1}(t) = t H_m(t) - m H_{m-1}(t)`.
pub fn hermite(m: usize, t: f64) -> Result<f64> {
    if m > HERMITE_ORDER_CAP {
        return Err(Error::capability(format!(
            "Hermite order {m} above stability cap {HERMITE_ORDER_CAP}"
        )));
    }
    let mut prev = 1.0; // H_0
    if m == 0 {
        return Ok(prev);
    }
    let mut cur = t; // H_1
    for k in 1..m {
        let next = t * cur - (k as f64) * prev;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// m-th derivative of the standard normal density:
/// `phi^(m)(t) = (-1)^m H_m(t) phi(t)`.
pub fn phi_derivative(m: usize, t: f64) -> Result<f64> {
    let h = hermite(m, t)?;
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sign * h * norm_pdf(t))
}

/// Requested computational path for rectangle integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathHint {
    #[default]
    Auto,
    Pattern,
    Dense,
}

/// Pattern-compressed entries of a rectangle gradient integral for
/// exchangeable covariances, keyed by the index multiplicity pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatternValues {
    Grad1 { all: f64 },
    Grad2 { diag: f64, off: f64 },
    Grad3 { all_same: f64, two_same: f64, all_distinct: f64 },
}

/// The integral `int_{(-inf,t]^d} grad^r phi_Sigma(z) dz` in dense or
/// pattern-compressed form. Fully symmetric under index permutation.
#[derive(Debug, Clone)]
pub enum RectGradTensor {
    Pattern {
        d: usize,
        threshold: f64,
        values: PatternValues,
    },
    Dense {
        d: usize,
        order: u8,
        threshold: f64,
        /// Row-major `d^order` array.
        values: Vec<f64>,
    },
}

impl RectGradTensor {
    pub fn dim(&self) -> usize {
        match self {
            RectGradTensor::Pattern { d, .. } | RectGradTensor::Dense { d, .. } => *d,
        }
    }

    pub fn order(&self) -> u8 {
        match self {
            RectGradTensor::Pattern { values, .. } => match values {
                PatternValues::Grad1 { .. } => 1,
                PatternValues::Grad2 { .. } => 2,
                PatternValues::Grad3 { .. } => 3,
            },
            RectGradTensor::Dense { order, .. } => *order,
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            RectGradTensor::Pattern { threshold, .. } | RectGradTensor::Dense { threshold, .. } => {
                *threshold
            }
        }
    }

    /// Entry at a multi-index of length `order`.
    pub fn entry(&self, idx: &[usize]) -> f64 {
        match self {
            RectGradTensor::Pattern { values, .. } => match (values, idx) {
                (PatternValues::Grad1 { all }, [_]) => *all,
                (PatternValues::Grad2 { diag, off }, [j, k]) => {
                    if j == k {
                        *diag
                    } else {
                        *off
                    }
                }
                (PatternValues::Grad3 { all_same, two_same, all_distinct }, [j, k, l]) => {
                    if j == k && k == l {
                        *all_same
                    } else if j != k && k != l && j != l {
                        *all_distinct
                    } else {
                        *two_same
                    }
                }
                _ => panic!("index length does not match tensor order"),
            },
            RectGradTensor::Dense { d, order, values, .. } => {
                assert_eq!(idx.len(), *order as usize);
                let mut flat = 0;
                for &i in idx {
                    flat = flat * d + i;
                }
                values[flat]
            }
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        match self {
            RectGradTensor::Pattern { values, d, .. } => match values {
                PatternValues::Grad1 { all } => all.abs(),
                PatternValues::Grad2 { diag, off } => {
                    if *d >= 2 {
                        diag.abs().max(off.abs())
                    } else {
                        diag.abs()
                    }
                }
                PatternValues::Grad3 { all_same, two_same, all_distinct } => {
                    let mut m = all_same.abs();
                    if *d >= 2 {
                        m = m.max(two_same.abs());
                    }
                    if *d >= 3 {
                        m = m.max(all_distinct.abs());
                    }
                    m
                }
            },
            RectGradTensor::Dense { values, .. } => {
                values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
            }
        }
    }

    /// Contraction with the all-ones tensor of matching order.
    pub fn sum_all(&self) -> f64 {
        match self {
            RectGradTensor::Pattern { d, values, .. } => {
                let df = *d as f64;
                match values {
                    PatternValues::Grad1 { all } => df * all,
                    PatternValues::Grad2 { diag, off } => df * diag + df * (df - 1.0) * off,
                    PatternValues::Grad3 { all_same, two_same, all_distinct } => {
                        df * all_same
                            + 3.0 * df * (df - 1.0) * two_same
                            + df * (df - 1.0) * (df - 2.0) * all_distinct
                    }
                }
            }
            RectGradTensor::Dense { values, .. } => values.iter().sum(),
        }
    }

    /// Order-2 tensor as a full matrix.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.order() != 2 {
            return Err(Error::validation("to_matrix requires an order-2 tensor"));
        }
        let d = self.dim();
        Ok(match self {
            RectGradTensor::Pattern { values, .. } => {
                let PatternValues::Grad2 { diag, off } = values else {
                    unreachable!()
                };
                Array2::from_shape_fn((d, d), |(j, k)| if j == k { *diag } else { *off })
            }
            RectGradTensor::Dense { values, .. } => {
                Array2::from_shape_fn((d, d), |(j, k)| values[j * d + k])
            }
        })
    }
}

/// Expectation over the scalar factor of an equicorrelation spec. `rho = 0`
/// evaluates the integrand at the threshold directly. For steep transforms
/// (`rho > 0.95`) the fixed Gauss–Hermite rule under-resolves the transition
/// region, so a seeded adaptive rule takes over.
fn factor_expectation<G: Fn(f64) -> f64>(d: usize, rho: f64, u0: f64, g: G) -> f64 {
    let _ = d;
    if rho == 0.0 {
        return g(u0);
    }
    let sr = rho.sqrt();
    let s1m = (1.0 - rho).sqrt();
    let u = |zeta: f64| (u0 - sr * zeta) / s1m;
    if rho <= 0.95 {
        let rule = factor_rule();
        let mut acc = 0.0;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            acc += w * g(u(std::f64::consts::SQRT_2 * x));
        }
        return acc / std::f64::consts::PI.sqrt();
    }
    // transition window: zeta values where |u(zeta)| <= cutoff
    let z_hi = (u0 + TAIL_CUTOFF_SD * s1m) / sr;
    let z_lo = (u0 - TAIL_CUTOFF_SD * s1m) / sr;
    let mut cuts: Vec<f64> = vec![-13.0, 13.0, z_lo.clamp(-13.0, 13.0), z_hi.clamp(-13.0, 13.0)];
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    numeric::integrate_seeded(&|zeta: f64| norm_pdf(zeta) * g(u(zeta)), &cuts, 1e-13)
}

fn factor_rule() -> &'static numeric::QuadRule {
    static RULE: std::sync::OnceLock<numeric::QuadRule> = std::sync::OnceLock::new();
    RULE.get_or_init(|| numeric::gauss_hermite(FACTOR_GH_NODES))
}

/// Phi(u)^m with a guard for m = 0 at small d.
#[inline]
fn cdf_pow(u: f64, m: i64) -> f64 {
    if m <= 0 {
        1.0
    } else {
        norm_cdf(u).powi(m.min(i32::MAX as i64) as i32)
    }
}

/// Pattern values for an exchangeable spec (unit-free scaling applied).
fn pattern_rect_grad(d: usize, rho: f64, sigma: f64, t: f64, order: u8) -> PatternValues {
    let u0 = t / sigma;
    let df = d as i64;
    let s_factor = if rho > 0.0 { 1.0 / (1.0 - rho).sqrt() } else { 1.0 };
    let scale = |k: u32| s_factor.powi(k as i32) / sigma.powi(k as i32);
    match order {
        1 => {
            let all = factor_expectation(d, rho, u0, |u| norm_pdf(u) * cdf_pow(u, df - 1));
            PatternValues::Grad1 { all: all * scale(1) }
        }
        2 => {
            let diag = factor_expectation(d, rho, u0, |u| -u * norm_pdf(u) * cdf_pow(u, df - 1));
            let off = if d >= 2 {
                factor_expectation(d, rho, u0, |u| {
                    let p = norm_pdf(u);
                    p * p * cdf_pow(u, df - 2)
                })
            } else {
                0.0
            };
            PatternValues::Grad2 {
                diag: diag * scale(2),
                off: off * scale(2),
            }
        }
        3 => {
            let all_same = factor_expectation(d, rho, u0, |u| {
                (u * u - 1.0) * norm_pdf(u) * cdf_pow(u, df - 1)
            });
            let two_same = if d >= 2 {
                factor_expectation(d, rho, u0, |u| {
                    let p = norm_pdf(u);
                    -u * p * p * cdf_pow(u, df - 2)
                })
            } else {
                0.0
            };
            let all_distinct = if d >= 3 {
                factor_expectation(d, rho, u0, |u| {
                    let p = norm_pdf(u);
                    p * p * p * cdf_pow(u, df - 3)
                })
            } else {
                0.0
            };
            PatternValues::Grad3 {
                all_same: all_same * scale(3),
                two_same: two_same * scale(3),
                all_distinct: all_distinct * scale(3),
            }
        }
        _ => unreachable!("order validated by caller"),
    }
}

/// Node budget for the tensor-product quadrature; shrinks geometrically so
/// the total point count stays workable up to the dimension cap.
fn dense_nodes_for(d: usize) -> usize {
    const TABLE: [usize; 13] = [0, 96, 64, 40, 28, 20, 16, 13, 11, 8, 7, 6, 6];
    TABLE[d]
}

/// Dense rectangle integral of `grad^order phi_Sigma` over `(-inf, t]^d` by
/// tensor-product Gauss–Legendre quadrature with analytic derivatives.
fn dense_rect_grad(cov: &Array2<f64>, t: f64, order: u8) -> Result<Vec<f64>> {
    let d = cov.nrows();
    if d > DENSE_DIM_CAP {
        return Err(Error::capability(format!(
            "dense rectangle quadrature capped at d = {DENSE_DIM_CAP}, got {d}"
        )));
    }
    let len = d.pow(order as u32);
    let (inv, log_det) = numeric::spd_inverse(cov, PD_PIVOT_TOL)?;
    let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);

    // per-dimension panels [-12 sd, min(t, 12 sd)]
    let n_nodes = dense_nodes_for(d);
    let rule = numeric::gauss_legendre(n_nodes);
    let mut nodes = vec![0.0; d * n_nodes];
    let mut weights = vec![0.0; d * n_nodes];
    for j in 0..d {
        let sd = cov[[j, j]].sqrt();
        let lo = -BOX_SD * sd;
        let hi = t.min(BOX_SD * sd);
        if hi <= lo {
            return Ok(vec![0.0; len]); // below the truncation box: all mass gone
        }
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (i, (&x, &w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
            nodes[j * n_nodes + i] = mid + half * x;
            weights[j * n_nodes + i] = w * half;
        }
    }

    // unique index multisets, scattered to the full tensor afterwards
    let mut multisets: Vec<Vec<usize>> = Vec::new();
    match order {
        1 => {
            for j in 0..d {
                multisets.push(vec![j]);
            }
        }
        2 => {
            for j in 0..d {
                for k in j..d {
                    multisets.push(vec![j, k]);
                }
            }
        }
        3 => {
            for j in 0..d {
                for k in j..d {
                    for l in k..d {
                        multisets.push(vec![j, k, l]);
                    }
                }
            }
        }
        _ => return Err(Error::validation("rectangle integrals support orders 1-3")),
    }
    let mut acc = vec![0.0_f64; multisets.len()];

    let mut idx = vec![0usize; d];
    let mut z = vec![0.0_f64; d];
    let mut y = vec![0.0_f64; d];
    loop {
        let mut wt = 1.0;
        for j in 0..d {
            z[j] = nodes[j * n_nodes + idx[j]];
            wt *= weights[j * n_nodes + idx[j]];
        }
        let mut quad = 0.0;
        for j in 0..d {
            let mut acc_y = 0.0;
            for k in 0..d {
                acc_y += inv[[j, k]] * z[k];
            }
            y[j] = acc_y;
            quad += acc_y * z[j];
        }
        let dens = (log_norm - 0.5 * quad).exp() * wt;
        for (slot, ms) in multisets.iter().enumerate() {
            let v = match order {
                1 => -y[ms[0]],
                2 => {
                    let (j, k) = (ms[0], ms[1]);
                    y[j] * y[k] - inv[[j, k]]
                }
                _ => {
                    let (j, k, l) = (ms[0], ms[1], ms[2]);
                    inv[[j, k]] * y[l] + inv[[j, l]] * y[k] + inv[[k, l]] * y[j]
                        - y[j] * y[k] * y[l]
                }
            };
            acc[slot] += v * dens;
        }
        // odometer
        let mut dim = 0;
        loop {
            if dim == d {
                break;
            }
            idx[dim] += 1;
            if idx[dim] < n_nodes {
                break;
            }
            idx[dim] = 0;
            dim += 1;
        }
        if dim == d {
            break;
        }
    }

    // scatter symmetric values
    let mut values = vec![0.0_f64; len];
    for (slot, ms) in multisets.iter().enumerate() {
        let v = acc[slot];
        match order {
            1 => values[ms[0]] = v,
            2 => {
                let (j, k) = (ms[0], ms[1]);
                values[j * d + k] = v;
                values[k * d + j] = v;
            }
            _ => {
                let (j, k, l) = (ms[0], ms[1], ms[2]);
                let mut perms = [[j, k, l], [j, l, k], [k, j, l], [k, l, j], [l, j, k], [l, k, j]];
                perms.sort();
                for p in perms {
                    values[(p[0] * d + p[1]) * d + p[2]] = v;
                }
            }
        }
    }
    Ok(values)
}

/// The rectangle integral of `grad^order phi_Sigma` over `(-inf, t]^d`.
pub fn rect_grad_integral(
    spec: &CovarianceSpec,
    t: f64,
    order: u8,
    hint: PathHint,
) -> Result<RectGradTensor> {
    spec.validate()?;
    if !(1..=3).contains(&order) {
        return Err(Error::validation("rectangle integrals support orders 1-3"));
    }
    let use_pattern = match hint {
        PathHint::Pattern => {
            if !spec.is_exchangeable() {
                return Err(Error::capability(
                    "pattern path requires an identity-scaled or equicorrelation spec",
                ));
            }
            true
        }
        PathHint::Dense => false,
        PathHint::Auto => spec.is_exchangeable(),
    };
    if use_pattern {
        let sigma = spec.exchangeable_sigma().expect("exchangeable");
        let rho = spec.exchangeable_rho().expect("exchangeable");
        Ok(RectGradTensor::Pattern {
            d: spec.d,
            threshold: t,
            values: pattern_rect_grad(spec.d, rho, sigma, t, order),
        })
    } else {
        let cov = materialize_cov(spec)?;
        let values = dense_rect_grad(&cov, t, order)?;
        Ok(RectGradTensor::Dense {
            d: spec.d,
            order,
            threshold: t,
            values,
        })
    }
}

/// Monte Carlo controls for the dense/AR(1) paths and root-finding tolerance
/// for the structured paths.
#[derive(Debug, Clone, Copy)]
pub struct GmaxPrecision {
    pub tol: f64,
    pub mc_draws: usize,
    pub seed: u64,
}

impl Default for GmaxPrecision {
    fn default() -> Self {
        GmaxPrecision {
            tol: 1e-8,
            mc_draws: 200_000,
            seed: 0x5EED,
        }
    }
}

/// Sampler for `Z ~ N(0, Sigma)` usable for any spec (not restricted to unit
/// diagonals, unlike the copula-facing sampler).
struct MaxSampler {
    chol_or_struct: SamplerKind,
    d: usize,
}

enum SamplerKind {
    Scaled { sigma: f64 },
    Equi { sigma: f64, sr: f64, s1m: f64 },
    Ar1 { rho: f64, noise: f64 },
    Chol(Array2<f64>),
}

impl MaxSampler {
    fn new(spec: &CovarianceSpec) -> Result<Self> {
        spec.validate()?;
        let kind = match &spec.kind {
            CovKind::IdentityScaled { sigma } => SamplerKind::Scaled { sigma: *sigma },
            CovKind::Equicorrelation { rho, sigma } => SamplerKind::Equi {
                sigma: *sigma,
                sr: rho.sqrt(),
                s1m: (1.0 - rho).sqrt(),
            },
            CovKind::Ar1 { rho } => SamplerKind::Ar1 {
                rho: *rho,
                noise: (1.0 - rho * rho).sqrt(),
            },
            CovKind::Dense { matrix } => SamplerKind::Chol(numeric::cholesky(matrix, PD_PIVOT_TOL)?),
        };
        Ok(MaxSampler {
            chol_or_struct: kind,
            d: spec.d,
        })
    }

    fn sample_max<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut max = f64::NEG_INFINITY;
        match &self.chol_or_struct {
            SamplerKind::Scaled { sigma } => {
                for _ in 0..self.d {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    max = max.max(sigma * z);
                }
            }
            SamplerKind::Equi { sigma, sr, s1m } => {
                let zeta: f64 = rng.sample(rand_distr::StandardNormal);
                let common = sr * zeta;
                for _ in 0..self.d {
                    let eps: f64 = rng.sample(rand_distr::StandardNormal);
                    max = max.max(sigma * (common + s1m * eps));
                }
            }
            SamplerKind::Ar1 { rho, noise } => {
                let mut prev: f64 = rng.sample(rand_distr::StandardNormal);
                max = prev;
                for _ in 1..self.d {
                    let eps: f64 = rng.sample(rand_distr::StandardNormal);
                    prev = rho * prev + noise * eps;
                    max = max.max(prev);
                }
            }
            SamplerKind::Chol(l) => {
                let eps: Vec<f64> = (0..self.d)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                for j in 0..self.d {
                    let mut acc = 0.0;
                    for k in 0..=j {
                        acc += l[[j, k]] * eps[k];
                    }
                    max = max.max(acc);
                }
            }
        }
        max
    }
}

fn max_diag_sd(spec: &CovarianceSpec) -> f64 {
    match &spec.kind {
        CovKind::IdentityScaled { sigma } | CovKind::Equicorrelation { sigma, .. } => *sigma,
        CovKind::Ar1 { .. } => 1.0,
        CovKind::Dense { matrix } => (0..spec.d)
            .map(|j| matrix[[j, j]].sqrt())
            .fold(0.0, f64::max),
    }
}

/// `P(max_j Z_j <= t)`. Closed form for identity-scaled specs, scalar-factor
/// quadrature for equicorrelation, Monte Carlo otherwise.
pub fn gmax_cdf(spec: &CovarianceSpec, t: f64, prec: &GmaxPrecision) -> Result<f64> {
    spec.validate()?;
    let sd = max_diag_sd(spec);
    if t <= -TAIL_CUTOFF_SD * sd {
        return Ok(0.0);
    }
    if t >= TAIL_CUTOFF_SD * sd {
        return Ok(1.0);
    }
    match &spec.kind {
        CovKind::IdentityScaled { sigma } => Ok(norm_cdf(t / sigma).powi(spec.d as i32)),
        CovKind::Equicorrelation { rho, sigma } => {
            let df = spec.d as i64;
            Ok(factor_expectation(spec.d, *rho, t / sigma, |u| cdf_pow(u, df)))
        }
        _ => Ok(gmax_cdf_mc(spec, t, prec)?.0),
    }
}

/// Monte Carlo CDF estimate with its binomial standard error.
pub fn gmax_cdf_mc(spec: &CovarianceSpec, t: f64, prec: &GmaxPrecision) -> Result<(f64, f64)> {
    let sampler = MaxSampler::new(spec)?;
    let mut rng = StreamKey::new(prec.seed, 0, Purpose::GaussianRef).rng();
    let n = prec.mc_draws.max(1);
    let mut hits = 0usize;
    for _ in 0..n {
        if sampler.sample_max(&mut rng) <= t {
            hits += 1;
        }
    }
    let p = hits as f64 / n as f64;
    Ok((p, (p * (1.0 - p) / n as f64).sqrt()))
}

/// `p`-quantile of `max_j Z_j`. Exact for identity-scaled specs, monotone
/// root-finding on the CDF for equicorrelation, Monte Carlo order statistic
/// otherwise.
pub fn gmax_quantile(spec: &CovarianceSpec, p: f64, prec: &GmaxPrecision) -> Result<f64> {
    spec.validate()?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation(format!(
            "gmax quantile requires p in (0,1), got {p}"
        )));
    }
    match &spec.kind {
        CovKind::IdentityScaled { sigma } => {
            // Phi^{-1}(p^{1/d}), with the root taken in log space
            Ok(sigma * norm_quantile((p.ln() / spec.d as f64).exp())?)
        }
        CovKind::Equicorrelation { sigma, .. } => {
            // bracket around the independent-case quantile, then bisect
            let mut lo = sigma * norm_quantile((p.ln() / spec.d as f64).exp())? - 1.0 * sigma;
            let mut hi = lo + 2.0 * sigma;
            while gmax_cdf(spec, lo, prec)? > p {
                lo -= sigma;
            }
            while gmax_cdf(spec, hi, prec)? < p {
                hi += sigma;
            }
            let mut a = lo;
            let mut b = hi;
            let mut fa = gmax_cdf(spec, a, prec)? - p;
            for _ in 0..200 {
                if b - a < prec.tol {
                    break;
                }
                let m = 0.5 * (a + b);
                let fm = gmax_cdf(spec, m, prec)? - p;
                if fm == 0.0 {
                    return Ok(m);
                }
                if fm.signum() == fa.signum() {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            // secant polish inside the final bracket
            let mut x = 0.5 * (a + b);
            for _ in 0..4 {
                let f = gmax_cdf(spec, x, prec)? - p;
                let dens = gmax_density(spec, x, 0, prec)?;
                if dens <= 0.0 {
                    break;
                }
                let next = (x - f / dens).clamp(a, b);
                if (next - x).abs() < 0.25 * prec.tol {
                    x = next;
                    break;
                }
                x = next;
            }
            Ok(x)
        }
        _ => Ok(gmax_quantile_mc(spec, p, prec)?.0),
    }
}

/// Monte Carlo quantile (order statistic `ceil(p (N+1))`) with a standard
/// error estimate from the binomial band mapped through neighboring order
/// statistics.
pub fn gmax_quantile_mc(spec: &CovarianceSpec, p: f64, prec: &GmaxPrecision) -> Result<(f64, f64)> {
    let sampler = MaxSampler::new(spec)?;
    let mut rng = StreamKey::new(prec.seed, 1, Purpose::GaussianRef).rng();
    let n = prec.mc_draws.max(8);
    let mut draws: Vec<f64> = (0..n).map(|_| sampler.sample_max(&mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let k = ((p * (n as f64 + 1.0)).ceil() as usize).clamp(1, n);
    let q = draws[k - 1];
    let band = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    let k_lo = (((p - band) * (n as f64 + 1.0)).ceil() as usize).clamp(1, n);
    let k_hi = (((p + band) * (n as f64 + 1.0)).ceil() as usize).clamp(1, n);
    let se = (draws[k_hi - 1] - draws[k_lo - 1]) / 6.0;
    Ok((q, se))
}

/// Density `f_Sigma(t)` (`deriv_order` 0) or its derivative `f'_Sigma(t)`
/// (`deriv_order` 1) of the Gaussian max.
///
/// Identity-scaled and equicorrelation specs use the factor representation;
/// dense specs up to the dimension cap contract the rectangle integrals;
/// larger dense specs estimate the density by conditional Monte Carlo
/// (no conditional formula is implemented for the derivative there).
pub fn gmax_density(
    spec: &CovarianceSpec,
    t: f64,
    deriv_order: u8,
    prec: &GmaxPrecision,
) -> Result<f64> {
    spec.validate()?;
    if deriv_order > 1 {
        return Err(Error::validation("density derivative order must be 0 or 1"));
    }
    let df = spec.d as f64;
    match &spec.kind {
        CovKind::IdentityScaled { .. } | CovKind::Equicorrelation { .. } => {
            let tensor = rect_grad_integral(spec, t, deriv_order + 1, PathHint::Pattern)?;
            Ok(tensor.sum_all())
        }
        _ if spec.d <= DENSE_DIM_CAP => {
            let tensor = rect_grad_integral(spec, t, deriv_order + 1, PathHint::Dense)?;
            Ok(tensor.sum_all())
        }
        _ => {
            if deriv_order == 1 {
                return Err(Error::capability(
                    "density derivative beyond the dense dimension cap is not implemented",
                ));
            }
            let _ = df;
            let cov = materialize_cov(spec)?;
            gmax_density_conditional_mc(
                &cov,
                t,
                (prec.mc_draws / 10).max(2_000),
                StreamKey::new(prec.seed, 2, Purpose::GaussianRef),
            )
        }
    }
}

/// Density of the max by conditional Monte Carlo:
/// `f(t) = sum_j f_{Z_j}(t) P(max_{k != j} Z_k <= t | Z_j = t)`,
/// with the conditional draws obtained from one shared pool of unconditional
/// draws via the residual decomposition `Z_{-j} - a Z_j + a t`.
pub fn gmax_density_conditional_mc(
    cov: &Array2<f64>,
    t: f64,
    draws: usize,
    key: StreamKey,
) -> Result<f64> {
    let d = cov.nrows();
    let l = numeric::cholesky(cov, PD_PIVOT_TOL)?;
    let n = draws.max(100);
    let mut rng = key.rng();
    let mut pool = Array2::<f64>::zeros((n, d));
    let mut eps = vec![0.0; d];
    for m in 0..n {
        for e in eps.iter_mut() {
            *e = rng.sample(rand_distr::StandardNormal);
        }
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..=j {
                acc += l[[j, k]] * eps[k];
            }
            pool[[m, j]] = acc;
        }
    }
    let mut total = 0.0;
    for j in 0..d {
        let sjj = cov[[j, j]];
        let fj = norm_pdf(t / sjj.sqrt()) / sjj.sqrt();
        if fj == 0.0 {
            continue;
        }
        let mut hits = 0usize;
        for m in 0..n {
            let zj = pool[[m, j]];
            let mut ok = true;
            for k in 0..d {
                if k == j {
                    continue;
                }
                let a = cov[[k, j]] / sjj;
                if pool[[m, k]] + a * (t - zj) > t {
                    ok = false;
                    break;
                }
            }
            if ok {
                hits += 1;
            }
        }
        total += fj * hits as f64 / n as f64;
    }
    Ok(total)
}

/// The order-2 rectangle integral at threshold `t` by conditional Monte
/// Carlo, for dense covariances beyond the quadrature cap. Diagonal entries
/// use `-E[(Sigma^{-1} Z)_j ; max_{k != j} Z_k <= t | Z_j = t] f_{Z_j}(t)`;
/// off-diagonal entries are conditional orthant probabilities times the
/// bivariate density at `(t, t)`. One shared draw pool serves every entry,
/// so the result is deterministic in the stream key. Cost grows like
/// `draws * d^3`.
pub fn rect_grad2_conditional_mc(
    cov: &Array2<f64>,
    t: f64,
    draws: usize,
    key: StreamKey,
) -> Result<Array2<f64>> {
    let d = cov.nrows();
    let l = numeric::cholesky(cov, PD_PIVOT_TOL)?;
    let (inv, _) = numeric::spd_inverse(cov, PD_PIVOT_TOL)?;
    let n = draws.max(100);
    let mut rng = key.rng();
    let mut pool = Array2::<f64>::zeros((n, d));
    let mut eps = vec![0.0; d];
    for m in 0..n {
        for e in eps.iter_mut() {
            *e = rng.sample(rand_distr::StandardNormal);
        }
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..=j {
                acc += l[[j, k]] * eps[k];
            }
            pool[[m, j]] = acc;
        }
    }
    let mut psi = Array2::<f64>::zeros((d, d));
    let mut cond = vec![0.0; d];
    // diagonal entries
    for j in 0..d {
        let sjj = cov[[j, j]];
        let fj = norm_pdf(t / sjj.sqrt()) / sjj.sqrt();
        let mut acc = 0.0;
        for m in 0..n {
            let shift = (t - pool[[m, j]]) / sjj;
            let mut ok = true;
            for k in 0..d {
                cond[k] = pool[[m, k]] + cov[[k, j]] * shift;
                if k != j && cond[k] > t {
                    ok = false;
                    // keep filling cond only while needed
                }
            }
            if !ok {
                continue;
            }
            cond[j] = t;
            let mut sy = 0.0;
            for k in 0..d {
                sy += inv[[j, k]] * cond[k];
            }
            acc += sy;
        }
        psi[[j, j]] = -(acc / n as f64) * fj;
    }
    // off-diagonal entries
    for j in 0..d {
        for lidx in (j + 1)..d {
            let s = [
                [cov[[j, j]], cov[[j, lidx]]],
                [cov[[j, lidx]], cov[[lidx, lidx]]],
            ];
            let det = s[0][0] * s[1][1] - s[0][1] * s[0][1];
            if det <= 0.0 {
                return Err(Error::validation("2x2 principal minor not positive definite"));
            }
            let quad = (s[1][1] * t * t - 2.0 * s[0][1] * t * t + s[0][0] * t * t) / det;
            let dens2 = (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
            let mut hits = 0usize;
            for m in 0..n {
                // conditional mean shift for the pair (Z_j, Z_l) = (t, t)
                let rj = t - pool[[m, j]];
                let rl = t - pool[[m, lidx]];
                let c1 = (s[1][1] * rj - s[0][1] * rl) / det;
                let c2 = (s[0][0] * rl - s[0][1] * rj) / det;
                let mut ok = true;
                for k in 0..d {
                    if k == j || k == lidx {
                        continue;
                    }
                    let shifted = pool[[m, k]] + cov[[k, j]] * c1 + cov[[k, lidx]] * c2;
                    if shifted > t {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    hits += 1;
                }
            }
            let v = dens2 * hits as f64 / n as f64;
            psi[[j, lidx]] = v;
            psi[[lidx, j]] = v;
        }
    }
    Ok(psi)
}

/// Diagnostic quantities of the Gaussian max: the smallest-eigenvalue root,
/// the variance of the max, and the scale `sqrt(Var[max] log d)` entering the
/// expansion validity condition.
#[derive(Debug, Clone)]
pub struct GmaxDiagnostics {
    pub sigma_star: f64,
    pub var_max: f64,
    pub varsigma_d: f64,
    pub sigma_bar: f64,
    pub sigma_underbar: f64,
    d: usize,
}

impl GmaxDiagnostics {
    /// Lower bound on the max density at its `p`-quantile.
    pub fn density_floor(&self, p: f64) -> f64 {
        let m = (p / std::f64::consts::SQRT_2).min((1.0 - p).powf(1.5));
        m / (4.0 * self.var_max.sqrt())
    }

    /// Left-hand side of the expansion validity condition at sample size `n`:
    /// `(varsigma_d / sigma_*)^3 log^3(dn) log(n) / n`.
    pub fn expansion_condition_lhs(&self, n: usize) -> f64 {
        let nf = n as f64;
        let ldn = ((self.d as f64) * nf).ln();
        (self.varsigma_d / self.sigma_star).powi(3) * ldn.powi(3) * nf.ln() / nf
    }
}

pub fn gmax_diagnostics(spec: &CovarianceSpec, prec: &GmaxPrecision) -> Result<GmaxDiagnostics> {
    spec.validate()?;
    let sigma_star = match &spec.kind {
        CovKind::IdentityScaled { sigma } => *sigma,
        CovKind::Equicorrelation { rho, sigma } => {
            if spec.d == 1 {
                *sigma
            } else {
                sigma * (1.0 - rho).sqrt()
            }
        }
        _ => {
            let cov = materialize_cov(spec)?;
            let eig = numeric::sym_eigenvalues(&cov);
            eig.into_iter().fold(f64::INFINITY, f64::min).max(0.0).sqrt()
        }
    };
    let cov_diag: Vec<f64> = match &spec.kind {
        CovKind::IdentityScaled { sigma } | CovKind::Equicorrelation { sigma, .. } => {
            vec![sigma * sigma; spec.d]
        }
        CovKind::Ar1 { .. } => vec![1.0; spec.d],
        CovKind::Dense { matrix } => (0..spec.d).map(|j| matrix[[j, j]]).collect(),
    };
    let sigma_bar = cov_diag.iter().fold(0.0_f64, |m, &v| m.max(v)).sqrt();
    let sigma_underbar = cov_diag.iter().fold(f64::INFINITY, |m, &v| m.min(v)).sqrt();

    let sampler = MaxSampler::new(spec)?;
    let mut rng = StreamKey::new(prec.seed, 3, Purpose::GaussianRef).rng();
    let n = prec.mc_draws.max(1000);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n {
        let m = sampler.sample_max(&mut rng);
        sum += m;
        sum2 += m * m;
    }
    let mean = sum / n as f64;
    let var_max = (sum2 / n as f64 - mean * mean).max(0.0);
    Ok(GmaxDiagnostics {
        sigma_star,
        var_max,
        varsigma_d: (var_max * (spec.d as f64).ln()).sqrt(),
        sigma_bar,
        sigma_underbar,
        d: spec.d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn default_prec() -> GmaxPrecision {
        GmaxPrecision::default()
    }

    #[test]
    fn hermite_values() {
        assert_eq!(hermite(0, 3.7).unwrap(), 1.0);
        assert_eq!(hermite(2, 0.0).unwrap(), -1.0); // t^2 - 1
        assert_eq!(hermite(3, 2.0).unwrap(), 2.0); // t^3 - 3t
        // explicit coefficients up to order 6 on a grid
        for &t in &[-2.5, -1.0, 0.0, 0.3, 1.7] {
            assert_abs_diff_eq!(hermite(4, t).unwrap(), t.powi(4) - 6.0 * t * t + 3.0, epsilon = 1e-10);
            assert_abs_diff_eq!(
                hermite(5, t).unwrap(),
                t.powi(5) - 10.0 * t.powi(3) + 15.0 * t,
                epsilon = 1e-10
            );
            assert_abs_diff_eq!(
                hermite(6, t).unwrap(),
                t.powi(6) - 15.0 * t.powi(4) + 45.0 * t * t - 15.0,
                epsilon = 1e-9
            );
        }
        assert!(hermite(21, 0.0).is_err());
    }

    #[test]
    fn phi_derivative_values() {
        assert_abs_diff_eq!(phi_derivative(0, 0.0).unwrap(), 0.3989423, epsilon = 1e-7);
        assert_eq!(phi_derivative(1, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(phi_derivative(2, 0.0).unwrap(), -0.3989423, epsilon = 1e-7);
        // finite differences of phi as an independent check
        let h = 1e-5;
        for &t in &[-1.2, 0.4, 2.0] {
            let fd = (norm_pdf(t + h) - norm_pdf(t - h)) / (2.0 * h);
            assert_abs_diff_eq!(phi_derivative(1, t).unwrap(), fd, epsilon = 1e-8);
            let fd2 = (norm_pdf(t + h) - 2.0 * norm_pdf(t) + norm_pdf(t - h)) / (h * h);
            assert_abs_diff_eq!(phi_derivative(2, t).unwrap(), fd2, epsilon = 1e-5);
        }
    }

    #[test]
    fn univariate_rect_grad_closed_form() {
        // d=1, r=2: integral of phi'' over (-inf, c] is phi'(c) = -c phi(c)
        let spec = CovarianceSpec::identity_scaled(1, 1.0).unwrap();
        let c = 1.2815515655446004;
        let t2 = rect_grad_integral(&spec, c, 2, PathHint::Pattern).unwrap();
        assert_abs_diff_eq!(t2.entry(&[0, 0]), -c * norm_pdf(c), epsilon = 1e-12);
        assert_abs_diff_eq!(t2.entry(&[0, 0]), -0.2249102, epsilon = 1e-7);
        // dense quadrature agrees
        let t2d = rect_grad_integral(&spec, c, 2, PathHint::Dense).unwrap();
        assert_abs_diff_eq!(t2d.entry(&[0, 0]), -c * norm_pdf(c), epsilon = 1e-10);
    }

    #[test]
    fn rect_grad_vanishes_in_far_tails() {
        for spec in [
            CovarianceSpec::identity_scaled(4, 1.0).unwrap(),
            CovarianceSpec::equicorrelation(4, 0.5, 1.0).unwrap(),
        ] {
            for order in [2u8, 3] {
                for t in [12.0, -12.0] {
                    let tensor = rect_grad_integral(&spec, t, order, PathHint::Auto).unwrap();
                    assert!(
                        tensor.max_abs() <= 1e-10,
                        "entries at t={t} order={order}: {}",
                        tensor.max_abs()
                    );
                }
            }
        }
    }

    #[test]
    fn pattern_matches_dense_quadrature() {
        // acceptance-style oracle at small d
        for (d, rho) in [(2usize, 0.0), (3, 0.2), (3, 0.8), (5, 0.5)] {
            let spec = if rho == 0.0 {
                CovarianceSpec::identity_scaled(d, 1.0).unwrap()
            } else {
                CovarianceSpec::equicorrelation(d, rho, 1.0).unwrap()
            };
            for order in [2u8, 3] {
                for &t in &[-1.0, 0.0, 1.0] {
                    let pat = rect_grad_integral(&spec, t, order, PathHint::Pattern).unwrap();
                    let den = rect_grad_integral(&spec, t, order, PathHint::Dense).unwrap();
                    let idxs: Vec<Vec<usize>> = if order == 2 {
                        vec![vec![0, 0], vec![0, 1], vec![1, 0]]
                    } else {
                        vec![vec![0, 0, 0], vec![0, 0, 1], vec![0, 1, 0], vec![0, 1, 2]]
                    };
                    for idx in idxs {
                        if idx.iter().any(|&i| i >= d) {
                            continue;
                        }
                        assert_abs_diff_eq!(
                            pat.entry(&idx),
                            den.entry(&idx),
                            epsilon = 1e-6
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn scaled_spec_follows_scaling_rule() {
        // integral for sigma^2 I at t equals sigma^{-r} times the unit integral at t/sigma
        let sigma = 2.0;
        let spec = CovarianceSpec::identity_scaled(3, sigma).unwrap();
        let unit = CovarianceSpec::identity_scaled(3, 1.0).unwrap();
        let t = 1.4;
        for order in [2u8, 3] {
            let scaled = rect_grad_integral(&spec, t, order, PathHint::Pattern).unwrap();
            let base = rect_grad_integral(&unit, t / sigma, order, PathHint::Pattern).unwrap();
            let idx: Vec<usize> = vec![0; order as usize];
            assert_abs_diff_eq!(
                scaled.entry(&idx),
                base.entry(&idx) / sigma.powi(order as i32),
                epsilon = 1e-12
            );
            // and the dense path agrees with the scaling too
            let dense = rect_grad_integral(&spec, t, order, PathHint::Dense).unwrap();
            assert_abs_diff_eq!(scaled.entry(&idx), dense.entry(&idx), epsilon = 1e-8);
        }
    }

    #[test]
    fn gmax_cdf_identity() {
        let spec = CovarianceSpec::identity_scaled(400, 1.0).unwrap();
        let prec = default_prec();
        // threshold derived by inverting Phi(t)^400 = 0.9
        let t = gmax_quantile(&spec, 0.9, &prec).unwrap();
        assert_abs_diff_eq!(t, 3.4667798, epsilon = 1e-6);
        assert_abs_diff_eq!(gmax_cdf(&spec, t, &prec).unwrap(), 0.9000, epsilon = 1e-10);
        assert_eq!(gmax_cdf(&spec, -50.0, &prec).unwrap(), 0.0);
    }

    #[test]
    fn gmax_cdf_perfect_correlation_limit() {
        let spec = CovarianceSpec::equicorrelation(50, 0.9999, 1.0).unwrap();
        let prec = default_prec();
        let v = gmax_cdf(&spec, 1.2816, &prec).unwrap();
        assert!((v - 0.9).abs() < 0.005, "rho -> 1 limit: {v}");
    }

    #[test]
    fn gmax_quantile_reference_values() {
        let prec = default_prec();
        let d1 = CovarianceSpec::identity_scaled(1, 1.0).unwrap();
        assert_abs_diff_eq!(gmax_quantile(&d1, 0.9, &prec).unwrap(), 1.281552, epsilon = 1e-6);
        // monotonicity across spec families
        for spec in [
            CovarianceSpec::identity_scaled(10, 1.0).unwrap(),
            CovarianceSpec::equicorrelation(10, 0.4, 1.0).unwrap(),
            CovarianceSpec::ar1(10, 0.6).unwrap(),
        ] {
            let q5 = gmax_quantile(&spec, 0.5, &prec).unwrap();
            let q9 = gmax_quantile(&spec, 0.9, &prec).unwrap();
            assert!(q5 < q9);
        }
    }

    #[test]
    fn gmax_quantile_cdf_round_trip() {
        let prec = default_prec();
        for spec in [
            CovarianceSpec::identity_scaled(7, 1.0).unwrap(),
            CovarianceSpec::equicorrelation(7, 0.3, 1.0).unwrap(),
        ] {
            for &p in &[0.1, 0.5, 0.9, 0.99] {
                let q = gmax_quantile(&spec, p, &prec).unwrap();
                let back = gmax_cdf(&spec, q, &prec).unwrap();
                assert_abs_diff_eq!(back, p, epsilon = 1e-7);
            }
        }
        // dense path: agree within 3 Monte Carlo standard errors
        let dense = CovarianceSpec::ar1(5, 0.5).unwrap();
        let q = gmax_quantile(&dense, 0.9, &prec).unwrap();
        let (cdf, se) = gmax_cdf_mc(&dense, q, &prec).unwrap();
        assert!((cdf - 0.9).abs() <= 3.0 * se + 1e-3);
    }

    #[test]
    fn gmax_density_closed_forms() {
        let prec = default_prec();
        let d2 = CovarianceSpec::identity_scaled(2, 1.0).unwrap();
        // 2 phi(0) Phi(0)
        assert_abs_diff_eq!(
            gmax_density(&d2, 0.0, 0, &prec).unwrap(),
            0.398942,
            epsilon = 1e-6
        );
        // d = 1 reduces to phi on a grid
        let d1 = CovarianceSpec::identity_scaled(1, 1.0).unwrap();
        for i in -8..=8 {
            let t = i as f64 / 2.0;
            assert_abs_diff_eq!(
                gmax_density(&d1, t, 0, &prec).unwrap(),
                norm_pdf(t),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn gmax_density_integrates_to_one_and_matches_cdf_slope() {
        let prec = default_prec();
        for spec in [
            CovarianceSpec::identity_scaled(6, 1.0).unwrap(),
            CovarianceSpec::equicorrelation(6, 0.4, 1.0).unwrap(),
        ] {
            let hi = gmax_quantile(&spec, 0.999999, &prec).unwrap() + 10.0;
            let mut mass = 0.0;
            let steps = 4000;
            let lo = -10.0;
            let dt = (hi - lo) / steps as f64;
            let mut prev = gmax_density(&spec, lo, 0, &prec).unwrap();
            for i in 1..=steps {
                let t = lo + dt * i as f64;
                let cur = gmax_density(&spec, t, 0, &prec).unwrap();
                mass += 0.5 * (prev + cur) * dt;
                prev = cur;
            }
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-3);

            let h = 1e-4;
            for &t in &[0.0, 1.0, 2.0] {
                let slope = (gmax_cdf(&spec, t + h, &prec).unwrap()
                    - gmax_cdf(&spec, t - h, &prec).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(
                    slope,
                    gmax_density(&spec, t, 0, &prec).unwrap(),
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn gmax_density_derivative_matches_finite_difference() {
        let prec = default_prec();
        let spec = CovarianceSpec::equicorrelation(5, 0.3, 1.0).unwrap();
        let h = 1e-4;
        for &t in &[0.5, 1.5] {
            let fd = (gmax_density(&spec, t + h, 0, &prec).unwrap()
                - gmax_density(&spec, t - h, 0, &prec).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(fd, gmax_density(&spec, t, 1, &prec).unwrap(), epsilon = 1e-6);
        }
    }

    #[test]
    fn gmax_density_conditional_mc_matches_quadrature() {
        // the conditional Monte Carlo estimator against the quadrature path
        // on a dense spec small enough to have both
        let spec = CovarianceSpec::ar1(6, 0.5).unwrap();
        let prec = default_prec();
        let quad = gmax_density(&spec, 1.0, 0, &prec).unwrap();
        let cov = materialize_cov(&spec).unwrap();
        let mc = gmax_density_conditional_mc(
            &cov,
            1.0,
            300_000,
            StreamKey::new(7, 0, Purpose::GaussianRef),
        )
        .unwrap();
        assert_abs_diff_eq!(mc, quad, epsilon = 5e-3);
        // and the rect-grad contraction is the same number as the quadrature density
        let t1 = rect_grad_integral(&spec, 1.0, 1, PathHint::Dense).unwrap();
        assert_abs_diff_eq!(t1.sum_all(), quad, epsilon = 1e-10);
    }

    #[test]
    fn psi_conditional_mc_matches_dense_quadrature() {
        let spec = CovarianceSpec::ar1(3, 0.5).unwrap();
        let cov = materialize_cov(&spec).unwrap();
        let t = 1.0;
        let quad = rect_grad_integral(&spec, t, 2, PathHint::Dense).unwrap();
        let mc = rect_grad2_conditional_mc(
            &cov,
            t,
            400_000,
            StreamKey::new(99, 0, Purpose::GaussianRef),
        )
        .unwrap();
        for j in 0..3 {
            for k in 0..3 {
                assert_abs_diff_eq!(mc[[j, k]], quad.entry(&[j, k]), epsilon = 4e-3);
            }
        }
    }

    #[test]
    fn diagnostics_closed_forms_and_floor() {
        let prec = default_prec();
        let id = CovarianceSpec::identity_scaled(20, 2.5).unwrap();
        let diag = gmax_diagnostics(&id, &prec).unwrap();
        assert_eq!(diag.sigma_star, 2.5);
        assert_eq!(diag.sigma_bar, 2.5);

        let eq = CovarianceSpec::equicorrelation(50, 0.8, 1.0).unwrap();
        let diag = gmax_diagnostics(&eq, &prec).unwrap();
        assert_abs_diff_eq!(diag.sigma_star, 0.2_f64.sqrt(), epsilon = 1e-12);

        // Var[max] of 400 iid standard normals stays below the single-coordinate bound
        let big = CovarianceSpec::identity_scaled(400, 1.0).unwrap();
        let diag = gmax_diagnostics(&big, &prec).unwrap();
        let se = diag.var_max * (2.0 / prec.mc_draws as f64).sqrt();
        assert!(diag.var_max + 3.0 * se < 1.05, "Var[max] = {}", diag.var_max);

        // density floor holds at the quantiles (identity and equicorrelation)
        for spec in [
            CovarianceSpec::identity_scaled(30, 1.0).unwrap(),
            CovarianceSpec::equicorrelation(30, 0.2, 1.0).unwrap(),
            CovarianceSpec::equicorrelation(30, 0.8, 1.0).unwrap(),
        ] {
            let diag = gmax_diagnostics(&spec, &prec).unwrap();
            for i in 1..20 {
                let p = i as f64 / 20.0;
                let q = gmax_quantile(&spec, p, &prec).unwrap();
                let f = gmax_density(&spec, q, 0, &prec).unwrap();
                assert!(
                    f >= diag.density_floor(p),
                    "floor violated at p={p}: f={f}, floor={}",
                    diag.density_floor(p)
                );
            }
        }
    }
}
