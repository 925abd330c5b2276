//! Coverage-expansion formulas for the bootstrap rejection probability:
//! the rectangle-integral correction Q_n, the second-derivative matrix
//! Psi_alpha, the bootstrap-estimation term R_n, the assembled prediction
//! `alpha - (1-gamma) Q_n - E[R_n]`, Cornish–Fisher corrected quantiles,
//! and the spherical / factor-model limiting predictors.
//!
//! Third-moment tensors enter in one of three forms: pattern sums for
//! exchangeable covariances (O(nd) streaming), a full d^3 array for small
//! dense problems, or a data set contracted row by row. The computational
//! path is chosen from the covariance spec and can be overridden.

use crate::error::{Error, Result};
use crate::gauss::{
    gmax_density, gmax_quantile, rect_grad2_conditional_mc, rect_grad_integral, GmaxPrecision,
    PathHint, PatternValues, RectGradTensor, DENSE_DIM_CAP,
};
use crate::model::{
    materialize_cov, third_moment_summary, CovarianceSpec, DataSet, ThirdMomentSummary,
};
use crate::numeric::{norm_pdf, norm_quantile};
use crate::random::{Purpose, StreamKey};

/// Third-moment information in whichever form the problem affords.
#[derive(Debug, Clone)]
pub enum ThirdMoments {
    /// Pattern sums for exchangeable covariances.
    Exchangeable(ThirdMomentSummary),
    /// Full `d^3` tensor, row-major; only sensible for small d.
    Dense { d: usize, values: Vec<f64> },
    /// Raw observations; contractions stream over rows.
    Data(DataSet),
}

impl ThirdMoments {
    pub fn from_data_exchangeable(data: &DataSet) -> Self {
        ThirdMoments::Exchangeable(third_moment_summary(data))
    }

    /// Accumulate the empirical third-moment tensor `(1/n) sum_i X_i^{x3}`.
    pub fn dense_from_data(data: &DataSet) -> Result<Self> {
        let d = data.dim();
        if d > DENSE_DIM_CAP {
            return Err(Error::capability(format!(
                "dense third-moment tensors are capped at d = {DENSE_DIM_CAP}"
            )));
        }
        let mut values = vec![0.0_f64; d * d * d];
        for row in data.values().rows() {
            for j in 0..d {
                let xj = row[j];
                for k in 0..d {
                    let xjk = xj * row[k];
                    let base = (j * d + k) * d;
                    for l in 0..d {
                        values[base + l] += xjk * row[l];
                    }
                }
            }
        }
        let nf = data.n() as f64;
        for v in &mut values {
            *v /= nf;
        }
        Ok(ThirdMoments::Dense { d, values })
    }
}

/// Everything the expansion formulas need about the problem.
#[derive(Debug, Clone)]
pub struct ExpansionInputs {
    pub sigma: CovarianceSpec,
    pub n: usize,
    /// Third moment of the multiplier law, `E[w^3]`.
    pub gamma: f64,
    pub third: ThirdMoments,
    /// Override for the integral path; `Auto` picks by spec and dimension.
    pub path: PathHint,
    /// The prediction formulas are valid on `(eps, 1-eps)`.
    pub eps_window: f64,
}

impl ExpansionInputs {
    pub fn new(sigma: CovarianceSpec, n: usize, gamma: f64, third: ThirdMoments) -> Result<Self> {
        let inputs = ExpansionInputs {
            sigma,
            n,
            gamma,
            third,
            path: PathHint::Auto,
            eps_window: 0.01,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        self.sigma.validate()?;
        if self.n == 0 {
            return Err(Error::validation("expansion inputs require n >= 1"));
        }
        if !(-2.0..=2.0).contains(&self.gamma) {
            return Err(Error::validation(format!(
                "gamma = {} outside the sanity window [-2, 2]",
                self.gamma
            )));
        }
        let d = self.sigma.d;
        match &self.third {
            ThirdMoments::Exchangeable(s) => {
                if s.d != d {
                    return Err(Error::validation("third-moment summary dimension mismatch"));
                }
            }
            ThirdMoments::Dense { d: md, values } => {
                if *md != d || values.len() != d * d * d {
                    return Err(Error::validation("dense third-moment tensor shape mismatch"));
                }
            }
            ThirdMoments::Data(data) => {
                if data.dim() != d {
                    return Err(Error::validation("third-moment data dimension mismatch"));
                }
            }
        }
        Ok(())
    }
}

/// Predicted rejection probability and its two correction terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoveragePrediction {
    pub alpha: f64,
    pub predicted: f64,
    /// `(1 - gamma) Q_n(c^G_{1-alpha})`.
    pub q_term: f64,
    /// `E[R_n(alpha)]`.
    pub r_term: f64,
    /// The Gaussian max quantile used.
    pub c_g: f64,
}

/// `<M, T>` for a third-moment tensor M and an order-3 rectangle integral T.
fn contract_grad3(third: &ThirdMoments, tensor: &RectGradTensor) -> Result<f64> {
    let d = tensor.dim();
    match (third, tensor) {
        (ThirdMoments::Exchangeable(s), RectGradTensor::Pattern { values, .. }) => {
            let PatternValues::Grad3 { all_same, two_same, all_distinct } = values else {
                return Err(Error::validation("expected an order-3 tensor"));
            };
            Ok(all_same * s.s1 + 3.0 * two_same * s.s2 + all_distinct * s.s3)
        }
        (ThirdMoments::Dense { values: m, .. }, _) => {
            let mut acc = 0.0;
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        acc += m[(j * d + k) * d + l] * tensor.entry(&[j, k, l]);
                    }
                }
            }
            Ok(acc)
        }
        (ThirdMoments::Data(data), RectGradTensor::Pattern { .. }) => {
            let s = third_moment_summary(data);
            contract_grad3(&ThirdMoments::Exchangeable(s), tensor)
        }
        (ThirdMoments::Data(data), RectGradTensor::Dense { .. }) => {
            // (1/n) sum_i <X_i^{x3}, T>
            let nf = data.n() as f64;
            let mut acc = 0.0;
            for row in data.values().rows() {
                let mut row_acc = 0.0;
                for j in 0..d {
                    for k in 0..d {
                        let mut inner = 0.0;
                        for l in 0..d {
                            inner += tensor.entry(&[j, k, l]) * row[l];
                        }
                        row_acc += row[j] * row[k] * inner;
                    }
                }
                acc += row_acc;
            }
            Ok(acc / nf)
        }
        (ThirdMoments::Exchangeable(_), RectGradTensor::Dense { .. }) => Err(Error::capability(
            "exchangeable third-moment summaries need a pattern integral",
        )),
    }
}

/// `<M x 1_d, Psi^{x2}>` via the per-row product identity
/// `(1/n) sum_i <X_i^{x2}, Psi> <X_i x 1_d, Psi>`.
fn contract_psi_squared(third: &ThirdMoments, psi: &RectGradTensor) -> Result<f64> {
    let d = psi.dim();
    match (third, psi) {
        (ThirdMoments::Exchangeable(s), RectGradTensor::Pattern { values, .. }) => {
            let PatternValues::Grad2 { diag, off } = values else {
                return Err(Error::validation("expected an order-2 tensor"));
            };
            let row_sum = diag + (d as f64 - 1.0) * off;
            Ok(row_sum * ((diag - off) * (s.s1 + s.s2) + off * s.total()))
        }
        (ThirdMoments::Data(data), RectGradTensor::Pattern { values, .. }) => {
            let PatternValues::Grad2 { diag, off } = values else {
                return Err(Error::validation("expected an order-2 tensor"));
            };
            let row_sum = diag + (d as f64 - 1.0) * off;
            let mut acc = 0.0;
            for row in data.values().rows() {
                let mut s = 0.0;
                let mut q = 0.0;
                for &x in row {
                    s += x;
                    q += x * x;
                }
                let quad = (diag - off) * q + off * s * s;
                acc += quad * row_sum * s;
            }
            Ok(acc / data.n() as f64)
        }
        (ThirdMoments::Data(data), RectGradTensor::Dense { .. }) => {
            let m = psi.to_matrix()?;
            let ones_image: Vec<f64> = (0..d).map(|j| m.row(j).sum()).collect();
            let mut acc = 0.0;
            for row in data.values().rows() {
                let mut quad = 0.0;
                let mut lin = 0.0;
                for j in 0..d {
                    let mut mj = 0.0;
                    for k in 0..d {
                        mj += m[[j, k]] * row[k];
                    }
                    quad += row[j] * mj;
                    lin += row[j] * ones_image[j];
                }
                acc += quad * lin;
            }
            Ok(acc / data.n() as f64)
        }
        (ThirdMoments::Dense { values: mt, .. }, _) => {
            let m = psi.to_matrix()?;
            let ones_image: Vec<f64> = (0..d).map(|j| m.row(j).sum()).collect();
            let mut acc = 0.0;
            for j in 0..d {
                for k in 0..d {
                    let mjk = m[[j, k]];
                    if mjk == 0.0 {
                        continue;
                    }
                    for l in 0..d {
                        acc += mt[(j * d + k) * d + l] * mjk * ones_image[l];
                    }
                }
            }
            Ok(acc)
        }
        (ThirdMoments::Exchangeable(_), RectGradTensor::Dense { .. }) => Err(Error::capability(
            "exchangeable third-moment summaries need a pattern integral",
        )),
    }
}

/// `Q_n(t) = -(1/(6 sqrt n)) <E[X^3-bar], int_{A(t)} grad^3 phi_Sigma>`.
pub fn q_n(inputs: &ExpansionInputs, t: f64) -> Result<f64> {
    inputs.validate()?;
    let tensor = rect_grad_integral(&inputs.sigma, t, 3, inputs.path)?;
    let c = contract_grad3(&inputs.third, &tensor)?;
    Ok(-c / (6.0 * (inputs.n as f64).sqrt()))
}

/// The matrix `Psi_alpha = int_{A(c^G_{1-alpha})} grad^2 phi_Sigma(z) dz`.
///
/// Structured specs use the pattern path, dense specs up to the cap use
/// quadrature, and larger dense specs fall back to the conditional Monte
/// Carlo identities (diagonal entries as conditional expectations given
/// `Z_j = t`, off-diagonal entries as nonnegative conditional orthant
/// probabilities).
pub fn psi_alpha(
    sigma: &CovarianceSpec,
    alpha: f64,
    path: PathHint,
    prec: &GmaxPrecision,
) -> Result<RectGradTensor> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha must lie in (0,1)"));
    }
    let t = gmax_quantile(sigma, 1.0 - alpha, prec)?;
    let want_pattern = match path {
        PathHint::Auto => sigma.is_exchangeable(),
        PathHint::Pattern => true,
        PathHint::Dense => false,
    };
    if want_pattern || sigma.d <= DENSE_DIM_CAP {
        return rect_grad_integral(sigma, t, 2, path);
    }
    let cov = materialize_cov(sigma)?;
    let psi = rect_grad2_conditional_mc(
        &cov,
        t,
        prec.mc_draws,
        StreamKey::new(prec.seed, 4, Purpose::GaussianRef),
    )?;
    let d = sigma.d;
    Ok(RectGradTensor::Dense {
        d,
        order: 2,
        threshold: t,
        values: psi.into_iter().collect(),
    })
}

/// `E[R_n(alpha)] = <M x 1_d, Psi^{x2}> / (2 f_Sigma(c) sqrt n)` with the
/// supplied third-moment tensor plugged in for the population tensor.
pub fn r_n(inputs: &ExpansionInputs, alpha: f64, prec: &GmaxPrecision) -> Result<f64> {
    inputs.validate()?;
    let psi = psi_alpha(&inputs.sigma, alpha, inputs.path, prec)?;
    let c = psi.threshold();
    let num = contract_psi_squared(&inputs.third, &psi)?;
    let dens = gmax_density(&inputs.sigma, c, 0, prec)?;
    if dens <= 0.0 {
        return Err(Error::validation("max density vanished at the quantile"));
    }
    Ok(num / (2.0 * dens * (inputs.n as f64).sqrt()))
}

/// The assembled expansion `alpha - (1-gamma) Q_n(c^G_{1-alpha}) - E[R_n]`.
pub fn predicted_rejection(
    inputs: &ExpansionInputs,
    alpha: f64,
    prec: &GmaxPrecision,
) -> Result<CoveragePrediction> {
    inputs.validate()?;
    let eps = inputs.eps_window;
    if !(alpha > eps && alpha < 1.0 - eps) {
        return Err(Error::validation(format!(
            "alpha = {alpha} outside the validity window ({eps}, {})",
            1.0 - eps
        )));
    }
    let c_g = gmax_quantile(&inputs.sigma, 1.0 - alpha, prec)?;
    let q_term = (1.0 - inputs.gamma) * q_n(inputs, c_g)?;
    let r_term = r_n(inputs, alpha, prec)?;
    Ok(CoveragePrediction {
        alpha,
        predicted: alpha - q_term - r_term,
        q_term,
        r_term,
        c_g,
    })
}

/// Cornish–Fisher corrected bootstrap quantile
/// `c_p^G - Qhat_{n,gamma}(c_p^G) / f_Sigma(c_p^G)` with
/// `Qhat_{n,gamma}(t) = (1/2) <X2bar - Sigma, int grad^2>
///  - (gamma/(6 sqrt n)) <X3bar, int grad^3>` from the sample moments.
pub fn cornish_fisher_quantile(
    inputs: &ExpansionInputs,
    sample: &DataSet,
    p: f64,
    prec: &GmaxPrecision,
) -> Result<f64> {
    inputs.validate()?;
    let eps = inputs.eps_window;
    if !(p > eps && p < 1.0 - eps) {
        return Err(Error::validation(format!(
            "p = {p} outside the validity window ({eps}, {})",
            1.0 - eps
        )));
    }
    if sample.dim() != inputs.sigma.d {
        return Err(Error::validation("sample dimension does not match sigma"));
    }
    if sample.n() != inputs.n {
        return Err(Error::validation("sample size does not match inputs.n"));
    }
    let d = inputs.sigma.d;
    let n = sample.n() as f64;
    let c = gmax_quantile(&inputs.sigma, p, prec)?;
    let t2 = rect_grad_integral(&inputs.sigma, c, 2, inputs.path)?;
    let t3 = rect_grad_integral(&inputs.sigma, c, 3, inputs.path)?;

    // <X2bar - Sigma, T2>
    let second_term = match &t2 {
        RectGradTensor::Pattern { values, .. } => {
            let PatternValues::Grad2 { diag, off } = values else {
                unreachable!()
            };
            let mut acc = 0.0;
            for row in sample.values().rows() {
                let mut s = 0.0;
                let mut q = 0.0;
                for &x in row {
                    s += x;
                    q += x * x;
                }
                acc += (diag - off) * q + off * s * s;
            }
            let sigma2 = inputs.sigma.exchangeable_sigma().expect("pattern path").powi(2);
            let rho = inputs.sigma.exchangeable_rho().expect("pattern path");
            let trace_part = d as f64 * sigma2 * diag;
            let off_part = d as f64 * (d as f64 - 1.0) * sigma2 * rho * off;
            acc / n - trace_part - off_part
        }
        RectGradTensor::Dense { .. } => {
            let m = t2.to_matrix()?;
            let cov = materialize_cov(&inputs.sigma)?;
            let mut acc = 0.0;
            for row in sample.values().rows() {
                for j in 0..d {
                    let mut mj = 0.0;
                    for k in 0..d {
                        mj += m[[j, k]] * row[k];
                    }
                    acc += row[j] * mj;
                }
            }
            let mut pop = 0.0;
            for j in 0..d {
                for k in 0..d {
                    pop += cov[[j, k]] * m[[j, k]];
                }
            }
            acc / n - pop
        }
    };
    let third_data = ThirdMoments::Data(sample.clone());
    let third_term = contract_grad3(&third_data, &t3)?;
    let q_hat = 0.5 * second_term - inputs.gamma / (6.0 * n.sqrt()) * third_term;
    let dens = gmax_density(&inputs.sigma, c, 0, prec)?;
    if dens <= 0.0 {
        return Err(Error::validation("max density vanished at the quantile"));
    }
    Ok(c - q_hat / dens)
}

/// Limit of `sqrt(n / log^3 d) (rejection - alpha)` in the spherical case:
/// `-(1 - w3) (sqrt 2 / 3) gamma_X log(1 - alpha)`.
pub fn spherical_limit(gamma_x: f64, alpha: f64, w3: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha must lie in (0,1)"));
    }
    Ok(-(1.0 - w3) * (std::f64::consts::SQRT_2 / 3.0) * gamma_x * (1.0 - alpha).ln())
}

/// Leading term of `P(T_n >= chat_{1-alpha}) - alpha` in the one-factor
/// model: `(E[U^3]/sqrt n) ((gamma-1)(z^2-1)/6 + z^2/2) phi(z)` with
/// `z = Phi^{-1}(alpha)`.
pub fn factor_expansion_leading(eu3: f64, gamma: f64, alpha: f64, n: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha must lie in (0,1)"));
    }
    if n == 0 {
        return Err(Error::validation("n must be positive"));
    }
    let z = norm_quantile(alpha)?;
    let z2 = z * z;
    Ok(eu3 / (n as f64).sqrt() * ((gamma - 1.0) / 6.0 * (z2 - 1.0) + 0.5 * z2) * norm_pdf(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DataSet;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn d1_inputs(gamma: f64, third: f64, n: usize) -> ExpansionInputs {
        ExpansionInputs::new(
            CovarianceSpec::identity_scaled(1, 1.0).unwrap(),
            n,
            gamma,
            ThirdMoments::Exchangeable(ThirdMomentSummary {
                s1: third,
                s2: 0.0,
                s3: 0.0,
                n,
                d: 1,
            }),
        )
        .unwrap()
    }

    #[test]
    fn q_n_univariate_value() {
        // -(2/60) phi''(0) = +2/60 phi(0)
        let inputs = d1_inputs(1.0, 2.0, 100);
        assert_abs_diff_eq!(q_n(&inputs, 0.0).unwrap(), 0.0132981, epsilon = 1e-7);
        // zero third moments kill it
        let zero = d1_inputs(1.0, 0.0, 100);
        for t in [-1.0, 0.0, 2.0] {
            assert_eq!(q_n(&zero, t).unwrap(), 0.0);
        }
        // total-derivative limit in the tails
        for t in [-12.0, 12.0] {
            assert!(q_n(&inputs, t).unwrap().abs() <= 1e-10);
        }
    }

    #[test]
    fn psi_alpha_closed_forms() {
        let prec = GmaxPrecision::default();
        // d=1: Psi = phi'(c) at c = Phi^{-1}(0.9)
        let d1 = CovarianceSpec::identity_scaled(1, 1.0).unwrap();
        let psi = psi_alpha(&d1, 0.1, PathHint::Auto, &prec).unwrap();
        let c = 1.2815515655446004;
        assert_abs_diff_eq!(psi.entry(&[0, 0]), -c * norm_pdf(c), epsilon = 1e-12);
        assert_abs_diff_eq!(psi.entry(&[0, 0]), -0.2249102, epsilon = 1e-7);

        // d=2 identity at alpha=0.1: c = Phi^{-1}(sqrt(0.9))
        let d2 = CovarianceSpec::identity_scaled(2, 1.0).unwrap();
        let psi = psi_alpha(&d2, 0.1, PathHint::Auto, &prec).unwrap();
        let c2 = norm_quantile(0.9_f64.sqrt()).unwrap();
        assert_abs_diff_eq!(
            psi.entry(&[0, 0]),
            -c2 * norm_pdf(c2) * crate::numeric::norm_cdf(c2),
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(psi.entry(&[0, 1]), norm_pdf(c2) * norm_pdf(c2), epsilon = 1e-10);
        // dense quadrature agrees
        let dense = psi_alpha(&d2, 0.1, PathHint::Dense, &prec).unwrap();
        for idx in [[0usize, 0], [0, 1], [1, 1]] {
            assert_abs_diff_eq!(psi.entry(&idx), dense.entry(&idx), epsilon = 1e-7);
        }

        // equicorrelation vs dense oracle at d=3
        let eq = CovarianceSpec::equicorrelation(3, 0.2, 1.0).unwrap();
        let pat = psi_alpha(&eq, 0.1, PathHint::Pattern, &prec).unwrap();
        let den = psi_alpha(&eq, 0.1, PathHint::Dense, &prec).unwrap();
        for idx in [[0usize, 0], [0, 1], [1, 2]] {
            assert_abs_diff_eq!(pat.entry(&idx), den.entry(&idx), epsilon = 1e-5);
        }
        // off-diagonal entries nonnegative for nonnegative equicorrelation
        assert!(pat.entry(&[0, 1]) >= 0.0);
    }

    #[test]
    fn r_n_univariate_value() {
        let prec = GmaxPrecision::default();
        let inputs = d1_inputs(1.0, 2.0, 100);
        // 2 c^2 phi(c) / (2 sqrt(100)) at c = Phi^{-1}(0.9)
        let c = 1.2815515655446004_f64;
        let expect = 2.0 * c * c * norm_pdf(c) / 20.0;
        assert_abs_diff_eq!(r_n(&inputs, 0.1, &prec).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(r_n(&inputs, 0.1, &prec).unwrap(), 0.0288234, epsilon = 1e-7);
        let zero = d1_inputs(1.0, 0.0, 100);
        for alpha in [0.05, 0.1, 0.5] {
            assert_eq!(r_n(&zero, alpha, &prec).unwrap(), 0.0);
        }
    }

    #[test]
    fn univariate_reduction_matches_remark_formulas() {
        let prec = GmaxPrecision::default();
        for g in [0.0, 1.0] {
            for i in 1..=19 {
                let alpha = i as f64 / 20.0;
                let inputs = d1_inputs(g, 2.0, 100);
                let pred = predicted_rejection(&inputs, alpha, &prec).unwrap();
                let c = norm_quantile(1.0 - alpha).unwrap();
                let remark = if g == 1.0 {
                    alpha - 2.0 / (2.0 * 10.0) * c * c * norm_pdf(c)
                } else {
                    alpha - 2.0 / (6.0 * 10.0) * (2.0 * c * c + 1.0) * norm_pdf(c)
                };
                assert_abs_diff_eq!(pred.predicted, remark, epsilon = 1e-10);
                assert_eq!(pred.predicted, pred.alpha - pred.q_term - pred.r_term);
            }
        }
        // reference values at alpha = 0.1
        let g1 = predicted_rejection(&d1_inputs(1.0, 2.0, 100), 0.1, &prec).unwrap();
        assert_abs_diff_eq!(g1.predicted, 0.0711766, epsilon = 1e-7);
        let g0 = predicted_rejection(&d1_inputs(0.0, 2.0, 100), 0.1, &prec).unwrap();
        assert_abs_diff_eq!(g0.predicted, 0.0749345, epsilon = 1e-7);
    }

    #[test]
    fn symmetric_third_moments_predict_alpha() {
        let prec = GmaxPrecision::default();
        let sigma = CovarianceSpec::equicorrelation(5, 0.3, 1.0).unwrap();
        let third = ThirdMoments::Exchangeable(ThirdMomentSummary {
            s1: 0.0,
            s2: 0.0,
            s3: 0.0,
            n: 50,
            d: 5,
        });
        for g in [0.0, 1.0] {
            let inputs = ExpansionInputs::new(sigma.clone(), 50, g, third.clone()).unwrap();
            let pred = predicted_rejection(&inputs, 0.1, &prec).unwrap();
            assert_eq!(pred.predicted, 0.1);
            assert_eq!(pred.q_term, 0.0);
            assert_eq!(pred.r_term, 0.0);
        }
    }

    #[test]
    fn alpha_window_enforced() {
        let prec = GmaxPrecision::default();
        let inputs = d1_inputs(1.0, 2.0, 100);
        assert!(predicted_rejection(&inputs, 0.005, &prec).is_err());
        assert!(predicted_rejection(&inputs, 0.995, &prec).is_err());
    }

    #[test]
    fn tail_vanishing_at_extreme_alpha() {
        let prec = GmaxPrecision::default();
        for spec in [
            CovarianceSpec::identity_scaled(400, 1.0).unwrap(),
            CovarianceSpec::equicorrelation(400, 0.2, 1.0).unwrap(),
        ] {
            let third = ThirdMoments::Exchangeable(ThirdMomentSummary {
                s1: 2.0 * 400.0,
                s2: 0.0,
                s3: 0.0,
                n: 400,
                d: 400,
            });
            let inputs = ExpansionInputs::new(spec.clone(), 400, 0.0, third).unwrap();
            let alpha = 1e-9;
            let c = gmax_quantile(&spec, 1.0 - alpha, &prec).unwrap();
            assert!(q_n(&inputs, c).unwrap().abs() <= 1e-8);
            let psi = psi_alpha(&spec, alpha, PathHint::Auto, &prec).unwrap();
            assert!(psi.max_abs() <= 1e-8);
        }
    }

    #[test]
    fn streaming_contraction_matches_dense_tensor() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(31);
        for d in [2usize, 4, 6] {
            let n = 40;
            let values = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5_f64));
            let data = DataSet::new(values).unwrap();
            let spec = CovarianceSpec::ar1(d, 0.4).unwrap();
            let prec = GmaxPrecision::default();
            let psi = psi_alpha(&spec, 0.1, PathHint::Dense, &prec).unwrap();
            let via_rows = contract_psi_squared(&ThirdMoments::Data(data.clone()), &psi).unwrap();
            let dense3 = ThirdMoments::dense_from_data(&data).unwrap();
            let via_tensor = contract_psi_squared(&dense3, &psi).unwrap();
            let scale = 1.0 + via_tensor.abs();
            assert!(
                (via_rows - via_tensor).abs() < 1e-9 * scale,
                "d={d}: {via_rows} vs {via_tensor}"
            );
            // and the order-3 contraction agrees between data and tensor forms
            let t3 = rect_grad_integral(&spec, 0.7, 3, PathHint::Dense).unwrap();
            let a = contract_grad3(&ThirdMoments::Data(data), &t3).unwrap();
            let b = contract_grad3(&dense3, &t3).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn prediction_is_scale_invariant() {
        // X -> cX, Sigma -> c^2 Sigma leaves the prediction unchanged
        let prec = GmaxPrecision::default();
        let c = 3.0_f64;
        for d in [2usize, 5] {
            let base = CovarianceSpec::equicorrelation(d, 0.4, 1.0).unwrap();
            let scaled = CovarianceSpec::equicorrelation(d, 0.4, c).unwrap();
            let s = ThirdMomentSummary {
                s1: 1.3 * d as f64,
                s2: 0.2,
                s3: 0.1,
                n: 80,
                d,
            };
            let s_scaled = ThirdMomentSummary {
                s1: s.s1 * c.powi(3),
                s2: s.s2 * c.powi(3),
                s3: s.s3 * c.powi(3),
                n: 80,
                d,
            };
            for g in [0.0, 1.0] {
                let p0 = predicted_rejection(
                    &ExpansionInputs::new(base.clone(), 80, g, ThirdMoments::Exchangeable(s))
                        .unwrap(),
                    0.1,
                    &prec,
                )
                .unwrap();
                let p1 = predicted_rejection(
                    &ExpansionInputs::new(
                        scaled.clone(),
                        80,
                        g,
                        ThirdMoments::Exchangeable(s_scaled),
                    )
                    .unwrap(),
                    0.1,
                    &prec,
                )
                .unwrap();
                assert_abs_diff_eq!(p0.predicted, p1.predicted, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn cornish_fisher_zero_correction() {
        // a sample whose second moment matrix equals Sigma and whose third
        // moments vanish leaves the Gaussian quantile unchanged
        let prec = GmaxPrecision::default();
        let sigma = CovarianceSpec::identity_scaled(2, 1.0).unwrap();
        let values = ndarray::arr2(&[[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]]);
        let sample = DataSet::new(values).unwrap();
        let inputs = ExpansionInputs::new(
            sigma.clone(),
            4,
            1.0,
            ThirdMoments::from_data_exchangeable(&sample),
        )
        .unwrap();
        let q = cornish_fisher_quantile(&inputs, &sample, 0.9, &prec).unwrap();
        let c = gmax_quantile(&sigma, 0.9, &prec).unwrap();
        assert_abs_diff_eq!(q, c, epsilon = 1e-12);
    }

    #[test]
    fn cornish_fisher_univariate_reduction_and_floor() {
        use rand::prelude::*;
        let prec = GmaxPrecision::default();
        let mut rng = rand::rngs::StdRng::seed_from_u64(77);
        let n = 60;
        let values = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.4_f64));
        let sample = DataSet::new(values).unwrap();
        let sigma = CovarianceSpec::identity_scaled(1, 1.0).unwrap();
        let gamma = 1.0;
        let inputs = ExpansionInputs::new(
            sigma.clone(),
            n,
            gamma,
            ThirdMoments::from_data_exchangeable(&sample),
        )
        .unwrap();
        for &p in &[0.2, 0.5, 0.9] {
            let out = cornish_fisher_quantile(&inputs, &sample, p, &prec).unwrap();
            let c = norm_quantile(p).unwrap();
            // univariate closed form of the correction
            let m2: f64 = sample.values().iter().map(|x| x * x).sum::<f64>() / n as f64;
            let m3: f64 = sample.values().iter().map(|x| x.powi(3)).sum::<f64>() / n as f64;
            let q_hat = 0.5 * (m2 - 1.0) * (-c * norm_pdf(c))
                - gamma / (6.0 * (n as f64).sqrt()) * m3 * (c * c - 1.0) * norm_pdf(c);
            let expect = c - q_hat / norm_pdf(c);
            assert_abs_diff_eq!(out, expect, epsilon = 1e-10);
            // correction bounded through the density floor
            let diag = crate::gauss::gmax_diagnostics(&sigma, &prec).unwrap();
            assert!((out - c).abs() <= q_hat.abs() / diag.density_floor(p) + 1e-12);
        }
    }

    #[test]
    fn spherical_limit_values() {
        assert_abs_diff_eq!(
            spherical_limit(2.0, 0.1, 0.0).unwrap(),
            0.0993348,
            epsilon = 1e-7
        );
        assert_eq!(spherical_limit(1.7, 0.3, 1.0).unwrap(), 0.0);
        for &alpha in &[0.05, 0.5, 0.9] {
            assert_eq!(spherical_limit(0.0, alpha, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn factor_leading_values() {
        assert_abs_diff_eq!(
            factor_expansion_leading(2.0, 1.0, 0.1, 100).unwrap(),
            0.0288234,
            epsilon = 1e-7
        );
        assert_eq!(factor_expansion_leading(0.0, 0.0, 0.2, 50).unwrap(), 0.0);
        // at |z_alpha| = 1 the (gamma-1)(z^2-1)/6 term vanishes
        let alpha = crate::numeric::norm_cdf(-1.0);
        let a = factor_expansion_leading(2.0, 1.0, alpha, 100).unwrap();
        let b = factor_expansion_leading(2.0, 0.0, alpha, 100).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-14);
    }
}
