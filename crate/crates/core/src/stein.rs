//! Verification oracle for the Stein-kernel property of the weight laws:
//! univariate kernel construction from the integral formula
//! `tau(x) f(x) = int_x^sup (u - mean) f(u) du`, residual checks of the
//! defining identity `E[(xi - mu) h'(xi)] = E[tau(xi) h''(xi)]` over
//! polynomial test functions, and the boundedness report entering the
//! bootstrap theorem's weight condition.
//!
//! Densities with algebraic endpoint singularities (the small-shape betas
//! behave like `x^{a-1}` with `a - 1` close to -1) concentrate real mass
//! within 1e-16 of the endpoint, which no quadrature evaluating `f(x)`
//! directly can see in double precision. Such densities are therefore passed
//! in factored form `base(x) (x-lo)^{p_lo} (hi-x)^{p_hi}` and integrated
//! after the substitution `v = (hi-x)^{1+p_hi}`, which absorbs the power
//! exactly and leaves a smooth integrand.

use crate::error::{Error, Result};
use crate::numeric::integrate;
use crate::random::WeightLaw;

/// Quadrature tolerance for kernel construction.
const QUAD_TOL: f64 = 1e-12;

/// The upper integration limit is truncated where the density drops below
/// this level (unbounded supports only).
const DENSITY_FLOOR: f64 = 1e-16;

/// A density on `(lo, hi)` of the form
/// `f(x) = base(x) (x - lo)^{p_lo} (hi - x)^{p_hi}` with smooth `base` and
/// exponents > -1. Regular densities use zero exponents.
pub struct EndpointDensity {
    pub base: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub lo: f64,
    pub hi: f64,
    pub p_lo: f64,
    pub p_hi: f64,
}

impl EndpointDensity {
    /// Density value at an interior point.
    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.lo || x >= self.hi {
            return 0.0;
        }
        (self.base)(x) * (x - self.lo).powf(self.p_lo) * (self.hi - x).powf(self.p_hi)
    }

    /// `int_from^hi g(x) f(x) dx` with the upper-endpoint power handled by
    /// the substitution `v = (hi - x)^{1 + p_hi}`.
    fn integrate_upper<G: Fn(f64) -> f64>(&self, g: &G, from: f64, tol: f64) -> f64 {
        let beta = 1.0 + self.p_hi;
        let v_max = (self.hi - from).powf(beta);
        let integrand = |v: f64| {
            let x = self.hi - v.powf(1.0 / beta);
            let smooth = (self.base)(x) * (x - self.lo).powf(self.p_lo);
            g(x) * smooth
        };
        integrate(&integrand, 0.0, v_max, tol) / beta
    }

    /// `int_lo^to g(x) f(x) dx` with the lower-endpoint power handled by the
    /// substitution `v = (x - lo)^{1 + p_lo}`.
    fn integrate_lower<G: Fn(f64) -> f64>(&self, g: &G, to: f64, tol: f64) -> f64 {
        let beta = 1.0 + self.p_lo;
        let v_max = (to - self.lo).powf(beta);
        let integrand = |v: f64| {
            let x = self.lo + v.powf(1.0 / beta);
            let smooth = (self.base)(x) * (self.hi - x).powf(self.p_hi);
            g(x) * smooth
        };
        integrate(&integrand, 0.0, v_max, tol) / beta
    }

    /// `int_lo^hi g(x) f(x) dx`, splitting at the midpoint so each endpoint
    /// is handled by its own substitution.
    pub fn integrate_full<G: Fn(f64) -> f64>(&self, g: &G, tol: f64) -> f64 {
        let mid = 0.5 * (self.lo + self.hi);
        self.integrate_lower(g, mid, 0.5 * tol) + self.integrate_upper(g, mid, 0.5 * tol)
    }

    /// `int_lo^hi F(x) dx` for a plain integrand whose derivative blows up
    /// like the density's endpoint powers (e.g. the running integral
    /// `tau f`, which is a `(hi-x)^{1+p_hi}` cusp near `hi`). The same power
    /// substitutions flatten the cusps; the Jacobian `v^{1/beta - 1}` is
    /// smooth for beta < 1 and integrable otherwise.
    pub fn integrate_plain<F: Fn(f64) -> f64>(&self, f: &F, tol: f64) -> f64 {
        let mid = 0.5 * (self.lo + self.hi);
        let beta_lo = 1.0 + self.p_lo;
        let v_lo = (mid - self.lo).powf(beta_lo);
        let lower = integrate(
            &|v: f64| {
                let x = self.lo + v.powf(1.0 / beta_lo);
                f(x) * v.powf(1.0 / beta_lo - 1.0)
            },
            0.0,
            v_lo,
            0.5 * tol,
        ) / beta_lo;
        let beta_hi = 1.0 + self.p_hi;
        let v_hi = (self.hi - mid).powf(beta_hi);
        let upper = integrate(
            &|v: f64| {
                let x = self.hi - v.powf(1.0 / beta_hi);
                f(x) * v.powf(1.0 / beta_hi - 1.0)
            },
            0.0,
            v_hi,
            0.5 * tol,
        ) / beta_hi;
        lower + upper
    }
}

enum DensityForm {
    /// Smooth density; possibly unbounded support, truncated where the
    /// density falls below the floor.
    Smooth {
        f: Box<dyn Fn(f64) -> f64 + Send + Sync>,
        upper: f64,
    },
    /// Factored density with algebraic endpoint behavior.
    Endpoint(EndpointDensity),
}

/// A univariate Stein kernel evaluator built from a density.
pub struct UnivariateKernel {
    form: DensityForm,
    mean: f64,
    support: (f64, f64),
}

impl UnivariateKernel {
    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn density(&self, x: f64) -> f64 {
        match &self.form {
            DensityForm::Smooth { f, .. } => f(x),
            DensityForm::Endpoint(e) => e.eval(x),
        }
    }

    /// `tau(x) = [int_x^sup (u - mean) f(u) du] / f(x)`.
    pub fn eval(&self, x: f64) -> Result<f64> {
        let fx = self.density(x);
        if fx <= DENSITY_FLOOR {
            return Err(Error::validation(format!(
                "Stein kernel evaluated at a density zero (x = {x})"
            )));
        }
        let mean = self.mean;
        let num = match &self.form {
            DensityForm::Smooth { f, upper } => {
                if x >= *upper {
                    return Ok(0.0);
                }
                integrate(&|u| (u - mean) * f(u), x, *upper, QUAD_TOL)
            }
            DensityForm::Endpoint(e) => e.integrate_upper(&|u| u - mean, x, QUAD_TOL),
        };
        Ok(num / fx)
    }

    /// Supremum of |tau| over a grid on `[lo, hi]`.
    pub fn sup_abs_on(&self, lo: f64, hi: f64, points: usize) -> Result<f64> {
        let mut sup = 0.0_f64;
        for i in 0..=points {
            let x = lo + (hi - lo) * i as f64 / points as f64;
            if self.density(x) <= DENSITY_FLOOR {
                continue;
            }
            sup = sup.max(self.eval(x)?.abs());
        }
        Ok(sup)
    }
}

/// Build a kernel from a smooth density with the given mean on the given
/// support (`f64::INFINITY` endpoints allowed).
pub fn kernel_from_density(
    density: impl Fn(f64) -> f64 + Send + Sync + 'static,
    mean: f64,
    support: (f64, f64),
) -> Result<UnivariateKernel> {
    let (lo, hi) = support;
    if !(lo < hi) {
        return Err(Error::validation("support must be a nonempty interval"));
    }
    let upper = if hi.is_finite() {
        hi
    } else {
        // march outward until the density stays below the floor
        let mut u = mean.max(lo) + 1.0;
        let mut width = 1.0;
        while density(u) > DENSITY_FLOOR && width < 1e6 {
            width *= 2.0;
            u += width;
        }
        u
    };
    Ok(UnivariateKernel {
        form: DensityForm::Smooth {
            f: Box::new(density),
            upper,
        },
        mean,
        support,
    })
}

/// Build a kernel from a factored density with algebraic endpoint exponents.
pub fn kernel_from_endpoint_density(
    density: EndpointDensity,
    mean: f64,
) -> Result<UnivariateKernel> {
    if !(density.lo < density.hi) || !density.lo.is_finite() || !density.hi.is_finite() {
        return Err(Error::validation(
            "endpoint-factored densities need a finite support interval",
        ));
    }
    if density.p_lo <= -1.0 || density.p_hi <= -1.0 {
        return Err(Error::validation("endpoint exponents must exceed -1"));
    }
    let support = (density.lo, density.hi);
    Ok(UnivariateKernel {
        form: DensityForm::Endpoint(density),
        mean,
        support,
    })
}

/// A law for which the Stein identity residual can be computed, either from
/// closed-form moments or by quadrature against a supplied kernel.
pub enum SteinLaw {
    StandardNormal,
    /// Raw Beta(a, b) on [0, 1]; kernel `x (1 - x) / (a + b)`.
    Beta { a: f64, b: f64 },
    /// Standardized beta `(eta - mu)/sd`; kernel `tau_beta(eta) / Var(eta)`.
    StdBeta { a: f64, b: f64 },
}

impl SteinLaw {
    /// Raw moments `E[xi^k]` for k = 0..=deg.
    fn moments(&self, deg: usize) -> Vec<f64> {
        match *self {
            SteinLaw::StandardNormal => {
                // E[Z^k]: 0 for odd, (k-1)!! for even
                let mut m = vec![0.0; deg + 1];
                m[0] = 1.0;
                for k in (2..=deg).step_by(2) {
                    m[k] = ((1..k).step_by(2)).map(|j| j as f64).product();
                }
                m
            }
            SteinLaw::Beta { a, b } => {
                // E[eta^{m+1}] = E[eta^m] (a + m)/(a + b + m)
                let mut m = vec![1.0; deg + 1];
                for k in 1..=deg {
                    m[k] = m[k - 1] * (a + (k - 1) as f64) / (a + b + (k - 1) as f64);
                }
                m
            }
            SteinLaw::StdBeta { a, b } => {
                let raw = SteinLaw::Beta { a, b }.moments(deg);
                let s = a + b;
                let mu = a / s;
                let sd = (a * b / (s * s * (s + 1.0))).sqrt();
                // binomial expansion of ((eta - mu)/sd)^k
                let mut m = vec![0.0; deg + 1];
                for (k, mk) in m.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..=k {
                        acc += binomial(k, j) * raw[j] * (-mu).powi((k - j) as i32);
                    }
                    *mk = acc / sd.powi(k as i32);
                }
                m
            }
        }
    }

    /// `E[tau(xi) xi^k]` for the law's closed-form kernel, k = 0..=deg.
    fn kernel_moments(&self, deg: usize) -> Vec<f64> {
        match *self {
            SteinLaw::StandardNormal => self.moments(deg), // tau = 1
            SteinLaw::Beta { a, b } => {
                // tau(x) = x(1-x)/(a+b): E[tau x^k] = (E[x^{k+1}] - E[x^{k+2}])/(a+b)
                let raw = self.moments(deg + 2);
                (0..=deg)
                    .map(|k| (raw[k + 1] - raw[k + 2]) / (a + b))
                    .collect()
            }
            SteinLaw::StdBeta { a, b } => {
                // tau*(w) = tau_beta(eta)/Var(eta) with w = (eta - mu)/sd:
                // expand w^k binomially against E[tau_beta(eta) eta^j]
                let s = a + b;
                let mu = a / s;
                let var = a * b / (s * s * (s + 1.0));
                let sd = var.sqrt();
                let tau_raw = SteinLaw::Beta { a, b }.kernel_moments(deg);
                (0..=deg)
                    .map(|k| {
                        let mut acc = 0.0;
                        for j in 0..=k {
                            acc += binomial(k, j) * tau_raw[j] * (-mu).powi((k - j) as i32);
                        }
                        acc / sd.powi(k as i32) / var
                    })
                    .collect()
            }
        }
    }

    fn mean(&self) -> f64 {
        match *self {
            SteinLaw::StandardNormal => 0.0,
            SteinLaw::Beta { a, b } => a / (a + b),
            SteinLaw::StdBeta { .. } => 0.0,
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Residual `|E[(xi - mu) h'(xi)] - E[tau(xi) h''(xi)]|` for a polynomial
/// test function `h` given by its coefficients (degree <= 6): exact moment
/// arithmetic when `kernel` is `None`, quadrature against the supplied
/// kernel otherwise. On the quadrature path, `E[tau h'']` is integrated as
/// `int num(x) h''(x) dx` with `num = tau f` taken directly from the kernel
/// construction, so no division by a vanishing density occurs.
pub fn stein_identity_residual(
    law: &SteinLaw,
    kernel: Option<&UnivariateKernel>,
    h: &[f64],
) -> Result<f64> {
    if h.len() > 7 {
        return Err(Error::validation("polynomial degree must be at most 6"));
    }
    let deg = h.len().saturating_sub(1);
    let mu = law.mean();
    match kernel {
        None => {
            let raw = law.moments(deg.max(1) + 1);
            let tau = law.kernel_moments(deg.max(2));
            let mut lhs = 0.0; // E[(xi - mu) h'(xi)]
            let mut rhs = 0.0; // E[tau(xi) h''(xi)]
            for (k, &c) in h.iter().enumerate() {
                if k >= 1 {
                    let kf = k as f64;
                    lhs += c * kf * (raw[k] - mu * raw[k - 1]);
                }
                if k >= 2 {
                    let kf = k as f64;
                    rhs += c * kf * (kf - 1.0) * tau[k - 2];
                }
            }
            Ok((lhs - rhs).abs())
        }
        Some(kern) => {
            let poly_d1 = |x: f64| {
                h.iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, &c)| c * k as f64 * x.powi((k - 1) as i32))
                    .sum::<f64>()
            };
            let poly_d2 = |x: f64| {
                h.iter()
                    .enumerate()
                    .skip(2)
                    .map(|(k, &c)| c * (k * (k - 1)) as f64 * x.powi((k - 2) as i32))
                    .sum::<f64>()
            };
            let (lhs, rhs) = match &kern.form {
                DensityForm::Smooth { f, upper } => {
                    let lo = kern.support.0.max(mu - 60.0);
                    let lhs = integrate(&|x| (x - mu) * poly_d1(x) * f(x), lo, *upper, QUAD_TOL);
                    // E[tau h''] = int (tau f)(x) h''(x) dx with
                    // (tau f)(x) = int_x^upper (u - mu) f(u) du
                    let rhs = integrate(
                        &|x| integrate(&|u| (u - mu) * f(u), x, *upper, 1e-13) * poly_d2(x),
                        lo,
                        *upper,
                        1e-11,
                    );
                    (lhs, rhs)
                }
                DensityForm::Endpoint(e) => {
                    let lhs = e.integrate_full(&|x| (x - mu) * poly_d1(x), QUAD_TOL);
                    let num = |x: f64| e.integrate_upper(&|u| u - mu, x, 1e-12);
                    let rhs = e.integrate_plain(&|x| num(x) * poly_d2(x), 1e-10);
                    (lhs, rhs)
                }
            };
            Ok((lhs - rhs).abs())
        }
    }
}

/// Boundedness report for a weight law: the support radius `sup |w|`, the
/// kernel supremum `sup |tau*|`, and the smallest constant `b_w` satisfying
/// both `|w| <= b_w` and `|tau*(w)| <= b_w^2`. The two suprema are reported
/// separately; their minimal constants need not coincide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelBound {
    pub b_w: f64,
    pub support_radius: f64,
    pub tau_sup: f64,
    pub ok: bool,
}

/// Check the bounded-weight condition for a law. Only the standardized beta
/// has both a bounded support and a Stein kernel; the Gaussian weight is
/// covered by its own case of the bootstrap theorem, and two-point laws
/// (Mammen, Rademacher) admit no Stein kernel at all.
pub fn kernel_bound_check(law: &WeightLaw) -> Result<KernelBound> {
    match law {
        WeightLaw::Gaussian => Err(Error::capability(
            "the Gaussian weight is unbounded; the theorem's separate Gaussian case \
             applies with b_w = 1",
        )),
        WeightLaw::Mammen | WeightLaw::Rademacher => Err(Error::capability(
            "two-point distributions do not admit Stein kernels",
        )),
        WeightLaw::StdBeta { a, b, .. } => {
            let (a, b) = (*a, *b);
            let s = a + b;
            let mu = a / s;
            let var = a * b / (s * s * (s + 1.0));
            let sd = var.sqrt();
            let support_radius = (mu / sd).max((1.0 - mu) / sd);
            // tau*(w) = eta (1 - eta) / ((a+b) Var(eta)); grid search
            let mut tau_sup = 0.0_f64;
            let grid = 20_000;
            for i in 0..=grid {
                let eta = i as f64 / grid as f64;
                tau_sup = tau_sup.max(eta * (1.0 - eta) / (s * var));
            }
            let b_w = support_radius.max(tau_sup.sqrt()).max(1.0);
            Ok(KernelBound {
                b_w,
                support_radius,
                tau_sup,
                ok: b_w.is_finite(),
            })
        }
    }
}

/// Beta(a, b) density in endpoint-factored form.
pub fn beta_endpoint_density(a: f64, b: f64) -> EndpointDensity {
    let ln_norm = statrs::function::gamma::ln_gamma(a + b)
        - statrs::function::gamma::ln_gamma(a)
        - statrs::function::gamma::ln_gamma(b);
    let c = ln_norm.exp();
    EndpointDensity {
        base: Box::new(move |_x| c),
        lo: 0.0,
        hi: 1.0,
        p_lo: a - 1.0,
        p_hi: b - 1.0,
    }
}
