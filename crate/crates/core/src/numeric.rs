//! Shared numerics: scalar normal functions, Gauss quadrature rules,
//! adaptive integration and small dense linear algebra.
//!
//! Everything here is deterministic and allocation-light; the statistical
//! modules build on these primitives.

use std::sync::OnceLock;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Standard normal density.
#[inline]
pub fn norm_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / SQRT_2PI
}

/// Standard normal distribution function, accurate in both tails.
/// libm's erfc carries full double precision; statrs' stops near 1e-11.
#[inline]
pub fn norm_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * std::f64::consts::FRAC_1_SQRT_2)
}

/// Upper tail `P(Z > t)` without cancellation for large `t`.
#[inline]
pub fn norm_sf(t: f64) -> f64 {
    norm_cdf(-t)
}

/// Inverse standard normal distribution function.
///
/// statrs' `erfc_inv` gives the starting point; two Halley steps against the
/// full-precision `norm_cdf` pin the result to machine precision, which the
/// quantile/CDF round-trip checks rely on.
pub fn norm_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation(format!(
            "normal quantile requires p in (0,1), got {p}"
        )));
    }
    let mut x = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    for _ in 0..2 {
        let pdf = norm_pdf(x);
        if pdf <= 1e-300 {
            break;
        }
        let err = norm_cdf(x) - p;
        let u = err / pdf;
        x -= u / (1.0 - 0.5 * u * x);
    }
    Ok(x)
}

/// Nodes and weights of a quadrature rule.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Orthonormal Hermite polynomial values `(h_n(x), h_{n-1}(x))` for the
/// weight `exp(-x^2)`.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p1 = std::f64::consts::PI.powf(-0.25);
    let mut p2 = 0.0;
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = x * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, p2)
}

/// Gauss–Hermite rule with weight `exp(-x^2)` on the real line.
///
/// Positive roots are bracketed by a sign-change scan of the orthonormal
/// recurrence (grid pitch well below the minimal root spacing `~pi/sqrt(2n)`)
/// and polished by bisection plus clamped Newton steps; this stays robust at
/// the 200-node rule the factor integrals use, where the classical
/// initial-guess chain jumps Newton basins. The recurrence overflows somewhere
/// beyond n = 300, hence the assert.
pub fn gauss_hermite(n: usize) -> QuadRule {
    assert!(n >= 1 && n <= 300);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    let upper = (2.0 * nf + 1.0).sqrt();
    let step = std::f64::consts::PI / (2.0 * nf + 1.0).sqrt() / 4.0;
    let mut found = 0usize;
    let mut x = if n % 2 == 1 {
        // x = 0 is a root of odd-degree rules
        let (_, pm1) = hermite_pair(n, 0.0);
        let pp = (2.0 * nf).sqrt() * pm1;
        nodes[n / 2] = 0.0;
        weights[n / 2] = 2.0 / (pp * pp);
        0.5 * step
    } else {
        0.0
    };
    let mut fx = hermite_pair(n, x).0;
    while found < n / 2 && x < upper + 1.0 {
        let x2 = x + step;
        let fx2 = hermite_pair(n, x2).0;
        if fx == 0.0 || fx.signum() != fx2.signum() {
            // bisect, then polish with Newton clamped to the bracket
            let (mut lo, mut hi) = (x, x2);
            let mut flo = fx;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let fmid = hermite_pair(n, mid).0;
                if fmid == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if fmid.signum() == flo.signum() {
                    lo = mid;
                    flo = fmid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-13 {
                    break;
                }
            }
            let mut z = 0.5 * (lo + hi);
            let mut pp = 0.0;
            for _ in 0..8 {
                let (p1, p2) = hermite_pair(n, z);
                pp = (2.0 * nf).sqrt() * p2;
                let dz = p1 / pp;
                let znew = (z - dz).clamp(lo, hi);
                if (znew - z).abs() < 1e-15 * (1.0 + z.abs()) {
                    z = znew;
                    break;
                }
                z = znew;
            }
            // scan moves outward from zero: smallest positive roots first
            let pos_idx = n / 2 + found + (n % 2);
            let neg_idx = n / 2 - 1 - found;
            let w = 2.0 / (pp * pp);
            nodes[pos_idx] = z;
            nodes[neg_idx] = -z;
            weights[pos_idx] = w;
            weights[neg_idx] = w;
            found += 1;
        }
        x = x2;
        fx = fx2;
    }
    assert_eq!(found, n / 2, "failed to bracket all Gauss-Hermite roots");
    QuadRule { nodes, weights }
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> QuadRule {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0_f64;
            let mut p2 = 0.0_f64;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    QuadRule { nodes, weights }
}

fn gl20() -> &'static QuadRule {
    static RULE: OnceLock<QuadRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(20))
}

fn gl40() -> &'static QuadRule {
    static RULE: OnceLock<QuadRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(40))
}

fn panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rule: &QuadRule) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Adaptive integration of `f` over `[a, b]` to absolute tolerance `tol`.
///
/// The interval is first split into eight panels so that narrow features
/// cannot hide between the nodes of a single wide rule; each panel is then
/// evaluated with 20- and 40-node Gauss–Legendre rules and bisected while the
/// two disagree. Depth is capped, so pathological integrands degrade
/// gracefully instead of recursing forever.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let cuts: Vec<f64> = (0..=8)
        .map(|i| a + (b - a) * (i as f64) / 8.0)
        .collect();
    integrate_seeded(f, &cuts, tol)
}

/// Adaptive integration over consecutive panels given by `breakpoints`
/// (sorted). Callers seed panel boundaries around known features, e.g. the
/// transition region of a steep factor integrand.
pub fn integrate_seeded<F: Fn(f64) -> f64>(f: &F, breakpoints: &[f64], tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, coarse: f64, depth: u32) -> f64 {
        let mid = 0.5 * (a + b);
        let left = panel(f, a, mid, gl40());
        let right = panel(f, mid, b, gl40());
        let fine = left + right;
        if (fine - coarse).abs() <= tol || depth >= 40 {
            return fine;
        }
        rec(f, a, mid, 0.5 * tol, left, depth + 1) + rec(f, mid, b, 0.5 * tol, right, depth + 1)
    }
    let panels = breakpoints.len().saturating_sub(1).max(1) as f64;
    breakpoints
        .windows(2)
        .map(|w| rec(f, w[0], w[1], tol / panels, panel(f, w[0], w[1], gl20()), 0))
        .sum()
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Fails when a pivot drops below `tol` times the largest diagonal entry,
/// which doubles as the positive-definiteness check for dense covariance
/// specifications.
pub fn cholesky(a: &Array2<f64>, tol: f64) -> Result<Array2<f64>> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::validation("cholesky requires a square matrix"));
    }
    let scale = (0..d).map(|j| a[[j, j]].abs()).fold(0.0_f64, f64::max).max(1.0);
    let mut l = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if diag <= tol * scale {
            return Err(Error::validation(format!(
                "matrix is not positive definite (pivot {diag:.3e} at index {j})"
            )));
        }
        let root = diag.sqrt();
        l[[j, j]] = root;
        for i in (j + 1)..d {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / root;
        }
    }
    Ok(l)
}

/// Solve `L L^T x = b` in place given the lower Cholesky factor.
pub fn cholesky_solve(l: &Array2<f64>, b: &mut Array1<f64>) {
    let d = l.nrows();
    for i in 0..d {
        let mut v = b[i];
        for k in 0..i {
            v -= l[[i, k]] * b[k];
        }
        b[i] = v / l[[i, i]];
    }
    for i in (0..d).rev() {
        let mut v = b[i];
        for k in (i + 1)..d {
            v -= l[[k, i]] * b[k];
        }
        b[i] = v / l[[i, i]];
    }
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor,
/// together with the log-determinant.
pub fn spd_inverse(a: &Array2<f64>, tol: f64) -> Result<(Array2<f64>, f64)> {
    let d = a.nrows();
    let l = cholesky(a, tol)?;
    let log_det = 2.0 * (0..d).map(|j| l[[j, j]].ln()).sum::<f64>();
    let mut inv = Array2::<f64>::zeros((d, d));
    let mut col = Array1::<f64>::zeros(d);
    for j in 0..d {
        col.fill(0.0);
        col[j] = 1.0;
        cholesky_solve(&l, &mut col);
        inv.column_mut(j).assign(&col);
    }
    // Symmetrize away round-off.
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    Ok((inv, log_det))
}

/// All eigenvalues of a symmetric matrix via cyclic Jacobi sweeps.
pub fn sym_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let d = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-13 * (1.0 + m.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..d).map(|j| m[[j, j]]).collect()
}

/// Format a float with `sig` significant digits, using plain decimal notation
/// in the human range and scientific notation outside it. `parse::<f64>()`
/// round-trips to the printed precision.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..15).contains(&exp) {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.*e}", sig - 1)
    }
}
