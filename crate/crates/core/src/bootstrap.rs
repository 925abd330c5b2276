//! The statistics under study and the resampling procedures: the max
//! statistic T_n, wild and empirical bootstrap replicates, finite-B quantile
//! and p-value rules, and the nested double wild bootstrap with its
//! prepivoted rejection rule.
//!
//! Replicate generation is a matrix product: a chunk of weight vectors times
//! the centered data, then a row-wise max. Chunking keeps memory flat while
//! leaving the weight stream identical to one-replicate-at-a-time draws, so
//! results do not depend on the chunk size or thread scheduling.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::DataSet;
use crate::random::{sample_weight, Purpose, StreamKey, WeightLaw};

/// Replicates per weight-matrix chunk in the GEMM path.
const CHUNK: usize = 64;

/// A bootstrap method with its tuning.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Wild(WeightLaw),
    Empirical,
    DoubleWild {
        w_law: WeightLaw,
        v_law: WeightLaw,
        b2: usize,
    },
}

/// Method, first-level replication count, and level.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    pub method: Method,
    pub b: usize,
    pub alpha: f64,
}

impl BootstrapConfig {
    /// Validate, returning non-fatal warnings (e.g. a double bootstrap with
    /// weight laws that do not match third moments).
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.b == 0 {
            return Err(Error::validation("bootstrap requires b >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation("alpha must lie in (0,1)"));
        }
        let mut warnings = Vec::new();
        if let Method::DoubleWild { w_law, v_law, b2 } = &self.method {
            if *b2 == 0 {
                return Err(Error::validation("double bootstrap requires b2 >= 1"));
            }
            for (name, law) in [("first", w_law), ("second", v_law)] {
                let (_, _, m3) = crate::random::weight_moments(law);
                if (m3 - 1.0).abs() > 1e-9 {
                    warnings.push(format!(
                        "double bootstrap {name}-level law has third moment {m3}; \
                         the second-order accuracy analysis assumes 1"
                    ));
                }
            }
        }
        Ok(warnings)
    }
}

/// Sorted bootstrap replicate values.
#[derive(Debug, Clone)]
pub struct ReplicateSet {
    values: Vec<f64>,
}

impl ReplicateSet {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("replicate set must be nonempty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("replicate set contains non-finite values"));
        }
        values.sort_by(f64::total_cmp);
        Ok(ReplicateSet { values })
    }

    pub fn b(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of replicates `>= x` (sorted-order binary search).
    pub fn count_at_least(&self, x: f64) -> usize {
        let idx = self.values.partition_point(|v| *v < x);
        self.values.len() - idx
    }
}

/// Centered data prepared for replicate generation: the column means are
/// computed once and the centered matrix is shared read-only.
#[derive(Debug, Clone)]
pub struct BootstrapContext {
    xc: Array2<f64>,
    col_means: Vec<f64>,
    n: usize,
    d: usize,
}

impl BootstrapContext {
    pub fn new(data: &DataSet) -> Self {
        let (n, d) = (data.n(), data.dim());
        let mut col_means = vec![0.0; d];
        for row in data.values().rows() {
            for (m, &x) in col_means.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut col_means {
            *m /= n as f64;
        }
        let mut xc = data.values().clone();
        for mut row in xc.rows_mut() {
            for (x, &m) in row.iter_mut().zip(&col_means) {
                *x -= m;
            }
        }
        BootstrapContext { xc, col_means, n, d }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn col_means(&self) -> &[f64] {
        &self.col_means
    }

    /// One wild replicate from an explicit weight vector.
    pub fn wild_replicate(&self, weights: &[f64]) -> Result<f64> {
        if weights.len() != self.n {
            return Err(Error::validation(format!(
                "weight vector length {} does not match n = {}",
                weights.len(),
                self.n
            )));
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..self.d {
            let mut acc = 0.0;
            for (i, &w) in weights.iter().enumerate() {
                acc += w * self.xc[[i, j]];
            }
            best = best.max(acc);
        }
        Ok(best / (self.n as f64).sqrt())
    }

    /// `b` wild replicates with weights drawn from `law`. The weight stream
    /// is consumed replicate by replicate; the chunked matrix product only
    /// groups the arithmetic.
    pub fn wild_replicates<R: Rng + ?Sized>(
        &self,
        law: &WeightLaw,
        b: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        replicates_from_centered(&self.xc, law, b, rng)
    }

    /// One empirical bootstrap replicate: resample rows with replacement and
    /// evaluate the centered max statistic.
    pub fn empirical_replicate<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut acc = vec![0.0; self.d];
        for _ in 0..self.n {
            let i = rng.random_range(0..self.n);
            for (a, &x) in acc.iter_mut().zip(self.xc.row(i)) {
                *a += x;
            }
        }
        acc.into_iter().fold(f64::NEG_INFINITY, f64::max) / (self.n as f64).sqrt()
    }

    pub fn empirical_replicates<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Vec<f64> {
        (0..b).map(|_| self.empirical_replicate(rng)).collect()
    }
}

/// Max statistics of `W Xc / sqrt(n)` for weight rows drawn from `law`.
fn replicates_from_centered<R: Rng + ?Sized>(
    xc: &Array2<f64>,
    law: &WeightLaw,
    b: usize,
    rng: &mut R,
) -> Vec<f64> {
    let n = xc.nrows();
    let mut out = Vec::with_capacity(b);
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let mut chunk = Array2::<f64>::zeros((CHUNK.min(b.max(1)), n));
    let mut done = 0;
    while done < b {
        let take = CHUNK.min(b - done);
        let mut w_view = chunk.slice_mut(ndarray::s![..take, ..]);
        for mut row in w_view.rows_mut() {
            for w in row.iter_mut() {
                *w = sample_weight(law, rng);
            }
        }
        let prod = chunk.slice(ndarray::s![..take, ..]).dot(xc);
        for row in prod.rows() {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            out.push(m * inv_sqrt_n);
        }
        done += take;
    }
    out
}

/// `T_n = max_j (1/sqrt n) sum_i X_ij`.
pub fn t_stat(data: &DataSet) -> f64 {
    let n = data.n() as f64;
    let mut best = f64::NEG_INFINITY;
    for j in 0..data.dim() {
        let s: f64 = data.values().column(j).sum();
        best = best.max(s);
    }
    best / n.sqrt()
}

/// Convenience wrapper building the centered context on the fly.
pub fn wild_replicate(data: &DataSet, weights: &[f64]) -> Result<f64> {
    BootstrapContext::new(data).wild_replicate(weights)
}

/// Convenience wrapper building the centered context on the fly.
pub fn empirical_replicate<R: Rng + ?Sized>(data: &DataSet, rng: &mut R) -> f64 {
    BootstrapContext::new(data).empirical_replicate(rng)
}

/// Finite-B bootstrap quantile: the k-th order statistic with
/// `k = ceil(p (b+1))` clamped to `[1, b]`.
pub fn bootstrap_quantile(reps: &ReplicateSet, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation("quantile level must lie in (0,1)"));
    }
    let b = reps.b();
    let k = ((p * (b as f64 + 1.0)).ceil() as usize).clamp(1, b);
    Ok(reps.values()[k - 1])
}

/// First-level bootstrap p-value with the add-one correction:
/// `(#{replicates >= t_n} + 1) / (b + 1)`.
pub fn first_level_pvalue(t_n: f64, reps: &ReplicateSet) -> f64 {
    (reps.count_at_least(t_n) as f64 + 1.0) / (reps.b() as f64 + 1.0)
}

/// Outcome of a single wild bootstrap test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WildTestOutcome {
    pub reject: bool,
    pub c_hat: f64,
    pub t_n: f64,
}

/// Run the wild bootstrap test: draw `b` weight vectors, compare `T_n` to
/// the bootstrap `(1-alpha)`-quantile. Ties reject (`T_n >= c_hat`).
pub fn wild_test(
    data: &DataSet,
    law: &WeightLaw,
    b: usize,
    alpha: f64,
    stream: StreamKey,
) -> Result<WildTestOutcome> {
    if b == 0 {
        return Err(Error::validation("bootstrap requires b >= 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha must lie in (0,1)"));
    }
    let ctx = BootstrapContext::new(data);
    let mut rng = stream.rng();
    let reps = ReplicateSet::new(ctx.wild_replicates(law, b, &mut rng))?;
    let c_hat = bootstrap_quantile(&reps, 1.0 - alpha)?;
    let t_n = t_stat(data);
    Ok(WildTestOutcome {
        reject: t_n >= c_hat,
        c_hat,
        t_n,
    })
}

/// Outcome of the nested double wild bootstrap test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWildOutcome {
    pub reject: bool,
    pub prepivot_pvalue: f64,
    pub first_level_pvalue: f64,
    pub t_n: f64,
}

/// Nested double wild bootstrap with the prepivoted rejection rule: compare
/// the first-level p-value of `T_n` against the conditional law of the
/// second-level p-values, rejecting when
/// `(#{b : p*_b <= p_hat} + 1)/(b1 + 1) <= alpha`.
///
/// Second-level weight draws come from a substream keyed by the first-level
/// replicate index, so parallel schedules cannot reorder them.
pub fn double_wild_test(
    data: &DataSet,
    w_law: &WeightLaw,
    v_law: &WeightLaw,
    b1: usize,
    b2: usize,
    alpha: f64,
    stream: StreamKey,
) -> Result<DoubleWildOutcome> {
    if b1 == 0 || b2 == 0 {
        return Err(Error::validation("double bootstrap requires b1, b2 >= 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha must lie in (0,1)"));
    }
    let ctx = BootstrapContext::new(data);
    let n = ctx.n();
    let d = ctx.dim();
    let t_n = t_stat(data);
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();

    let mut l1 = stream.with_purpose(Purpose::Level1).rng();
    let mut weights = vec![0.0; n];
    let mut xstar_c = Array2::<f64>::zeros((n, d));
    let mut t_star = Vec::with_capacity(b1);
    let mut p_star = Vec::with_capacity(b1);
    for b_idx in 0..b1 {
        for w in weights.iter_mut() {
            *w = sample_weight(w_law, &mut l1);
        }
        // X*_i = w_i (X_i - Xbar); center the star sample at its own mean
        let mut col_sums = vec![0.0; d];
        for (i, &w) in weights.iter().enumerate() {
            for j in 0..d {
                let v = w * ctx.xc[[i, j]];
                xstar_c[[i, j]] = v;
                col_sums[j] += v;
            }
        }
        let t_star_b = col_sums.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) * inv_sqrt_n;
        for (i, _) in weights.iter().enumerate() {
            for j in 0..d {
                xstar_c[[i, j]] -= col_sums[j] / n as f64;
            }
        }
        let mut l2 = stream.with_purpose(Purpose::Level2).rng_at(b_idx as u64);
        let second = replicates_from_centered(&xstar_c, v_law, b2, &mut l2);
        let count = second.iter().filter(|v| **v >= t_star_b).count();
        p_star.push((count as f64 + 1.0) / (b2 as f64 + 1.0));
        t_star.push(t_star_b);
    }
    let reps = ReplicateSet::new(t_star)?;
    let p_hat = first_level_pvalue(t_n, &reps);
    let count = p_star.iter().filter(|p| **p <= p_hat).count();
    let prepivot = (count as f64 + 1.0) / (b1 as f64 + 1.0);
    Ok(DoubleWildOutcome {
        reject: prepivot <= alpha,
        prepivot_pvalue: prepivot,
        first_level_pvalue: p_hat,
        t_n,
    })
}
