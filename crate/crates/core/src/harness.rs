//! Parallel Monte Carlo experiment runner: the simulation designs, the
//! rejection-rate estimator with per-trial substreams, prediction joins,
//! CSV/JSON reporting, and the self-check suite behind the `verify`
//! subcommand.
//!
//! Every trial derives its data and weight streams from
//! `(seed, trial, purpose)` keys, so reports are identical for any thread
//! count and schedule. Counts are aggregated in trial order; the only
//! nondeterministic field is the wall-clock `seconds` column.

use std::fmt;
use std::io::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{
    bootstrap_quantile, double_wild_test, t_stat, BootstrapContext, ReplicateSet,
};
use crate::dgp::{gen_copula, gen_factor, gen_iid, CopulaConfig, FactorConfig, ScalarLaw};
use crate::edgeworth::{
    factor_expansion_leading, predicted_rejection, ExpansionInputs, ThirdMoments,
};
use crate::error::{Error, Result};
use crate::gauss::GmaxPrecision;
use crate::model::{third_moment_summary, CovarianceSpec, DataSet, ThirdMomentSummary};
use crate::numeric::fmt_sig;
use crate::random::{weight_moments, Purpose, StreamKey, WeightLaw};

/// Default first-level replication count.
pub const DEFAULT_B: usize = 499;

/// Default floating-point work budget (fused multiply-adds).
pub const DEFAULT_BUDGET: f64 = 1e12;

/// Default auxiliary sample size for copula-design predictions.
pub const DEFAULT_AUX_ROWS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    /// Gaussian copula with equicorrelation parameter matrix.
    CopulaI,
    /// Gaussian copula with AR(1) parameter matrix.
    CopulaII,
    /// One-factor model.
    Factor,
    /// I.i.d. standardized coordinates.
    IidSpherical,
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Design::CopulaI => "copula1",
            Design::CopulaII => "copula2",
            Design::Factor => "factor",
            Design::IidSpherical => "iid-spherical",
        };
        f.write_str(s)
    }
}

impl FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copula1" | "copulai" | "i" => Ok(Design::CopulaI),
            "copula2" | "copulaii" | "ii" => Ok(Design::CopulaII),
            "factor" => Ok(Design::Factor),
            "iid-spherical" | "iid" | "spherical" => Ok(Design::IidSpherical),
            _ => Err(Error::validation(format!("unknown design '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Marginal {
    #[default]
    Asymmetric,
    Symmetric,
}

impl FromStr for Marginal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asym" | "asymmetric" => Ok(Marginal::Asymmetric),
            "sym" | "symmetric" => Ok(Marginal::Symmetric),
            _ => Err(Error::validation(format!("unknown marginal mode '{s}'"))),
        }
    }
}

/// A bootstrap method as named on the command line:
/// `gaussian | mammen | rademacher | beta:NU | empirical | double:NU,B2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodSpec {
    Gaussian,
    Mammen,
    Rademacher,
    Beta { nu: f64 },
    Empirical,
    Double { nu: f64, b2: usize },
}

impl MethodSpec {
    pub fn weight_law(&self) -> Result<Option<WeightLaw>> {
        Ok(match self {
            MethodSpec::Gaussian => Some(WeightLaw::Gaussian),
            MethodSpec::Mammen => Some(WeightLaw::Mammen),
            MethodSpec::Rademacher => Some(WeightLaw::Rademacher),
            MethodSpec::Beta { nu } => Some(WeightLaw::std_beta(*nu)?),
            MethodSpec::Empirical => None,
            MethodSpec::Double { nu, .. } => Some(WeightLaw::std_beta(*nu)?),
        })
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSpec::Gaussian => f.write_str("gaussian"),
            MethodSpec::Mammen => f.write_str("mammen"),
            MethodSpec::Rademacher => f.write_str("rademacher"),
            MethodSpec::Beta { nu } => write!(f, "beta:{nu}"),
            MethodSpec::Empirical => f.write_str("empirical"),
            MethodSpec::Double { nu, b2 } => write!(f, "double:{nu},{b2}"),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("beta:") {
            let nu: f64 = rest
                .parse()
                .map_err(|_| Error::validation(format!("bad beta parameter in '{s}'")))?;
            return Ok(MethodSpec::Beta { nu });
        }
        if let Some(rest) = lower.strip_prefix("double:") {
            let (nu_s, b2_s) = rest
                .split_once(',')
                .ok_or_else(|| Error::validation(format!("expected double:NU,B2 in '{s}'")))?;
            let nu: f64 = nu_s
                .parse()
                .map_err(|_| Error::validation(format!("bad double parameter in '{s}'")))?;
            let b2: usize = b2_s
                .parse()
                .map_err(|_| Error::validation(format!("bad double B2 in '{s}'")))?;
            return Ok(MethodSpec::Double { nu, b2 });
        }
        match lower.as_str() {
            "gaussian" => Ok(MethodSpec::Gaussian),
            "mammen" => Ok(MethodSpec::Mammen),
            "rademacher" => Ok(MethodSpec::Rademacher),
            "empirical" => Ok(MethodSpec::Empirical),
            _ => Err(Error::validation(format!("unknown method '{s}'"))),
        }
    }
}

impl Serialize for MethodSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_b() -> usize {
    DEFAULT_B
}

/// Full description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub design: Design,
    pub rho: f64,
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub marginal: Marginal,
    pub methods: Vec<MethodSpec>,
    pub alphas: Vec<f64>,
    #[serde(default = "default_b")]
    pub b: usize,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Floating-point work budget in fused multiply-adds; runs whose
    /// projection exceeds it are refused.
    #[serde(default)]
    pub budget: Option<f64>,
    /// Factor-design laws; default standardized exponential factor with
    /// standard normal idiosyncratic coordinates.
    #[serde(default)]
    pub factor_u: Option<ScalarLaw>,
    #[serde(default)]
    pub factor_v: Option<ScalarLaw>,
    /// Marginal law of the spherical design; default standardized exponential.
    #[serde(default)]
    pub iid_law: Option<ScalarLaw>,
    /// Auxiliary sample size for copula-design predictions.
    #[serde(default)]
    pub aux_rows: Option<usize>,
    #[serde(default)]
    pub include_predictions: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::validation("trials must be at least 1"));
        }
        if self.n == 0 || self.d == 0 {
            return Err(Error::validation("n and d must be at least 1"));
        }
        if self.b == 0 {
            return Err(Error::validation("b must be at least 1"));
        }
        if self.alphas.is_empty() {
            return Err(Error::validation("at least one alpha level is required"));
        }
        for &a in &self.alphas {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::validation(format!("alpha {a} outside (0,1)")));
            }
        }
        if self.methods.is_empty() {
            // allowed: produces a header-only report
        }
        match self.design {
            Design::CopulaI => {
                if !(0.0..1.0).contains(&self.rho) {
                    return Err(Error::validation("copula design I requires rho in [0,1)"));
                }
            }
            Design::CopulaII => {
                if !(self.rho.abs() < 1.0) {
                    return Err(Error::validation("copula design II requires |rho| < 1"));
                }
            }
            Design::Factor => {
                if !(self.rho > 0.0 && self.rho < 1.0) {
                    return Err(Error::validation("factor design requires rho in (0,1)"));
                }
            }
            Design::IidSpherical => {}
        }
        for m in &self.methods {
            if let MethodSpec::Double { nu, b2 } = m {
                if *b2 == 0 {
                    return Err(Error::validation("double bootstrap requires b2 >= 1"));
                }
                crate::random::std_beta_params(*nu)?;
            }
            if let MethodSpec::Beta { nu } = m {
                crate::random::std_beta_params(*nu)?;
            }
        }
        Ok(())
    }

    /// Projected floating-point work in fused multiply-adds:
    /// `trials * (B1 + B1 B2 + 1) * n * d` summed over methods.
    pub fn projected_cost(&self) -> f64 {
        let base = (self.trials * self.n * self.d) as f64;
        self.methods
            .iter()
            .map(|m| {
                let b1 = self.b as f64;
                let b2 = match m {
                    MethodSpec::Double { b2, .. } => *b2 as f64,
                    _ => 0.0,
                };
                base * (b1 + b1 * b2 + 1.0)
            })
            .sum()
    }
}

/// One (method, alpha) cell of a rejection report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub design: String,
    pub rho: f64,
    pub n: usize,
    pub d: usize,
    pub method: String,
    pub alpha: f64,
    pub rate: f64,
    pub mc_se: f64,
    pub trials: usize,
    pub seed: u64,
    pub predicted: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct RejectionReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::validation(format!("unknown report format '{s}'"))),
        }
    }
}

/// Run the configured experiment with the design's data generator.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RejectionReport> {
    let generator = make_generator(cfg)?;
    run_experiment_with(cfg, move |trial| {
        let mut rng = StreamKey::new(cfg.seed, trial, Purpose::Data).rng();
        generator(&mut rng)
    })
}

/// Extension point: run the harness with an arbitrary per-trial data source
/// (used by tests to inject degenerate data). The generator must be a pure
/// function of the trial index.
pub fn run_experiment_with<G>(cfg: &ExperimentConfig, gen: G) -> Result<RejectionReport>
where
    G: Fn(u64) -> Result<DataSet> + Sync,
{
    cfg.validate()?;
    let budget = cfg.budget.unwrap_or(DEFAULT_BUDGET);
    let cost = cfg.projected_cost();
    if cost > budget {
        return Err(Error::CostRefusal(format!(
            "projected work {cost:.3e} FMA exceeds the budget {budget:.3e}; \
             raise `budget` to proceed"
        )));
    }
    let started = Instant::now();
    let run = || -> Result<Vec<Vec<u64>>> {
        let per_trial: Result<Vec<Vec<Vec<bool>>>> = (0..cfg.trials as u64)
            .into_par_iter()
            .map(|trial| run_trial(cfg, trial, &gen))
            .collect();
        let per_trial = per_trial?;
        // fold in trial order (integer counts; order kept for clarity)
        let mut counts = vec![vec![0u64; cfg.alphas.len()]; cfg.methods.len()];
        for trial_flags in &per_trial {
            for (mi, alpha_flags) in trial_flags.iter().enumerate() {
                for (ai, &rej) in alpha_flags.iter().enumerate() {
                    if rej {
                        counts[mi][ai] += 1;
                    }
                }
            }
        }
        Ok(counts)
    };
    let counts = match cfg.threads {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
            pool.install(run)?
        }
        None => run()?,
    };

    let predictions = if cfg.include_predictions {
        Some(predict(cfg)?)
    } else {
        None
    };
    let seconds = started.elapsed().as_secs_f64();
    let mut rows = Vec::new();
    for (mi, method) in cfg.methods.iter().enumerate() {
        for (ai, &alpha) in cfg.alphas.iter().enumerate() {
            let rate = counts[mi][ai] as f64 / cfg.trials as f64;
            let predicted = predictions.as_ref().and_then(|p| {
                p.iter()
                    .find(|r| r.method == method.to_string() && r.alpha == alpha)
                    .map(|r| r.predicted)
            });
            rows.push(ReportRow {
                design: cfg.design.to_string(),
                rho: cfg.rho,
                n: cfg.n,
                d: cfg.d,
                method: method.to_string(),
                alpha,
                rate,
                mc_se: (rate * (1.0 - rate) / cfg.trials as f64).sqrt(),
                trials: cfg.trials,
                seed: cfg.seed,
                predicted,
                seconds,
            });
        }
    }
    Ok(RejectionReport { rows })
}

/// Rejection flags for one trial: `[method][alpha]`.
fn run_trial<G>(cfg: &ExperimentConfig, trial: u64, gen: &G) -> Result<Vec<Vec<bool>>>
where
    G: Fn(u64) -> Result<DataSet> + Sync,
{
    let data = gen(trial)?;
    let ctx = BootstrapContext::new(&data);
    let t_n = t_stat(&data);
    let level1 = StreamKey::new(cfg.seed, trial, Purpose::Level1);
    let mut out = Vec::with_capacity(cfg.methods.len());
    for (mi, method) in cfg.methods.iter().enumerate() {
        let flags = match method {
            MethodSpec::Double { nu, b2 } => {
                let law = WeightLaw::std_beta(*nu)?;
                let res = double_wild_test(
                    &data,
                    &law,
                    &law,
                    cfg.b,
                    *b2,
                    cfg.alphas[0],
                    StreamKey::new(cfg.seed, trial, Purpose::Level1),
                )?;
                // the prepivoted p-value is the same for every alpha
                cfg.alphas
                    .iter()
                    .map(|&a| res.prepivot_pvalue <= a)
                    .collect()
            }
            MethodSpec::Empirical => {
                // offset keeps wild/empirical substreams clear of the
                // double bootstrap's internal level-one stream (index 0)
                let mut rng = level1.rng_at(1000 + mi as u64);
                let reps = ReplicateSet::new(ctx.empirical_replicates(cfg.b, &mut rng))?;
                alphas_to_flags(&reps, t_n, &cfg.alphas)?
            }
            _ => {
                let law = method.weight_law()?.expect("wild methods have a law");
                let mut rng = level1.rng_at(1000 + mi as u64);
                let reps = ReplicateSet::new(ctx.wild_replicates(&law, cfg.b, &mut rng))?;
                alphas_to_flags(&reps, t_n, &cfg.alphas)?
            }
        };
        out.push(flags);
    }
    Ok(out)
}

/// Shared replicate set across the alpha grid: quantiles at several levels
/// from one sorted sample.
fn alphas_to_flags(reps: &ReplicateSet, t_n: f64, alphas: &[f64]) -> Result<Vec<bool>> {
    alphas
        .iter()
        .map(|&a| Ok(t_n >= bootstrap_quantile(reps, 1.0 - a)?))
        .collect()
}

fn make_generator(
    cfg: &ExperimentConfig,
) -> Result<Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> Result<DataSet> + Sync + Send>> {
    cfg.validate()?;
    let symmetrize = cfg.marginal == Marginal::Symmetric;
    match cfg.design {
        Design::CopulaI | Design::CopulaII => {
            let corr = match cfg.design {
                Design::CopulaI => CovarianceSpec::equicorrelation(cfg.d, cfg.rho, 1.0)?,
                _ => CovarianceSpec::ar1(cfg.d, cfg.rho)?,
            };
            // kurtosis-matched shape switch in the symmetric case
            let shape = if symmetrize { 0.5 } else { 1.0 };
            let copula = CopulaConfig {
                corr,
                marginal_shape: shape,
                marginal_scale: 1.0,
                symmetrize,
                n: cfg.n,
                d: cfg.d,
            };
            copula.validate()?;
            Ok(Box::new(move |rng| gen_copula(&copula, rng)))
        }
        Design::Factor => {
            let factor = FactorConfig {
                rho: cfg.rho,
                d: cfg.d,
                n: cfg.n,
                u_law: cfg.factor_u.unwrap_or(ScalarLaw::StandardizedExponential),
                v_law: cfg.factor_v.unwrap_or(ScalarLaw::StandardNormal),
            };
            factor.validate()?;
            if symmetrize {
                Ok(Box::new(move |rng| {
                    // symmetrized factor model: difference of two draws
                    let a = gen_factor(&factor, rng)?;
                    let b = gen_factor(&factor, rng)?;
                    let values =
                        (a.values() - b.values()) * std::f64::consts::FRAC_1_SQRT_2;
                    DataSet::new(values)
                }))
            } else {
                Ok(Box::new(move |rng| gen_factor(&factor, rng)))
            }
        }
        Design::IidSpherical => {
            let law = cfg.iid_law.unwrap_or(ScalarLaw::StandardizedExponential);
            let (n, d) = (cfg.n, cfg.d);
            Ok(Box::new(move |rng| gen_iid(&law, n, d, symmetrize, rng)))
        }
    }
}

/// A predicted rejection probability for one (method, alpha) pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictRow {
    pub method: String,
    pub alpha: f64,
    pub predicted: f64,
}

/// Theory-side rejection predictions for the configured design.
///
/// Spherical and copula designs run the full expansion with population (or
/// large-auxiliary-sample) third moments; the factor design uses its
/// dimension-free limiting formula. The double bootstrap is second-order
/// accurate, so its prediction is the nominal level. No valid expansion is
/// implemented for the empirical bootstrap.
pub fn predict(cfg: &ExperimentConfig) -> Result<Vec<PredictRow>> {
    cfg.validate()?;
    let prec = GmaxPrecision::default();
    let mut rows = Vec::new();
    let expansion_inputs = |gamma: f64| -> Result<Option<ExpansionInputs>> {
        match cfg.design {
            Design::IidSpherical => {
                let law = cfg.iid_law.unwrap_or(ScalarLaw::StandardizedExponential);
                let mu3 = if cfg.marginal == Marginal::Symmetric {
                    0.0
                } else {
                    law.third_moment()
                };
                let sigma = CovarianceSpec::identity_scaled(cfg.d, 1.0)?;
                let summary = ThirdMomentSummary {
                    s1: cfg.d as f64 * mu3,
                    s2: 0.0,
                    s3: 0.0,
                    n: cfg.n,
                    d: cfg.d,
                };
                Ok(Some(ExpansionInputs::new(
                    sigma,
                    cfg.n,
                    gamma,
                    ThirdMoments::Exchangeable(summary),
                )?))
            }
            Design::CopulaI => {
                let (sigma, third) = copula_population_moments(cfg)?;
                Ok(Some(ExpansionInputs::new(sigma, cfg.n, gamma, third)?))
            }
            Design::CopulaII => {
                if cfg.d > crate::gauss::DENSE_DIM_CAP {
                    return Err(Error::capability(format!(
                        "no prediction path for the AR(1) copula above d = {} \
                         (dense integrals are capped there)",
                        crate::gauss::DENSE_DIM_CAP
                    )));
                }
                let (sigma, third) = copula_population_moments(cfg)?;
                Ok(Some(ExpansionInputs::new(sigma, cfg.n, gamma, third)?))
            }
            Design::Factor => Ok(None), // handled by the limiting formula
        }
    };

    for method in &cfg.methods {
        let gamma = match method {
            MethodSpec::Empirical => {
                return Err(Error::capability(
                    "no valid coverage expansion is implemented for the empirical bootstrap",
                ));
            }
            MethodSpec::Double { .. } => None, // second-order accurate
            m => {
                let law = m.weight_law()?.expect("wild methods have a law");
                Some(weight_moments(&law).2)
            }
        };
        for &alpha in &cfg.alphas {
            let predicted = match gamma {
                None => alpha,
                Some(g) => match cfg.design {
                    Design::Factor => {
                        let u_law = cfg.factor_u.unwrap_or(ScalarLaw::StandardizedExponential);
                        let eu3 = if cfg.marginal == Marginal::Symmetric {
                            0.0
                        } else {
                            u_law.third_moment()
                        };
                        alpha - factor_expansion_leading(eu3, g, alpha, cfg.n)?
                    }
                    _ => {
                        let inputs = expansion_inputs(g)?.expect("non-factor designs");
                        predicted_rejection(&inputs, alpha, &prec)?.predicted
                    }
                },
            };
            rows.push(PredictRow {
                method: method.to_string(),
                alpha,
                predicted,
            });
        }
    }
    Ok(rows)
}

/// Population moments for copula designs estimated from a large auxiliary
/// sample. The equicorrelation design stays in pattern form (the transformed
/// correlation is read off the row-sum variance); the AR(1) design at small
/// d materializes dense moments.
fn copula_population_moments(cfg: &ExperimentConfig) -> Result<(CovarianceSpec, ThirdMoments)> {
    let rows = cfg.aux_rows.unwrap_or(DEFAULT_AUX_ROWS).max(1000);
    let corr = match cfg.design {
        Design::CopulaI => CovarianceSpec::equicorrelation(cfg.d, cfg.rho, 1.0)?,
        Design::CopulaII => CovarianceSpec::ar1(cfg.d, cfg.rho)?,
        _ => return Err(Error::validation("copula moments requested for a non-copula design")),
    };
    let shape = if cfg.marginal == Marginal::Symmetric { 0.5 } else { 1.0 };
    let copula = CopulaConfig {
        corr,
        marginal_shape: shape,
        marginal_scale: 1.0,
        symmetrize: cfg.marginal == Marginal::Symmetric,
        n: rows,
        d: cfg.d,
    };
    let mut rng = StreamKey::new(cfg.seed, 0, Purpose::GaussianRef).rng();
    let aux = gen_copula(&copula, &mut rng)?;
    match cfg.design {
        Design::CopulaI => {
            // exchangeable: common variance from the columns, common
            // correlation from Var(row sum) = d sigma^2 (1 + (d-1) rho)
            let d = cfg.d as f64;
            let nf = rows as f64;
            let mut var_sum = 0.0;
            let mut rowsum_sq = 0.0;
            let mut rowsum_mean = 0.0;
            let mut col_sq = 0.0;
            let mut col_mean_sq = 0.0;
            for j in 0..cfg.d {
                let col = aux.values().column(j);
                let mean = col.sum() / nf;
                col_mean_sq += mean * mean;
                col_sq += col.iter().map(|x| x * x).sum::<f64>() / nf;
            }
            var_sum += col_sq - col_mean_sq;
            for row in aux.values().rows() {
                let s: f64 = row.sum();
                rowsum_sq += s * s / nf;
                rowsum_mean += s / nf;
            }
            let sigma2 = var_sum / d;
            let rowsum_var = rowsum_sq - rowsum_mean * rowsum_mean;
            let rho_hat = if cfg.d > 1 {
                ((rowsum_var / (d * sigma2) - 1.0) / (d - 1.0)).clamp(0.0, 0.999999)
            } else {
                0.0
            };
            let sigma = CovarianceSpec::equicorrelation(cfg.d, rho_hat, sigma2.sqrt())?;
            let mut summary = third_moment_summary(&aux);
            summary.n = cfg.n;
            Ok((sigma, ThirdMoments::Exchangeable(summary)))
        }
        _ => {
            let d = cfg.d;
            let nf = rows as f64;
            let mut cov = ndarray::Array2::<f64>::zeros((d, d));
            let mut means = vec![0.0; d];
            for row in aux.values().rows() {
                for j in 0..d {
                    means[j] += row[j] / nf;
                    for k in j..d {
                        cov[[j, k]] += row[j] * row[k] / nf;
                    }
                }
            }
            for j in 0..d {
                for k in j..d {
                    let v = cov[[j, k]] - means[j] * means[k];
                    cov[[j, k]] = v;
                    cov[[k, j]] = v;
                }
            }
            let sigma = CovarianceSpec::dense(cov)?;
            let third = ThirdMoments::dense_from_data(&aux)?;
            Ok((sigma, third))
        }
    }
}

/// Rejection-rate sweep over an alpha grid; replicate sets are shared across
/// the grid inside each trial.
pub fn pp_curve(cfg: &ExperimentConfig) -> Result<RejectionReport> {
    if cfg.alphas.is_empty() {
        return Err(Error::validation("alpha grid must be nonempty"));
    }
    if cfg.alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("alpha grid must be strictly increasing"));
    }
    run_experiment(cfg)
}

fn round_sig6(x: f64) -> f64 {
    fmt_sig(x, 6).parse().unwrap_or(x)
}

/// Render a report as CSV. The `predicted` column appears only when at least
/// one row carries a prediction; floats print with 6 significant digits.
pub fn report_to_csv(report: &RejectionReport) -> String {
    let with_pred = report.rows.iter().any(|r| r.predicted.is_some());
    let mut out = String::new();
    out.push_str("design,rho,n,d,method,alpha,rate,mc_se,trials,seed");
    if with_pred {
        out.push_str(",predicted");
    }
    out.push_str(",seconds\n");
    for r in &report.rows {
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.design,
            fmt_sig(r.rho, 6),
            r.n,
            r.d,
            r.method,
            fmt_sig(r.alpha, 6),
            fmt_sig(r.rate, 6),
            fmt_sig(r.mc_se, 6),
            r.trials,
            r.seed
        );
        if with_pred {
            line.push(',');
            if let Some(p) = r.predicted {
                line.push_str(&fmt_sig(p, 6));
            }
        }
        line.push(',');
        line.push_str(&fmt_sig(r.seconds, 6));
        line.push('\n');
        out.push_str(&line);
    }
    out
}

/// Parse a CSV report produced by [`report_to_csv`].
pub fn report_from_csv(text: &str) -> Result<RejectionReport> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::validation("empty CSV report"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let with_pred = cols.contains(&"predicted");
    let expect = if with_pred { 12 } else { 11 };
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != expect {
            return Err(Error::validation(format!(
                "CSV row has {} fields, expected {expect}",
                f.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::validation(format!("bad float '{s}' in CSV")))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::validation(format!("bad integer '{s}' in CSV")))
        };
        rows.push(ReportRow {
            design: f[0].to_string(),
            rho: parse_f(f[1])?,
            n: parse_u(f[2])?,
            d: parse_u(f[3])?,
            method: f[4].to_string(),
            alpha: parse_f(f[5])?,
            rate: parse_f(f[6])?,
            mc_se: parse_f(f[7])?,
            trials: parse_u(f[8])?,
            seed: f[9]
                .parse()
                .map_err(|_| Error::validation("bad seed in CSV"))?,
            predicted: if with_pred && !f[10].is_empty() {
                Some(parse_f(f[10])?)
            } else {
                None
            },
            seconds: parse_f(if with_pred { f[11] } else { f[10] })?,
        });
    }
    Ok(RejectionReport { rows })
}

/// Render a report as JSON with floats rounded to 6 significant digits.
pub fn report_to_json(report: &RejectionReport) -> String {
    let rounded = RejectionReport {
        rows: report
            .rows
            .iter()
            .map(|r| ReportRow {
                rho: round_sig6(r.rho),
                alpha: round_sig6(r.alpha),
                rate: round_sig6(r.rate),
                mc_se: round_sig6(r.mc_se),
                predicted: r.predicted.map(round_sig6),
                seconds: round_sig6(r.seconds),
                ..r.clone()
            })
            .collect(),
    };
    serde_json::to_string_pretty(&rounded).expect("report serialization cannot fail")
}

/// Write a report to `path` in the requested format.
pub fn emit_report(report: &RejectionReport, format: ReportFormat, path: &str) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => report_to_csv(report),
        ReportFormat::Json => report_to_json(report),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_string(),
        source: e,
    })?;
    file.write_all(body.as_bytes()).map_err(|e| Error::Io {
        path: path.to_string(),
        source: e,
    })?;
    Ok(())
}

/// One named self-check of the `verify` suite.
pub struct VerifyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run the oracle suites: weight-moment exactness, Stein identity residuals,
/// small-d integral cross-checks, and the univariate reduction identity.
pub fn run_verification() -> Vec<VerifyCheck> {
    use crate::gauss::{rect_grad_integral, PathHint};
    let mut checks = Vec::new();
    let mut push = |name: &'static str, result: std::result::Result<(), String>| {
        checks.push(match result {
            Ok(()) => VerifyCheck {
                name,
                passed: true,
                detail: String::new(),
            },
            Err(detail) => VerifyCheck {
                name,
                passed: false,
                detail,
            },
        });
    };

    push("weight-moments", {
        (|| -> std::result::Result<(), String> {
            let (a, b) = crate::random::std_beta_params(0.1).map_err(|e| e.to_string())?;
            if (a - 0.0276190).abs() > 5e-8 || (b - 0.0723810).abs() > 5e-8 {
                return Err(format!("std_beta_params(0.1) = ({a}, {b})"));
            }
            for nu in [0.05, 0.1, 1.0] {
                let law = WeightLaw::std_beta(nu).map_err(|e| e.to_string())?;
                let (m1, m2, m3) = weight_moments(&law);
                if m1 != 0.0 || m2 != 1.0 || (m3 - 1.0).abs() > 1e-10 {
                    return Err(format!("std beta nu={nu} moments ({m1},{m2},{m3})"));
                }
            }
            let (m1, m2, m3) = weight_moments(&WeightLaw::Mammen);
            if (m1, m2, m3) != (0.0, 1.0, 1.0) {
                return Err(format!("Mammen moments ({m1},{m2},{m3})"));
            }
            // Monte Carlo agreement at a million draws
            let mut rng = StreamKey::new(2024, 0, Purpose::Level1).rng();
            let law = WeightLaw::std_beta(0.1).map_err(|e| e.to_string())?;
            let n = 1_000_000;
            let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
            let mut s6 = 0.0;
            for _ in 0..n {
                let w = crate::random::sample_weight(&law, &mut rng);
                s1 += w;
                s2 += w * w;
                s3 += w * w * w;
                s6 += w.powi(6);
            }
            let nf = n as f64;
            let sd3 = ((s6 / nf - (s3 / nf).powi(2)).max(0.0) / nf).sqrt();
            if (s1 / nf).abs() > 4.0 / nf.sqrt() * (s2 / nf).sqrt()
                || (s3 / nf - 1.0).abs() > 4.0 * sd3
            {
                return Err(format!(
                    "MC moments off: m1={}, m3={}",
                    s1 / nf,
                    s3 / nf
                ));
            }
            Ok(())
        })()
    });

    push("stein-identities", {
        (|| -> std::result::Result<(), String> {
            let (a, b) = crate::random::std_beta_params(0.1).map_err(|e| e.to_string())?;
            let law = crate::stein::SteinLaw::StdBeta { a, b };
            for deg in 0..=4usize {
                let mut h = vec![0.0; deg + 1];
                h[deg] = 1.0;
                let r = crate::stein::stein_identity_residual(&law, None, &h)
                    .map_err(|e| e.to_string())?;
                if r > 1e-8 {
                    return Err(format!("degree-{deg} residual {r}"));
                }
            }
            let kern = crate::stein::kernel_from_density(
                crate::numeric::norm_pdf,
                0.0,
                (f64::NEG_INFINITY, f64::INFINITY),
            )
            .map_err(|e| e.to_string())?;
            for i in -6..=6 {
                let x = i as f64 / 2.0;
                let t = kern.eval(x).map_err(|e| e.to_string())?;
                if (t - 1.0).abs() > 1e-8 {
                    return Err(format!("normal kernel at {x}: {t}"));
                }
            }
            let expo = crate::stein::kernel_from_density(
                |x: f64| if x >= -1.0 { (-(x + 1.0)).exp() } else { 0.0 },
                0.0,
                (-1.0, f64::INFINITY),
            )
            .map_err(|e| e.to_string())?;
            for x in [-0.5, 0.0, 2.0] {
                let t = expo.eval(x).map_err(|e| e.to_string())?;
                if (t - (x + 1.0)).abs() > 1e-8 {
                    return Err(format!("exponential kernel at {x}: {t}"));
                }
            }
            let beta_kern = crate::stein::kernel_from_endpoint_density(
                crate::stein::beta_endpoint_density(a, b),
                a / (a + b),
            )
            .map_err(|e| e.to_string())?;
            for x in [0.25, 0.5, 0.75] {
                let t = beta_kern.eval(x).map_err(|e| e.to_string())?;
                if (t - x * (1.0 - x) / (a + b)).abs() > 1e-8 {
                    return Err(format!("beta kernel at {x}: {t}"));
                }
            }
            Ok(())
        })()
    });

    push("small-d-integrals", {
        (|| -> std::result::Result<(), String> {
            for d in 1..=3usize {
                for rho in [0.0, 0.2] {
                    let spec = if rho == 0.0 {
                        CovarianceSpec::identity_scaled(d, 1.0)
                    } else {
                        CovarianceSpec::equicorrelation(d, rho, 1.0)
                    }
                    .map_err(|e| e.to_string())?;
                    for order in [2u8, 3] {
                        for t in [-2.0, 0.0, 1.0, 3.0] {
                            let pat = rect_grad_integral(&spec, t, order, PathHint::Pattern)
                                .map_err(|e| e.to_string())?;
                            let den = rect_grad_integral(&spec, t, order, PathHint::Dense)
                                .map_err(|e| e.to_string())?;
                            let mut idxs: Vec<Vec<usize>> = vec![vec![0; order as usize]];
                            if d >= 2 {
                                let mut ix = vec![0; order as usize];
                                ix[0] = 1;
                                idxs.push(ix);
                            }
                            if d >= 3 && order == 3 {
                                idxs.push(vec![0, 1, 2]);
                            }
                            for idx in idxs {
                                let (p, q) = (pat.entry(&idx), den.entry(&idx));
                                if (p - q).abs() > 1e-5 {
                                    return Err(format!(
                                        "d={d} rho={rho} order={order} t={t}: {p} vs {q}"
                                    ));
                                }
                            }
                        }
                    }
                }
            }
            Ok(())
        })()
    });

    push("univariate-reduction", {
        (|| -> std::result::Result<(), String> {
            let prec = GmaxPrecision::default();
            for g in [0.0, 1.0] {
                for i in 1..=19 {
                    let alpha = i as f64 / 20.0;
                    let sigma =
                        CovarianceSpec::identity_scaled(1, 1.0).map_err(|e| e.to_string())?;
                    let inputs = ExpansionInputs::new(
                        sigma,
                        100,
                        g,
                        ThirdMoments::Exchangeable(ThirdMomentSummary {
                            s1: 2.0,
                            s2: 0.0,
                            s3: 0.0,
                            n: 100,
                            d: 1,
                        }),
                    )
                    .map_err(|e| e.to_string())?;
                    let pred =
                        predicted_rejection(&inputs, alpha, &prec).map_err(|e| e.to_string())?;
                    let c = crate::numeric::norm_quantile(1.0 - alpha).map_err(|e| e.to_string())?;
                    let remark = if g == 1.0 {
                        alpha - 0.1 * c * c * crate::numeric::norm_pdf(c)
                    } else {
                        alpha - (2.0 * c * c + 1.0) * crate::numeric::norm_pdf(c) / 30.0
                    };
                    if (pred.predicted - remark).abs() > 1e-10 {
                        return Err(format!(
                            "gamma={g} alpha={alpha}: {} vs {remark}",
                            pred.predicted
                        ));
                    }
                }
            }
            Ok(())
        })()
    });

    checks
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            design: Design::CopulaI,
            rho: 0.2,
            n: 20,
            d: 5,
            marginal: Marginal::Asymmetric,
            methods: vec![MethodSpec::Gaussian, MethodSpec::Beta { nu: 0.1 }],
            alphas: vec![0.1, 0.5],
            b: 49,
            trials: 20,
            seed: 11,
            threads: None,
            budget: None,
            factor_u: None,
            factor_v: None,
            iid_law: None,
            aux_rows: None,
            include_predictions: false,
        }
    }

    #[test]
    fn method_spec_round_trip() {
        for s in [
            "gaussian",
            "mammen",
            "rademacher",
            "beta:0.1",
            "empirical",
            "double:0.1,99",
        ] {
            let m: MethodSpec = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("beta".parse::<MethodSpec>().is_err());
        assert!("double:0.1".parse::<MethodSpec>().is_err());
        assert!("wat".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn degenerate_zero_data_rejects_at_every_level() {
        let mut cfg = smoke_config();
        cfg.trials = 1;
        cfg.methods = vec![MethodSpec::Gaussian];
        let report = run_experiment_with(&cfg, |_| {
            DataSet::new(Array2::zeros((cfg.n, cfg.d)))
        })
        .unwrap();
        for row in &report.rows {
            assert_eq!(row.rate, 1.0);
        }
    }

    #[test]
    fn reports_are_deterministic_and_thread_invariant() {
        let cfg = smoke_config();
        let r1 = run_experiment(&cfg).unwrap();
        let r2 = run_experiment(&cfg).unwrap();
        let strip = |r: &RejectionReport| {
            let mut r = r.clone();
            for row in &mut r.rows {
                row.seconds = 0.0;
            }
            r
        };
        assert_eq!(strip(&r1), strip(&r2));
        for threads in [1usize, 4] {
            let mut cfg_t = cfg.clone();
            cfg_t.threads = Some(threads);
            let rt = run_experiment(&cfg_t).unwrap();
            assert_eq!(strip(&r1), strip(&rt));
        }
    }

    #[test]
    fn cost_model_and_refusal() {
        let mut cfg = smoke_config();
        cfg.methods = vec![MethodSpec::Gaussian, MethodSpec::Double { nu: 0.1, b2: 9 }];
        // trials * (b + b*b2 + 1) * n * d per method
        let expect = (20 * 20 * 5) as f64 * ((49 + 1) as f64 + (49 + 49 * 9 + 1) as f64);
        assert_abs_diff_eq!(cfg.projected_cost(), expect, epsilon = 1e-9);
        cfg.budget = Some(10.0);
        match run_experiment(&cfg) {
            Err(Error::CostRefusal(msg)) => assert!(msg.contains("budget")),
            other => panic!("expected cost refusal, got {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_and_header_only() {
        let mut cfg = smoke_config();
        cfg.trials = 5;
        let report = run_experiment(&cfg).unwrap();
        let csv = report_to_csv(&report);
        let parsed = report_from_csv(&csv).unwrap();
        assert_eq!(parsed.rows.len(), report.rows.len());
        for (a, b) in parsed.rows.iter().zip(&report.rows) {
            assert_eq!(a.design, b.design);
            assert_eq!(a.method, b.method);
            assert_eq!(a.trials, b.trials);
            assert_eq!(a.seed, b.seed);
            assert!((a.rate - b.rate).abs() < 1e-9);
            assert!((a.mc_se - b.mc_se).abs() < 1e-6 * (1.0 + b.mc_se));
        }
        // the standard error column is recomputable from the row
        for row in &parsed.rows {
            let se = (row.rate * (1.0 - row.rate) / row.trials as f64).sqrt();
            assert!((row.mc_se - se).abs() < 1e-6);
        }

        cfg.methods.clear();
        let empty = run_experiment(&cfg).unwrap();
        let csv = report_to_csv(&empty);
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("design,rho,n,d,method,alpha,rate,mc_se,trials,seed"));
    }

    #[test]
    fn seeds_are_echoed_distinctly() {
        let mut cfg = smoke_config();
        cfg.trials = 3;
        let r1 = run_experiment(&cfg).unwrap();
        cfg.seed = 12;
        let r2 = run_experiment(&cfg).unwrap();
        assert!(r1.rows.iter().all(|r| r.seed == 11));
        assert!(r2.rows.iter().all(|r| r.seed == 12));
    }

    #[test]
    fn pp_curve_validates_grid_and_is_monotone() {
        let mut cfg = smoke_config();
        cfg.alphas = vec![0.5, 0.1];
        assert!(pp_curve(&cfg).is_err());
        cfg.alphas = vec![0.1, 0.3, 0.5, 0.7];
        cfg.trials = 40;
        let report = pp_curve(&cfg).unwrap();
        for m in ["gaussian", "beta:0.1"] {
            let rates: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| r.rate)
                .collect();
            assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{m}: {rates:?}");
        }
        // singleton grid reduces to a plain run
        let mut single = smoke_config();
        single.alphas = vec![0.1];
        let a = pp_curve(&single).unwrap();
        let b = run_experiment(&single).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        assert_eq!(a.rows[0].rate, b.rows[0].rate);
    }

    #[test]
    fn predict_paths() {
        // symmetric designs predict the nominal level for every wild method
        let mut cfg = smoke_config();
        cfg.marginal = Marginal::Symmetric;
        cfg.design = Design::IidSpherical;
        cfg.methods = vec![MethodSpec::Gaussian, MethodSpec::Beta { nu: 0.1 }];
        let rows = predict(&cfg).unwrap();
        for row in &rows {
            assert_abs_diff_eq!(row.predicted, row.alpha, epsilon = 1e-12);
        }

        // factor design at gamma = 1 reproduces the univariate reference
        let mut fcfg = smoke_config();
        fcfg.design = Design::Factor;
        fcfg.rho = 0.5;
        fcfg.n = 100;
        fcfg.d = 1;
        fcfg.methods = vec![MethodSpec::Beta { nu: 0.1 }];
        fcfg.alphas = vec![0.1];
        let rows = predict(&fcfg).unwrap();
        assert_abs_diff_eq!(rows[0].predicted, 0.0711766, epsilon = 1e-6);

        // empirical bootstrap has no expansion
        let mut ecfg = smoke_config();
        ecfg.methods = vec![MethodSpec::Empirical];
        assert!(matches!(predict(&ecfg), Err(Error::Capability(_))));

        // the AR(1) copula has no path at large d
        let mut big = smoke_config();
        big.design = Design::CopulaII;
        big.d = 100;
        big.n = 50;
        assert!(matches!(predict(&big), Err(Error::Capability(_))));

        // double bootstrap predicts the nominal level
        let mut dcfg = smoke_config();
        dcfg.design = Design::IidSpherical;
        dcfg.methods = vec![MethodSpec::Double { nu: 0.1, b2: 9 }];
        let rows = predict(&dcfg).unwrap();
        for row in &rows {
            assert_eq!(row.predicted, row.alpha);
        }
    }

    #[test]
    fn verification_suite_passes() {
        let checks = run_verification();
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(checks.len(), 4);
    }

    #[test]
    fn emit_report_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke_config();
        cfg.trials = 3;
        let report = run_experiment(&cfg).unwrap();
        let csv_path = dir.path().join("out.csv");
        emit_report(&report, ReportFormat::Csv, csv_path.to_str().unwrap()).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("design,"));
        let json_path = dir.path().join("out.json");
        emit_report(&report, ReportFormat::Json, json_path.to_str().unwrap()).unwrap();
        let parsed: RejectionReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed.rows.len(), report.rows.len());
        // i/o errors carry the path
        let bad = emit_report(&report, ReportFormat::Csv, "/nonexistent-dir/x.csv");
        assert!(matches!(bad, Err(Error::Io { .. })));
    }

    #[test]
    fn config_validation() {
        let mut cfg = smoke_config();
        cfg.alphas = vec![1.5];
        assert!(cfg.validate().is_err());
        let mut cfg = smoke_config();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = smoke_config();
        cfg.design = Design::Factor;
        cfg.rho = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = smoke_config();
        assert!(cfg.validate().is_ok());
    }
}
