//! Deterministic, parallel-safe random streams and the bootstrap weight laws.
//!
//! Each unit of parallel work derives its own generator from a `StreamKey`
//! (seed, trial, purpose) plus an optional counter, so results never depend
//! on thread scheduling. Streams are ChaCha8 generators keyed by a SplitMix64
//! hash of the key tuple; distinct tuples give independent streams and the
//! same tuple always reproduces the identical sequence.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a substream is used for; part of the stream key so the data stream
/// of a trial can never collide with its bootstrap weight streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Purpose {
    Data,
    Level1,
    Level2,
    GaussianRef,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Data => 1,
            Purpose::Level1 => 2,
            Purpose::Level2 => 3,
            Purpose::GaussianRef => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub trial: u64,
    pub purpose: Purpose,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64, trial: u64, purpose: Purpose) -> Self {
        StreamKey { seed, trial, purpose }
    }

    pub fn with_purpose(self, purpose: Purpose) -> Self {
        StreamKey { purpose, ..self }
    }

    /// Generator for this key (counter 0).
    pub fn rng(&self) -> ChaCha8Rng {
        self.rng_at(0)
    }

    /// Generator for the `index`-th substream of this key. Used where a
    /// single logical stream needs further splitting, e.g. one substream per
    /// first-level replicate in the double bootstrap.
    pub fn rng_at(&self, index: u64) -> ChaCha8Rng {
        let mut state = self.seed ^ 0x6C62_272E_07BB_0142;
        let mut key = [0u8; 32];
        for (slot, word) in [self.seed, self.trial, self.purpose.tag(), index]
            .into_iter()
            .enumerate()
        {
            state ^= word.wrapping_mul(0x2545_F491_4F6C_DD1D);
            let h = splitmix64(&mut state);
            key[slot * 8..slot * 8 + 8].copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

/// A bootstrap multiplier law with exact first three moments (0, 1, m3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightLaw {
    Gaussian,
    Mammen,
    Rademacher,
    /// Standardized beta with shape parameters chosen so that the third
    /// moment is exactly one; `nu = a + b` controls how close the law is to
    /// Mammen's two-point distribution.
    StdBeta { nu: f64, a: f64, b: f64 },
}

/// Shape parameters `(a, b)` of the beta law whose standardization has
/// third moment exactly one, given `nu = a + b`.
pub fn std_beta_params(nu: f64) -> Result<(f64, f64)> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::validation(format!(
            "standardized beta requires nu > 0, got {nu}"
        )));
    }
    let c = nu * nu + 20.0 * nu + 20.0;
    let root = c.sqrt();
    let a = nu * (c - (2.0 + nu) * root) / (2.0 * c);
    let b = nu * (c + (2.0 + nu) * root) / (2.0 * c);
    if !(a > 0.0) {
        return Err(Error::validation(format!(
            "nu = {nu} yields a non-positive beta shape a = {a}"
        )));
    }
    Ok((a, b))
}

impl WeightLaw {
    pub fn std_beta(nu: f64) -> Result<Self> {
        let (a, b) = std_beta_params(nu)?;
        Ok(WeightLaw::StdBeta { nu, a, b })
    }

    /// Mean and standard deviation of the raw Beta(a, b) law.
    pub(crate) fn beta_standardization(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let mean = a / s;
        let var = a * b / (s * s * (s + 1.0));
        (mean, var.sqrt())
    }
}

/// Exact analytic first three moments of a weight law.
pub fn weight_moments(law: &WeightLaw) -> (f64, f64, f64) {
    match *law {
        WeightLaw::Gaussian | WeightLaw::Rademacher => (0.0, 1.0, 0.0),
        WeightLaw::Mammen => (0.0, 1.0, 1.0),
        WeightLaw::StdBeta { a, b, .. } => {
            let skew = 2.0 * (b - a) * (a + b + 1.0).sqrt() / ((a + b + 2.0) * (a * b).sqrt());
            (0.0, 1.0, skew)
        }
    }
}

const MAMMEN_HI: f64 = 1.618_033_988_749_895; // (sqrt(5)+1)/2
const MAMMEN_LO: f64 = -0.618_033_988_749_894_9; // -(sqrt(5)-1)/2
const MAMMEN_P_HI: f64 = 0.276_393_202_250_021; // (sqrt(5)-1)/(2 sqrt(5))

/// Draw one multiplier.
pub fn sample_weight<R: Rng + ?Sized>(law: &WeightLaw, rng: &mut R) -> f64 {
    match *law {
        WeightLaw::Gaussian => rng.sample(rand_distr::StandardNormal),
        WeightLaw::Mammen => {
            if rng.random::<f64>() < MAMMEN_P_HI {
                MAMMEN_HI
            } else {
                MAMMEN_LO
            }
        }
        WeightLaw::Rademacher => {
            if rng.random::<f64>() < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
        WeightLaw::StdBeta { a, b, .. } => {
            let (mean, sd) = WeightLaw::beta_standardization(a, b);
            let eta = sample_beta(a, b, rng);
            (eta - mean) / sd
        }
    }
}

/// Beta draw as a ratio of two gamma draws, so only gamma machinery is
/// needed. Underflow of a tiny-shape gamma to 0.0 lands on a support
/// endpoint, which is harmless; a double underflow is retried.
fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let ga = rand_distr::Gamma::new(a, 1.0).expect("validated shape");
    let gb = rand_distr::Gamma::new(b, 1.0).expect("validated shape");
    loop {
        let x: f64 = ga.sample(rng);
        let y: f64 = gb.sample(rng);
        let s = x + y;
        if s > 0.0 {
            return x / s;
        }
    }
}

/// One gamma draw with the given shape and scale.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && scale > 0.0) {
        return Err(Error::validation(format!(
            "gamma draw requires positive shape and scale, got ({shape}, {scale})"
        )));
    }
    let g = rand_distr::Gamma::new(shape, scale)
        .map_err(|e| Error::validation(format!("gamma parameters rejected: {e}")))?;
    Ok(g.sample(rng))
}
