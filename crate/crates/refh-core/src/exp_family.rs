//! Exponential-family unit types and layer specifications.
//!
//! Layers are described as runs of units drawn from a small set of
//! exponential families. Each family contributes three things: the mean
//! function applied to natural parameters (the layer "nonlinearity"), a
//! sampler, and the valid domain of its mean/data values.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor and ceiling applied to Poisson means before sampling, guarding
/// against overflow from large natural parameters early in training.
pub const POISSON_MEAN_FLOOR: f64 = 1e-8;
pub const POISSON_MEAN_CEIL: f64 = 1e4;

/// Mean threshold at which the Poisson sampler switches from sequential
/// inversion to transformed rejection.
const POISSON_INVERSION_CUTOFF: f64 = 30.0;

/// A scalar exponential-family unit type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitFamily {
    /// Binary unit; natural parameter maps to the mean through the logistic.
    Bernoulli,
    /// Count unit; natural parameter maps to the mean through `exp`.
    Poisson,
}

impl UnitFamily {
    /// Mean of the unit given its natural parameter.
    ///
    /// Strictly increasing in `eta` for both families. Errors on non-finite
    /// input; note the Poisson mean may overflow to `+inf` for extreme `eta`
    /// (downstream consumers clamp via [`UnitFamily::clamp_mean`]).
    pub fn mean_from_natural(self, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(Error::NumericDomain(format!(
                "natural parameter must be finite, got {eta}"
            )));
        }
        Ok(match self {
            UnitFamily::Bernoulli => 1.0 / (1.0 + (-eta).exp()),
            UnitFamily::Poisson => eta.exp(),
        })
    }

    /// Clamp a proposed mean into the domain the sampler accepts.
    ///
    /// Bernoulli means are pinned to `[0, 1]`; Poisson means to
    /// `[POISSON_MEAN_FLOOR, POISSON_MEAN_CEIL]` (an overflowed `+inf` mean
    /// clamps to the ceiling).
    pub fn clamp_mean(self, mean: f64) -> f64 {
        match self {
            UnitFamily::Bernoulli => mean.clamp(0.0, 1.0),
            UnitFamily::Poisson => mean.clamp(POISSON_MEAN_FLOOR, POISSON_MEAN_CEIL),
        }
    }

    /// Variance of the unit at a given mean (Bernoulli: m(1-m); Poisson: m).
    pub fn variance(self, mean: f64) -> f64 {
        match self {
            UnitFamily::Bernoulli => mean * (1.0 - mean),
            UnitFamily::Poisson => mean,
        }
    }

    /// Draw one sample at the given mean.
    ///
    /// The mean is clamped via [`UnitFamily::clamp_mean`] first; NaN or
    /// negative means are rejected. Bernoulli returns 0.0/1.0; Poisson
    /// returns a non-negative integer-valued float.
    pub fn sample<R: Rng + ?Sized>(self, mean: f64, rng: &mut R) -> Result<f64> {
        if mean.is_nan() || mean < 0.0 {
            return Err(Error::NumericDomain(format!(
                "mean out of range for {self:?} sampling: {mean}"
            )));
        }
        if self == UnitFamily::Bernoulli && mean > 1.0 {
            return Err(Error::NumericDomain(format!(
                "Bernoulli mean exceeds 1: {mean}"
            )));
        }
        let m = self.clamp_mean(mean);
        Ok(match self {
            UnitFamily::Bernoulli => {
                if rng.gen::<f64>() < m {
                    1.0
                } else {
                    0.0
                }
            }
            UnitFamily::Poisson => sample_poisson(m, rng),
        })
    }

    /// Whether `value` is a legal *data* value for this family (an exact 0/1
    /// for Bernoulli, a non-negative integer for Poisson).
    pub fn is_valid_datum(self, value: f64) -> bool {
        match self {
            UnitFamily::Bernoulli => value == 0.0 || value == 1.0,
            UnitFamily::Poisson => value.is_finite() && value >= 0.0 && value.fract() == 0.0,
        }
    }

    /// Whether `value` is a legal *mean* value for this family.
    pub fn is_valid_mean(self, value: f64) -> bool {
        match self {
            UnitFamily::Bernoulli => value.is_finite() && (0.0..=1.0).contains(&value),
            UnitFamily::Poisson => value.is_finite() && value >= 0.0,
        }
    }
}

/// Poisson sampling: sequential inversion below the cutoff mean, transformed
/// rejection (PTRS) above it. Both consume a variable number of uniforms but
/// are fully deterministic given the generator state.
fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if mean < POISSON_INVERSION_CUTOFF {
        poisson_inversion(mean, rng)
    } else {
        poisson_ptrs(mean, rng)
    }
}

fn poisson_inversion<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0.0f64;
    // The loop terminates because cdf -> 1; the iteration guard covers the
    // pathological case of u being within rounding distance of 1.
    let max_iter = (mean + 12.0 * mean.sqrt() + 30.0) as usize;
    for _ in 0..max_iter {
        if u <= cdf {
            break;
        }
        k += 1.0;
        p *= mean / k;
        cdf += p;
    }
    k
}

/// Transformed rejection sampler for Poisson with large mean (PTRS).
fn poisson_ptrs<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    let log_mean = mean.ln();
    let b = 0.931 + 2.53 * mean.sqrt();
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let v: f64 = rng.gen();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
            <= k * log_mean - mean - ln_factorial(k)
        {
            return k;
        }
    }
}

/// ln(k!) for non-negative integer-valued `k`: exact accumulation for small
/// k, Stirling series beyond.
fn ln_factorial(k: f64) -> f64 {
    debug_assert!(k >= 0.0 && k.fract() == 0.0);
    if k < 21.0 {
        let mut acc = 0.0;
        let mut i = 2.0;
        while i <= k {
            acc += i.ln();
            i += 1.0;
        }
        acc
    } else {
        let x = k + 1.0; // ln Gamma(x)
        (x - 0.5) * x.ln() - x + 0.5 * (std::f64::consts::TAU).ln()
            + 1.0 / (12.0 * x)
            - 1.0 / (360.0 * x.powi(3))
            + 1.0 / (1260.0 * x.powi(5))
    }
}

/// One homogeneous run of units inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub family: UnitFamily,
    pub count: usize,
}

/// Ordered description of a layer as runs of identical unit families.
///
/// An empty spec (no blocks) is legal and denotes an absent block, e.g. a
/// harmonium with no recurrent units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    blocks: Vec<LayerBlock>,
}

impl LayerSpec {
    /// Build a spec from blocks. Every block must have a positive count.
    pub fn new(blocks: Vec<LayerBlock>) -> Result<Self> {
        for b in &blocks {
            if b.count == 0 {
                return Err(Error::InvalidArgument(
                    "layer block with zero units".into(),
                ));
            }
        }
        Ok(LayerSpec { blocks })
    }

    /// A layer of `n` Bernoulli units.
    pub fn bernoulli(n: usize) -> Self {
        LayerSpec::new(vec![LayerBlock { family: UnitFamily::Bernoulli, count: n }])
            .expect("positive count")
    }

    /// A layer of `n` Poisson units.
    pub fn poisson(n: usize) -> Self {
        LayerSpec::new(vec![LayerBlock { family: UnitFamily::Poisson, count: n }])
            .expect("positive count")
    }

    /// A layer with no units.
    pub fn empty() -> Self {
        LayerSpec { blocks: Vec::new() }
    }

    pub fn blocks(&self) -> &[LayerBlock] {
        &self.blocks
    }

    /// Total number of units.
    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Iterate the family of each unit in layer order.
    pub fn unit_families(&self) -> impl Iterator<Item = UnitFamily> + '_ {
        self.blocks
            .iter()
            .flat_map(|b| std::iter::repeat(b.family).take(b.count))
    }

    /// True when every unit in the layer is of the given family.
    pub fn is_uniform(&self, family: UnitFamily) -> bool {
        self.blocks.iter().all(|b| b.family == family)
    }

    /// Apply each unit's mean function to its natural parameter.
    pub fn means_from_natural(&self, eta: &ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_len("means_from_natural", eta.len())?;
        let mut out = Array1::zeros(eta.len());
        for ((o, &e), fam) in out.iter_mut().zip(eta.iter()).zip(self.unit_families()) {
            *o = fam.mean_from_natural(e)?;
        }
        Ok(out)
    }

    /// Clamp each entry into its family's sampler domain.
    pub fn clamp_means(&self, means: &mut Array1<f64>) {
        for (m, fam) in means.iter_mut().zip(self.unit_families()) {
            *m = fam.clamp_mean(*m);
        }
    }

    /// Sample every unit at the given means.
    pub fn sample<R: Rng + ?Sized>(&self, means: &ArrayView1<f64>, rng: &mut R) -> Result<Array1<f64>> {
        self.check_len("sample", means.len())?;
        let mut out = Array1::zeros(means.len());
        for ((o, &m), fam) in out.iter_mut().zip(means.iter()).zip(self.unit_families()) {
            *o = fam.sample(m, rng)?;
        }
        Ok(out)
    }

    /// Validate a vector of mean-domain values (recurrent inputs, mean
    /// statistics): Bernoulli entries in [0,1], Poisson entries >= 0, all
    /// finite.
    pub fn validate_means(&self, values: &ArrayView1<f64>) -> Result<()> {
        self.check_len("validate_means", values.len())?;
        for (i, (&v, fam)) in values.iter().zip(self.unit_families()).enumerate() {
            if !fam.is_valid_mean(v) {
                return Err(Error::InvalidArgument(format!(
                    "unit {i} ({fam:?}) has out-of-domain value {v}"
                )));
            }
        }
        Ok(())
    }

    /// Validate a vector of data values (exact 0/1 for Bernoulli,
    /// non-negative integers for Poisson).
    pub fn validate_data(&self, values: &ArrayView1<f64>) -> Result<()> {
        self.check_len("validate_data", values.len())?;
        for (i, (&v, fam)) in values.iter().zip(self.unit_families()).enumerate() {
            if !fam.is_valid_datum(v) {
                return Err(Error::InvalidArgument(format!(
                    "unit {i} ({fam:?}) has invalid datum {v}"
                )));
            }
        }
        Ok(())
    }

    fn check_len(&self, context: &'static str, actual: usize) -> Result<()> {
        if actual != self.len() {
            return Err(Error::dim(context, self.len(), actual));
        }
        Ok(())
    }
}
