//! Synthetic covariance models, their samplers, and closed-form oracles.
//!
//! Two families are provided. The block model places groups of exchangeable
//! variables on a latent factor per block, with optional covariances
//! between block factors, isotropic noise, and optional pure-noise
//! variables appended after the blocks. The mixture model builds
//! observations as a linear combination of loading vectors weighted by
//! random factors, plus noise, optionally with a linear response.
//!
//! The oracle functions give exact population values for what the tree
//! construction does inside one block or between two blocks: the rotation
//! angle and weights when merging clusters of sizes `m` and `n`, the
//! variances of the resulting sum and difference coordinates, and the
//! working correlations that govern which pair merges next.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{fit_covariance, EngineConfig, Height, TreeletModel};
use crate::error::{Error, Result};
use crate::matrix::{sample_covariance, DataMatrix, SymMatrix};
use crate::seeding::{derive_seed, stream_rng};

/// Covariance between the factors of two distinct blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetweenCovariance {
    pub block_i: usize,
    pub block_j: usize,
    pub value: f64,
}

/// Block covariance model: `K` blocks of exchangeable variables driven by
/// one factor each, factor covariances between blocks, isotropic noise with
/// standard deviation `noise_sd`, and `extra_noise` pure-noise variables
/// appended after the blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockModelSpec {
    /// Variables per block, `p_1..p_K`.
    pub sizes: Vec<usize>,
    /// Factor variance per block.
    pub within: Vec<f64>,
    /// Factor covariances for listed block pairs; unlisted pairs are zero.
    pub between: Vec<BetweenCovariance>,
    /// Noise standard deviation added independently to every variable.
    pub noise_sd: f64,
    /// Count of appended variables that carry only noise.
    pub extra_noise: usize,
}

impl BlockModelSpec {
    pub fn block_count(&self) -> usize {
        self.sizes.len()
    }

    /// Total dimension including appended noise variables.
    pub fn p(&self) -> usize {
        self.sizes.iter().sum::<usize>() + self.extra_noise
    }

    /// Index ranges of the signal blocks, in order.
    pub fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for &size in &self.sizes {
            out.push(start..start + size);
            start += size;
        }
        out
    }

    /// Noise-to-signal ratio `noise_sd / min_k sqrt(within_k)`.
    pub fn delta(&self) -> f64 {
        let min_sd = self
            .within
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        self.noise_sd / min_sd
    }

    /// `K x K` covariance matrix of the block factors.
    pub fn factor_cov(&self) -> Array2<f64> {
        let k = self.block_count();
        let mut f = Array2::zeros((k, k));
        for (i, &v) in self.within.iter().enumerate() {
            f[[i, i]] = v;
        }
        for b in &self.between {
            f[[b.block_i, b.block_j]] = b.value;
            f[[b.block_j, b.block_i]] = b.value;
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.block_count();
        if k == 0 {
            return Err(Error::ModelInvalid("block model needs at least one block".into()));
        }
        if self.within.len() != k {
            return Err(Error::DimensionMismatch {
                context: "within-variance count",
                expected: k,
                got: self.within.len(),
            });
        }
        if self.sizes.contains(&0) {
            return Err(Error::ModelInvalid("block sizes must be positive".into()));
        }
        if self.within.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::ModelInvalid(
                "within-block factor variances must be positive and finite".into(),
            ));
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(Error::ModelInvalid(
                "noise standard deviation must be finite and nonnegative".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for b in &self.between {
            if b.block_i >= b.block_j || b.block_j >= k {
                return Err(Error::ModelInvalid(format!(
                    "between-covariance pair ({}, {}) must satisfy i < j < {k}",
                    b.block_i, b.block_j
                )));
            }
            if !b.value.is_finite() {
                return Err(Error::ModelInvalid("between-covariances must be finite".into()));
            }
            if !seen.insert((b.block_i, b.block_j)) {
                return Err(Error::ModelInvalid(format!(
                    "between-covariance pair ({}, {}) listed twice",
                    b.block_i, b.block_j
                )));
            }
        }
        psd_factor(&self.factor_cov())?;
        Ok(())
    }
}

/// Cholesky-style square root of a small symmetric PSD matrix, tolerating
/// exactly singular directions (zero pivots with zero columns). Returns the
/// lower-triangular factor `L` with `L L^T = m`.
fn psd_factor(m: &Array2<f64>) -> Result<Array2<f64>> {
    let k = m.nrows();
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let mut l: Array2<f64> = Array2::zeros((k, k));
    for j in 0..k {
        let mut d = m[[j, j]];
        for r in 0..j {
            d -= l[[j, r]] * l[[j, r]];
        }
        if d < -tol {
            return Err(Error::NotPositiveSemidefinite(format!(
                "pivot {j} is negative ({d:.3e})"
            )));
        }
        if d <= tol {
            // Singular direction: the remaining column must vanish too.
            for i in (j + 1)..k {
                let mut v = m[[i, j]];
                for r in 0..j {
                    v -= l[[i, r]] * l[[j, r]];
                }
                if v.abs() > tol.max(1e-12 * scale) {
                    return Err(Error::NotPositiveSemidefinite(format!(
                        "zero pivot {j} with nonzero residual column entry {v:.3e}"
                    )));
                }
            }
            continue;
        }
        let root = d.sqrt();
        l[[j, j]] = root;
        for i in (j + 1)..k {
            let mut v = m[[i, j]];
            for r in 0..j {
                v -= l[[i, r]] * l[[j, r]];
            }
            l[[i, j]] = v / root;
        }
    }
    Ok(l)
}

/// Exact population covariance of a block model.
pub fn block_covariance(spec: &BlockModelSpec) -> Result<SymMatrix> {
    spec.validate()?;
    let p = spec.p();
    let f = spec.factor_cov();
    let blocks = spec.blocks();
    let mut values = Array2::zeros((p, p));
    for (bi, range_i) in blocks.iter().enumerate() {
        for (bj, range_j) in blocks.iter().enumerate() {
            let v = f[[bi, bj]];
            if v == 0.0 {
                continue;
            }
            for i in range_i.clone() {
                for j in range_j.clone() {
                    values[[i, j]] = v;
                }
            }
        }
    }
    let noise_var = spec.noise_sd * spec.noise_sd;
    for i in 0..p {
        values[[i, i]] += noise_var;
    }
    Ok(SymMatrix::new_unchecked(values))
}

/// Draws `n` Gaussian observations from a block model.
///
/// Per row, the block factors are drawn first (jointly, through the factor
/// covariance square root), then one noise value per variable; the draw
/// order is fixed, so outputs are bit-reproducible for a given seed.
pub fn sample_block(spec: &BlockModelSpec, n: usize, seed: u64) -> Result<DataMatrix> {
    spec.validate()?;
    let factor_root = psd_factor(&spec.factor_cov())?;
    let k = spec.block_count();
    let p = spec.p();
    let blocks = spec.blocks();
    let mut rng = stream_rng(seed, 0);
    let mut values = Array2::zeros((n, p));
    let mut raw = vec![0.0f64; k];
    for t in 0..n {
        for g in raw.iter_mut() {
            *g = rng.sample(StandardNormal);
        }
        for (b, range) in blocks.iter().enumerate() {
            let mut s = 0.0;
            for r in 0..=b {
                s += factor_root[[b, r]] * raw[r];
            }
            for i in range.clone() {
                values[[t, i]] = s;
            }
        }
        for i in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            values[[t, i]] += spec.noise_sd * z;
        }
    }
    DataMatrix::new(values)
}

/// Verdict and both sides of the block-recovery correlation condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionReport {
    pub holds: bool,
    /// Largest between-block factor correlation `sigma_ij / (sigma_i sigma_j)`.
    pub lhs: f64,
    /// `1 / sqrt(1 + 3 max(delta^2, delta^4))` with `delta = noise_sd / min_k sigma_k`.
    pub rhs: f64,
}

/// Checks the sufficient condition under which the tree merges every block
/// completely before ever merging across blocks.
pub fn theorem2_condition(spec: &BlockModelSpec) -> Result<ConditionReport> {
    spec.validate()?;
    let k = spec.block_count();
    let f = spec.factor_cov();
    let mut lhs = f64::NEG_INFINITY;
    for i in 0..k {
        for j in (i + 1)..k {
            lhs = lhs.max(f[[i, j]] / (f[[i, i]] * f[[j, j]]).sqrt());
        }
    }
    if k == 1 {
        lhs = 0.0;
    }
    let delta_sq = spec.delta().powi(2);
    let rhs = 1.0 / (1.0 + 3.0 * delta_sq.max(delta_sq * delta_sq)).sqrt();
    Ok(ConditionReport {
        holds: lhs < rhs,
        lhs,
        rhs,
    })
}

/// Exact rotation produced by merging two within-block clusters of sizes
/// `m` and `n` (given as normalized cluster sums): the constrained angle and
/// the weights of the new sum and difference coordinates on the two inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeOracle {
    pub theta: f64,
    /// Weights of the sum coordinate on the two merged cluster sums.
    pub sum_weights: (f64, f64),
    /// Weights of the difference coordinate (defined up to a global sign).
    pub diff_weights: (f64, f64),
}

/// Closed-form merge of cluster sums of sizes `m` and `n` from one
/// exchangeable block: `theta = arctan sqrt(n/m)`, shifted by a half turn
/// into `[-pi/4, pi/4]` when `m < n`; the sum coordinate is
/// `(sqrt(m) u + sqrt(n) v) / sqrt(m + n)`.
pub fn merge_oracle(m: usize, n: usize) -> MergeOracle {
    let (mf, nf) = (m as f64, n as f64);
    let unconstrained = (nf / mf).sqrt().atan();
    let theta = if m >= n {
        unconstrained
    } else {
        unconstrained - std::f64::consts::FRAC_PI_2
    };
    let total = (mf + nf).sqrt();
    MergeOracle {
        theta,
        sum_weights: (mf.sqrt() / total, nf.sqrt() / total),
        diff_weights: (-nf.sqrt() / total, mf.sqrt() / total),
    }
}

/// Population variances of the sum and difference coordinates created by a
/// within-block merge of cluster sizes `m` and `n`, with factor standard
/// deviation `sigma_k` and noise level `sigma`.
///
/// The pair covariance is diagonalized exactly (its rotation angle does not
/// depend on `sigma`), so the difference variance is exactly `sigma^2` and
/// the sum holds the rest: `(m + n) sigma_k^2 + sigma^2`.
pub fn coeff_variance_oracle(m: usize, n: usize, sigma_k: f64, sigma: f64) -> (f64, f64) {
    let sum = (m + n) as f64 * sigma_k * sigma_k + sigma * sigma;
    let diff = sigma * sigma;
    (sum, diff)
}

/// Working correlation between normalized cluster sums of sizes `m` and `n`
/// from two different blocks with factor covariance `sigma_ij`.
pub fn rho_between(sigma_ij: f64, sigma_i: f64, sigma_j: f64, sigma: f64, m: usize, n: usize) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let di = sigma / sigma_i;
    let dj = sigma / sigma_j;
    (sigma_ij / (sigma_i * sigma_j)) * (mf * nf).sqrt()
        / ((mf + di * di).sqrt() * (nf + dj * dj).sqrt())
}

/// Working correlation between normalized cluster sums of sizes `m` and `n`
/// from the same block with factor standard deviation `sigma_k`.
pub fn rho_within(sigma_k: f64, sigma: f64, m: usize, n: usize) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let d2 = (sigma / sigma_k).powi(2);
    1.0 / (1.0 + (mf + nf) / (mf * nf) * d2 + d2 * d2 / (mf * nf)).sqrt()
}

/// Distribution of one mixture factor. Factors are drawn independently in
/// declaration order, except combinations, which are deterministic
/// functions of earlier factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum FactorLaw {
    /// Centered normal with this standard deviation.
    Normal { sd: f64 },
    /// `+magnitude` or `-magnitude` with equal probability.
    SymmetricSign { magnitude: f64 },
    /// `1` with probability `threshold`, else `0` (uniform draw compared to
    /// the threshold).
    Indicator { threshold: f64 },
    /// Linear combination of earlier factors.
    Combination { weights: Vec<FactorWeight> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorWeight {
    pub factor: usize,
    pub weight: f64,
}

/// Linear response on the factors: `y = sum_j weights_j u_j + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSpec {
    pub weights: Vec<f64>,
    pub noise_sd: f64,
}

/// Linear mixture model: `x = sum_j u_j v_j + noise_sd * z` with loading
/// vectors `v_j`, factor laws for `u_j`, and an optional response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModelSpec {
    pub loadings: Vec<Vec<f64>>,
    pub factors: Vec<FactorLaw>,
    pub noise_sd: f64,
    pub response: Option<ResponseSpec>,
}

impl MixtureModelSpec {
    pub fn k(&self) -> usize {
        self.loadings.len()
    }

    pub fn p(&self) -> usize {
        self.loadings.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let p = self.p();
        if k == 0 || p == 0 {
            return Err(Error::ModelInvalid("mixture model needs at least one loading".into()));
        }
        for v in &self.loadings {
            if v.len() != p {
                return Err(Error::DimensionMismatch {
                    context: "loading vector length",
                    expected: p,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::ModelInvalid("loading vectors must be finite".into()));
            }
        }
        if self.factors.len() != k {
            return Err(Error::DimensionMismatch {
                context: "factor law count",
                expected: k,
                got: self.factors.len(),
            });
        }
        for (j, law) in self.factors.iter().enumerate() {
            match law {
                FactorLaw::Normal { sd } if !sd.is_finite() || *sd < 0.0 => {
                    return Err(Error::ModelInvalid(format!("factor {j}: invalid sd {sd}")));
                }
                FactorLaw::SymmetricSign { magnitude } if !magnitude.is_finite() => {
                    return Err(Error::ModelInvalid(format!("factor {j}: invalid magnitude")));
                }
                FactorLaw::Indicator { threshold } if !threshold.is_finite() => {
                    return Err(Error::ModelInvalid(format!("factor {j}: invalid threshold")));
                }
                FactorLaw::Combination { weights } => {
                    for w in weights {
                        if w.factor >= j {
                            return Err(Error::ModelInvalid(format!(
                                "factor {j}: combination may only reference earlier factors, got {}",
                                w.factor
                            )));
                        }
                        if !w.weight.is_finite() {
                            return Err(Error::ModelInvalid(format!("factor {j}: invalid weight")));
                        }
                    }
                }
                _ => {}
            }
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(Error::ModelInvalid(
                "noise standard deviation must be finite and nonnegative".into(),
            ));
        }
        if let Some(r) = &self.response {
            if r.weights.len() != k {
                return Err(Error::DimensionMismatch {
                    context: "response weight count",
                    expected: k,
                    got: r.weights.len(),
                });
            }
            if !r.noise_sd.is_finite() || r.noise_sd < 0.0 {
                return Err(Error::ModelInvalid("response noise must be finite and nonnegative".into()));
            }
        }
        // Loadings must be linearly independent for the factor structure to
        // be identifiable; test the Gram matrix for strict positivity.
        let gram = Array2::from_shape_fn((k, k), |(a, b)| {
            self.loadings[a]
                .iter()
                .zip(&self.loadings[b])
                .map(|(x, y)| x * y)
                .sum()
        });
        let root = psd_factor(&gram)
            .map_err(|_| Error::ModelInvalid("loading vectors are not independent".into()))?;
        for j in 0..k {
            if root[[j, j]] == 0.0 {
                return Err(Error::ModelInvalid(
                    "loading vectors are linearly dependent".into(),
                ));
            }
        }
        Ok(())
    }

    /// `K x K` covariance matrix of the factors (means play no role).
    pub fn factor_cov(&self) -> Array2<f64> {
        let k = self.k();
        let mut f: Array2<f64> = Array2::zeros((k, k));
        for (j, law) in self.factors.iter().enumerate() {
            match law {
                FactorLaw::Normal { sd } => f[[j, j]] = sd * sd,
                FactorLaw::SymmetricSign { magnitude } => f[[j, j]] = magnitude * magnitude,
                FactorLaw::Indicator { threshold } => {
                    let q = threshold.clamp(0.0, 1.0);
                    f[[j, j]] = q * (1.0 - q);
                }
                FactorLaw::Combination { weights } => {
                    for i in 0..j {
                        let mut c = 0.0;
                        for w in weights {
                            c += w.weight * f[[w.factor, i]];
                        }
                        f[[j, i]] = c;
                        f[[i, j]] = c;
                    }
                    let mut v = 0.0;
                    for a in weights {
                        for b in weights {
                            v += a.weight * b.weight * f[[a.factor, b.factor]];
                        }
                    }
                    f[[j, j]] = v;
                }
            }
        }
        f
    }
}

/// One draw from a mixture model: the observations, the factor values that
/// generated them, and the response when the spec defines one.
#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub data: DataMatrix,
    pub factors: Array2<f64>,
    pub response: Option<Vec<f64>>,
}

/// Draws `n` observations from a mixture model. Per row, factors are drawn
/// in declaration order, then `p` noise values, then the response noise;
/// the order is fixed for bit-reproducibility.
pub fn sample_mixture(spec: &MixtureModelSpec, n: usize, seed: u64) -> Result<MixtureSample> {
    spec.validate()?;
    let k = spec.k();
    let p = spec.p();
    let mut rng = stream_rng(seed, 0);
    let mut factors = Array2::zeros((n, k));
    let mut values = Array2::zeros((n, p));
    let mut response = spec.response.as_ref().map(|_| Vec::with_capacity(n));
    for t in 0..n {
        for j in 0..k {
            factors[[t, j]] = match &spec.factors[j] {
                FactorLaw::Normal { sd } => sd * rng.sample::<f64, _>(StandardNormal),
                FactorLaw::SymmetricSign { magnitude } => {
                    if rng.random_range(0.0..1.0) < 0.5 {
                        *magnitude
                    } else {
                        -magnitude
                    }
                }
                FactorLaw::Indicator { threshold } => {
                    f64::from(rng.random_range(0.0..1.0) < *threshold)
                }
                FactorLaw::Combination { weights } => weights
                    .iter()
                    .map(|w| w.weight * factors[[t, w.factor]])
                    .sum(),
            };
        }
        for i in 0..p {
            let mut x = spec.noise_sd * rng.sample::<f64, _>(StandardNormal);
            for j in 0..k {
                x += factors[[t, j]] * spec.loadings[j][i];
            }
            values[[t, i]] = x;
        }
        if let Some(resp) = &spec.response {
            let noise: f64 = rng.sample(StandardNormal);
            let mut y = resp.noise_sd * noise;
            for j in 0..k {
                y += resp.weights[j] * factors[[t, j]];
            }
            response.as_mut().expect("response storage exists").push(y);
        }
    }
    Ok(MixtureSample {
        data: DataMatrix::new(values)?,
        factors,
        response,
    })
}

/// Exact population covariance of a mixture model:
/// `V F V^T + noise_sd^2 I` with `V` the loading matrix and `F` the factor
/// covariance.
pub fn mixture_covariance(spec: &MixtureModelSpec) -> Result<SymMatrix> {
    spec.validate()?;
    let p = spec.p();
    let k = spec.k();
    let f = spec.factor_cov();
    let v = Array2::from_shape_fn((p, k), |(i, j)| spec.loadings[j][i]);
    let vf = v.dot(&f);
    let raw = vf.dot(&v.t());
    let noise_var = spec.noise_sd * spec.noise_sd;
    let mut values = Array2::zeros((p, p));
    for i in 0..p {
        values[[i, i]] = raw[[i, i]] + noise_var;
        for j in (i + 1)..p {
            let s = 0.5 * (raw[[i, j]] + raw[[j, i]]);
            values[[i, j]] = s;
            values[[j, i]] = s;
        }
    }
    Ok(SymMatrix::new_unchecked(values))
}

fn indicator(p: usize, range: std::ops::Range<usize>) -> Vec<f64> {
    let mut v = vec![0.0; p];
    for i in range {
        v[i] = 1.0;
    }
    v
}

/// Three independent factors on disjoint blocks of sizes 4, 4 and 2, plus
/// two pure-noise variables (12 variables total).
pub fn example1() -> BlockModelSpec {
    BlockModelSpec {
        sizes: vec![4, 4, 2],
        within: vec![290.0, 300.0, 283.0],
        between: Vec::new(),
        noise_sd: 1.0,
        extra_noise: 2,
    }
}

/// Correlated factors on disjoint blocks (10 variables): the third factor
/// is `-0.3 u_1 + 0.925 u_2`, inducing covariances `-87` and `277.5`
/// between its block and the first two.
pub fn example2() -> MixtureModelSpec {
    MixtureModelSpec {
        loadings: vec![
            indicator(10, 0..4),
            indicator(10, 4..8),
            indicator(10, 8..10),
        ],
        factors: vec![
            FactorLaw::Normal { sd: 290.0f64.sqrt() },
            FactorLaw::Normal { sd: 300.0f64.sqrt() },
            FactorLaw::Combination {
                weights: vec![
                    FactorWeight { factor: 0, weight: -0.3 },
                    FactorWeight { factor: 1, weight: 0.925 },
                ],
            },
        ],
        noise_sd: 1.0,
        response: None,
    }
}

/// Block-model form of [`example2`], with the induced factor covariances
/// written out; useful for covariance-level cross-checks.
pub fn example2_block() -> BlockModelSpec {
    BlockModelSpec {
        sizes: vec![4, 4, 2],
        within: vec![290.0, 300.0, 0.09 * 290.0 + 0.855625 * 300.0],
        between: vec![
            BetweenCovariance { block_i: 0, block_j: 2, value: -87.0 },
            BetweenCovariance { block_i: 1, block_j: 2, value: 277.5 },
        ],
        noise_sd: 1.0,
        extra_noise: 0,
    }
}

/// Overlapping loading vectors on 500 variables: the first two factors
/// share variables 10..50, the third occupies 200..400, noise level 0.5;
/// variables 100..200 and 400..500 carry only noise.
pub fn example3() -> MixtureModelSpec {
    let p = 500;
    let mut v1 = indicator(p, 0..10);
    for x in &mut v1[10..50] {
        *x = 1.0;
    }
    let mut v2 = indicator(p, 10..50);
    for x in &mut v2[50..100] {
        *x = 1.0;
    }
    MixtureModelSpec {
        loadings: vec![v1, v2, indicator(p, 200..400)],
        factors: vec![
            FactorLaw::SymmetricSign { magnitude: 0.5 },
            FactorLaw::Indicator { threshold: 0.4 },
            FactorLaw::Indicator { threshold: 0.3 },
        ],
        noise_sd: 0.5,
        response: None,
    }
}

/// [`example3`] padded with 1500 further pure-noise variables (2000 total)
/// and a response `y = 2 u_1` with no response noise, for regression
/// benchmarks on wide data.
pub fn example3_extended() -> MixtureModelSpec {
    let mut spec = example3();
    for v in &mut spec.loadings {
        v.resize(2000, 0.0);
    }
    spec.response = Some(ResponseSpec {
        weights: vec![2.0, 0.0, 0.0],
        noise_sd: 0.0,
    });
    spec
}

/// Draws `n` mean-zero Gaussian observations with the given population
/// covariance, through a pivot-tolerant Cholesky square root.
pub fn sample_gaussian(cov: &SymMatrix, n: usize, seed: u64) -> Result<DataMatrix> {
    let root = psd_factor(cov.values())?;
    let p = cov.p();
    let mut rng = stream_rng(seed, 0);
    let mut values = Array2::zeros((n, p));
    let mut raw = vec![0.0f64; p];
    for t in 0..n {
        for z in raw.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        for i in 0..p {
            let mut s = 0.0;
            for r in 0..=i {
                s += root[[i, r]] * raw[r];
            }
            values[[t, i]] = s;
        }
    }
    DataMatrix::new(values)
}

/// True when the highest-variance scaling functions at the block-recovery
/// level are each supported inside one signal block of `spec`. Variances
/// are read from `cov` replayed through the model's rotations.
pub fn block_recovery_event(
    model: &TreeletModel,
    spec: &BlockModelSpec,
    cov: &SymMatrix,
) -> Result<bool> {
    spec.validate()?;
    let k = spec.block_count();
    let level = spec.p() - spec.extra_noise - k;
    if model.height() < level {
        return Err(Error::LevelOutOfRange {
            level,
            max: model.height(),
        });
    }
    let rotated = model.rotated_covariance(cov, level)?;
    let (scaling, _) = model.scaling_detail(level)?;
    let mut by_variance: Vec<&crate::engine::BasisFunction> = scaling.iter().collect();
    by_variance.sort_by(|a, b| {
        let va = rotated.values()[[a.slot, a.slot]];
        let vb = rotated.values()[[b.slot, b.slot]];
        vb.partial_cmp(&va).expect("variances are finite").then(a.slot.cmp(&b.slot))
    });
    let blocks = spec.blocks();
    Ok(by_variance[..k].iter().all(|f| {
        blocks
            .iter()
            .any(|range| f.support.iter().all(|i| range.contains(i)))
    }))
}

/// Grid experiment measuring how many observations the tree needs before
/// it recovers the block partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    /// Dimensions to test; each is split into near-equal blocks.
    pub p_grid: Vec<usize>,
    /// Sample sizes to test, ascending.
    pub n_grid: Vec<usize>,
    /// Replicates per grid cell.
    pub replicates: usize,
    pub block_count: usize,
    pub within_variance: f64,
    pub between_covariance: f64,
    pub noise_sd: f64,
    /// Success fraction that defines the required sample size per `p`.
    pub success_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub p: usize,
    pub n: usize,
    pub successes: usize,
    pub replicates: usize,
}

impl ConvergenceRow {
    pub fn fraction(&self) -> f64 {
        self.successes as f64 / self.replicates as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Per dimension: smallest grid `n` whose success fraction reached the
    /// threshold, if any did.
    pub required_n: Vec<(usize, Option<usize>)>,
    pub threshold: f64,
}

/// Builds the near-equal block spec a convergence cell uses.
pub fn convergence_spec(cfg: &ConvergenceConfig, p: usize) -> BlockModelSpec {
    let k = cfg.block_count;
    let base = p / k;
    let extra = p % k;
    let sizes = (0..k).map(|b| base + usize::from(b < extra)).collect();
    let mut between = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            between.push(BetweenCovariance {
                block_i: i,
                block_j: j,
                value: cfg.between_covariance,
            });
        }
    }
    BlockModelSpec {
        sizes,
        within: vec![cfg.within_variance; k],
        between,
        noise_sd: cfg.noise_sd,
        extra_noise: 0,
    }
}

/// Runs the convergence grid: per `(p, n)` cell, the fraction of replicates
/// whose fitted tree recovers the block partition.
pub fn convergence_experiment(cfg: &ConvergenceConfig, seed: u64) -> Result<ConvergenceTable> {
    if cfg.p_grid.is_empty() || cfg.n_grid.is_empty() || cfg.replicates == 0 {
        return Err(Error::InvalidConfig(
            "convergence experiment needs nonempty grids and at least one replicate".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.success_threshold) {
        return Err(Error::InvalidConfig(format!(
            "success threshold must lie in [0, 1], got {}",
            cfg.success_threshold
        )));
    }
    let mut rows = Vec::with_capacity(cfg.p_grid.len() * cfg.n_grid.len());
    for (pi, &p) in cfg.p_grid.iter().enumerate() {
        let spec = convergence_spec(cfg, p);
        spec.validate()?;
        let level = p - cfg.block_count;
        let engine = EngineConfig {
            height: Height::Level(level),
            ..EngineConfig::default()
        };
        for (ni, &n) in cfg.n_grid.iter().enumerate() {
            let cell = (pi * cfg.n_grid.len() + ni) as u64;
            let successes = (0..cfg.replicates)
                .into_par_iter()
                .map(|rep| {
                    let rep_seed = derive_seed(seed, cell * cfg.replicates as u64 + rep as u64);
                    let data = sample_block(&spec, n, rep_seed)?;
                    let cov = sample_covariance(&data);
                    let model = fit_covariance(&cov, &engine)?;
                    block_recovery_event(&model, &spec, &cov).map(usize::from)
                })
                .sum::<Result<usize>>()?;
            rows.push(ConvergenceRow {
                p,
                n,
                successes,
                replicates: cfg.replicates,
            });
        }
    }
    let required_n = cfg
        .p_grid
        .iter()
        .map(|&p| {
            let found = cfg
                .n_grid
                .iter()
                .find(|&&n| {
                    rows.iter()
                        .any(|r| r.p == p && r.n == n && r.fraction() >= cfg.success_threshold)
                })
                .copied();
            (p, found)
        })
        .collect();
    Ok(ConvergenceTable {
        rows,
        required_n,
        threshold: cfg.success_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::fit_covariance;
    use ndarray::array;

    fn nearly(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn single_pair_block_covariance() {
        let spec = BlockModelSpec {
            sizes: vec![2],
            within: vec![1.0],
            between: Vec::new(),
            noise_sd: 0.0,
            extra_noise: 0,
        };
        let cov = block_covariance(&spec).unwrap();
        assert_eq!(cov.values(), &array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn example1_layout_has_disjoint_blocks_and_noise_tail() {
        let spec = example1();
        let cov = block_covariance(&spec).unwrap();
        let v = cov.values();
        assert_eq!(spec.p(), 12);
        assert_eq!(v[[0, 0]], 291.0);
        assert_eq!(v[[0, 3]], 290.0);
        assert_eq!(v[[4, 7]], 300.0);
        assert_eq!(v[[8, 9]], 283.0);
        assert_eq!(v[[0, 4]], 0.0);
        assert_eq!(v[[0, 8]], 0.0);
        assert_eq!(v[[10, 10]], 1.0);
        assert_eq!(v[[10, 11]], 0.0);
    }

    #[test]
    fn example2_block_matches_its_mixture_form() {
        let block = block_covariance(&example2_block()).unwrap();
        let mixture = mixture_covariance(&example2()).unwrap();
        let v = block.values();
        assert_eq!(v[[0, 8]], -87.0);
        assert_eq!(v[[4, 8]], 277.5);
        nearly(v[[8, 8]], 283.7875, 1e-12);
        for i in 0..10 {
            for j in 0..10 {
                nearly(mixture.values()[[i, j]], v[[i, j]], 1e-9);
            }
        }
    }

    #[test]
    fn example3_population_entries() {
        let cov = mixture_covariance(&example3()).unwrap();
        let v = cov.values();
        nearly(v[[0, 0]], 0.5, 1e-12);
        nearly(v[[10, 10]], 0.74, 1e-12);
        nearly(v[[0, 10]], 0.25, 1e-12);
        nearly(v[[10, 50]], 0.24, 1e-12);
        nearly(v[[0, 50]], 0.0, 1e-12);
        nearly(v[[200, 200]], 0.46, 1e-12);
        nearly(v[[150, 150]], 0.25, 1e-12);
        nearly(v[[150, 151]], 0.0, 1e-12);
        nearly(v[[450, 450]], 0.25, 1e-12);
    }

    #[test]
    fn indefinite_between_covariance_is_rejected() {
        let spec = BlockModelSpec {
            sizes: vec![1, 1],
            within: vec![1.0, 1.0],
            between: vec![BetweenCovariance { block_i: 0, block_j: 1, value: 1.5 }],
            noise_sd: 0.0,
            extra_noise: 0,
        };
        assert!(matches!(
            block_covariance(&spec),
            Err(Error::NotPositiveSemidefinite(_))
        ));
    }

    #[test]
    fn block_sampler_is_reproducible_and_rank_one_when_noiseless() {
        let spec = BlockModelSpec {
            sizes: vec![3],
            within: vec![2.0],
            between: Vec::new(),
            noise_sd: 0.0,
            extra_noise: 0,
        };
        let a = sample_block(&spec, 5, 42).unwrap();
        let b = sample_block(&spec, 5, 42).unwrap();
        assert_eq!(a.values(), b.values());
        for t in 0..5 {
            assert_eq!(a.values()[[t, 0]], a.values()[[t, 1]]);
            assert_eq!(a.values()[[t, 0]], a.values()[[t, 2]]);
        }
        let c = sample_block(&spec, 5, 43).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn block_sample_covariance_approaches_population() {
        let spec = example2_block();
        let data = sample_block(&spec, 50_000, 7).unwrap();
        let sample = sample_covariance(&data);
        let pop = block_covariance(&spec).unwrap();
        let n = 50_000.0;
        for i in 0..10 {
            for j in 0..10 {
                let sii = pop.values()[[i, i]];
                let sjj = pop.values()[[j, j]];
                let sij = pop.values()[[i, j]];
                let se = ((sii * sjj + sij * sij) / n).sqrt();
                let gap = (sample.values()[[i, j]] - sij).abs();
                assert!(gap <= 3.0 * se, "entry ({i},{j}): gap {gap:.4}, se {se:.4}");
            }
        }
    }

    #[test]
    fn mixture_sampler_reproduces_constant_component() {
        let spec = MixtureModelSpec {
            loadings: vec![vec![2.0, -1.0, 0.5]],
            factors: vec![FactorLaw::Indicator { threshold: 2.0 }],
            noise_sd: 0.0,
            response: None,
        };
        let sample = sample_mixture(&spec, 4, 0).unwrap();
        for t in 0..4 {
            assert_eq!(sample.factors[[t, 0]], 1.0);
            assert_eq!(sample.data.values()[[t, 0]], 2.0);
            assert_eq!(sample.data.values()[[t, 1]], -1.0);
            assert_eq!(sample.data.values()[[t, 2]], 0.5);
        }
    }

    #[test]
    fn example3_factor_laws_take_documented_values() {
        let sample = sample_mixture(&example3(), 400, 11).unwrap();
        let f = &sample.factors;
        let mut sums = [0.0f64; 3];
        for t in 0..400 {
            assert!(f[[t, 0]] == 0.5 || f[[t, 0]] == -0.5);
            assert!(f[[t, 1]] == 0.0 || f[[t, 1]] == 1.0);
            assert!(f[[t, 2]] == 0.0 || f[[t, 2]] == 1.0);
            for j in 0..3 {
                sums[j] += f[[t, j]];
            }
        }
        // Means 0, 0.4, 0.3 within loose Monte Carlo bounds.
        assert!((sums[0] / 400.0).abs() < 0.12);
        assert!((sums[1] / 400.0 - 0.4).abs() < 0.12);
        assert!((sums[2] / 400.0 - 0.3).abs() < 0.12);
    }

    #[test]
    fn factor_covariance_propagates_combinations() {
        let f = example2().factor_cov();
        nearly(f[[2, 2]], 0.09 * 290.0 + 0.855625 * 300.0, 1e-9);
        nearly(f[[0, 2]], -87.0, 1e-9);
        nearly(f[[1, 2]], 277.5, 1e-9);
        nearly(f[[0, 1]], 0.0, 1e-15);
    }

    #[test]
    fn condition_report_known_cases() {
        let noiseless = BlockModelSpec {
            sizes: vec![2, 2],
            within: vec![1.0, 1.0],
            between: vec![BetweenCovariance { block_i: 0, block_j: 1, value: 0.5 }],
            noise_sd: 0.0,
            extra_noise: 0,
        };
        let report = theorem2_condition(&noiseless).unwrap();
        assert_eq!(report.rhs, 1.0);
        assert!(report.holds);

        let balanced = BlockModelSpec {
            sizes: vec![2, 2],
            within: vec![1.0, 1.0],
            between: vec![BetweenCovariance { block_i: 0, block_j: 1, value: 0.4 }],
            noise_sd: 1.0,
            extra_noise: 0,
        };
        let report = theorem2_condition(&balanced).unwrap();
        nearly(report.rhs, 0.5, 1e-15);
        nearly(report.lhs, 0.4, 1e-15);
        assert!(report.holds);

        let ex3_blocks = BlockModelSpec {
            sizes: vec![10, 40, 50, 200],
            within: vec![0.25, 0.49, 0.24, 0.21],
            between: vec![
                BetweenCovariance { block_i: 0, block_j: 1, value: 0.25 },
                BetweenCovariance { block_i: 1, block_j: 2, value: 0.24 },
            ],
            noise_sd: 0.5,
            extra_noise: 200,
        };
        let report = theorem2_condition(&ex3_blocks).unwrap();
        assert!(!report.holds);
        nearly(report.lhs, 0.25 / (0.5 * 0.7), 1e-12);
    }

    #[test]
    fn example2_satisfies_the_condition() {
        let report = theorem2_condition(&example2_block()).unwrap();
        assert!(report.holds);
        nearly(report.lhs, 277.5 / (300.0f64 * 282.7875).sqrt(), 1e-12);
        assert!(report.rhs > 0.99);
    }

    #[test]
    fn merge_oracle_base_cases() {
        let even = merge_oracle(1, 1);
        nearly(even.theta, std::f64::consts::FRAC_PI_4, 1e-15);
        nearly(even.sum_weights.0, 1.0 / 2.0f64.sqrt(), 1e-15);
        nearly(even.sum_weights.1, 1.0 / 2.0f64.sqrt(), 1e-15);

        let three_one = merge_oracle(3, 1);
        nearly(three_one.sum_weights.0, 3.0f64.sqrt() / 2.0, 1e-15);
        nearly(three_one.sum_weights.1, 0.5, 1e-15);
        assert!(three_one.theta > 0.0 && three_one.theta < std::f64::consts::FRAC_PI_4);

        let one_three = merge_oracle(1, 3);
        assert!(one_three.theta < 0.0);
        nearly(one_three.theta, -std::f64::consts::FRAC_PI_6, 1e-15);
    }

    #[test]
    fn engine_matches_merge_oracle_on_noiseless_blocks() {
        for p in 2..=8usize {
            let spec = BlockModelSpec {
                sizes: vec![p],
                within: vec![2.0],
                between: Vec::new(),
                noise_sd: 0.0,
                extra_noise: 0,
            };
            let cov = block_covariance(&spec).unwrap();
            let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
            assert_eq!(model.height(), p - 1);
            let mut cluster = vec![1usize; p];
            for r in model.rotations() {
                let (m, n) = (cluster[r.alpha], cluster[r.beta]);
                let oracle = merge_oracle(m, n);
                nearly(r.theta, oracle.theta, 1e-12);
                let expected_sum = if m >= n { r.alpha } else { r.beta };
                assert_eq!(r.sum_slot, expected_sum);
                cluster[r.sum_slot] = m + n;
            }
            let (scaling, details) = model.scaling_detail(p - 1).unwrap();
            for &v in &scaling[0].vector {
                nearly(v, 1.0 / (p as f64).sqrt(), 1e-12);
            }
            let rotated = model.rotated_covariance(&cov, p - 1).unwrap();
            for d in &details {
                nearly(rotated.values()[[d.slot, d.slot]], 0.0, 1e-12);
            }
        }
    }

    #[test]
    fn coefficient_variances_match_oracle() {
        assert_eq!(coeff_variance_oracle(1, 1, 1.0, 0.0), (2.0, 0.0));
        let (s, d) = coeff_variance_oracle(1, 1, 1.0, 1.0);
        nearly(s, 3.0, 1e-15);
        nearly(d, 1.0, 1e-15);
        let (s, _) = coeff_variance_oracle(3, 4, 1.5, 0.5);
        nearly(s, 7.0 * 2.25 + 0.25, 1e-12);
    }

    #[test]
    fn engine_reproduces_coefficient_variances_on_noisy_block() {
        let spec = BlockModelSpec {
            sizes: vec![5],
            within: vec![2.0],
            between: Vec::new(),
            noise_sd: 0.7,
            extra_noise: 0,
        };
        let cov = block_covariance(&spec).unwrap();
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        let mut cluster = [1usize; 5];
        for r in model.rotations() {
            let (m, n) = (cluster[r.alpha], cluster[r.beta]);
            let (vs, vd) = coeff_variance_oracle(m, n, 2.0f64.sqrt(), 0.7);
            let rotated = model.rotated_covariance(&cov, r.level).unwrap();
            nearly(rotated.values()[[r.sum_slot, r.sum_slot]], vs, 1e-12);
            nearly(rotated.values()[[r.detail_slot(), r.detail_slot()]], vd, 1e-12);
            cluster[r.sum_slot] = m + n;
        }
    }

    #[test]
    fn rho_oracles_known_values() {
        nearly(rho_within(1.0, 1.0, 1, 1), 0.5, 1e-15);
        nearly(rho_within(1.0, 0.0, 3, 4), 1.0, 1e-15);
        nearly(rho_between(0.5, 1.0, 1.0, 0.0, 1, 1), 0.5, 1e-15);
        let r = rho_between(0.5, 1.0, 2.0, 0.5, 2, 3);
        let expected = 0.25 * (6.0f64).sqrt() / ((2.25f64).sqrt() * (3.0625f64).sqrt());
        nearly(r, expected, 1e-15);
    }

    #[test]
    fn working_correlations_match_oracles_during_block_phase() {
        let spec = BlockModelSpec {
            sizes: vec![3, 2],
            within: vec![4.0, 2.25],
            between: vec![BetweenCovariance { block_i: 0, block_j: 1, value: 0.9 }],
            noise_sd: 1.0,
            extra_noise: 0,
        };
        assert!(theorem2_condition(&spec).unwrap().holds);
        let cov = block_covariance(&spec).unwrap();
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        let p = spec.p();
        let k = spec.block_count();
        let blocks = spec.blocks();
        let block_of = |i: usize| blocks.iter().position(|r| r.contains(&i)).unwrap();

        let mut cluster = vec![1usize; p];
        for r in model.rotations() {
            let level = r.level;
            let working = model.rotated_covariance(&cov, level - 1).unwrap();
            let active = model.active_slots(level - 1);
            let mut max_between = f64::NEG_INFINITY;
            let mut min_within = f64::INFINITY;
            for (ai, &a) in active.iter().enumerate() {
                for &b in &active[ai + 1..] {
                    let rho = working.values()[[a, b]]
                        / (working.values()[[a, a]] * working.values()[[b, b]]).sqrt();
                    let (ba, bb) = (block_of(a), block_of(b));
                    let (m, n) = (cluster[a], cluster[b]);
                    if ba == bb {
                        min_within = min_within.min(rho);
                        let sigma_k = spec.within[ba].sqrt();
                        nearly(rho, rho_within(sigma_k, spec.noise_sd, m, n), 1e-12);
                    } else {
                        max_between = max_between.max(rho);
                        let f = spec.factor_cov();
                        let expected = rho_between(
                            f[[ba, bb]],
                            spec.within[ba].sqrt(),
                            spec.within[bb].sqrt(),
                            spec.noise_sd,
                            m,
                            n,
                        );
                        nearly(rho, expected, 1e-12);
                    }
                }
            }
            assert!(
                max_between < min_within,
                "level {level}: between {max_between} vs within {min_within}"
            );
            cluster[r.sum_slot] = cluster[r.alpha] + cluster[r.beta];
            if level == p - k {
                break;
            }
        }
    }

    #[test]
    fn block_partition_scaling_functions_are_flat_indicators() {
        let spec = BlockModelSpec {
            sizes: vec![3, 2, 4],
            within: vec![1.0, 1.44, 0.81],
            between: vec![
                BetweenCovariance { block_i: 0, block_j: 1, value: 0.1 },
                BetweenCovariance { block_i: 1, block_j: 2, value: 0.08 },
            ],
            noise_sd: 0.5,
            extra_noise: 2,
        };
        assert!(theorem2_condition(&spec).unwrap().holds);
        let cov = block_covariance(&spec).unwrap();
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        let level = spec.p() - spec.extra_noise - spec.block_count();
        let (scaling, _) = model.scaling_detail(level).unwrap();
        let rotated = model.rotated_covariance(&cov, level).unwrap();
        let blocks = spec.blocks();
        let mut matched = 0;
        for f in &scaling {
            if f.support.len() == 1 {
                // Untouched noise variable.
                let i = f.support[0];
                assert!(i >= spec.p() - spec.extra_noise);
                nearly(rotated.values()[[f.slot, f.slot]], 0.25, 1e-12);
                continue;
            }
            let block = blocks
                .iter()
                .position(|r| f.support.iter().all(|i| r.contains(i)))
                .expect("support stays within one block");
            assert_eq!(f.support.len(), spec.sizes[block]);
            let want = 1.0 / (spec.sizes[block] as f64).sqrt();
            for &i in &f.support {
                nearly(f.vector[i].abs(), want, 1e-12);
            }
            let expected_var = spec.sizes[block] as f64 * spec.within[block] + 0.25;
            nearly(rotated.values()[[f.slot, f.slot]], expected_var, 1e-12);
            matched += 1;
        }
        assert_eq!(matched, 3);
        assert!(block_recovery_event(&model, &spec, &cov).unwrap());
    }

    #[test]
    fn recovery_event_fails_on_cross_block_structure() {
        // Between-covariance close to the within variances: singles from
        // different blocks are more similar than block mates, so the tree
        // merges across blocks immediately.
        let spec = BlockModelSpec {
            sizes: vec![2, 2],
            within: vec![1.0, 1.0],
            between: vec![BetweenCovariance { block_i: 0, block_j: 1, value: 0.999 }],
            noise_sd: 1.0,
            extra_noise: 0,
        };
        assert!(!theorem2_condition(&spec).unwrap().holds);
        let cov = block_covariance(&spec).unwrap();
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        assert!(!block_recovery_event(&model, &spec, &cov).unwrap());
    }

    #[test]
    fn recovery_frequency_improves_with_sample_size() {
        let spec = BlockModelSpec {
            sizes: vec![4, 4, 4],
            within: vec![1.0, 1.0, 1.0],
            between: vec![BetweenCovariance { block_i: 0, block_j: 1, value: 0.25 }],
            noise_sd: 1.0,
            extra_noise: 0,
        };
        let level = spec.p() - spec.block_count();
        let engine = EngineConfig {
            height: Height::Level(level),
            ..EngineConfig::default()
        };
        let frequency = |n: usize, base: u64| {
            let mut hits = 0;
            for rep in 0..20u64 {
                let data = sample_block(&spec, n, derive_seed(base, rep)).unwrap();
                let cov = sample_covariance(&data);
                let model = fit_covariance(&cov, &engine).unwrap();
                if block_recovery_event(&model, &spec, &cov).unwrap() {
                    hits += 1;
                }
            }
            hits
        };
        let small = frequency(12, 100);
        let large = frequency(600, 200);
        assert!(large >= small, "small-n {small} vs large-n {large}");
        assert!(large >= 18, "large-n should nearly always recover, got {large}/20");
    }

    #[test]
    fn convergence_experiment_reports_grid_and_required_n() {
        let cfg = ConvergenceConfig {
            p_grid: vec![8, 12],
            n_grid: vec![8, 60, 400],
            replicates: 15,
            block_count: 2,
            within_variance: 1.0,
            between_covariance: 0.2,
            noise_sd: 1.0,
            success_threshold: 0.9,
        };
        let table = convergence_experiment(&cfg, 5).unwrap();
        assert_eq!(table.rows.len(), 6);
        for row in &table.rows {
            assert!(row.successes <= row.replicates);
        }
        for &(p, n_star) in &table.required_n {
            let n = n_star.unwrap_or_else(|| panic!("no required n found for p = {p}"));
            assert!(cfg.n_grid.contains(&n));
        }
        // Larger samples should not hurt, modulo Monte Carlo noise.
        for &p in &cfg.p_grid {
            let fracs: Vec<f64> = cfg
                .n_grid
                .iter()
                .map(|&n| {
                    table
                        .rows
                        .iter()
                        .find(|r| r.p == p && r.n == n)
                        .unwrap()
                        .fraction()
                })
                .collect();
            assert!(fracs[2] + 0.3 >= fracs[0]);
            assert!(fracs[2] >= 0.9);
        }
        let again = convergence_experiment(&cfg, 5).unwrap();
        assert_eq!(table, again);
    }

    #[test]
    fn extended_wide_spec_keeps_structure_and_adds_response() {
        let spec = example3_extended();
        spec.validate().unwrap();
        assert_eq!(spec.p(), 2000);
        let response = spec.response.as_ref().unwrap();
        assert_eq!(response.weights, vec![2.0, 0.0, 0.0]);
        for v in &spec.loadings {
            assert_eq!(v.len(), 2000);
            assert!(v[500..].iter().all(|x| *x == 0.0));
        }
        let sample = sample_mixture(&spec, 3, 5).unwrap();
        let y = sample.response.unwrap();
        for (t, &yt) in y.iter().enumerate() {
            nearly(yt, 2.0 * sample.factors[[t, 0]], 1e-15);
        }
    }

    #[test]
    fn gaussian_sampler_matches_population_covariance() {
        let spec = example2_block();
        let pop = block_covariance(&spec).unwrap();
        let a = sample_gaussian(&pop, 6, 3).unwrap();
        let b = sample_gaussian(&pop, 6, 3).unwrap();
        assert_eq!(a.values(), b.values());
        let data = sample_gaussian(&pop, 50_000, 17).unwrap();
        let sample = sample_covariance(&data);
        let n = 50_000.0;
        for i in 0..10 {
            for j in 0..10 {
                let sii = pop.values()[[i, i]];
                let sjj = pop.values()[[j, j]];
                let sij = pop.values()[[i, j]];
                let se = ((sii * sjj + sij * sij) / n).sqrt();
                let gap = (sample.values()[[i, j]] - sij).abs();
                assert!(gap <= 3.0 * se, "entry ({i},{j}): gap {gap:.4}, se {se:.4}");
            }
        }
    }

    #[test]
    fn spec_json_round_trips() {
        let spec = example1();
        let text = serde_json::to_string(&spec).unwrap();
        let back: BlockModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
        let mixture = example3();
        let text = serde_json::to_string(&mixture).unwrap();
        let back: MixtureModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(mixture, back);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = example1();
        spec.within[0] = -1.0;
        assert!(spec.validate().is_err());
        let mut spec = example1();
        spec.between.push(BetweenCovariance { block_i: 1, block_j: 1, value: 0.0 });
        assert!(spec.validate().is_err());
        let mut mixture = example2();
        mixture.factors.pop();
        assert!(mixture.validate().is_err());
        let dependent = MixtureModelSpec {
            loadings: vec![vec![1.0, 0.0], vec![2.0, 0.0]],
            factors: vec![FactorLaw::Normal { sd: 1.0 }, FactorLaw::Normal { sd: 1.0 }],
            noise_sd: 0.1,
            response: None,
        };
        assert!(dependent.validate().is_err());
    }
}
