//! Dense data containers and the numerical primitives the tree construction
//! rests on: column centering, sample covariance, correlation-based merge
//! similarities, and the 2x2 Jacobi rotations applied to covariances and
//! coordinate vectors.
//!
//! Conventions used throughout the crate:
//!
//! * data matrices are `n x p`, one observation per row;
//! * covariance uses the unbiased `1/(n-1)` normalization;
//! * a rotation by angle `theta` on slots `(alpha, beta)` maps coordinates as
//!   `x_a' = cos(theta) x_a + sin(theta) x_b` and
//!   `x_b' = -sin(theta) x_a + cos(theta) x_b`, i.e. coefficients transform by
//!   `J^T` while covariances transform as `J^T S J`.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for symmetry validation in [`SymMatrix::new`].
const SYMMETRY_RTOL: f64 = 1e-12;

/// An `n x p` matrix of observations, validated to be finite with at least
/// two rows and two columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Array2<f64>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, p) = values.dim();
        if n < 2 {
            return Err(Error::TooFewRows { needed: 2, got: n });
        }
        if p < 2 {
            return Err(Error::TooFewColumns { needed: 2, got: p });
        }
        for ((row, col), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
        }
        Ok(Self { values })
    }

    /// Builds a matrix from row vectors of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        let mut values = Array2::zeros((n, p));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch {
                    context: "row length",
                    expected: p,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                values[[i, j]] = v;
            }
        }
        Self::new(values)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }
}

/// A square symmetric matrix with nonnegative diagonal, typically a
/// covariance. Symmetry is validated to relative `1e-12` on construction.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    values: Array2<f64>,
}

impl SymMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..rows {
            let d = values[[i, i]];
            if !d.is_finite() {
                return Err(Error::NonFinite { row: i, col: i });
            }
            if d < -SYMMETRY_RTOL * scale {
                return Err(Error::NegativeVariance { index: i, value: d });
            }
            for j in (i + 1)..cols {
                let a = values[[i, j]];
                let b = values[[j, i]];
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
                let gap = (a - b).abs();
                if gap > SYMMETRY_RTOL * scale {
                    return Err(Error::NotSymmetric { row: i, col: j, gap });
                }
            }
        }
        Ok(Self { values })
    }

    /// Wraps a matrix that is symmetric by construction.
    pub(crate) fn new_unchecked(values: Array2<f64>) -> Self {
        debug_assert_eq!(values.nrows(), values.ncols());
        Self { values }
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.p()).fold(0.0f64, |m, i| m.max(self.values[[i, i]]))
    }
}

/// Merge-priority score used to pick the pair rotated at each level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimilarityConfig {
    /// Signed Pearson correlation of the working variables.
    #[default]
    SignedCorrelation,
    /// Absolute Pearson correlation.
    AbsoluteCorrelation,
    /// `|correlation| + lambda * |covariance|` with `lambda >= 0`.
    CorrelationPlusCovariance { lambda: f64 },
}

impl SimilarityConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if let SimilarityConfig::CorrelationPlusCovariance { lambda } = self {
            if !lambda.is_finite() || *lambda < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "similarity weight lambda must be finite and nonnegative, got {lambda}"
                )));
            }
        }
        Ok(())
    }

    /// Score for one off-diagonal pair given its covariance entries.
    pub(crate) fn score(&self, sij: f64, sii: f64, sjj: f64) -> f64 {
        let rho = correlation_from_entries(sij, sii, sjj);
        match self {
            SimilarityConfig::SignedCorrelation => rho,
            SimilarityConfig::AbsoluteCorrelation => rho.abs(),
            SimilarityConfig::CorrelationPlusCovariance { lambda } => rho.abs() + lambda * sij.abs(),
        }
    }
}

fn correlation_from_entries(sij: f64, sii: f64, sjj: f64) -> f64 {
    if sii <= 0.0 || sjj <= 0.0 {
        return 0.0;
    }
    sij / (sii.sqrt() * sjj.sqrt())
}

/// Compensated (Neumaier) sum; keeps column means accurate for long columns.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Subtracts each column's mean. Returns the centered matrix together with
/// the removed means. A refinement pass bounds the residual column means by
/// a few ulps of the column scale.
pub fn center_columns(data: &DataMatrix) -> (DataMatrix, Vec<f64>) {
    let n = data.n();
    let mut centered = data.values().clone();
    let mut means = Vec::with_capacity(data.p());
    for mut col in centered.columns_mut() {
        let mean = compensated_sum(col.iter().copied()) / n as f64;
        col.mapv_inplace(|v| v - mean);
        let residual = compensated_sum(col.iter().copied()) / n as f64;
        col.mapv_inplace(|v| v - residual);
        means.push(mean + residual);
    }
    (DataMatrix { values: centered }, means)
}

/// Unbiased sample covariance `Xc^T Xc / (n-1)` of the column-centered data.
pub fn sample_covariance(data: &DataMatrix) -> SymMatrix {
    let (centered, _) = center_columns(data);
    let scatter = centered.values().t().dot(centered.values());
    let denom = (data.n() - 1) as f64;
    let p = data.p();
    let mut cov = Array2::zeros((p, p));
    for i in 0..p {
        cov[[i, i]] = scatter[[i, i]] / denom;
        for j in (i + 1)..p {
            // The GEMM result can differ across the diagonal in the last ulp.
            let v = 0.5 * (scatter[[i, j]] + scatter[[j, i]]) / denom;
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    SymMatrix::new_unchecked(cov)
}

/// Pearson correlation `S_ij / sqrt(S_ii S_jj)` read from a covariance.
///
/// A pair involving a zero-variance variable is defined to have correlation
/// zero. Panics if an index is out of range.
pub fn correlation(cov: &SymMatrix, i: usize, j: usize) -> f64 {
    let v = cov.values();
    correlation_from_entries(v[[i, j]], v[[i, i]], v[[j, j]])
}

/// Full pairwise similarity matrix for a covariance. Diagonal entries are
/// set to negative infinity so a variable never pairs with itself.
pub fn similarity_matrix(cov: &SymMatrix, config: &SimilarityConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let p = cov.p();
    let v = cov.values();
    let mut sim = Array2::from_elem((p, p), f64::NEG_INFINITY);
    for i in 0..p {
        for j in (i + 1)..p {
            let s = config.score(v[[i, j]], v[[i, i]], v[[j, j]]);
            sim[[i, j]] = s;
            sim[[j, i]] = s;
        }
    }
    Ok(sim)
}

/// Rotation angle that zeroes the `(alpha, beta)` covariance entry,
/// constrained to `[-pi/4, pi/4]`.
///
/// `theta = atan2(2 s12, s11 - s22) / 2`, folded back into the quarter-turn
/// range by a half-turn shift when needed. Two conventions fall out of the
/// `atan2` form: equal diagonals with `s12 != 0` give `sign(s12) * pi/4`,
/// and `s12 == 0` gives `0`.
pub fn jacobi_angle(s11: f64, s22: f64, s12: f64) -> f64 {
    let mut theta = 0.5 * f64::atan2(2.0 * s12, s11 - s22);
    if theta > std::f64::consts::FRAC_PI_4 {
        theta -= std::f64::consts::FRAC_PI_2;
    } else if theta < -std::f64::consts::FRAC_PI_4 {
        theta += std::f64::consts::FRAC_PI_2;
    }
    theta
}

/// In-place symmetric update `S <- J^T S J` for the rotation on
/// `(alpha, beta)`. Touches only the two affected rows/columns.
pub(crate) fn rotate_sym_in_place(values: &mut Array2<f64>, alpha: usize, beta: usize, theta: f64) {
    let p = values.nrows();
    let (c, s) = (theta.cos(), theta.sin());
    let saa = values[[alpha, alpha]];
    let sbb = values[[beta, beta]];
    let sab = values[[alpha, beta]];
    for k in 0..p {
        if k == alpha || k == beta {
            continue;
        }
        let ska = values[[k, alpha]];
        let skb = values[[k, beta]];
        let na = c * ska + s * skb;
        let nb = -s * ska + c * skb;
        values[[k, alpha]] = na;
        values[[alpha, k]] = na;
        values[[k, beta]] = nb;
        values[[beta, k]] = nb;
    }
    values[[alpha, alpha]] = c * c * saa + 2.0 * c * s * sab + s * s * sbb;
    values[[beta, beta]] = s * s * saa - 2.0 * c * s * sab + c * c * sbb;
    let off = c * s * (sbb - saa) + (c * c - s * s) * sab;
    values[[alpha, beta]] = off;
    values[[beta, alpha]] = off;
}

/// Returns `J^T S J` for the rotation by `theta` on `(alpha, beta)`.
pub fn rotate_covariance(cov: &SymMatrix, alpha: usize, beta: usize, theta: f64) -> Result<SymMatrix> {
    let p = cov.p();
    check_pair(alpha, beta, p)?;
    let mut values = cov.values().clone();
    rotate_sym_in_place(&mut values, alpha, beta, theta);
    Ok(SymMatrix::new_unchecked(values))
}

/// Applies `J^T` to a coordinate vector in place.
pub(crate) fn rotate_vec_in_place(x: &mut [f64], alpha: usize, beta: usize, theta: f64) {
    let (c, s) = (theta.cos(), theta.sin());
    let (xa, xb) = (x[alpha], x[beta]);
    x[alpha] = c * xa + s * xb;
    x[beta] = -s * xa + c * xb;
}

/// Applies `J^T` to a coordinate vector, returning the rotated copy.
pub fn rotate_coordinates(x: &[f64], alpha: usize, beta: usize, theta: f64) -> Result<Vec<f64>> {
    check_pair(alpha, beta, x.len())?;
    let mut out = x.to_vec();
    rotate_vec_in_place(&mut out, alpha, beta, theta);
    Ok(out)
}

fn check_pair(alpha: usize, beta: usize, len: usize) -> Result<()> {
    for index in [alpha, beta] {
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
    }
    if alpha == beta {
        return Err(Error::InvalidConfig(format!(
            "rotation slots must differ, got ({alpha}, {beta})"
        )));
    }
    Ok(())
}
