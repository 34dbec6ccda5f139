//! Normalized energy scores and cross-validated height selection.
//!
//! A basis column `w` scores the fraction of total sample energy it
//! captures, `E(w) = sum_t (w . x_t)^2 / sum_t |x_t|^2`. The best height for
//! a target dimension `K` maximizes the sum of the `K` largest scores,
//! estimated out-of-sample: each fold fits the tree on its training split
//! and scores every level's basis on the held-out split.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::engine::{fit, EngineConfig, TreeletModel};
use crate::error::{Error, Result};
use crate::matrix::{center_columns, DataMatrix};
use crate::seeding::stream_rng;

/// Mean CV scores within this distance of the maximum are treated as exact
/// ties and resolved to the smallest level. Scores live in `[0, 1]`, so an
/// absolute tolerance is appropriate.
const SCORE_TIE_TOL: f64 = 1e-9;

/// Per-column energy fractions of one basis on one data set.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    energies: Vec<f64>,
    order: Vec<usize>,
}

impl EnergyReport {
    fn from_energies(energies: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..energies.len()).collect();
        order.sort_by(|&a, &b| {
            energies[b]
                .partial_cmp(&energies[a])
                .expect("energies are finite")
                .then(a.cmp(&b))
        });
        Self { energies, order }
    }

    /// Energy fraction per basis column, in slot order.
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    /// Column indices sorted by descending energy (ties by slot index).
    pub fn descending_order(&self) -> &[usize] {
        &self.order
    }

    /// Sum of the `k` largest energies.
    pub fn gamma_k(&self, k: usize) -> Result<f64> {
        if k < 1 || k > self.energies.len() {
            return Err(Error::InvalidConfig(format!(
                "energy dimension k must lie in 1..={}, got {k}",
                self.energies.len()
            )));
        }
        Ok(self.order[..k].iter().map(|&i| self.energies[i]).sum())
    }
}

/// Energy fractions of every column of `basis` on `data`.
///
/// The data are used as given (center beforehand if that is intended); the
/// basis is expected to be orthonormal so the fractions sum to one.
pub fn energy_scores(basis: &Array2<f64>, data: &DataMatrix) -> Result<EnergyReport> {
    let p = data.p();
    if basis.nrows() != p || basis.ncols() != p {
        return Err(Error::DimensionMismatch {
            context: "basis dimension",
            expected: p,
            got: basis.nrows().max(basis.ncols()),
        });
    }
    let projections = data.values().dot(basis);
    let total: f64 = data.values().iter().map(|v| v * v).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateInput(
            "energy scores need data with nonzero total energy".into(),
        ));
    }
    let energies = (0..p)
        .map(|i| projections.column(i).iter().map(|v| v * v).sum::<f64>() / total)
        .collect();
    Ok(EnergyReport::from_energies(energies))
}

/// Sum of the `k` largest energies in a report.
pub fn gamma_k(report: &EnergyReport, k: usize) -> Result<f64> {
    report.gamma_k(k)
}

/// Result of the cross-validated height search.
#[derive(Debug, Clone, PartialEq)]
pub struct BestBasisResult {
    /// Height with the maximal mean score; ties go to the smallest level.
    pub selected_level: usize,
    /// Target dimension the scores were computed for.
    pub k: usize,
    /// Number of folds.
    pub folds: usize,
    /// Mean held-out score per level, index 0 is the untransformed basis.
    pub mean_curve: Vec<f64>,
    /// Held-out score per fold and level, `fold_curves[f][level]`.
    pub fold_curves: Vec<Vec<f64>>,
}

/// Held-out top-`k` energy of every level of one fitted tree.
///
/// Columns of `test` are rotated level by level, so the sweep costs one
/// pass per rotation instead of one basis build per level. The caller is
/// responsible for centering `test` consistently with the fit.
pub fn sweep_gamma_k(model: &TreeletModel, test: &DataMatrix, k: usize) -> Result<Vec<f64>> {
    let p = model.p();
    if test.p() != p {
        return Err(Error::DimensionMismatch {
            context: "test data columns",
            expected: p,
            got: test.p(),
        });
    }
    if k < 1 || k > p {
        return Err(Error::InvalidConfig(format!(
            "energy dimension k must lie in 1..={p}, got {k}"
        )));
    }
    let mut coords = test.values().clone();
    let total: f64 = coords.iter().map(|v| v * v).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateInput(
            "energy sweep needs data with nonzero total energy".into(),
        ));
    }
    let column_energy = |m: &Array2<f64>, j: usize| m.column(j).iter().map(|v| v * v).sum::<f64>();
    let mut energies: Vec<f64> = (0..p).map(|j| column_energy(&coords, j)).collect();
    let top_k = |energies: &[f64]| {
        let mut scratch = energies.to_vec();
        scratch.sort_by(|a, b| b.partial_cmp(a).expect("energies are finite"));
        scratch[..k].iter().sum::<f64>() / total
    };

    let mut curve = Vec::with_capacity(model.height() + 1);
    curve.push(top_k(&energies));
    for r in model.rotations() {
        let (c, s) = (r.theta.cos(), r.theta.sin());
        for t in 0..coords.nrows() {
            let (a, b) = (coords[[t, r.alpha]], coords[[t, r.beta]]);
            coords[[t, r.alpha]] = c * a + s * b;
            coords[[t, r.beta]] = -s * a + c * b;
        }
        energies[r.alpha] = column_energy(&coords, r.alpha);
        energies[r.beta] = column_energy(&coords, r.beta);
        curve.push(top_k(&energies));
    }
    Ok(curve)
}

/// Seeded fold assignment: indices `0..n` are shuffled once, then split
/// into `folds` contiguous chunks of near-equal size.
fn fold_assignments(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut stream_rng(seed, 0));
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push(indices[start..start + len].to_vec());
        start += len;
    }
    out
}

fn rows_subset(data: &DataMatrix, rows: &[usize]) -> Result<DataMatrix> {
    let p = data.p();
    let mut values = Array2::zeros((rows.len(), p));
    for (out_row, &r) in rows.iter().enumerate() {
        values.row_mut(out_row).assign(&data.row(r));
    }
    DataMatrix::new(values)
}

/// Cross-validated search for the height whose top-`k` basis captures the
/// most held-out energy.
///
/// Every fold centers its training split, fits one tree on it, centers the
/// held-out split with the training means, and scores all levels. Mean
/// scores within `1e-9` of the maximum count as tied and the smallest level
/// wins.
pub fn best_k_basis(
    data: &DataMatrix,
    k: usize,
    folds: usize,
    config: &EngineConfig,
    seed: u64,
) -> Result<BestBasisResult> {
    let n = data.n();
    let p = data.p();
    if folds < 2 || folds > n {
        return Err(Error::InvalidConfig(format!(
            "fold count must lie in 2..={n}, got {folds}"
        )));
    }
    if k < 1 || k > p {
        return Err(Error::InvalidConfig(format!(
            "energy dimension k must lie in 1..={p}, got {k}"
        )));
    }

    let assignments = fold_assignments(n, folds, seed);
    let mut fold_curves = Vec::with_capacity(folds);
    for test_rows in &assignments {
        let train_rows: Vec<usize> = (0..n).filter(|r| !test_rows.contains(r)).collect();
        let train = rows_subset(data, &train_rows)?;
        let (train_centered, train_means) = center_columns(&train);
        let model = fit(&train_centered, config)?;

        let mut test_values = Array2::zeros((test_rows.len(), p));
        for (out_row, &r) in test_rows.iter().enumerate() {
            for j in 0..p {
                test_values[[out_row, j]] = data.values()[[r, j]] - train_means[j];
            }
        }
        let test = DataMatrix::new(test_values)?;
        fold_curves.push(sweep_gamma_k(&model, &test, k)?);
    }

    let levels = fold_curves.iter().map(Vec::len).min().unwrap_or(0);
    for curve in &mut fold_curves {
        curve.truncate(levels);
    }
    let mean_curve: Vec<f64> = (0..levels)
        .map(|l| fold_curves.iter().map(|c| c[l]).sum::<f64>() / folds as f64)
        .collect();
    let best = mean_curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let selected_level = mean_curve
        .iter()
        .position(|&v| v >= best - SCORE_TIE_TOL)
        .expect("curve is nonempty");

    Ok(BestBasisResult {
        selected_level,
        k,
        folds,
        mean_curve,
        fold_curves,
    })
}
