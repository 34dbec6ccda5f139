//! Supervised learning on top of the tree transform: discriminant scoring
//! of basis vectors, a diagonal Gaussian classifier, net-analyte-signal
//! geometry, correlation-based variable screening, partial least squares,
//! a four-arm regression benchmark on wide mixture data, and a two-way
//! clustering classifier that builds a second tree over the samples.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::engine::{fit, fit_covariance, EngineConfig, TreeletModel};
use crate::error::{Error, Result};
use crate::matrix::{sample_covariance, DataMatrix, SymMatrix};
use crate::models::{sample_mixture, MixtureModelSpec};
use crate::seeding::derive_seed;
use crate::select::energy_scores;

/// Per-row target attached to a data matrix: integer class ids for
/// classification or a real response for regression.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Classes(Vec<usize>),
    Response(Vec<f64>),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Classes(v) => v.len(),
            Target::Response(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rows paired with a supervision target of matching length; class
/// targets must name at least two distinct classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    data: DataMatrix,
    target: Target,
}

impl LabeledData {
    pub fn new(data: DataMatrix, target: Target) -> Result<Self> {
        if target.len() != data.n() {
            return Err(Error::DimensionMismatch {
                context: "target length",
                expected: data.n(),
                got: target.len(),
            });
        }
        match &target {
            Target::Classes(labels) => {
                let mut ids = labels.clone();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() < 2 {
                    return Err(Error::TooFewClasses { found: ids.len() });
                }
            }
            Target::Response(y) => {
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::DegenerateInput("response must be finite".into()));
                }
            }
        }
        Ok(Self { data, target })
    }

    pub fn data(&self) -> &DataMatrix {
        &self.data
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    /// Class ids, or an error for a regression target.
    pub fn classes(&self) -> Result<&[usize]> {
        match &self.target {
            Target::Classes(v) => Ok(v),
            Target::Response(_) => Err(Error::InvalidConfig(
                "this data set carries a real response, not class labels".into(),
            )),
        }
    }

    /// Real response, or an error for a classification target.
    pub fn response(&self) -> Result<&[f64]> {
        match &self.target {
            Target::Response(v) => Ok(v),
            Target::Classes(_) => Err(Error::InvalidConfig(
                "this data set carries class labels, not a real response".into(),
            )),
        }
    }

    /// Number of distinct classes; zero for a regression target.
    pub fn class_count(&self) -> usize {
        match &self.target {
            Target::Classes(labels) => {
                let mut ids = labels.clone();
                ids.sort_unstable();
                ids.dedup();
                ids.len()
            }
            Target::Response(_) => 0,
        }
    }
}

/// Per-basis-vector class-separation scores, largest first in `order`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminantReport {
    scores: Vec<f64>,
    order: Vec<usize>,
}

impl DiscriminantReport {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Basis-vector indices sorted by score, largest first; ties keep the
    /// lower index first.
    pub fn descending_order(&self) -> &[usize] {
        &self.order
    }
}

fn class_index(labels: &[usize]) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::TooFewClasses { found: ids.len() });
    }
    let rows = ids
        .iter()
        .map(|&c| {
            (0..labels.len())
                .filter(|&t| labels[t] == c)
                .collect::<Vec<usize>>()
        })
        .collect::<Vec<_>>();
    for (c, members) in ids.iter().zip(&rows) {
        if members.len() < 2 {
            return Err(Error::TooFewClassSamples {
                class: *c,
                got: members.len(),
                needed: 2,
            });
        }
    }
    Ok((ids, rows))
}

fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Kullback–Leibler divergence between two univariate Gaussians.
fn gaussian_kl(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> f64 {
    0.5 * ((var_b / var_a).ln() + (var_a + (mean_a - mean_b).powi(2)) / var_b - 1.0)
}

/// Scores each basis column by how well its projections separate the
/// classes: every class's projections are summarized by a univariate
/// Gaussian, and the score sums Kullback–Leibler divergences over all
/// ordered class pairs. Class variances are floored at 1e-12 of the
/// projection's overall variance so scores stay finite.
pub fn discriminant_scores(
    basis: &Array2<f64>,
    data: &DataMatrix,
    labels: &[usize],
) -> Result<DiscriminantReport> {
    if labels.len() != data.n() {
        return Err(Error::DimensionMismatch {
            context: "label count",
            expected: data.n(),
            got: labels.len(),
        });
    }
    if basis.nrows() != data.p() {
        return Err(Error::DimensionMismatch {
            context: "basis row count",
            expected: data.p(),
            got: basis.nrows(),
        });
    }
    let (_, class_rows) = class_index(labels)?;
    let projections = data.values().dot(basis);
    let mut scores = Vec::with_capacity(basis.ncols());
    for col in 0..basis.ncols() {
        let column: Vec<f64> = projections.column(col).to_vec();
        let (_, total_var) = mean_and_variance(&column);
        if total_var <= 0.0 {
            scores.push(0.0);
            continue;
        }
        let floor = 1e-12 * total_var;
        let stats: Vec<(f64, f64)> = class_rows
            .iter()
            .map(|rows| {
                let values: Vec<f64> = rows.iter().map(|&t| column[t]).collect();
                let (mean, var) = mean_and_variance(&values);
                (mean, var.max(floor))
            })
            .collect();
        let mut score = 0.0;
        for (j, a) in stats.iter().enumerate() {
            for (k, b) in stats.iter().enumerate() {
                if j != k {
                    score += gaussian_kl(a.0, a.1, b.0, b.1);
                }
            }
        }
        scores.push(score.max(0.0));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    Ok(DiscriminantReport { scores, order })
}

/// Equal-prior Gaussian classifier with per-class means and pooled
/// per-feature (diagonal) variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClassifier {
    class_ids: Vec<usize>,
    means: Array2<f64>,
    variances: Vec<f64>,
}

/// Fits per-class feature means and pooled per-feature variances.
/// Zero variances are floored at 1e-12 of the largest pooled variance;
/// when every feature is constant, unit variances are used and prediction
/// falls back to the distance between means.
pub fn gaussian_classifier_fit(
    features: &Array2<f64>,
    labels: &[usize],
) -> Result<GaussianClassifier> {
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            context: "label count",
            expected: features.nrows(),
            got: labels.len(),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("features must be finite".into()));
    }
    let (class_ids, class_rows) = class_index(labels)?;
    let m = features.ncols();
    let n = features.nrows();
    let c = class_ids.len();
    let mut means = Array2::zeros((c, m));
    let mut variances = vec![0.0f64; m];
    for (ci, rows) in class_rows.iter().enumerate() {
        for f in 0..m {
            let mean = rows.iter().map(|&t| features[[t, f]]).sum::<f64>() / rows.len() as f64;
            means[[ci, f]] = mean;
            for &t in rows {
                variances[f] += (features[[t, f]] - mean).powi(2);
            }
        }
    }
    let dof = (n - c) as f64;
    let scale = variances.iter().cloned().fold(0.0f64, f64::max);
    for v in variances.iter_mut() {
        *v = if scale > 0.0 {
            (*v / dof).max(1e-12 * scale / dof)
        } else {
            1.0
        };
    }
    Ok(GaussianClassifier {
        class_ids,
        means,
        variances,
    })
}

impl GaussianClassifier {
    pub fn classes(&self) -> &[usize] {
        &self.class_ids
    }

    /// Labels each row by the class with maximum Gaussian log-likelihood
    /// under equal priors; ties go to the smallest class id.
    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<usize>> {
        if features.ncols() != self.means.ncols() {
            return Err(Error::DimensionMismatch {
                context: "feature count",
                expected: self.means.ncols(),
                got: features.ncols(),
            });
        }
        let mut labels = Vec::with_capacity(features.nrows());
        for row in features.rows() {
            let mut best = (0usize, f64::NEG_INFINITY);
            for ci in 0..self.class_ids.len() {
                let mut loglik = 0.0;
                for f in 0..row.len() {
                    let var = self.variances[f];
                    let gap = row[f] - self.means[[ci, f]];
                    loglik -= gap * gap / (2.0 * var) + 0.5 * (2.0 * std::f64::consts::PI * var).ln();
                }
                if loglik > best.1 {
                    best = (ci, loglik);
                }
            }
            labels.push(self.class_ids[best.0]);
        }
        Ok(labels)
    }
}

/// Residual of a target direction after removing interfering directions,
/// with the squared norm that bounds downstream prediction error.
#[derive(Debug, Clone, PartialEq)]
pub struct NasResult {
    /// Component of the target orthogonal to every interferent.
    pub v_y: Vec<f64>,
    /// Squared norm of `v_y`.
    pub nas_norm_sq: f64,
}

impl NasResult {
    /// Best achievable mean squared prediction error for a response
    /// `alpha1 * u_1` observed through isotropic noise of level `sigma`:
    /// `alpha1^2 sigma^2 / ||v_y||^2`, unbounded when the target lies
    /// entirely inside the interferent span.
    pub fn mse_floor(&self, alpha1: f64, sigma: f64) -> f64 {
        if self.nas_norm_sq <= 0.0 {
            f64::INFINITY
        } else {
            alpha1 * alpha1 * sigma * sigma / self.nas_norm_sq
        }
    }
}

/// Orthogonal projection of `target` away from the span of `interferents`
/// (its net analyte signal). The interferents must be linearly
/// independent; a dependent one is reported by its position.
pub fn net_analyte_signal(target: &[f64], interferents: &[Vec<f64>]) -> Result<NasResult> {
    let p = target.len();
    for (idx, v) in interferents.iter().enumerate() {
        if v.len() != p {
            return Err(Error::DimensionMismatch {
                context: "interferent length",
                expected: p,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "interferent {idx} has non-finite entries"
            )));
        }
    }
    if target.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateInput("target has non-finite entries".into()));
    }
    let k = interferents.len();
    let mut residual = target.to_vec();
    if k > 0 {
        // Solve the normal equations G a = c by Cholesky; a zero pivot
        // means interferent j already lies in the span of its
        // predecessors.
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut gram = Array2::zeros((k, k));
        let mut rhs = vec![0.0f64; k];
        for i in 0..k {
            for j in 0..k {
                gram[[i, j]] = dot(&interferents[i], &interferents[j]);
            }
            rhs[i] = dot(&interferents[i], target);
        }
        let scale = (0..k).map(|i| gram[[i, i]]).fold(0.0f64, f64::max).max(1.0);
        let mut lower: Array2<f64> = Array2::zeros((k, k));
        for j in 0..k {
            let mut d = gram[[j, j]];
            for r in 0..j {
                d -= lower[[j, r]] * lower[[j, r]];
            }
            if d <= 1e-12 * scale {
                return Err(Error::RankDeficient { index: j });
            }
            lower[[j, j]] = d.sqrt();
            for i in (j + 1)..k {
                let mut v = gram[[i, j]];
                for r in 0..j {
                    v -= lower[[i, r]] * lower[[j, r]];
                }
                lower[[i, j]] = v / lower[[j, j]];
            }
        }
        let mut y = vec![0.0f64; k];
        for i in 0..k {
            let mut v = rhs[i];
            for r in 0..i {
                v -= lower[[i, r]] * y[r];
            }
            y[i] = v / lower[[i, i]];
        }
        let mut coeffs = vec![0.0f64; k];
        for i in (0..k).rev() {
            let mut v = y[i];
            for r in (i + 1)..k {
                v -= lower[[r, i]] * coeffs[r];
            }
            coeffs[i] = v / lower[[i, i]];
        }
        for (a, v) in coeffs.iter().zip(interferents) {
            for (r, x) in residual.iter_mut().zip(v) {
                *r -= a * x;
            }
        }
    }
    let mut nas_norm_sq: f64 = residual.iter().map(|v| v * v).sum();
    let target_norm_sq: f64 = target.iter().map(|v| v * v).sum();
    // A residual at rounding-noise scale means the target lies in the
    // interferent span; report that exactly.
    if nas_norm_sq <= 1e-20 * target_norm_sq {
        residual.iter_mut().for_each(|v| *v = 0.0);
        nas_norm_sq = 0.0;
    }
    Ok(NasResult {
        v_y: residual,
        nas_norm_sq,
    })
}

fn correlation_with(column: ArrayView1<'_, f64>, y: &[f64]) -> f64 {
    let n = column.len() as f64;
    let mean_x = column.sum() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, yv) in column.iter().zip(y) {
        sxy += (x - mean_x) * (yv - mean_y);
        sxx += (x - mean_x) * (x - mean_x);
        syy += (yv - mean_y) * (yv - mean_y);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Indices of the `k` variables with the largest absolute sample
/// correlation with `y`, in descending order; ties keep the lower index.
/// Constant variables count as zero correlation.
pub fn supervised_variable_select(data: &DataMatrix, y: &[f64], k: usize) -> Result<Vec<usize>> {
    if y.len() != data.n() {
        return Err(Error::DimensionMismatch {
            context: "response length",
            expected: data.n(),
            got: y.len(),
        });
    }
    if k > data.p() {
        return Err(Error::InvalidConfig(format!(
            "cannot select {k} of {} variables",
            data.p()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("response must be finite".into()));
    }
    let scores: Vec<f64> = (0..data.p())
        .map(|i| correlation_with(data.values().column(i), y).abs())
        .collect();
    let mut order: Vec<usize> = (0..data.p()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("correlations are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Two-sample Welch t statistics per variable, returned as
/// `(index, |t|)` pairs sorted descending; requires exactly two classes.
/// A zero-spread variable scores 0 when the class means agree and
/// infinity when they differ.
pub fn t_statistic_ranking(data: &DataMatrix, labels: &[usize]) -> Result<Vec<(usize, f64)>> {
    if labels.len() != data.n() {
        return Err(Error::DimensionMismatch {
            context: "label count",
            expected: data.n(),
            got: labels.len(),
        });
    }
    let (ids, class_rows) = class_index(labels)?;
    if ids.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "t statistics compare exactly two classes, got {}",
            ids.len()
        )));
    }
    let mut out = Vec::with_capacity(data.p());
    for i in 0..data.p() {
        let grab = |rows: &[usize]| -> Vec<f64> {
            rows.iter().map(|&t| data.values()[[t, i]]).collect()
        };
        let (m1, v1) = mean_and_variance(&grab(&class_rows[0]));
        let (m2, v2) = mean_and_variance(&grab(&class_rows[1]));
        let denom = (v1 / class_rows[0].len() as f64 + v2 / class_rows[1].len() as f64).sqrt();
        let t = if denom > 0.0 {
            ((m1 - m2) / denom).abs()
        } else if m1 == m2 {
            0.0
        } else {
            f64::INFINITY
        };
        out.push((i, t));
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("no NaN scores").then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Univariate-response partial least squares, fit by deflation. Holds one
/// coefficient vector per component count so predictions with fewer
/// components need no refit.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsModel {
    x_mean: Vec<f64>,
    y_mean: f64,
    /// `betas[a]` predicts with `a + 1` components.
    betas: Vec<Vec<f64>>,
}

impl PlsModel {
    /// Number of components actually extracted (deflation can stop early
    /// when the residual response is exhausted).
    pub fn components(&self) -> usize {
        self.betas.len()
    }

    /// Predicts rows with the first `components` latent directions;
    /// `components = 0` returns the training mean.
    pub fn predict(&self, rows: &Array2<f64>, components: usize) -> Result<Vec<f64>> {
        if rows.ncols() != self.x_mean.len() {
            return Err(Error::DimensionMismatch {
                context: "prediction feature count",
                expected: self.x_mean.len(),
                got: rows.ncols(),
            });
        }
        if components > self.betas.len() {
            return Err(Error::InvalidConfig(format!(
                "model has {} components, {components} requested",
                self.betas.len()
            )));
        }
        if components == 0 {
            return Ok(vec![self.y_mean; rows.nrows()]);
        }
        let beta = &self.betas[components - 1];
        Ok(rows
            .rows()
            .into_iter()
            .map(|row| {
                let mut y = self.y_mean;
                for ((x, m), b) in row.iter().zip(&self.x_mean).zip(beta) {
                    y += (x - m) * b;
                }
                y
            })
            .collect())
    }
}

/// Fits partial least squares with up to `max_components` latent
/// directions (capped at `min(n - 1, p)`); a constant response yields a
/// zero-component model that predicts the mean.
pub fn pls_fit(features: &Array2<f64>, y: &[f64], max_components: usize) -> Result<PlsModel> {
    let n = features.nrows();
    let p = features.ncols();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "response length",
            expected: n,
            got: y.len(),
        });
    }
    if n < 3 {
        return Err(Error::TooFewRows { needed: 3, got: n });
    }
    if features.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("regression inputs must be finite".into()));
    }
    let limit = max_components.min(n - 1).min(p);
    let mut x_mean = vec![0.0f64; p];
    for row in features.rows() {
        for (m, &v) in x_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in x_mean.iter_mut() {
        *m /= n as f64;
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut x = features.clone();
    for mut row in x.rows_mut() {
        for (v, &m) in row.iter_mut().zip(&x_mean) {
            *v -= m;
        }
    }
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let y_scale = resid.iter().map(|v| v * v).sum::<f64>();

    let mut weights: Vec<Vec<f64>> = Vec::new();
    let mut x_loadings: Vec<Vec<f64>> = Vec::new();
    let mut y_loadings: Vec<f64> = Vec::new();
    // Rotated weights expressing scores in terms of the original
    // (centered) features, built alongside the deflation.
    let mut rotations: Vec<Vec<f64>> = Vec::new();
    let mut betas: Vec<Vec<f64>> = Vec::new();
    let mut beta = vec![0.0f64; p];

    for _ in 0..limit {
        let mut w = vec![0.0f64; p];
        for (row, &r) in x.rows().into_iter().zip(&resid) {
            for (wj, &v) in w.iter_mut().zip(row) {
                *wj += v * r;
            }
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * y_scale.max(1.0) {
            break;
        }
        for v in w.iter_mut() {
            *v /= norm;
        }
        let scores: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect();
        let score_sq = scores.iter().map(|v| v * v).sum::<f64>();
        if score_sq <= 0.0 {
            break;
        }
        let mut x_loading = vec![0.0f64; p];
        for (row, &sc) in x.rows().into_iter().zip(&scores) {
            for (lj, &v) in x_loading.iter_mut().zip(row) {
                *lj += v * sc;
            }
        }
        for l in x_loading.iter_mut() {
            *l /= score_sq;
        }
        let y_loading = resid.iter().zip(&scores).map(|(a, b)| a * b).sum::<f64>() / score_sq;
        for ((mut row, sc), r) in x.rows_mut().into_iter().zip(&scores).zip(resid.iter_mut()) {
            for (v, &lj) in row.iter_mut().zip(&x_loading) {
                *v -= sc * lj;
            }
            *r -= y_loading * sc;
        }
        let mut rotation = w.clone();
        for (prev_rot, prev_load) in rotations.iter().zip(&x_loadings) {
            let overlap: f64 = prev_load.iter().zip(&w).map(|(a, b)| a * b).sum();
            for (r, pr) in rotation.iter_mut().zip(prev_rot) {
                *r -= overlap * pr;
            }
        }
        for (b, r) in beta.iter_mut().zip(&rotation) {
            *b += y_loading * r;
        }
        betas.push(beta.clone());
        weights.push(w);
        x_loadings.push(x_loading);
        y_loadings.push(y_loading);
        rotations.push(rotation);
    }
    Ok(PlsModel {
        x_mean,
        y_mean,
        betas,
    })
}

/// Chooses the component count with the smallest leave-one-out squared
/// prediction error; returns the count (possibly 0) and its error.
pub fn pls_cv_components(
    features: &Array2<f64>,
    y: &[f64],
    max_components: usize,
) -> Result<(usize, f64)> {
    let n = features.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "response length",
            expected: n,
            got: y.len(),
        });
    }
    if n < 4 {
        return Err(Error::TooFewRows { needed: 4, got: n });
    }
    let limit = max_components.min(n - 2).min(features.ncols());
    let p = features.ncols();
    let mut errors = vec![0.0f64; limit + 1];
    let mut train = Array2::zeros((n - 1, p));
    let mut train_y = vec![0.0f64; n - 1];
    for t in 0..n {
        let mut r = 0;
        for (s, &ys) in y.iter().enumerate() {
            if s == t {
                continue;
            }
            train.row_mut(r).assign(&features.row(s));
            train_y[r] = ys;
            r += 1;
        }
        let model = pls_fit(&train, &train_y, limit)?;
        let row = features.row(t).insert_axis(ndarray::Axis(0)).to_owned();
        for (a, err) in errors.iter_mut().enumerate() {
            let used = a.min(model.components());
            let pred = model.predict(&row, used)?[0];
            *err += (pred - y[t]).powi(2);
        }
    }
    let mut best = (0usize, errors[0]);
    for (a, err) in errors.iter().enumerate() {
        if *err < best.1 - 1e-12 * best.1.abs() {
            best = (a, *err);
        }
    }
    Ok((best.0, best.1 / n as f64))
}

/// Settings for the four-arm wide-regression benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Figure4Config {
    pub replicates: usize,
    pub train_n: usize,
    pub test_n: usize,
    /// Variables kept by the correlation-screening arm.
    pub selected_variables: usize,
    /// Tree features kept by the transform arm.
    pub selected_features: usize,
    pub max_components: usize,
    /// Spacing of the first tree-height scan; the best rung is then
    /// refined exhaustively in a window of the same width.
    pub coarse_step: usize,
    pub seed: u64,
}

impl Default for Figure4Config {
    fn default() -> Self {
        Figure4Config {
            replicates: 3,
            train_n: 100,
            test_n: 500,
            selected_variables: 50,
            selected_features: 50,
            max_components: 15,
            coarse_step: 25,
            seed: 0,
        }
    }
}

/// Mean squared prediction error per benchmark arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodMsep {
    /// Regression on every variable.
    pub full: f64,
    /// Regression on the variables most correlated with the response.
    pub supervised: f64,
    /// Regression on the highest-variance tree features at a
    /// cross-validated level.
    pub treelet: f64,
    /// Regression on projections onto the true mixture loadings.
    pub oracle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Figure4Replicate {
    pub replicate: usize,
    pub msep: MethodMsep,
    /// Tree height chosen by leave-one-out cross-validation.
    pub treelet_level: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure4Table {
    pub rows: Vec<Figure4Replicate>,
    pub mean: MethodMsep,
    /// `alpha1^2 sigma^2 / ||v_y||^2` for the generating mixture.
    pub theoretical_floor: f64,
}

/// Sample covariance of the data with row `t` removed, computed from the
/// full centered scatter by a rank-one downdate.
fn loo_covariance(
    centered: &Array2<f64>,
    scatter: &Array2<f64>,
    t: usize,
    n: usize,
) -> SymMatrix {
    let p = centered.ncols();
    let factor = n as f64 / (n as f64 - 1.0);
    let dof = n as f64 - 2.0;
    let mut values = Array2::zeros((p, p));
    for i in 0..p {
        let xi = centered[[t, i]];
        for j in 0..p {
            values[[i, j]] = (scatter[[i, j]] - factor * xi * centered[[t, j]]) / dof;
        }
    }
    SymMatrix::new_unchecked(values)
}

/// Per-rung, per-component leave-one-out squared errors for the tree arm.
/// For each held-out row the tree is refit without it, every candidate
/// level is visited once in ascending order, and a regression on the
/// highest-variance scaling features is scored against the held-out
/// response.
fn treelet_loo_errors(
    data: &DataMatrix,
    y: &[f64],
    rungs: &[usize],
    models: &[TreeletModel],
    cfg: &Figure4Config,
) -> Result<Array2<f64>> {
    let n = data.n();
    let p = data.p();
    let per_row: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let model = &models[t];
            // Coordinates of all rows (centered by the training means) in
            // the training tree, advanced rotation by rotation. One slot is
            // one row of `coords`, so each rotation touches two contiguous
            // runs instead of two strided columns.
            let mut means = vec![0.0f64; p];
            for (s, row) in data.values().rows().into_iter().enumerate() {
                if s == t {
                    continue;
                }
                for (m, &v) in means.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in means.iter_mut() {
                *m /= (n - 1) as f64;
            }
            let mut coords = Array2::zeros((p, n));
            for (s, row) in data.values().rows().into_iter().enumerate() {
                for (j, &v) in row.indexed_iter() {
                    coords[[j, s]] = v - means[j];
                }
            }
            let dof = (n - 2) as f64;
            let slot_variance = |slot_row: &[f64]| {
                let mut total = 0.0;
                for (s, &v) in slot_row.iter().enumerate() {
                    if s != t {
                        total += v * v;
                    }
                }
                total / dof
            };
            let mut variance = vec![0.0f64; p];
            for (j, var) in variance.iter_mut().enumerate() {
                *var = slot_variance(coords.row(j).as_slice().expect("row-major"));
            }
            let mut active: Vec<bool> = vec![true; p];
            let mut errors = Array2::zeros((rungs.len(), cfg.max_components + 1));
            let mut next_rung = 0usize;
            let rotations = model.rotations();
            for level in 0..=rotations.len() {
                if level > 0 {
                    let r = &rotations[level - 1];
                    let (c, s) = (r.theta.cos(), r.theta.sin());
                    let (lo, hi) = (r.alpha.min(r.beta), r.alpha.max(r.beta));
                    let values = coords.as_slice_mut().expect("row-major");
                    let (left, right) = values.split_at_mut(hi * n);
                    let row_lo = &mut left[lo * n..lo * n + n];
                    let row_hi = &mut right[..n];
                    let (row_a, row_b) = if r.alpha == lo {
                        (row_lo, row_hi)
                    } else {
                        (row_hi, row_lo)
                    };
                    for (a, b) in row_a.iter_mut().zip(row_b.iter_mut()) {
                        let (va, vb) = (*a, *b);
                        *a = c * va + s * vb;
                        *b = -s * va + c * vb;
                    }
                    variance[r.alpha] = slot_variance(row_a);
                    variance[r.beta] = slot_variance(row_b);
                    active[r.detail_slot()] = false;
                }
                if next_rung >= rungs.len() || rungs[next_rung] != level {
                    continue;
                }
                next_rung += 1;
                let mut slots: Vec<usize> = (0..p).filter(|&j| active[j]).collect();
                slots.sort_by(|&a, &b| {
                    variance[b]
                        .partial_cmp(&variance[a])
                        .expect("variances are finite")
                        .then(a.cmp(&b))
                });
                slots.truncate(cfg.selected_features);
                let mut train = Array2::zeros((n - 1, slots.len()));
                let mut train_y = vec![0.0f64; n - 1];
                let mut held = Array2::zeros((1, slots.len()));
                for (f, &slot) in slots.iter().enumerate() {
                    let slot_row = coords.row(slot);
                    let slot_row = slot_row.as_slice().expect("row-major");
                    let mut r = 0;
                    for (s, &v) in slot_row.iter().enumerate() {
                        if s == t {
                            held[[0, f]] = v;
                        } else {
                            train[[r, f]] = v;
                            r += 1;
                        }
                    }
                }
                let mut r = 0;
                for (s, &ys) in y.iter().enumerate() {
                    if s != t {
                        train_y[r] = ys;
                        r += 1;
                    }
                }
                let pls = pls_fit(&train, &train_y, cfg.max_components)?;
                for a in 0..=cfg.max_components {
                    let used = a.min(pls.components());
                    let pred = pls.predict(&held, used)?[0];
                    errors[[next_rung - 1, a]] = (pred - y[t]).powi(2);
                }
            }
            Ok(errors)
        })
        .collect::<Result<_>>()?;
    let mut total = Array2::zeros((rungs.len(), cfg.max_components + 1));
    for e in &per_row {
        total += e;
    }
    Ok(total)
}

fn argmin_grid(errors: &Array2<f64>) -> (usize, usize) {
    let mut best = (0usize, 0usize, f64::INFINITY);
    for r in 0..errors.nrows() {
        for a in 0..errors.ncols() {
            if errors[[r, a]] < best.2 {
                best = (r, a, errors[[r, a]]);
            }
        }
    }
    (best.0, best.1)
}

fn mean_squared_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / truth.len() as f64
}

/// Four-arm regression benchmark on a wide mixture model: full
/// regression, correlation screening, tree features at a cross-validated
/// level, and projections onto the true loadings, each scored by mean
/// squared prediction error on an independent test set.
pub fn figure4_experiment(spec: &MixtureModelSpec, cfg: &Figure4Config) -> Result<Figure4Table> {
    spec.validate()?;
    let response = spec.response.as_ref().ok_or_else(|| {
        Error::InvalidConfig("the benchmark needs a spec with a response".into())
    })?;
    if cfg.replicates == 0 || cfg.coarse_step == 0 {
        return Err(Error::InvalidConfig(
            "benchmark needs at least one replicate and a positive step".into(),
        ));
    }
    let p = spec.p();
    let interferents: Vec<Vec<f64>> = spec.loadings[1..].to_vec();
    let nas = net_analyte_signal(&spec.loadings[0], &interferents)?;
    let theoretical_floor = nas.mse_floor(response.weights[0], spec.noise_sd);

    let mut rows = Vec::with_capacity(cfg.replicates);
    for rep in 0..cfg.replicates {
        let train_seed = derive_seed(cfg.seed, 2 * rep as u64);
        let test_seed = derive_seed(cfg.seed, 2 * rep as u64 + 1);
        let train = sample_mixture(spec, cfg.train_n, train_seed)?;
        let test = sample_mixture(spec, cfg.test_n, test_seed)?;
        let y_train = train.response.as_ref().expect("response spec present");
        let y_test = test.response.as_ref().expect("response spec present");
        let n = cfg.train_n;

        // Full regression on every variable.
        let (full_comp, _) =
            pls_cv_components(train.data.values(), y_train, cfg.max_components)?;
        let full_model = pls_fit(train.data.values(), y_train, cfg.max_components)?;
        let full_pred = full_model.predict(
            test.data.values(),
            full_comp.min(full_model.components()),
        )?;
        let full = mean_squared_error(&full_pred, y_test);

        // Correlation screening.
        let selected =
            supervised_variable_select(&train.data, y_train, cfg.selected_variables.min(p))?;
        let pick = |values: &Array2<f64>| {
            let mut out = Array2::zeros((values.nrows(), selected.len()));
            for (f, &j) in selected.iter().enumerate() {
                for t in 0..values.nrows() {
                    out[[t, f]] = values[[t, j]];
                }
            }
            out
        };
        let train_sel = pick(train.data.values());
        let test_sel = pick(test.data.values());
        let (sel_comp, _) = pls_cv_components(&train_sel, y_train, cfg.max_components)?;
        let sel_model = pls_fit(&train_sel, y_train, cfg.max_components)?;
        let sel_pred = sel_model.predict(&test_sel, sel_comp.min(sel_model.components()))?;
        let supervised = mean_squared_error(&sel_pred, y_test);

        // Tree features at a leave-one-out cross-validated height.
        let engine = EngineConfig::default();
        let centered_train = {
            let mut c = train.data.values().clone();
            let means: Vec<f64> = (0..p).map(|j| c.column(j).sum() / n as f64).collect();
            for j in 0..p {
                for t in 0..n {
                    c[[t, j]] -= means[j];
                }
            }
            c
        };
        let scatter = centered_train.t().dot(&centered_train);
        let models: Vec<TreeletModel> = (0..n)
            .into_par_iter()
            .map(|t| {
                let cov = loo_covariance(&centered_train, &scatter, t, n);
                fit_covariance(&cov, &engine)
            })
            .collect::<Result<_>>()?;
        let max_height = models.iter().map(TreeletModel::height).min().unwrap_or(0);
        let coarse: Vec<usize> = (1..=max_height)
            .filter(|l| l % cfg.coarse_step == 0 || *l == max_height)
            .collect();
        let coarse = if coarse.is_empty() { vec![max_height] } else { coarse };
        let coarse_err = treelet_loo_errors(&train.data, y_train, &coarse, &models, cfg)?;
        let (rung_idx, _) = argmin_grid(&coarse_err);
        let center = coarse[rung_idx];
        let lo = center.saturating_sub(cfg.coarse_step - 1).max(1);
        let hi = (center + cfg.coarse_step - 1).min(max_height);
        let fine: Vec<usize> = (lo..=hi).collect();
        let fine_err = treelet_loo_errors(&train.data, y_train, &fine, &models, cfg)?;
        let (fine_idx, tree_comp) = argmin_grid(&fine_err);
        let level = fine[fine_idx];

        let final_model = fit(&train.data, &engine)?;
        let level = level.min(final_model.height());
        let basis = final_model.basis(level)?;
        let train_centered = &centered_train;
        let train_coords = train_centered.dot(&basis);
        let train_cov = sample_covariance(&train.data);
        let rotated = final_model.rotated_covariance(&train_cov, level)?;
        let mut slots = final_model.active_slots(level);
        slots.sort_by(|&a, &b| {
            rotated.values()[[b, b]]
                .partial_cmp(&rotated.values()[[a, a]])
                .expect("variances are finite")
                .then(a.cmp(&b))
        });
        slots.truncate(cfg.selected_features);
        let means: Vec<f64> = (0..p)
            .map(|j| train.data.values().column(j).sum() / n as f64)
            .collect();
        let mut test_centered = test.data.values().clone();
        for j in 0..p {
            for t in 0..cfg.test_n {
                test_centered[[t, j]] -= means[j];
            }
        }
        let test_coords = test_centered.dot(&basis);
        let take = |coords: &Array2<f64>| {
            let mut out = Array2::zeros((coords.nrows(), slots.len()));
            for (f, &slot) in slots.iter().enumerate() {
                for t in 0..coords.nrows() {
                    out[[t, f]] = coords[[t, slot]];
                }
            }
            out
        };
        let tree_train = take(&train_coords);
        let tree_test = take(&test_coords);
        let tree_model = pls_fit(&tree_train, y_train, cfg.max_components)?;
        let tree_pred = tree_model.predict(&tree_test, tree_comp.min(tree_model.components()))?;
        let treelet = mean_squared_error(&tree_pred, y_test);

        // Projections onto the true loadings.
        let loading_matrix = Array2::from_shape_fn((p, spec.k()), |(i, j)| spec.loadings[j][i]);
        let oracle_train = train.data.values().dot(&loading_matrix);
        let oracle_test = test.data.values().dot(&loading_matrix);
        let (oracle_comp, _) = pls_cv_components(&oracle_train, y_train, spec.k())?;
        let oracle_model = pls_fit(&oracle_train, y_train, spec.k())?;
        let oracle_pred =
            oracle_model.predict(&oracle_test, oracle_comp.min(oracle_model.components()))?;
        let oracle = mean_squared_error(&oracle_pred, y_test);

        rows.push(Figure4Replicate {
            replicate: rep,
            msep: MethodMsep {
                full,
                supervised,
                treelet,
                oracle,
            },
            treelet_level: level,
        });
    }
    let count = rows.len() as f64;
    let mean = MethodMsep {
        full: rows.iter().map(|r| r.msep.full).sum::<f64>() / count,
        supervised: rows.iter().map(|r| r.msep.supervised).sum::<f64>() / count,
        treelet: rows.iter().map(|r| r.msep.treelet).sum::<f64>() / count,
        oracle: rows.iter().map(|r| r.msep.oracle).sum::<f64>() / count,
    };
    Ok(Figure4Table {
        rows,
        mean,
        theoretical_floor,
    })
}

/// Output of the two-way clustering classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoWayOutcome {
    pub labels: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Classifies test rows by building a tree over the variables of the
/// training data, representing every sample by its `k` highest-energy
/// features, building a second tree over all samples from the uncentered
/// feature Gram matrix, splitting at the final merge, and labeling each
/// branch by majority vote of its training samples.
pub fn two_way_classify(
    train: &DataMatrix,
    labels: &[usize],
    test: &DataMatrix,
    k: usize,
) -> Result<TwoWayOutcome> {
    if labels.len() != train.n() {
        return Err(Error::DimensionMismatch {
            context: "label count",
            expected: train.n(),
            got: labels.len(),
        });
    }
    if test.p() != train.p() {
        return Err(Error::DimensionMismatch {
            context: "test variable count",
            expected: train.p(),
            got: test.p(),
        });
    }
    if k == 0 || k > train.p() {
        return Err(Error::InvalidConfig(format!(
            "feature count must lie in 1..={}, got {k}",
            train.p()
        )));
    }
    let (ids, _) = class_index(labels)?;
    if ids.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "two-way classification needs exactly two classes, got {}",
            ids.len()
        )));
    }

    let engine = EngineConfig::default();
    let variables_tree = fit(train, &engine)?;
    let basis = variables_tree.basis(variables_tree.height())?;
    let report = energy_scores(&basis, train)?;
    let top: Vec<usize> = report.descending_order()[..k].to_vec();

    let n_train = train.n();
    let n_total = n_train + test.n();
    let mut features = Array2::zeros((n_total, k));
    let project = |row: ArrayView1<'_, f64>, out: &mut Array2<f64>, at: usize| {
        for (f, &col) in top.iter().enumerate() {
            out[[at, f]] = row.iter().zip(basis.column(col)).map(|(a, b)| a * b).sum();
        }
    };
    for t in 0..n_train {
        project(train.row(t), &mut features, t);
    }
    for t in 0..test.n() {
        project(test.row(t), &mut features, n_train + t);
    }

    let mut gram = Array2::zeros((n_total, n_total));
    for s in 0..n_total {
        for t in s..n_total {
            let value = features
                .row(s)
                .iter()
                .zip(features.row(t))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / k as f64;
            gram[[s, t]] = value;
            gram[[t, s]] = value;
        }
    }
    let gram = SymMatrix::new_unchecked(gram);
    let samples_tree = fit_covariance(&gram, &engine)?;
    let height = samples_tree.height();
    let last = samples_tree
        .rotations()
        .last()
        .expect("a fitted tree has at least one merge");
    let (scaling, _) = samples_tree.scaling_detail(height - 1)?;
    let support_of = |slot: usize| -> Vec<usize> {
        scaling
            .iter()
            .find(|f| f.slot == slot)
            .map(|f| f.support.clone())
            .unwrap_or_default()
    };
    let branches = [support_of(last.alpha), support_of(last.beta)];

    let mut warnings = Vec::new();
    let mut assignment = vec![usize::MAX; n_total];
    for (b, branch) in branches.iter().enumerate() {
        for &s in branch {
            assignment[s] = b;
        }
    }
    for (s, a) in assignment.iter_mut().enumerate() {
        if *a != usize::MAX {
            continue;
        }
        // Samples never merged into either branch (degenerate feature
        // rows): attach to the branch they are most similar to on
        // average.
        let affinity = |branch: &[usize]| -> f64 {
            branch.iter().map(|&t| gram.values()[[s, t]]).sum::<f64>() / branch.len().max(1) as f64
        };
        *a = usize::from(affinity(&branches[1]) > affinity(&branches[0]));
        warnings.push(format!(
            "sample {s} was never merged; attached to branch {a} by similarity"
        ));
    }

    let mut branch_labels = [usize::MAX; 2];
    let mut counted = [[0usize; 2]; 2];
    for t in 0..n_train {
        let class = usize::from(labels[t] == ids[1]);
        counted[assignment[t]][class] += 1;
    }
    for b in 0..2 {
        let votes = counted[b];
        if votes[0] + votes[1] == 0 {
            continue;
        }
        branch_labels[b] = if votes[1] > votes[0] { ids[1] } else { ids[0] };
    }
    for b in 0..2 {
        if branch_labels[b] == usize::MAX {
            let other = branch_labels[1 - b];
            branch_labels[b] = other;
            warnings.push(format!(
                "branch {b} holds no training samples; labeled {other} after its neighbor"
            ));
        }
    }

    let labels_out = (0..test.n())
        .map(|t| branch_labels[assignment[n_train + t]])
        .collect();
    Ok(TwoWayOutcome {
        labels: labels_out,
        warnings,
    })
}
