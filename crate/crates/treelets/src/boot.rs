//! Bootstrap stability analysis: sup-norm covariance confidence sets and
//! per-coordinate confidence bands for high-energy loading vectors.
//!
//! The construction resamples rows with replacement, measures how far each
//! replicate covariance strays from the sample covariance in the
//! entrywise max norm, and keeps the replicates inside the `1 - alpha`
//! quantile of those distances. Trees are then fit on every accepted
//! covariance, their top loading vectors are matched and sign-aligned to
//! the point estimate, and coordinatewise empirical quantiles of the
//! aligned loadings form the bands.
//!
//! All quantiles use one convention: the smallest order statistic whose
//! empirical distribution function reaches the requested probability.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::engine::{fit_covariance, EngineConfig, Height, TreeletModel};
use crate::error::{Error, Result};
use crate::matrix::{sample_covariance, DataMatrix, SymMatrix};
use crate::seeding::stream_rng;

/// Settings for a bootstrap stability run.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    /// Number of bootstrap replicates.
    pub replicates: usize,
    /// Miscoverage level in (0, 1); the distance cutoff is the
    /// `1 - alpha` quantile and bands span `alpha/2` to `1 - alpha/2`.
    pub alpha: f64,
    pub seed: u64,
    /// Tree level at which loading vectors are compared.
    pub level: usize,
    /// How many of the highest-variance loading vectors to band.
    pub top_k: usize,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidConfig(
                "bootstrap needs at least one replicate".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie strictly between 0 and 1, got {}",
                self.alpha
            )));
        }
        if self.level == 0 {
            return Err(Error::InvalidConfig(
                "loadings are compared after at least one rotation; level must be positive".into(),
            ));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig(
                "top_k must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Confidence band for one loading vector: coordinatewise empirical
/// quantiles of the accepted, sign-aligned replicate loadings.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingBand {
    /// Energy rank of this loading in the point estimate (0 = largest).
    pub rank: usize,
    /// Slot of the loading in the point-estimate tree.
    pub slot: usize,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// How many accepted replicates needed a sign flip to align.
    pub flipped: usize,
}

/// Result of a bootstrap stability run.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSummary {
    /// Sup-norm radius of the covariance confidence set.
    pub delta: f64,
    /// Replicates whose covariance fell strictly inside the radius.
    pub accepted: usize,
    pub replicates: usize,
    pub bands: Vec<LoadingBand>,
}

/// Entrywise max-norm distance between two covariance matrices.
pub fn sup_norm_distance(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    if a.p() != b.p() {
        return Err(Error::DimensionMismatch {
            context: "sup-norm distance operands",
            expected: a.p(),
            got: b.p(),
        });
    }
    let mut worst = 0.0f64;
    for (x, y) in a.values().iter().zip(b.values().iter()) {
        worst = worst.max((x - y).abs());
    }
    Ok(worst)
}

/// Smallest order statistic of `sorted` (ascending) whose empirical CDF
/// reaches `q`.
fn order_statistic(sorted: &[f64], q: f64) -> f64 {
    let count = sorted.len();
    let k = ((q * count as f64).ceil() as usize).clamp(1, count);
    sorted[k - 1]
}

/// Covariance of one resampled replicate. Replicate `b` reads from stream
/// `b + 1` of the seed, so a caller that generated the data itself from
/// stream 0 of the same seed never shares draws with the resampling.
fn replicate_covariance(data: &DataMatrix, seed: u64, replicate: u64) -> Result<SymMatrix> {
    let mut rng = stream_rng(seed, replicate + 1);
    let n = data.n();
    let mut values = Array2::zeros((n, data.p()));
    for t in 0..n {
        let src = rng.random_range(0..n);
        values.row_mut(t).assign(&data.values().row(src));
    }
    Ok(sample_covariance(&DataMatrix::new(values)?))
}

/// Covariances of all bootstrap replicates, resampled row-wise with
/// replacement and seeded deterministically per replicate.
pub fn bootstrap_covariances(data: &DataMatrix, cfg: &BootstrapConfig) -> Result<Vec<SymMatrix>> {
    cfg.validate()?;
    (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|b| replicate_covariance(data, cfg.seed, b))
        .collect()
}

/// Sup-norm distance cutoff: the `ceil((1 - alpha) * B)`-th smallest of
/// the replicate distances to the sample covariance.
pub fn delta_quantile(data: &DataMatrix, covs: &[SymMatrix], alpha: f64) -> Result<f64> {
    if covs.is_empty() {
        return Err(Error::InvalidConfig(
            "distance quantile needs at least one replicate covariance".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie strictly between 0 and 1, got {alpha}"
        )));
    }
    let point = sample_covariance(data);
    let mut distances = covs
        .iter()
        .map(|cov| sup_norm_distance(cov, &point))
        .collect::<Result<Vec<f64>>>()?;
    distances.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    Ok(order_statistic(&distances, 1.0 - alpha))
}

/// The `k` highest-variance basis columns of a fitted tree at `level`,
/// with variances read from `cov` replayed through the rotations. Ties go
/// to the lower slot.
fn top_loadings(
    model: &TreeletModel,
    cov: &SymMatrix,
    level: usize,
    k: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let rotated = model.rotated_covariance(cov, level)?;
    let basis = model.basis(level)?;
    let mut slots: Vec<usize> = (0..model.p()).collect();
    slots.sort_by(|&a, &b| {
        let va = rotated.values()[[a, a]];
        let vb = rotated.values()[[b, b]];
        vb.partial_cmp(&va).expect("variances are finite").then(a.cmp(&b))
    });
    Ok(slots[..k]
        .iter()
        .map(|&slot| (slot, basis.column(slot).to_vec()))
        .collect())
}

/// Flips `candidate` when its inner product with `reference` is negative.
/// Absolute values are untouched, and applying the alignment twice gives
/// the same vector as applying it once.
fn sign_align(reference: &[f64], candidate: &[f64]) -> (Vec<f64>, bool) {
    let dot: f64 = reference.iter().zip(candidate).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        (candidate.iter().map(|v| -v).collect(), true)
    } else {
        (candidate.to_vec(), false)
    }
}

/// Matches replicate loadings to point loadings greedily in energy order
/// by largest absolute inner product, then sign-aligns each match.
/// Returns, per point-loading rank, the aligned replicate vector and
/// whether it was flipped.
fn match_and_align(
    point: &[(usize, Vec<f64>)],
    replicate: Vec<(usize, Vec<f64>)>,
) -> Vec<(Vec<f64>, bool)> {
    let k = point.len();
    let mut out: Vec<Option<(Vec<f64>, bool)>> = vec![None; k];
    let mut used = vec![false; k];
    for (_, candidate) in replicate {
        let mut best: Option<(usize, f64)> = None;
        for (j, (_, reference)) in point.iter().enumerate() {
            if used[j] {
                continue;
            }
            let dot: f64 = reference.iter().zip(&candidate).map(|(a, b)| a * b).sum();
            if best.is_none_or(|(_, score)| dot.abs() > score) {
                best = Some((j, dot.abs()));
            }
        }
        let (j, _) = best.expect("point and replicate loading counts match");
        used[j] = true;
        let reference = &point[j].1;
        out[j] = Some(sign_align(reference, &candidate));
    }
    out.into_iter()
        .map(|slot| slot.expect("every point loading receives a match"))
        .collect()
}

/// Full bootstrap stability run: distance cutoff, acceptance, and
/// confidence bands for the `top_k` highest-variance loading vectors at
/// the configured level.
pub fn confidence_set_loadings(
    data: &DataMatrix,
    cfg: &BootstrapConfig,
) -> Result<ConfidenceSummary> {
    cfg.validate()?;
    let p = data.p();
    if cfg.top_k > p {
        return Err(Error::InvalidConfig(format!(
            "top_k = {} exceeds the {p} available loadings",
            cfg.top_k
        )));
    }
    let point_cov = sample_covariance(data);
    let engine = EngineConfig {
        height: Height::Level(cfg.level),
        ..EngineConfig::default()
    };
    let point_model = fit_covariance(&point_cov, &engine)?;
    let point_loadings = top_loadings(&point_model, &point_cov, cfg.level, cfg.top_k)?;

    let distances = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|b| {
            let cov = replicate_covariance(data, cfg.seed, b)?;
            sup_norm_distance(&cov, &point_cov)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut sorted = distances.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let delta = order_statistic(&sorted, 1.0 - cfg.alpha);

    let accepted_ids: Vec<u64> = distances
        .iter()
        .enumerate()
        .filter(|(_, d)| **d < delta)
        .map(|(b, _)| b as u64)
        .collect();
    if accepted_ids.is_empty() {
        return Err(Error::NoAcceptedReplicates);
    }

    let aligned: Vec<Vec<(Vec<f64>, bool)>> = accepted_ids
        .par_iter()
        .map(|&b| {
            let cov = replicate_covariance(data, cfg.seed, b)?;
            let model = fit_covariance(&cov, &engine)?;
            let loadings = top_loadings(&model, &cov, cfg.level, cfg.top_k)?;
            Ok(match_and_align(&point_loadings, loadings))
        })
        .collect::<Result<_>>()?;

    let accepted = accepted_ids.len();
    let mut bands = Vec::with_capacity(cfg.top_k);
    for (rank, (slot, point)) in point_loadings.into_iter().enumerate() {
        let mut lower = Vec::with_capacity(p);
        let mut upper = Vec::with_capacity(p);
        let mut column = Vec::with_capacity(accepted);
        for i in 0..p {
            column.clear();
            column.extend(aligned.iter().map(|rep| rep[rank].0[i]));
            column.sort_by(|a, b| a.partial_cmp(b).expect("loadings are finite"));
            lower.push(order_statistic(&column, cfg.alpha / 2.0));
            upper.push(order_statistic(&column, 1.0 - cfg.alpha / 2.0));
        }
        let flipped = aligned.iter().filter(|rep| rep[rank].1).count();
        bands.push(LoadingBand {
            rank,
            slot,
            point,
            lower,
            upper,
            flipped,
        });
    }
    Ok(ConfidenceSummary {
        delta,
        accepted,
        replicates: cfg.replicates,
        bands,
    })
}
