//! Bottom-up construction of the rotation tree and the fitted model.
//!
//! Starting from the Dirac basis, each level finds the most similar pair of
//! active variables, rotates the pair to decorrelate it, keeps the
//! higher-variance coordinate active as a local sum, and freezes the other
//! as a local difference. A fitted [`TreeletModel`] is an ordered list of
//! [`RotationRecord`]s; bases, forward/inverse transforms, and covariance
//! replays are all derived from that list.
//!
//! Selection bookkeeping caches, for each active row, the best similarity
//! against higher-indexed active partners. A merge refreshes the cache only
//! for rows the merge touched, so the per-level maintenance cost is
//! proportional to the number of active variables rather than to all pairs.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    jacobi_angle, rotate_sym_in_place, rotate_vec_in_place, sample_covariance, DataMatrix,
    SimilarityConfig, SymMatrix,
};

/// Working variables whose variance falls at or below this fraction of the
/// largest initial variance are treated as constant: they are never paired
/// and remain as Dirac scaling slots.
const DEGENERATE_RTOL: f64 = 1e-20;

/// Requested tree height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Height {
    /// Merge until fewer than two pairable variables remain (at most `p - 1`
    /// levels).
    Full,
    /// Stop after exactly this many levels (must lie in `1..=p-1`).
    Level(usize),
}

/// Rotation angle policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleMode {
    /// Decorrelating angle in `[-pi/4, pi/4]` computed from the working
    /// covariance of the selected pair.
    Adaptive,
    /// Constant `pi/4`, which averages and differences the pair with equal
    /// weights regardless of the covariance.
    FixedQuarterPi,
}

/// Fit-time options. Ties in pair selection always break lexicographically
/// on `(alpha, beta)`; this is not configurable.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub similarity: SimilarityConfig,
    pub height: Height,
    pub angle_mode: AngleMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            similarity: SimilarityConfig::default(),
            height: Height::Full,
            angle_mode: AngleMode::Adaptive,
        }
    }
}

/// One merge: the pair rotated at `level`, the angle, and which slot kept
/// the higher-variance (sum) coordinate. `alpha < beta` always holds; the
/// slot of the frozen difference is the member of the pair that is not
/// `sum_slot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRecord {
    pub level: usize,
    pub alpha: usize,
    pub beta: usize,
    pub theta: f64,
    pub sum_slot: usize,
}

impl RotationRecord {
    /// Slot frozen as the difference coordinate by this rotation.
    pub fn detail_slot(&self) -> usize {
        self.alpha + self.beta - self.sum_slot
    }
}

/// Cumulative fit timings, split into pair-selection work and
/// covariance/cache maintenance work.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitTrace {
    /// Number of levels actually fitted.
    pub levels: usize,
    /// Time spent scanning for the best pair (including cache repairs).
    pub selection_nanos: u128,
    /// Time spent applying rotations and refreshing cached row maxima.
    pub update_nanos: u128,
    /// Wall-clock time of the whole fit after the covariance was available.
    pub total_nanos: u128,
}

/// A fitted rotation tree.
///
/// Serializes to the JSON layout
/// `{p, L, similarity, rotations: [{level, alpha, beta, theta, sum_slot}]}`
/// with angles written so that parsing restores them bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeletModel {
    p: usize,
    #[serde(rename = "L")]
    height: usize,
    similarity: SimilarityConfig,
    rotations: Vec<RotationRecord>,
}

/// Coefficients of one vector at a given level: the rotated coordinates in
/// slot order. Active slots carry the local sums, frozen slots carry the
/// differences; [`Coefficients::sums`] and [`Coefficients::details`] split
/// them out against the model that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    level: usize,
    slots: Vec<f64>,
}

impl Coefficients {
    /// Wraps raw slot values as coefficients at `level`. Consistency with a
    /// model is checked by the operations that take both.
    pub fn new(level: usize, slots: Vec<f64>) -> Self {
        Self { level, slots }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Rotated coordinates indexed by slot.
    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    /// `(slot, value)` for every slot still active at this level, ascending
    /// by slot. There are `p - level` of them.
    pub fn sums(&self, model: &TreeletModel) -> Result<Vec<(usize, f64)>> {
        self.check_against(model)?;
        let active = model.active_slots(self.level);
        Ok(active.into_iter().map(|i| (i, self.slots[i])).collect())
    }

    /// `(slot, value)` for the frozen difference coordinates, in merge
    /// order. There are `level` of them.
    pub fn details(&self, model: &TreeletModel) -> Result<Vec<(usize, f64)>> {
        self.check_against(model)?;
        Ok(model.rotations[..self.level]
            .iter()
            .map(|r| (r.detail_slot(), self.slots[r.detail_slot()]))
            .collect())
    }

    /// Sum of squared coefficients; equals the squared norm of the input.
    pub fn energy(&self) -> f64 {
        self.slots.iter().map(|v| v * v).sum()
    }

    fn check_against(&self, model: &TreeletModel) -> Result<()> {
        if self.slots.len() != model.p {
            return Err(Error::CoefficientMismatch(format!(
                "coefficients have {} slots but the model has p = {}",
                self.slots.len(),
                model.p
            )));
        }
        if self.level > model.height {
            return Err(Error::CoefficientMismatch(format!(
                "coefficients were taken at level {} but the model height is {}",
                self.level, model.height
            )));
        }
        Ok(())
    }
}

/// A basis column together with its position in the tree: the slot it
/// occupies, the level it belongs to (for details, the level that froze
/// it), and the cluster of original variables it is supported on.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFunction {
    pub slot: usize,
    pub level: usize,
    pub vector: Vec<f64>,
    pub support: Vec<usize>,
}

/// Exhaustive best-pair search over `active` slots of a similarity matrix.
///
/// Returns the pair `(alpha, beta)` with `alpha < beta` maximizing
/// `m[alpha, beta]`; exact ties resolve to the lexicographically smallest
/// pair. This is the reference selection rule; the fitter maintains the
/// same rule incrementally.
pub fn select_pair(m: &Array2<f64>, active: &[usize]) -> Result<(usize, usize)> {
    if active.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "pair selection needs at least two active variables, got {}",
            active.len()
        )));
    }
    let len = m.nrows();
    let mut best: Option<(f64, usize, usize)> = None;
    for (k, &i) in active.iter().enumerate() {
        for &j in &active[k + 1..] {
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            if b >= len {
                return Err(Error::IndexOutOfRange { index: b, len });
            }
            let v = m[[a, b]];
            let better = match best {
                None => true,
                Some((bv, ba, bb)) => v > bv || (v == bv && (a, b) < (ba, bb)),
            };
            if better {
                best = Some((v, a, b));
            }
        }
    }
    let (_, a, b) = best.expect("at least one pair exists");
    Ok((a, b))
}

/// Per-row cache: best similarity of this row against any pairable partner
/// with a larger slot index.
#[derive(Clone, Copy)]
struct RowBest {
    value: f64,
    partner: usize,
    dirty: bool,
}

const NO_PARTNER: usize = usize::MAX;

impl RowBest {
    fn none() -> Self {
        Self {
            value: f64::NEG_INFINITY,
            partner: NO_PARTNER,
            dirty: false,
        }
    }
}

struct FitState {
    /// Working covariance. Row `i` reflects only the first `row_epoch[i]`
    /// entries of `log`; every read goes through a materialized row, so the
    /// strided column half of each rotation is never written eagerly.
    cov: Array2<f64>,
    /// Always-current diagonal of the working covariance.
    diag: Vec<f64>,
    pairable: Vec<bool>,
    row_best: Vec<RowBest>,
    /// Applied rotations as `(alpha, beta, cos, sin)`, in merge order.
    log: Vec<(usize, usize, f64, f64)>,
    /// Prefix of `log` already folded into each row.
    row_epoch: Vec<usize>,
    similarity: SimilarityConfig,
    degenerate_floor: f64,
}

impl FitState {
    fn new(cov: &SymMatrix, similarity: SimilarityConfig) -> Result<Self> {
        similarity.validate()?;
        let p = cov.p();
        if p < 2 {
            return Err(Error::TooFewColumns { needed: 2, got: p });
        }
        let degenerate_floor = DEGENERATE_RTOL * cov.max_diagonal();
        let values = cov.values();
        let pairable: Vec<bool> = (0..p).map(|i| values[[i, i]] > degenerate_floor).collect();
        let diag: Vec<f64> = (0..p).map(|i| values[[i, i]]).collect();
        let mut state = Self {
            cov: values.clone(),
            diag,
            pairable,
            row_best: vec![RowBest::none(); p],
            log: Vec::new(),
            row_epoch: vec![0; p],
            similarity,
            degenerate_floor,
        };
        for i in 0..p {
            if state.pairable[i] {
                state.row_best[i] = state.recompute_row(i);
            }
        }
        Ok(state)
    }

    fn p(&self) -> usize {
        self.cov.nrows()
    }

    /// Applies the rotations row `i` has not seen yet. A frozen slot never
    /// re-enters a merge, so a live row is never part of its own pending
    /// rotations and the two touched entries are always off-diagonal.
    fn materialize(&mut self, i: usize) {
        let start = self.row_epoch[i];
        if start == self.log.len() {
            return;
        }
        let pending = &self.log[start..];
        let mut row = self.cov.row_mut(i);
        let row = row.as_slice_mut().expect("working matrix is row-major");
        for &(a, b, c, s) in pending {
            debug_assert!(a != i && b != i);
            let (ra, rb) = (row[a], row[b]);
            row[a] = c * ra + s * rb;
            row[b] = -s * ra + c * rb;
        }
        self.row_epoch[i] = self.log.len();
    }

    /// Fresh `(s_aa, s_bb, s_ab)` for a pair about to merge.
    fn pair_stats(&mut self, alpha: usize, beta: usize) -> (f64, f64, f64) {
        self.materialize(alpha);
        (self.diag[alpha], self.diag[beta], self.cov[[alpha, beta]])
    }

    fn recompute_row(&mut self, i: usize) -> RowBest {
        self.materialize(i);
        let mut best = RowBest::none();
        for j in (i + 1)..self.p() {
            if !self.pairable[j] {
                continue;
            }
            let v = self
                .similarity
                .score(self.cov[[i, j]], self.diag[i], self.diag[j]);
            if v > best.value || (v == best.value && j < best.partner) {
                best.value = v;
                best.partner = j;
            }
        }
        best.dirty = false;
        best
    }

    /// Best pair over all pairable slots, repairing stale row caches along
    /// the way. `None` when fewer than two pairable slots remain.
    fn select(&mut self) -> Option<(usize, usize)> {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..self.p() {
            if !self.pairable[i] {
                continue;
            }
            if self.row_best[i].dirty {
                self.row_best[i] = self.recompute_row(i);
            }
            let row = self.row_best[i];
            if row.partner == NO_PARTNER {
                continue;
            }
            let better = match best {
                None => true,
                Some((bv, ba, bb)) => {
                    row.value > bv || (row.value == bv && (i, row.partner) < (ba, bb))
                }
            };
            if better {
                best = Some((row.value, i, row.partner));
            }
        }
        best.map(|(_, a, b)| (a, b))
    }

    /// Applies the rotation, freezes the difference slot, and refreshes the
    /// caches of rows the merge touched. Returns the sum slot. Only the
    /// surviving row is rewritten; the frozen row is dead and the appended
    /// log entry covers every other row.
    fn merge(&mut self, alpha: usize, beta: usize, theta: f64) -> usize {
        self.materialize(alpha);
        self.materialize(beta);
        let (c, s) = (theta.cos(), theta.sin());
        let saa = self.diag[alpha];
        let sbb = self.diag[beta];
        let sab = self.cov[[alpha, beta]];
        let new_aa = c * c * saa + 2.0 * c * s * sab + s * s * sbb;
        let new_bb = s * s * saa - 2.0 * c * s * sab + c * c * sbb;
        let off = c * s * (sbb - saa) + (c * c - s * s) * sab;
        let sum_slot = if new_aa >= new_bb { alpha } else { beta };
        let detail_slot = alpha + beta - sum_slot;

        let p = self.p();
        {
            let values = self
                .cov
                .as_slice_mut()
                .expect("working matrix is row-major");
            let (left, right) = values.split_at_mut(beta * p);
            let row_a = &mut left[alpha * p..alpha * p + p];
            let row_b = &mut right[..p];
            if sum_slot == alpha {
                for (a, b) in row_a.iter_mut().zip(row_b.iter()) {
                    *a = c * *a + s * *b;
                }
            } else {
                for (a, b) in row_a.iter().zip(row_b.iter_mut()) {
                    *b = -s * *a + c * *b;
                }
            }
        }
        self.cov[[sum_slot, sum_slot]] = if sum_slot == alpha { new_aa } else { new_bb };
        self.cov[[sum_slot, detail_slot]] = off;
        self.diag[alpha] = new_aa;
        self.diag[beta] = new_bb;
        self.log.push((alpha, beta, c, s));
        self.row_epoch[sum_slot] = self.log.len();

        self.pairable[detail_slot] = false;
        let sum_pairable = self.diag[sum_slot] > self.degenerate_floor;
        self.pairable[sum_slot] = sum_pairable;

        for k in 0..p {
            if k == alpha || k == beta || !self.pairable[k] {
                continue;
            }
            let old = self.row_best[k];
            let candidate = sum_pairable && sum_slot > k;
            if candidate {
                let v = self
                    .similarity
                    .score(self.cov[[sum_slot, k]], self.diag[k], self.diag[sum_slot]);
                if old.partner == alpha || old.partner == beta {
                    if v > old.value || (old.partner == sum_slot && v == old.value) {
                        self.row_best[k] = RowBest {
                            value: v,
                            partner: sum_slot,
                            dirty: false,
                        };
                    } else {
                        self.row_best[k].dirty = true;
                    }
                } else if v > old.value || (v == old.value && sum_slot < old.partner) {
                    self.row_best[k] = RowBest {
                        value: v,
                        partner: sum_slot,
                        dirty: false,
                    };
                }
            } else if old.partner == alpha || old.partner == beta {
                self.row_best[k].dirty = true;
            }
        }
        if sum_pairable {
            self.row_best[sum_slot] = self.recompute_row(sum_slot);
        }
        sum_slot
    }
}

/// Fits a model to raw data: columns are centered, the sample covariance is
/// formed, and the tree is grown on it.
pub fn fit(data: &DataMatrix, config: &EngineConfig) -> Result<TreeletModel> {
    fit_covariance(&sample_covariance(data), config)
}

/// Fits a model directly to a covariance (sample or population).
pub fn fit_covariance(cov: &SymMatrix, config: &EngineConfig) -> Result<TreeletModel> {
    fit_covariance_traced(cov, config).map(|(model, _)| model)
}

/// [`fit_covariance`] with timing instrumentation.
pub fn fit_covariance_traced(
    cov: &SymMatrix,
    config: &EngineConfig,
) -> Result<(TreeletModel, FitTrace)> {
    let p = cov.p();
    let target = match config.height {
        Height::Full => p - 1,
        Height::Level(l) => {
            if l < 1 || l > p - 1 {
                return Err(Error::LevelOutOfRange { level: l, max: p - 1 });
            }
            l
        }
    };

    let started = Instant::now();
    let mut state = FitState::new(cov, config.similarity.clone())?;
    let mut trace = FitTrace::default();
    let mut rotations = Vec::with_capacity(target);

    for level in 1..=target {
        let tick = Instant::now();
        let selected = state.select();
        trace.selection_nanos += tick.elapsed().as_nanos();

        let Some((alpha, beta)) = selected else {
            if level == 1 {
                return Err(Error::DegenerateInput(
                    "no pair of variables with positive variance to merge".into(),
                ));
            }
            break;
        };

        let tick = Instant::now();
        let theta = match config.angle_mode {
            AngleMode::Adaptive => {
                let (saa, sbb, sab) = state.pair_stats(alpha, beta);
                jacobi_angle(saa, sbb, sab)
            }
            AngleMode::FixedQuarterPi => std::f64::consts::FRAC_PI_4,
        };
        let sum_slot = state.merge(alpha, beta, theta);
        trace.update_nanos += tick.elapsed().as_nanos();

        rotations.push(RotationRecord {
            level,
            alpha,
            beta,
            theta,
            sum_slot,
        });
    }

    trace.levels = rotations.len();
    trace.total_nanos = started.elapsed().as_nanos();
    let model = TreeletModel {
        p,
        height: rotations.len(),
        similarity: config.similarity.clone(),
        rotations,
    };
    Ok((model, trace))
}

impl TreeletModel {
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of fitted levels. May be smaller than requested if pairable
    /// variables ran out early.
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn similarity(&self) -> &SimilarityConfig {
        &self.similarity
    }

    pub fn rotations(&self) -> &[RotationRecord] {
        &self.rotations
    }

    /// Slot frozen as the difference coordinate at each level, in merge
    /// order.
    pub fn detail_order(&self) -> Vec<usize> {
        self.rotations.iter().map(RotationRecord::detail_slot).collect()
    }

    /// Slots still carrying sum coordinates after `level` rotations,
    /// ascending.
    pub fn active_slots(&self, level: usize) -> Vec<usize> {
        let mut active = vec![true; self.p];
        for r in &self.rotations[..level.min(self.height)] {
            active[r.detail_slot()] = false;
        }
        active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level > self.height {
            return Err(Error::LevelOutOfRange {
                level,
                max: self.height,
            });
        }
        Ok(())
    }

    /// Rotates `x` into the level-`level` coordinate system. Level 0 is the
    /// identity.
    pub fn forward(&self, x: &[f64], level: usize) -> Result<Coefficients> {
        self.check_level(level)?;
        if x.len() != self.p {
            return Err(Error::DimensionMismatch {
                context: "input vector length",
                expected: self.p,
                got: x.len(),
            });
        }
        let mut slots = x.to_vec();
        for r in &self.rotations[..level] {
            rotate_vec_in_place(&mut slots, r.alpha, r.beta, r.theta);
        }
        Ok(Coefficients { level, slots })
    }

    /// Undoes [`forward`](Self::forward): applies the transposed rotations
    /// in reverse order.
    pub fn inverse(&self, coeffs: &Coefficients) -> Result<Vec<f64>> {
        coeffs.check_against(self)?;
        let mut x = coeffs.slots.clone();
        for r in self.rotations[..coeffs.level].iter().rev() {
            rotate_vec_in_place(&mut x, r.alpha, r.beta, -r.theta);
        }
        Ok(x)
    }

    /// Orthonormal basis after `level` rotations, one basis vector per
    /// column, columns in slot order. Level 0 is the identity.
    pub fn basis(&self, level: usize) -> Result<Array2<f64>> {
        self.check_level(level)?;
        let mut b: Array2<f64> = Array2::eye(self.p);
        for r in &self.rotations[..level] {
            let (c, s) = (r.theta.cos(), r.theta.sin());
            for i in 0..self.p {
                let (ca, cb) = (b[[i, r.alpha]], b[[i, r.beta]]);
                b[[i, r.alpha]] = c * ca + s * cb;
                b[[i, r.beta]] = -s * ca + c * cb;
            }
        }
        Ok(b)
    }

    /// Splits the level-`level` basis into scaling functions (one per
    /// active slot, ascending) and detail functions (one per merge, in
    /// merge order), each with the cluster of original variables that
    /// supports it.
    pub fn scaling_detail(&self, level: usize) -> Result<(Vec<BasisFunction>, Vec<BasisFunction>)> {
        self.check_level(level)?;
        let b = self.basis(level)?;
        let mut supports: Vec<Vec<usize>> = (0..self.p).map(|i| vec![i]).collect();
        let mut detail_meta = Vec::with_capacity(level);
        for r in &self.rotations[..level] {
            let mut merged = supports[r.alpha].clone();
            merged.extend_from_slice(&supports[r.beta]);
            merged.sort_unstable();
            detail_meta.push((r.detail_slot(), r.level, merged.clone()));
            supports[r.sum_slot] = merged;
            supports[r.detail_slot()] = Vec::new();
        }
        let column = |slot: usize| b.column(slot).to_vec();
        let scaling = self
            .active_slots(level)
            .into_iter()
            .map(|slot| BasisFunction {
                slot,
                level,
                vector: column(slot),
                support: supports[slot].clone(),
            })
            .collect();
        let details = detail_meta
            .into_iter()
            .map(|(slot, merge_level, support)| BasisFunction {
                slot,
                level: merge_level,
                vector: column(slot),
                support,
            })
            .collect();
        Ok((scaling, details))
    }

    /// Replays the stored rotations on a covariance, producing the working
    /// covariance at `level`.
    pub fn rotated_covariance(&self, cov: &SymMatrix, level: usize) -> Result<SymMatrix> {
        self.check_level(level)?;
        if cov.p() != self.p {
            return Err(Error::DimensionMismatch {
                context: "covariance dimension",
                expected: self.p,
                got: cov.p(),
            });
        }
        let mut values = cov.values().clone();
        for r in &self.rotations[..level] {
            rotate_sym_in_place(&mut values, r.alpha, r.beta, r.theta);
        }
        Ok(SymMatrix::new_unchecked(values))
    }

    /// Largest gap between stored angles and the angles recomputed while
    /// replaying the rotations on `cov`. Near zero when `cov` is the
    /// covariance the model was fitted to adaptively; meaningless for
    /// fixed-angle fits.
    pub fn max_replay_angle_gap(&self, cov: &SymMatrix) -> Result<f64> {
        if cov.p() != self.p {
            return Err(Error::DimensionMismatch {
                context: "covariance dimension",
                expected: self.p,
                got: cov.p(),
            });
        }
        let mut values = cov.values().clone();
        let mut gap = 0.0f64;
        for r in &self.rotations {
            let recomputed = jacobi_angle(
                values[[r.alpha, r.alpha]],
                values[[r.beta, r.beta]],
                values[[r.alpha, r.beta]],
            );
            gap = gap.max((recomputed - r.theta).abs());
            rotate_sym_in_place(&mut values, r.alpha, r.beta, r.theta);
        }
        Ok(gap)
    }

    /// Serializes to the documented JSON layout.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and validates a model from its JSON form.
    pub fn from_json(text: &str) -> Result<Self> {
        let model: TreeletModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    /// Structural invariants: height matches the record list, indices are
    /// in range with `alpha < beta`, angles are constrained, sum slots
    /// belong to their pair, and no frozen slot is rotated again.
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::ModelInvalid(format!(
                "model dimension must be at least 2, got {}",
                self.p
            )));
        }
        if self.height != self.rotations.len() || self.height > self.p - 1 {
            return Err(Error::ModelInvalid(format!(
                "height {} does not match {} rotations within dimension {}",
                self.height,
                self.rotations.len(),
                self.p
            )));
        }
        self.similarity.validate()?;
        let mut frozen = vec![false; self.p];
        for (k, r) in self.rotations.iter().enumerate() {
            if r.level != k + 1 {
                return Err(Error::ModelInvalid(format!(
                    "rotation {} carries level {}, expected {}",
                    k,
                    r.level,
                    k + 1
                )));
            }
            if r.alpha >= r.beta || r.beta >= self.p {
                return Err(Error::ModelInvalid(format!(
                    "rotation at level {} has invalid pair ({}, {})",
                    r.level, r.alpha, r.beta
                )));
            }
            if r.sum_slot != r.alpha && r.sum_slot != r.beta {
                return Err(Error::ModelInvalid(format!(
                    "rotation at level {} has sum slot {} outside its pair",
                    r.level, r.sum_slot
                )));
            }
            if !r.theta.is_finite() || r.theta.abs() > std::f64::consts::FRAC_PI_4 + 1e-12 {
                return Err(Error::ModelInvalid(format!(
                    "rotation at level {} has angle {} outside [-pi/4, pi/4]",
                    r.level, r.theta
                )));
            }
            if frozen[r.alpha] || frozen[r.beta] {
                return Err(Error::ModelInvalid(format!(
                    "rotation at level {} reuses a frozen slot",
                    r.level
                )));
            }
            frozen[r.detail_slot()] = true;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::similarity_matrix;
    use crate::seeding::stream_rng;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::FRAC_PI_4;

    fn nearly(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn random_data(seed: u64, n: usize, p: usize) -> DataMatrix {
        let mut rng = stream_rng(seed, 0);
        let values = Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal));
        DataMatrix::new(values).unwrap()
    }

    /// Reference fitter: rebuilds the full similarity matrix at every level
    /// and selects with the exhaustive scan. Must agree bit-for-bit with
    /// the incremental fitter.
    fn naive_fit(cov: &SymMatrix, config: &EngineConfig) -> Vec<RotationRecord> {
        let p = cov.p();
        let target = match config.height {
            Height::Full => p - 1,
            Height::Level(l) => l,
        };
        let floor = DEGENERATE_RTOL * cov.max_diagonal();
        let mut work = cov.values().clone();
        let mut active: Vec<usize> = (0..p).filter(|&i| work[[i, i]] > floor).collect();
        let mut records = Vec::new();
        for level in 1..=target {
            if active.len() < 2 {
                break;
            }
            let sim =
                similarity_matrix(&SymMatrix::new_unchecked(work.clone()), &config.similarity)
                    .unwrap();
            let (alpha, beta) = select_pair(&sim, &active).unwrap();
            let theta = match config.angle_mode {
                AngleMode::Adaptive => {
                    jacobi_angle(work[[alpha, alpha]], work[[beta, beta]], work[[alpha, beta]])
                }
                AngleMode::FixedQuarterPi => FRAC_PI_4,
            };
            let (c, s) = (theta.cos(), theta.sin());
            let new_aa = c * c * work[[alpha, alpha]]
                + 2.0 * c * s * work[[alpha, beta]]
                + s * s * work[[beta, beta]];
            let new_bb = s * s * work[[alpha, alpha]] - 2.0 * c * s * work[[alpha, beta]]
                + c * c * work[[beta, beta]];
            let sum_slot = if new_aa >= new_bb { alpha } else { beta };
            rotate_sym_in_place(&mut work, alpha, beta, theta);
            let detail = alpha + beta - sum_slot;
            active.retain(|&i| i != detail);
            if work[[sum_slot, sum_slot]] <= floor {
                active.retain(|&i| i != sum_slot);
            }
            records.push(RotationRecord {
                level,
                alpha,
                beta,
                theta,
                sum_slot,
            });
        }
        records
    }

    #[test]
    fn two_variable_base_case() {
        let data = random_data(1, 40, 2);
        let cov = sample_covariance(&data);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        assert_eq!(model.height(), 1);
        let r = &model.rotations()[0];
        assert_eq!((r.alpha, r.beta), (0, 1));
        let expected = jacobi_angle(
            cov.values()[[0, 0]],
            cov.values()[[1, 1]],
            cov.values()[[0, 1]],
        );
        assert_eq!(r.theta, expected);
    }

    #[test]
    fn exchangeable_triple_reaches_uniform_scaling() {
        let cov = SymMatrix::new(Array2::from_elem((3, 3), 1.0)).unwrap();
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        assert_eq!(model.height(), 2);
        let (scaling, details) = model.scaling_detail(2).unwrap();
        assert_eq!(scaling.len(), 1);
        assert_eq!(scaling[0].support, vec![0, 1, 2]);
        let expected = 1.0 / 3.0f64.sqrt();
        for &v in &scaling[0].vector {
            nearly(v, expected, 1e-12);
        }
        let rotated = model.rotated_covariance(&cov, 2).unwrap();
        for d in &details {
            nearly(rotated.values()[[d.slot, d.slot]], 0.0, 1e-12);
        }
        nearly(rotated.values()[[scaling[0].slot, scaling[0].slot]], 3.0, 1e-12);
    }

    #[test]
    fn fixed_angle_mode_follows_forced_merge_order() {
        let cov = SymMatrix::new(array![
            [1.00, 0.99, 0.90, 0.95],
            [0.99, 1.00, 0.90, 0.95],
            [0.90, 0.90, 1.00, 0.89],
            [0.95, 0.95, 0.89, 1.00],
        ])
        .unwrap();
        let config = EngineConfig {
            angle_mode: AngleMode::FixedQuarterPi,
            ..EngineConfig::default()
        };
        let model = fit_covariance(&cov, &config).unwrap();
        let pairs: Vec<(usize, usize)> =
            model.rotations().iter().map(|r| (r.alpha, r.beta)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 3), (0, 2)]);
        for r in model.rotations() {
            assert_eq!(r.theta, FRAC_PI_4);
            assert_eq!(r.sum_slot, r.alpha);
        }
        let (scaling, _) = model.scaling_detail(3).unwrap();
        let expected = [
            1.0 / (2.0 * 2.0f64.sqrt()),
            1.0 / (2.0 * 2.0f64.sqrt()),
            1.0 / 2.0f64.sqrt(),
            0.5,
        ];
        for (got, want) in scaling[0].vector.iter().zip(expected) {
            nearly(*got, want, 1e-15);
        }
    }

    #[test]
    fn select_pair_prefers_lexicographic_on_ties() {
        let mut m = Array2::from_elem((4, 4), f64::NEG_INFINITY);
        m[[0, 1]] = 0.5;
        m[[1, 0]] = 0.5;
        m[[2, 3]] = 0.5;
        m[[3, 2]] = 0.5;
        m[[0, 2]] = 0.1;
        m[[2, 0]] = 0.1;
        let active = [0, 1, 2, 3];
        assert_eq!(select_pair(&m, &active).unwrap(), (0, 1));
    }

    #[test]
    fn select_pair_finds_unique_maximum() {
        let mut m = Array2::zeros((5, 5));
        m[[1, 3]] = 2.0;
        m[[3, 1]] = 2.0;
        assert_eq!(select_pair(&m, &[0, 1, 2, 3, 4]).unwrap(), (1, 3));
        assert!(select_pair(&m, &[2]).is_err());
    }

    #[test]
    fn tie_break_applies_inside_the_fitter() {
        let mut values = Array2::eye(4);
        values[[0, 1]] = 0.5;
        values[[1, 0]] = 0.5;
        values[[2, 3]] = 0.5;
        values[[3, 2]] = 0.5;
        let cov = SymMatrix::new(values).unwrap();
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        let first = &model.rotations()[0];
        assert_eq!((first.alpha, first.beta), (0, 1));
    }

    #[test]
    fn incremental_fit_matches_naive_reference() {
        for seed in 0..6u64 {
            let data = random_data(100 + seed, 30, 12);
            let cov = sample_covariance(&data);
            for similarity in [
                SimilarityConfig::SignedCorrelation,
                SimilarityConfig::AbsoluteCorrelation,
                SimilarityConfig::CorrelationPlusCovariance { lambda: 0.25 },
            ] {
                let config = EngineConfig {
                    similarity,
                    ..EngineConfig::default()
                };
                let model = fit_covariance(&cov, &config).unwrap();
                let reference = naive_fit(&cov, &config);
                assert_eq!(model.rotations(), reference.as_slice(), "seed {seed}");
            }
        }
    }

    #[test]
    fn forward_is_identity_at_level_zero() {
        let data = random_data(2, 25, 6);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let coeffs = model.forward(&x, 0).unwrap();
        assert_eq!(coeffs.slots(), x.as_slice());
        assert_eq!(coeffs.sums(&model).unwrap().len(), 6);
        assert!(coeffs.details(&model).unwrap().is_empty());
    }

    #[test]
    fn forward_matches_basis_transpose_and_round_trips() {
        let data = random_data(3, 40, 8);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        let mut rng = stream_rng(3, 1);
        let x: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let norm_sq: f64 = x.iter().map(|v| v * v).sum();
        for level in 0..=model.height() {
            let coeffs = model.forward(&x, level).unwrap();
            let b = model.basis(level).unwrap();
            for slot in 0..8 {
                let oracle: f64 = (0..8).map(|i| b[[i, slot]] * x[i]).sum();
                nearly(coeffs.slots()[slot], oracle, 1e-12);
            }
            nearly(coeffs.energy(), norm_sq, 1e-12 * norm_sq);
            let back = model.inverse(&coeffs).unwrap();
            for (a, b) in back.iter().zip(&x) {
                nearly(*a, *b, 1e-10);
            }
            let sums = coeffs.sums(&model).unwrap();
            let details = coeffs.details(&model).unwrap();
            assert_eq!(sums.len() + details.len(), 8);
            assert_eq!(sums.len(), 8 - level);
        }
    }

    #[test]
    fn scaling_vector_maps_to_unit_coefficient() {
        let data = random_data(4, 30, 5);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        let level = model.height();
        let (scaling, _) = model.scaling_detail(level).unwrap();
        let phi = &scaling[0];
        let coeffs = model.forward(&phi.vector, level).unwrap();
        for (slot, &v) in coeffs.slots().iter().enumerate() {
            let want = if slot == phi.slot { 1.0 } else { 0.0 };
            nearly(v, want, 1e-12);
        }
    }

    #[test]
    fn unit_detail_coefficient_reconstructs_the_detail_vector() {
        let data = random_data(5, 30, 5);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        let level = model.height();
        let (_, details) = model.scaling_detail(level).unwrap();
        let psi = &details[0];
        let mut slots = vec![0.0; 5];
        slots[psi.slot] = 1.0;
        let coeffs = Coefficients { level, slots };
        let x = model.inverse(&coeffs).unwrap();
        for (a, b) in x.iter().zip(&psi.vector) {
            nearly(*a, *b, 1e-12);
        }
    }

    #[test]
    fn bases_are_orthonormal_and_nested() {
        let data = random_data(6, 60, 10);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        let mut previous = model.basis(0).unwrap();
        assert_eq!(previous, Array2::<f64>::eye(10));
        for level in 1..=model.height() {
            let b = model.basis(level).unwrap();
            let gram = b.t().dot(&b);
            for i in 0..10 {
                for j in 0..10 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    nearly(gram[[i, j]], want, 1e-10);
                }
            }
            let r = &model.rotations()[level - 1];
            for slot in 0..10 {
                if slot == r.alpha || slot == r.beta {
                    continue;
                }
                for i in 0..10 {
                    assert_eq!(b[[i, slot]], previous[[i, slot]]);
                }
            }
            previous = b;
        }
    }

    #[test]
    fn scaling_supports_partition_the_variables() {
        let data = random_data(7, 50, 9);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        for level in 0..=model.height() {
            let (scaling, details) = model.scaling_detail(level).unwrap();
            assert_eq!(scaling.len(), 9 - level);
            assert_eq!(details.len(), level);
            let mut seen = [false; 9];
            for f in &scaling {
                for &i in &f.support {
                    assert!(!seen[i], "support overlap at level {level}");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "supports must cover all variables");
            for f in &details {
                assert!(f.support.len() >= 2);
                for (i, v) in f.vector.iter().enumerate() {
                    if !f.support.contains(&i) {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn first_merge_scaling_has_two_point_support() {
        let data = random_data(8, 40, 6);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        let (scaling, details) = model.scaling_detail(1).unwrap();
        assert_eq!(details.len(), 1);
        assert_eq!(details[0].support.len(), 2);
        let merged: Vec<_> = scaling.iter().filter(|f| f.support.len() == 2).collect();
        assert_eq!(merged.len(), 1);
        let singletons = scaling.iter().filter(|f| f.support.len() == 1).count();
        assert_eq!(singletons, 4);
    }

    #[test]
    fn sum_variance_matches_quadratic_form() {
        let data = random_data(9, 80, 7);
        let cov = sample_covariance(&data);
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        for level in 1..=model.height() {
            let rotated = model.rotated_covariance(&cov, level).unwrap();
            let (scaling, _) = model.scaling_detail(level).unwrap();
            for f in &scaling {
                let mut quad = 0.0;
                for i in 0..7 {
                    for j in 0..7 {
                        quad += f.vector[i] * cov.values()[[i, j]] * f.vector[j];
                    }
                }
                nearly(rotated.values()[[f.slot, f.slot]], quad, 1e-10);
            }
        }
    }

    #[test]
    fn adaptive_rotation_zeroes_the_merged_entry() {
        let data = random_data(10, 50, 8);
        let cov = sample_covariance(&data);
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        let scale = cov.max_diagonal();
        for r in model.rotations() {
            let rotated = model.rotated_covariance(&cov, r.level).unwrap();
            nearly(rotated.values()[[r.alpha, r.beta]], 0.0, 1e-12 * scale);
        }
    }

    #[test]
    fn replay_reproduces_stored_angles() {
        let data = random_data(11, 60, 9);
        let cov = sample_covariance(&data);
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        let gap = model.max_replay_angle_gap(&cov).unwrap();
        assert!(gap <= 1e-12, "replay gap {gap:e}");
    }

    #[test]
    fn constant_column_is_never_merged() {
        let mut rng = stream_rng(12, 0);
        let mut values = Array2::from_shape_fn((40, 5), |_| rng.sample::<f64, _>(StandardNormal));
        for i in 0..40 {
            values[[i, 2]] = 7.5;
        }
        let data = DataMatrix::new(values).unwrap();
        let model = fit(&data, &EngineConfig::default()).unwrap();
        assert_eq!(model.height(), 3);
        for r in model.rotations() {
            assert_ne!(r.alpha, 2);
            assert_ne!(r.beta, 2);
        }
        assert!(model.active_slots(3).contains(&2));
    }

    #[test]
    fn all_constant_data_is_rejected() {
        let mut values = Array2::zeros((10, 4));
        for i in 0..10 {
            for j in 0..4 {
                values[[i, j]] = (j + 1) as f64;
            }
        }
        let data = DataMatrix::new(values).unwrap();
        let err = fit(&data, &EngineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }

    #[test]
    fn explicit_height_is_validated() {
        let data = random_data(13, 30, 5);
        let cov = sample_covariance(&data);
        for bad in [0usize, 5, 20] {
            let config = EngineConfig {
                height: Height::Level(bad),
                ..EngineConfig::default()
            };
            let err = fit_covariance(&cov, &config).unwrap_err();
            assert!(matches!(err, Error::LevelOutOfRange { .. }));
        }
        let config = EngineConfig {
            height: Height::Level(2),
            ..EngineConfig::default()
        };
        let model = fit_covariance(&cov, &config).unwrap();
        assert_eq!(model.height(), 2);
    }

    #[test]
    fn level_and_dimension_errors_surface() {
        let data = random_data(14, 30, 4);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        assert!(matches!(
            model.forward(&[1.0; 4], 9),
            Err(Error::LevelOutOfRange { .. })
        ));
        assert!(matches!(
            model.forward(&[1.0; 3], 1),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(model.basis(model.height() + 1).is_err());
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let cov = SymMatrix::new(array![[2.0, 1.0], [1.0, 1.0]]).unwrap();
        let model = fit_covariance(&cov, &EngineConfig::default()).unwrap();
        let text = model.to_json().unwrap();
        assert!(text.contains("\"L\":1"));
        assert!(text.contains("\"sum_slot\""));
        let parsed = TreeletModel::from_json(&text).unwrap();
        assert_eq!(parsed, model);
        assert_eq!(parsed.to_json().unwrap(), text);
        assert_eq!(
            parsed.rotations()[0].theta.to_bits(),
            model.rotations()[0].theta.to_bits()
        );
    }

    #[test]
    fn json_validation_rejects_corrupt_models() {
        let data = random_data(15, 30, 4);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        let text = model.to_json().unwrap();
        let wrong_height = text.replacen("\"L\":3", "\"L\":2", 1);
        assert!(matches!(
            TreeletModel::from_json(&wrong_height),
            Err(Error::ModelInvalid(_))
        ));
        let wrong_theta = text.replacen("\"theta\":", "\"theta\":9.0e0", 1);
        let wrong_theta = {
            // Drop the original number that now trails the injected one.
            let start = wrong_theta.find("\"theta\":9.0e0").unwrap() + "\"theta\":9.0e0".len();
            let end = wrong_theta[start..].find(',').unwrap() + start;
            format!("{}{}", &wrong_theta[..start], &wrong_theta[end..])
        };
        assert!(matches!(
            TreeletModel::from_json(&wrong_theta),
            Err(Error::ModelInvalid(_))
        ));
    }

    #[test]
    fn traced_fit_reports_split_timings() {
        let data = random_data(16, 60, 20);
        let cov = sample_covariance(&data);
        let (model, trace) = fit_covariance_traced(&cov, &EngineConfig::default()).unwrap();
        assert_eq!(trace.levels, model.height());
        assert!(trace.total_nanos > 0);
        assert!(trace.selection_nanos + trace.update_nanos <= trace.total_nanos * 11 / 10);
    }

    #[test]
    fn detail_order_tracks_frozen_slots() {
        let data = random_data(17, 50, 6);
        let model = fit(&data, &EngineConfig::default()).unwrap();
        let order = model.detail_order();
        assert_eq!(order.len(), model.height());
        for (k, r) in model.rotations().iter().enumerate() {
            assert_eq!(order[k], r.detail_slot());
            assert!(!model.active_slots(k + 1).contains(&order[k]));
        }
    }
}
