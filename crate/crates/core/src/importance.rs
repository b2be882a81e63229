//! Per-site importance scores from changes in the normalized Frobenius norm
//! of the transformation matrix `D = L + U`.
//!
//! Evaluation touches only `L` and `U`, never `A`, `B`, or `W0`, so its cost
//! is O(r^2) per site independent of the host dimensions. The instrumented
//! flop counter exists to make that claim checkable.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterState, NormRecord, SiteId};

/// Normalization applied to the Frobenius norm before differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// Divide by the rank (the main-experiment default).
    ByRank,
    /// Divide by the square root of the rank.
    BySqrtRank,
    /// Use the raw norm.
    None,
}

impl NormVariant {
    pub fn apply(&self, raw_norm: f64, rank: usize) -> f64 {
        match self {
            NormVariant::ByRank => raw_norm / rank as f64,
            NormVariant::BySqrtRank => raw_norm / (rank as f64).sqrt(),
            NormVariant::None => raw_norm,
        }
    }
}

/// Counts floating-point operations performed by instrumented routines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub flops: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        OpCounter::default()
    }
}

/// Raw Frobenius norm of `L + U`, counting one add, one multiply and one
/// accumulate per feasible entry pair plus the final sqrt.
fn raw_transform_norm(state: &AdapterState, counter: &mut OpCounter) -> f64 {
    let r = state.rank();
    let mut sumsq = 0.0;
    for i in 0..r {
        for j in 0..r {
            let v = state.l().get(i, j) + state.u().get(i, j);
            sumsq += v * v;
            counter.flops += 3;
        }
    }
    counter.flops += 1;
    sumsq.sqrt()
}

/// Normalized norm of `D = L + U` per the chosen variant. O(r^2); does not
/// look at `A`, `B`, or `W0`.
pub fn normalized_norm(state: &AdapterState, variant: NormVariant) -> f64 {
    let mut counter = OpCounter::new();
    normalized_norm_counted(state, variant, &mut counter)
}

/// Instrumented variant of [`normalized_norm`].
pub fn normalized_norm_counted(
    state: &AdapterState,
    variant: NormVariant,
    counter: &mut OpCounter,
) -> f64 {
    let raw = raw_transform_norm(state, counter);
    if !matches!(variant, NormVariant::None) {
        counter.flops += 1;
    }
    variant.apply(raw, state.rank())
}

/// One evaluated score: normalized norm at step `t` and its change since the
/// previous evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSnapshot {
    pub t: usize,
    pub site: SiteId,
    /// Normalized norm at this evaluation.
    pub norm: f64,
    /// Change since the previous evaluation (zero for the registration row).
    pub score: f64,
}

/// Evaluation-time score tracking. The per-site previous record lives in the
/// adapter's `norm_record` (seeded at initialization, serialized with
/// checkpoints); the board accumulates the snapshot stream and the latest
/// scores for selection.
#[derive(Debug, Clone, Default)]
pub struct ScoreBoard {
    snapshots: Vec<ScoreSnapshot>,
    latest: Vec<(SiteId, f64)>,
}

impl ScoreBoard {
    pub fn new() -> Self {
        ScoreBoard::default()
    }

    /// Registers a site at the start of a run, logging its baseline norm so
    /// the snapshot chain is self-contained from t = 0.
    pub fn register(&mut self, state: &AdapterState, variant: NormVariant) {
        let rec = state.norm_record();
        self.snapshots.push(ScoreSnapshot {
            t: 0,
            site: state.site_id(),
            norm: variant.apply(rec.prev_norm, rec.prev_rank),
            score: 0.0,
        });
    }

    /// Scores one site: `S = norm_now - norm_prev` with both terms
    /// normalized under `variant` at their own ranks. The current raw norm
    /// becomes the site's previous record for the next evaluation.
    pub fn score(
        &mut self,
        t: usize,
        state: &mut AdapterState,
        variant: NormVariant,
        counter: &mut OpCounter,
    ) -> f64 {
        let prev = state.norm_record();
        let now_raw = raw_transform_norm(state, counter);
        let now = variant.apply(now_raw, state.rank());
        if !matches!(variant, NormVariant::None) {
            counter.flops += 1;
        }
        let score = now - variant.apply(prev.prev_norm, prev.prev_rank);
        state.set_norm_record(NormRecord {
            prev_norm: now_raw,
            prev_rank: state.rank(),
        });
        self.snapshots.push(ScoreSnapshot {
            t,
            site: state.site_id(),
            norm: now,
            score,
        });
        score
    }

    /// Scores every site in order and replaces the latest-score table.
    pub fn evaluate<'a>(
        &mut self,
        t: usize,
        sites: impl IntoIterator<Item = &'a mut AdapterState>,
        variant: NormVariant,
        counter: &mut OpCounter,
    ) -> Vec<(SiteId, f64)> {
        let mut scores = Vec::new();
        for state in sites {
            let s = self.score(t, state, variant, counter);
            scores.push((state.site_id(), s));
        }
        self.latest = scores.clone();
        scores
    }

    pub fn latest(&self) -> &[(SiteId, f64)] {
        &self.latest
    }

    pub fn snapshots(&self) -> &[ScoreSnapshot] {
        &self.snapshots
    }

    pub fn into_snapshots(self) -> Vec<ScoreSnapshot> {
        self.snapshots
    }
}
