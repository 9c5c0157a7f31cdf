//! Importance scoring and row/column selection strategies.
//!
//! Scores follow the Wanda recipe: weight magnitude times the l2 norm of the
//! matching input-activation column, aggregated into per-row and per-column
//! totals. Selection never mutates the model; chosen indices feed restricted
//! fine-tuning through its explicit-index parameter.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::peft::{self, Axis, RocoftIndices, TrainablePlan};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

/// Wanda importance scores for one weight matrix.
#[derive(Debug, Clone)]
pub struct ImportanceScore {
    /// Same shape as the scored matrix, entrywise nonnegative.
    pub s: Tensor,
    /// Row totals, length `d_out`.
    pub row_scores: Vec<f64>,
    /// Column totals, length `d_in`.
    pub col_scores: Vec<f64>,
}

/// `S[i][j] = |W[i][j]| * ||X[:,j]||_2` with X the `s x d_in` activations
/// the matrix saw.
pub fn wanda_scores(w: &Tensor, x: &Tensor) -> Result<ImportanceScore> {
    if w.rank() != 2 || x.rank() != 2 {
        return Err(Error::Contract("wanda_scores needs matrices".into()));
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let (s_rows, x_cols) = (x.shape()[0], x.shape()[1]);
    if x_cols != d_in || s_rows == 0 {
        return Err(Error::ShapeMismatch {
            left: w.shape().to_vec(),
            right: x.shape().to_vec(),
            op: "wanda_scores",
        });
    }
    let mut col_norms = vec![0.0; d_in];
    for row in x.data().chunks(d_in) {
        for (j, &v) in row.iter().enumerate() {
            col_norms[j] += v * v;
        }
    }
    for n in &mut col_norms {
        *n = n.sqrt();
    }
    let mut s = vec![0.0; d_out * d_in];
    let mut row_scores = vec![0.0; d_out];
    let mut col_scores = vec![0.0; d_in];
    for i in 0..d_out {
        for j in 0..d_in {
            let v = w.data()[i * d_in + j].abs() * col_norms[j];
            s[i * d_in + j] = v;
            row_scores[i] += v;
            col_scores[j] += v;
        }
    }
    Ok(ImportanceScore { s: Tensor::new(vec![d_out, d_in], s)?, row_scores, col_scores })
}

/// Selection strategy over a score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Max,
    Min,
    Mixed,
    Random,
}

impl Strategy {
    pub fn all() -> [Strategy; 4] {
        [Strategy::Max, Strategy::Min, Strategy::Mixed, Strategy::Random]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Max => "max",
            Strategy::Min => "min",
            Strategy::Mixed => "mixed",
            Strategy::Random => "random",
        }
    }
}

/// Indices ordered by descending score; equal scores order by ascending
/// index so two runs always agree.
fn ranked_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b))
    });
    order
}

/// Pick `r` distinct indices by strategy; the result is sorted ascending.
/// Mixed takes the ceil(r/2) best and floor(r/2) worst, backfilling from the
/// best side if the two halves overlap.
pub fn select(scores: &[f64], r: usize, strategy: Strategy, seed: u64) -> Result<Vec<usize>> {
    let n = scores.len();
    if r == 0 || r > n {
        return Err(Error::Range(format!("r = {r} outside [1, {n}]")));
    }
    let desc = ranked_desc(scores);
    let mut chosen: Vec<usize> = match strategy {
        Strategy::Max => desc[..r].to_vec(),
        Strategy::Min => desc[n - r..].to_vec(),
        Strategy::Mixed => {
            let from_max = r.div_ceil(2);
            let from_min = r / 2;
            let mut out: Vec<usize> = desc[..from_max].to_vec();
            for &idx in desc[n - from_min..].iter() {
                if !out.contains(&idx) {
                    out.push(idx);
                }
            }
            // backfill from the max side when halves overlapped
            let mut cursor = from_max;
            while out.len() < r && cursor < n {
                if !out.contains(&desc[cursor]) {
                    out.push(desc[cursor]);
                }
                cursor += 1;
            }
            out
        }
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool: Vec<usize> = (0..n).collect();
            pool.shuffle(&mut rng);
            pool.truncate(r);
            pool
        }
    };
    chosen.sort_unstable();
    debug_assert_eq!(chosen.len(), r);
    Ok(chosen)
}

/// Score every target on one calibration batch and select `rank` rows or
/// columns per target, returning the per-target indices ready for plan
/// construction.
pub fn select_for_targets(
    model: &Model,
    targets: &[String],
    batch: &[Vec<u32>],
    rank: usize,
    axis: Axis,
    strategy: Strategy,
    seed: u64,
) -> Result<RocoftIndices> {
    if batch.is_empty() {
        return Err(Error::Data("calibration batch is empty".into()));
    }
    let captures = model.capture_inputs(targets, batch)?;
    let mut per_target = BTreeMap::new();
    for (name, x) in &captures {
        let w = model.param(name)?;
        let scores = wanda_scores(w, x)?;
        let vector = match axis {
            Axis::Row => &scores.row_scores,
            Axis::Column => &scores.col_scores,
        };
        per_target.insert(name.clone(), select(vector, rank, strategy, seed)?);
    }
    Ok(RocoftIndices::PerTarget(per_target))
}

/// A restricted fine-tuning plan whose rows/columns come from scored
/// selection on a calibration batch.
#[allow(clippy::too_many_arguments)]
pub fn rocoft_plan_with_strategy(
    model: &Model,
    targets: &[String],
    batch: &[Vec<u32>],
    rank: usize,
    axis: Axis,
    strategy: Strategy,
    seed: u64,
    train_bias: bool,
) -> Result<TrainablePlan> {
    let indices = select_for_targets(model, targets, batch, rank, axis, strategy, seed)?;
    peft::apply_rocoft(&model.schema(), rank, axis, targets, Some(&indices), train_bias)
}

/// Dump per-index scores as CSV: `target,index,axis,score`.
pub fn write_scores_csv(
    out: &mut dyn Write,
    scores: &BTreeMap<String, ImportanceScore>,
) -> Result<()> {
    writeln!(out, "target,index,axis,score")?;
    for (name, s) in scores {
        for (i, v) in s.row_scores.iter().enumerate() {
            writeln!(out, "{name},{i},row,{v}")?;
        }
        for (j, v) in s.col_scores.iter().enumerate() {
            writeln!(out, "{name},{j},column,{v}")?;
        }
    }
    Ok(())
}
