//! Budgeted key-shot summaries: 0/1 knapsack over shots with frame-count
//! weights, then a frame-level binary selection mask.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kts::ShotBoundaries;

#[derive(Debug, Error)]
pub enum SummaryError {
    #[error("knapsack: {values} values for {weights} weights")]
    LengthMismatch { values: usize, weights: usize },
    #[error("knapsack: item {index} has zero weight; weights must be positive frame counts")]
    ZeroWeight { index: usize },
    #[error("summary: gamma must be in (0, 1], got {0}")]
    BadGamma(f64),
    #[error("summary: {scores} frame scores for {frames} frames")]
    ScoreLength { scores: usize, frames: usize },
}

/// How a shot's knapsack value is derived from its frame scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// Mean frame score; duration enters only through the weight.
    Mean,
    /// Summed frame scores (value grows with shot length).
    Sum,
}

/// Frame-level binary selection with the shots that produced it.
/// `y` is constant within each shot and `sum(y) <= floor(gamma * M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryMask {
    pub y: Vec<bool>,
    pub selected_shots: Vec<usize>,
    pub gamma: f64,
}

impl SummaryMask {
    pub fn selected_frames(&self) -> usize {
        self.y.iter().filter(|&&v| v).count()
    }

    /// Run-length encoding of the true runs as (start, len) pairs.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.y.len() {
            if self.y[i] {
                let start = i;
                while i < self.y.len() && self.y[i] {
                    i += 1;
                }
                out.push((start, i - start));
            } else {
                i += 1;
            }
        }
        out
    }

    pub fn from_runs(len: usize, runs: &[(usize, usize)], gamma: f64, selected_shots: Vec<usize>) -> Self {
        let mut y = vec![false; len];
        for &(start, run) in runs {
            for v in y.iter_mut().skip(start).take(run) {
                *v = true;
            }
        }
        SummaryMask { y, selected_shots, gamma }
    }
}

#[derive(Clone, Debug)]
struct Pick {
    value: f64,
    weight: usize,
    items: Vec<usize>,
}

/// `a` better than `b`: higher value, then lower total weight, then
/// lexicographically smaller index set.
fn better(a: &Pick, b: &Pick) -> bool {
    if a.value != b.value {
        return a.value > b.value;
    }
    if a.weight != b.weight {
        return a.weight < b.weight;
    }
    a.items < b.items
}

/// Maximize total value subject to total weight <= capacity. Ties prefer
/// smaller total weight, then the lexicographically smallest index set.
/// Values may be negative; such items are simply never worth taking.
pub fn knapsack_select(values: &[f64], weights: &[usize], capacity: usize) -> Result<Vec<usize>, SummaryError> {
    if values.len() != weights.len() {
        return Err(SummaryError::LengthMismatch { values: values.len(), weights: weights.len() });
    }
    if let Some(index) = weights.iter().position(|&w| w == 0) {
        return Err(SummaryError::ZeroWeight { index });
    }
    let n = values.len();
    // best[c] = best pick from the current item suffix with capacity c
    let mut best: Vec<Pick> = (0..=capacity).map(|_| Pick { value: 0.0, weight: 0, items: Vec::new() }).collect();
    for i in (0..n).rev() {
        let mut next: Vec<Pick> = Vec::with_capacity(capacity + 1);
        for c in 0..=capacity {
            let skip = best[c].clone();
            let chosen = if weights[i] <= c {
                let rest = &best[c - weights[i]];
                let mut items = Vec::with_capacity(rest.items.len() + 1);
                items.push(i);
                items.extend_from_slice(&rest.items);
                let take = Pick { value: values[i] + rest.value, weight: weights[i] + rest.weight, items };
                if better(&take, &skip) {
                    take
                } else {
                    skip
                }
            } else {
                skip
            };
            next.push(chosen);
        }
        best = next;
    }
    Ok(best[capacity].items.clone())
}

/// Shot-level summary under the budget `floor(gamma * M)` frames: shot
/// value from `mode`, shot weight = frame count, selection by knapsack.
pub fn generate_summary(
    frame_scores: &[f64],
    boundaries: &ShotBoundaries,
    gamma: f64,
    mode: ValueMode,
) -> Result<SummaryMask, SummaryError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(SummaryError::BadGamma(gamma));
    }
    let m = boundaries.num_frames();
    if frame_scores.len() != m {
        return Err(SummaryError::ScoreLength { scores: frame_scores.len(), frames: m });
    }
    let p = boundaries.num_shots();
    let mut values = Vec::with_capacity(p);
    let mut weights = Vec::with_capacity(p);
    for i in 0..p {
        let (start, end) = boundaries.shot_range(i);
        let sum: f64 = frame_scores[start..end].iter().sum();
        values.push(match mode {
            ValueMode::Mean => sum / (end - start) as f64,
            ValueMode::Sum => sum,
        });
        weights.push(end - start);
    }
    let capacity = (gamma * m as f64).floor() as usize;
    let selected_shots = knapsack_select(&values, &weights, capacity)?;
    let mut y = vec![false; m];
    for &i in &selected_shots {
        let (start, end) = boundaries.shot_range(i);
        for v in y.iter_mut().take(end).skip(start) {
            *v = true;
        }
    }
    Ok(SummaryMask { y, selected_shots, gamma })
}
