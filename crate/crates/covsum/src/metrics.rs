//! Summary evaluation: frame-overlap F-measure against user summaries and
//! rank correlations (tie-corrected Kendall tau, Spearman rho) against
//! ground-truth importance curves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("ground-truth summary selects no frames")]
    EmptyGroundTruth,
    #[error("{which} input is constant; rank correlation is undefined")]
    ConstantInput { which: &'static str },
    #[error("need at least {need} inputs, got {got}")]
    TooFew { need: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Max,
    Mean,
}

/// Per-video evaluation result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub video_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kendall_tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman_rho: Option<f64>,
    pub aggregation_mode: AggregationMode,
}

/// Precision, recall, and F against one ground-truth mask. Conventions:
/// empty prediction gives P = 0, P + R = 0 gives F = 0, and an empty
/// ground truth is a malformed annotation.
pub fn f_measure(pred: &[bool], gt: &[bool]) -> Result<(f64, f64, f64), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch { a: pred.len(), b: gt.len() });
    }
    let n_gt = gt.iter().filter(|&&v| v).count();
    if n_gt == 0 {
        return Err(MetricError::EmptyGroundTruth);
    }
    let n_pred = pred.iter().filter(|&&v| v).count();
    let overlap = pred.iter().zip(gt).filter(|&(&p, &g)| p && g).count();
    let p = if n_pred == 0 { 0.0 } else { overlap as f64 / n_pred as f64 };
    let r = overlap as f64 / n_gt as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f))
}

/// Aggregate (P, R, F) over several annotators: `Max` reports the
/// annotator with the best F, `Mean` averages componentwise.
pub fn f_measure_multi(
    pred: &[bool],
    gts: &[Vec<bool>],
    mode: AggregationMode,
) -> Result<(f64, f64, f64), MetricError> {
    if gts.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    let scored: Vec<(f64, f64, f64)> = gts.iter().map(|gt| f_measure(pred, gt)).collect::<Result<_, _>>()?;
    Ok(match mode {
        AggregationMode::Max => scored
            .iter()
            .copied()
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .unwrap(),
        AggregationMode::Mean => {
            let n = scored.len() as f64;
            let sum = scored
                .iter()
                .fold((0.0, 0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2));
            (sum.0 / n, sum.1 / n, sum.2 / n)
        }
    })
}

/// Tie-corrected Kendall tau (tau-b) by direct pair counting:
/// (n_c - n_d) / sqrt(#pairs untied in a * #pairs untied in b).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricError::TooFew { need: 2, got: a.len() });
    }
    let n = a.len();
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut a_untied = 0u64;
    let mut b_untied = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da != 0.0 {
                a_untied += 1;
            }
            if db != 0.0 {
                b_untied += 1;
            }
            if da != 0.0 && db != 0.0 {
                if (da > 0.0) == (db > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    if a_untied == 0 {
        return Err(MetricError::ConstantInput { which: "first" });
    }
    if b_untied == 0 {
        return Err(MetricError::ConstantInput { which: "second" });
    }
    Ok((concordant as f64 - discordant as f64) / (a_untied as f64 * b_untied as f64).sqrt())
}

/// Fractional ranks with ties assigned the mean of their positions.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the average rank (1-based)
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spearman rho: Pearson correlation of fractional ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricError::TooFew { need: 2, got: a.len() });
    }
    let ra = fractional_ranks(a);
    let rb = fractional_ranks(b);
    if ra.iter().all(|&r| r == ra[0]) {
        return Err(MetricError::ConstantInput { which: "first" });
    }
    if rb.iter().all(|&r| r == rb[0]) {
        return Err(MetricError::ConstantInput { which: "second" });
    }
    pearson(&ra, &rb).ok_or(MetricError::ConstantInput { which: "first" })
}

/// Leave-one-out agreement: each annotator's scores are correlated against
/// the mean of the others, and the coefficients are averaged.
pub fn human_baseline(annotations: &[Vec<f64>]) -> Result<(f64, f64), MetricError> {
    if annotations.len() < 2 {
        return Err(MetricError::TooFew { need: 2, got: annotations.len() });
    }
    let m = annotations[0].len();
    for ann in annotations {
        if ann.len() != m {
            return Err(MetricError::LengthMismatch { a: m, b: ann.len() });
        }
    }
    let mut tau_sum = 0.0;
    let mut rho_sum = 0.0;
    for (k, held_out) in annotations.iter().enumerate() {
        let mut others = vec![0.0; m];
        for (i, ann) in annotations.iter().enumerate() {
            if i == k {
                continue;
            }
            for (o, v) in others.iter_mut().zip(ann) {
                *o += v;
            }
        }
        let denom = (annotations.len() - 1) as f64;
        for o in &mut others {
            *o /= denom;
        }
        tau_sum += kendall_tau(held_out, &others)?;
        rho_sum += spearman_rho(held_out, &others)?;
    }
    let n = annotations.len() as f64;
    Ok((tau_sum / n, rho_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b != 0).collect()
    }

    #[test]
    fn identical_nonempty_masks_score_one() {
        let gt = mask(&[1, 0, 1, 1]);
        assert_eq!(f_measure(&gt, &gt).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn f_measure_arithmetic_case() {
        // |pred| = 10, |gt| = 20, overlap 5
        let mut pred = vec![false; 40];
        let mut gt = vec![false; 40];
        for i in 0..10 {
            pred[i] = true;
        }
        for i in 5..25 {
            gt[i] = true;
        }
        let (p, r, f) = f_measure(&pred, &gt).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert!((r - 0.25).abs() < 1e-12);
        assert!((f - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let pred = mask(&[1, 1, 0, 0]);
        let gt = mask(&[0, 0, 1, 1]);
        assert_eq!(f_measure(&pred, &gt).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let pred = mask(&[1, 0]);
        assert!(matches!(f_measure(&pred, &[false, false]), Err(MetricError::EmptyGroundTruth)));
    }

    #[test]
    fn empty_prediction_scores_zero_precision() {
        let gt = mask(&[1, 0]);
        assert_eq!(f_measure(&[false, false], &gt).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn multi_annotator_modes() {
        let pred = mask(&[1, 1, 0, 0]);
        let a = mask(&[1, 1, 0, 0]); // F = 1
        let b = mask(&[0, 1, 1, 0]); // P = 0.5, R = 0.5, F = 0.5
        let single_max = f_measure_multi(&pred, std::slice::from_ref(&a), AggregationMode::Max).unwrap();
        let single_mean = f_measure_multi(&pred, std::slice::from_ref(&a), AggregationMode::Mean).unwrap();
        assert_eq!(single_max, single_mean);
        let (_, _, fmax) = f_measure_multi(&pred, &[a.clone(), b.clone()], AggregationMode::Max).unwrap();
        let (_, _, fmean) = f_measure_multi(&pred, &[a, b], AggregationMode::Mean).unwrap();
        assert_eq!(fmax, 1.0);
        assert!((fmean - 0.75).abs() < 1e-12);
    }

    #[test]
    fn f_measure_symmetric_when_sizes_match() {
        let a = mask(&[1, 1, 0, 0, 1]);
        let b = mask(&[1, 0, 1, 0, 1]);
        let (_, _, fab) = f_measure(&a, &b).unwrap();
        let (_, _, fba) = f_measure(&b, &a).unwrap();
        assert_eq!(fab, fba);
    }

    #[test]
    fn kendall_extremes() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), -1.0);
    }

    #[test]
    fn kendall_single_swap() {
        // 5 concordant pairs, 1 discordant
        let tau = kendall_tau(&[1.0, 3.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((tau - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_an_error() {
        assert!(matches!(
            kendall_tau(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(MetricError::ConstantInput { which: "first" })
        ));
        assert!(matches!(
            spearman_rho(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]),
            Err(MetricError::ConstantInput { which: "second" })
        ));
    }

    #[test]
    fn spearman_extremes_and_rank_invariance() {
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), -1.0);
        // rank-identical despite a value gap
        let rho = spearman_rho(&[1.0, 2.0, 3.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(fractional_ranks(&[10.0, 20.0, 20.0, 30.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn human_baseline_identical_annotators() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(human_baseline(&[a.clone(), a]).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn human_baseline_reversed_annotators() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![4.0, 3.0, 2.0, 1.0];
        assert_eq!(human_baseline(&[a, b]).unwrap(), (-1.0, -1.0));
    }

    #[test]
    fn human_baseline_matches_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(41);
        let anns: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..12).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let (tau, rho) = human_baseline(&anns).unwrap();
        let mut tau_want = 0.0;
        let mut rho_want = 0.0;
        for k in 0..3 {
            let others: Vec<f64> = (0..12)
                .map(|j| {
                    let mut s = 0.0;
                    for (i, a) in anns.iter().enumerate() {
                        if i != k {
                            s += a[j];
                        }
                    }
                    s / 2.0
                })
                .collect();
            tau_want += kendall_tau(&anns[k], &others).unwrap();
            rho_want += spearman_rho(&anns[k], &others).unwrap();
        }
        assert!((tau - tau_want / 3.0).abs() < 1e-12);
        assert!((rho - rho_want / 3.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_annotators_is_an_error() {
        assert!(matches!(human_baseline(&[vec![1.0, 2.0]]), Err(MetricError::TooFew { need: 2, got: 1 })));
    }

    proptest! {
        #[test]
        fn correlations_stay_in_range_and_survive_monotone_maps(
            pairs in prop::collection::vec((0.1f64..10.0, 0.1f64..10.0), 4..40)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(a.iter().any(|&v| v != a[0]) && b.iter().any(|&v| v != b[0]));
            let tau = kendall_tau(&a, &b).unwrap();
            let rho = spearman_rho(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&tau));
            prop_assert!((-1.0..=1.0).contains(&rho));
            // strictly increasing transforms leave both unchanged
            let a2: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
            let b3: Vec<f64> = b.iter().map(|v| v * v * v).collect();
            prop_assert!((kendall_tau(&a2, &b).unwrap() - tau).abs() < 1e-9);
            prop_assert!((kendall_tau(&a, &b3).unwrap() - tau).abs() < 1e-9);
            prop_assert!((spearman_rho(&a2, &b3).unwrap() - rho).abs() < 1e-9);
        }
    }
}
