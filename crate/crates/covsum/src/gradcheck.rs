//! End-to-end finite-difference verification: the analytic gradient of the
//! full training loss against central differences, over randomly sampled
//! parameter coordinates of a toy-sized model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::kts::ShotBoundaries;
use crate::model::{self, BatchVideo, ModelConfig, ModelError, ModelParams};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub supervised: bool,
}

/// The toy batch used throughout: 2 videos x 2 shots x 3 frames.
fn toy_batch(d_f: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>, ShotBoundaries) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(6, d_f, |_, _| rng.gen_range(-1.0..1.0)).expect("finite"))
        .collect();
    let gt: Vec<Tensor> = (0..2)
        .map(|_| Tensor::column((0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("finite"))
        .collect();
    let bounds = ShotBoundaries::new(vec![0, 3, 6]).expect("valid cuts");
    (features, gt, bounds)
}

#[allow(clippy::too_many_arguments)]
fn batch_total(
    params: &ModelParams,
    features: &[Tensor],
    gt: &[Tensor],
    bounds: &ShotBoundaries,
    supervised: bool,
    alpha: f64,
    beta: f64,
    epsilon: f64,
) -> Result<(Tape, crate::autodiff::TensorId, Vec<crate::autodiff::TensorId>), ModelError> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let flat = ids.flat();
    let batch: Vec<BatchVideo> = features
        .iter()
        .zip(gt)
        .map(|(f, g)| BatchVideo { features: f, boundaries: bounds, gt_scores: Some(g) })
        .collect();
    let loss = model::batch_loss(&mut tape, &ids, &batch, alpha, beta, epsilon, supervised)?;
    Ok((tape, loss.total, flat))
}

/// Check `n_coords` randomly chosen parameter coordinates with central
/// differences of step `h`. The relative error of coordinate k is
/// |analytic - fd| / max(|analytic|, |fd|, 1e-8).
pub fn finite_difference_check(
    config: &ModelConfig,
    supervised: bool,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let (alpha, beta, epsilon) = (0.01, 0.1, 0.5);
    let params = ModelParams::init(config.clone(), seed)?;
    let (features, gt, bounds) = toy_batch(config.d_f, seed.wrapping_add(1));

    let (mut tape, total, flat) = batch_total(&params, &features, &gt, &bounds, supervised, alpha, beta, epsilon)?;
    tape.backward(total)?;
    let grads: Vec<Vec<f64>> = flat.iter().map(|&id| tape.grad_or_zeros(id)).collect();

    let named = params.named();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..n_coords {
        let t = rng.gen_range(0..named.len());
        let k = rng.gen_range(0..named[t].1.numel());
        let mut perturbed = params.clone();
        let eval = |p: &ModelParams| -> Result<f64, ModelError> {
            let (tape, total, _) = batch_total(p, &features, &gt, &bounds, supervised, alpha, beta, epsilon)?;
            Ok(tape.data(total)[0])
        };
        let original = named[t].1.data()[k];
        perturbed.named_mut()[t].1.data_mut()[k] = original + h;
        let plus = eval(&perturbed)?;
        perturbed.named_mut()[t].1.data_mut()[k] = original - h;
        let minus = eval(&perturbed)?;
        let fd = (plus - minus) / (2.0 * h);
        let analytic = grads[t][k];
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
        }
    }
    Ok(GradCheckReport { max_rel_err, coords_checked: n_coords, supervised })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            d_f: 8,
            d_s: 6,
            d_v: 6,
            f_layers: 1,
            f_heads: 2,
            f_ff: 12,
            s_layers: 1,
            s_heads: 2,
            s_ff: 10,
        }
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        for supervised in [true, false] {
            let report = finite_difference_check(&toy_config(), supervised, 40, 1e-5, 11).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "supervised={supervised}: max relative error {}",
                report.max_rel_err
            );
        }
    }
}
