//! Teacher-feature extraction for distribution matching: noise the samples
//! inside a low-to-mid interval, run the teacher, keep the middle block.

use super::Result;
use crate::diffusion::noise_to_per_sample;
use crate::network::{DenoiserNet, FeatureMap};
use crate::tensor::{NoGrad, Rng, Tensor};

/// Noise assignment shared between the real and fake sample occupying the
/// same batch slot: one tau and one eps per slot, applied to both branches,
/// so their feature difference reflects content, not noise draw.
pub struct FeatureDraws {
    pub taus: Vec<f64>,
    pub eps: Tensor,
}

pub fn draw_feature_noise(
    shape: &[usize],
    interval: (f64, f64),
    skip_noising: bool,
    rng: &mut Rng,
) -> Result<FeatureDraws> {
    let n = shape[0];
    if skip_noising {
        return Ok(FeatureDraws {
            taus: vec![0.0; n],
            eps: Tensor::zeros(shape),
        });
    }
    let taus: Vec<f64> = (0..n).map(|_| rng.uniform_range(interval.0, interval.1)).collect();
    let eps = Tensor::gaussian(shape, rng)?;
    Ok(FeatureDraws { taus, eps })
}

/// Middle-block tokens of the extractor net for (possibly noised) samples.
/// With `keep_grad` the graph flows from the returned features back into
/// `samples`; otherwise the whole pass runs detached.
pub fn feature_pipeline(
    extractor: &DenoiserNet,
    samples: &Tensor,
    classes: &[Option<usize>],
    draws: &FeatureDraws,
    keep_grad: bool,
) -> Result<FeatureMap> {
    let guard = if keep_grad { None } else { Some(NoGrad::new()) };
    let x_t = noise_to_per_sample(samples, &draws.taus, &draws.eps)?;
    let (_, features) = extractor.forward(&x_t, &draws.taus, classes, true)?;
    drop(guard);
    Ok(features.expect("forward with want_features returns features"))
}
