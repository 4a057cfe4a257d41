//! Adversarial head: a 4-layer MLP on per-image averaged features of the
//! fake model, with non-saturating losses.

use super::Result;
use crate::tensor::{Rng, Tensor};
use std::collections::BTreeMap;

pub struct DiscHead {
    pub width: usize,
    weights: BTreeMap<String, Tensor>,
}

impl DiscHead {
    pub fn init(width: usize, rng: &mut Rng) -> DiscHead {
        let mut weights = BTreeMap::new();
        let mut dense = |name: &str, rows: usize, cols: usize, rng: &mut Rng| {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| loop {
                    let z = rng.normal();
                    if z.abs() <= 2.0 {
                        break z * 0.05;
                    }
                })
                .collect();
            weights.insert(
                name.to_string(),
                Tensor::from_vec(data, &[rows, cols]).expect("disc init").requiring_grad(),
            );
        };
        dense("l1.w", width, width, rng);
        dense("l2.w", width, width, rng);
        dense("l3.w", width, width, rng);
        dense("l4.w", width, 1, rng);
        for (name, shape) in [("l1.b", width), ("l2.b", width), ("l3.b", width)] {
            weights.insert(name.to_string(), Tensor::zeros(&[shape]).requiring_grad());
        }
        weights.insert("l4.b".to_string(), Tensor::zeros(&[1]).requiring_grad());
        DiscHead { width, weights }
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn zero_grads(&self) {
        for t in self.weights.values() {
            t.zero_grad();
        }
    }

    /// Logits for `[N, C]` per-image feature means.
    pub fn logits(&self, feat_means: &Tensor) -> Result<Tensor> {
        let w = |n: &str| self.weights.get(n).expect("disc weight");
        let n = feat_means.shape()[0];
        feat_means
            .linear(w("l1.w"), Some(w("l1.b")))?
            .gelu()?
            .linear(w("l2.w"), Some(w("l2.b")))?
            .gelu()?
            .linear(w("l3.w"), Some(w("l3.b")))?
            .gelu()?
            .linear(w("l4.w"), Some(w("l4.b")))?
            .reshape(&[n])
    }
}

pub struct GanLosses {
    /// Discriminator loss over detached-fake and real features.
    pub d_loss: Tensor,
    /// Non-saturating generator loss over live fake features.
    pub g_loss: Tensor,
    /// Fraction of correctly classified inputs at threshold 0.
    pub d_accuracy: f64,
}

/// Non-saturating GAN losses on per-image feature means.
/// `feat_real` and `feat_fake` are `[N, C]`; the discriminator trains to
/// push real logits up and fake logits down, the generator the reverse.
pub fn gan_losses(head: &DiscHead, feat_real: &Tensor, feat_fake: &Tensor) -> Result<GanLosses> {
    let logit_real = head.logits(feat_real)?;
    let logit_fake_d = head.logits(&feat_fake.detach())?;
    // -log sigmoid(r) - log(1 - sigmoid(f)) = softplus(-r) + softplus(f)
    let d_loss = logit_real
        .neg()?
        .softplus()?
        .mean_all()?
        .add(&logit_fake_d.softplus()?.mean_all()?)?;
    let logit_fake_g = head.logits(feat_fake)?;
    let g_loss = logit_fake_g.neg()?.softplus()?.mean_all()?;

    let n = logit_real.numel() as f64;
    let correct_real = logit_real.data().iter().filter(|&&v| v > 0.0).count() as f64;
    let correct_fake = logit_fake_d.data().iter().filter(|&&v| v < 0.0).count() as f64;
    let d_accuracy = (correct_real + correct_fake) / (2.0 * n);
    Ok(GanLosses {
        d_loss,
        g_loss,
        d_accuracy,
    })
}
