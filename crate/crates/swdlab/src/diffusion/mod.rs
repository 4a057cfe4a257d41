//! Flow-matching process, teacher training, and multi-step sampling.
//!
//! The forward process is the linear interpolation
//! `x_tau = (1 - tau) * x0 + tau * eps`, with `tau = t / 1000` mapping the
//! integer timestep axis onto [0, 1]. Networks regress the velocity
//! `v = eps - x0`, and a clean prediction is always recoverable as
//! `x0_hat = x_tau - tau * v`.

mod data;

pub use data::{gen_dataset, load_dataset, mix_stream, save_dataset, DataKind, DataSpec, Dataset};

use crate::network::DenoiserNet;
use crate::resample::downsample_area;
use crate::tensor::{backward, Adam, NoGrad, Rng, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

/// `x_tau = (1 - tau) * x0 + tau * eps`
pub fn noise_to(x0: &Tensor, tau: f64, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "noise_to",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    x0.scale(1.0 - tau)?.add(&eps.scale(tau)?)
}

/// Per-sample taus variant used in training where every batch element sits
/// at its own noise level.
pub fn noise_to_per_sample(x0: &Tensor, taus: &[f64], eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "noise_to",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let n = x0.shape()[0];
    assert_eq!(taus.len(), n);
    let mut shape = vec![n];
    shape.extend(std::iter::repeat(1).take(x0.shape().len() - 1));
    let tau_t = Tensor::from_vec(taus.to_vec(), &shape)?;
    let keep = Tensor::from_vec(taus.iter().map(|t| 1.0 - t).collect(), &shape)?;
    x0.mul(&keep)?.add(&eps.mul(&tau_t)?)
}

/// `x0_hat = x_t - tau * v`
pub fn x0_from_v(x_t: &Tensor, v: &Tensor, tau: f64) -> Result<Tensor> {
    x_t.sub(&v.scale(tau)?)
}

pub fn x0_from_v_per_sample(x_t: &Tensor, v: &Tensor, taus: &[f64]) -> Result<Tensor> {
    let n = x_t.shape()[0];
    let mut shape = vec![n];
    shape.extend(std::iter::repeat(1).take(x_t.shape().len() - 1));
    let tau_t = Tensor::from_vec(taus.to_vec(), &shape)?;
    x_t.sub(&v.mul(&tau_t)?)
}

/// The regression target of flow matching.
pub fn v_from_pair(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(x0)
}

/// Closed-form optimal velocity when the data law is N(mu, sigma2 * I).
///
/// With s = 1 - tau and V = s^2 sigma2 + tau^2, the posterior means of
/// (x0, eps) given x_tau = x give
/// `v*(x, tau) = (tau - s * sigma2) / V * (x - s * mu) - mu`.
pub fn analytic_gaussian_v(x_t: &Tensor, tau: f64, mu: f64, sigma2: f64) -> Result<Tensor> {
    if sigma2 <= 0.0 {
        return Err(TensorError::InvalidShape {
            op: "analytic_gaussian_v",
            shape: x_t.shape().to_vec(),
            reason: format!("sigma2 {sigma2} must be positive"),
        });
    }
    let s = 1.0 - tau;
    let v = s * s * sigma2 + tau * tau;
    let k = (tau - s * sigma2) / v;
    x_t.add_scalar(-s * mu)?.scale(k)?.add_scalar(-mu)
}

/// Velocity oracle signature used by samplers: (x, tau, per-sample classes).
pub type VelocityFn<'a> = dyn Fn(&Tensor, f64, &[Option<usize>]) -> Result<Tensor> + 'a;

/// Classifier-free-guided velocity of a denoiser net.
/// `w = 1` short-circuits to the conditional velocity exactly.
pub fn guided_velocity(
    net: &DenoiserNet,
    x: &Tensor,
    tau: f64,
    classes: &[Option<usize>],
    w: f64,
) -> Result<Tensor> {
    let taus = vec![tau; x.shape()[0]];
    let (v_cond, _) = net.forward(x, &taus, classes, false)?;
    if w == 1.0 {
        return Ok(v_cond);
    }
    let nulls: Vec<Option<usize>> = vec![None; classes.len()];
    let (v_uncond, _) = net.forward(x, &taus, &nulls, false)?;
    // v_u + w * (v_c - v_u)
    v_uncond.add(&v_cond.sub(&v_uncond)?.scale(w)?)
}

/// Uniform tau grid from `tau_start` down to 0 with `steps` segments.
pub fn euler_grid(tau_start: f64, steps: usize) -> Vec<f64> {
    assert!(steps >= 1);
    (0..=steps)
        .map(|k| tau_start * (1.0 - k as f64 / steps as f64))
        .collect()
}

/// Euler integration of a velocity field along a descending tau grid,
/// starting from `x` at `grid[0]`.
pub fn euler_integrate(
    vfn: &VelocityFn,
    x: &Tensor,
    grid: &[f64],
    classes: &[Option<usize>],
) -> Result<Tensor> {
    let _g = NoGrad::new();
    let mut x = x.detach();
    for k in 0..grid.len() - 1 {
        let v = vfn(&x, grid[k], classes)?;
        x = x.add(&v.scale(grid[k + 1] - grid[k])?)?;
    }
    Ok(x)
}

/// Plain Euler sampling from pure noise with classifier-free guidance.
pub fn euler_sample(
    net: &DenoiserNet,
    steps: usize,
    w: f64,
    classes: &[Option<usize>],
    rng: &mut Rng,
    resolution: (usize, usize, usize),
) -> Result<Tensor> {
    let shape = sample_shape(classes.len(), resolution);
    let noise = Tensor::gaussian(&shape, rng)?;
    let grid = euler_grid(1.0, steps);
    euler_integrate(
        &|x, tau, cls| guided_velocity(net, x, tau, cls, w),
        &noise,
        &grid,
        classes,
    )
}

/// Continues Euler sampling from an intermediate noisy state at `tau_start`,
/// using the part of an `steps`-segment full grid below `tau_start`.
pub fn euler_continue(
    net: &DenoiserNet,
    x_t: &Tensor,
    tau_start: f64,
    steps: usize,
    w: f64,
    classes: &[Option<usize>],
) -> Result<Tensor> {
    let substeps = ((steps as f64 * tau_start).ceil() as usize).max(1);
    let grid = euler_grid(tau_start, substeps);
    euler_integrate(
        &|x, tau, cls| guided_velocity(net, x, tau, cls, w),
        x_t,
        &grid,
        classes,
    )
}

/// Stochastic multistep sampling at a fixed resolution: predict the clean
/// sample, then renoise to the next (lower) tau with fresh noise.
pub fn stochastic_sample(
    net: &DenoiserNet,
    taus: &[f64],
    classes: &[Option<usize>],
    rng: &mut Rng,
    resolution: (usize, usize, usize),
) -> Result<Tensor> {
    let _g = NoGrad::new();
    let shape = sample_shape(classes.len(), resolution);
    let mut x = Tensor::gaussian(&shape, rng)?;
    let mut x0_hat = x.clone();
    for (i, &tau) in taus.iter().enumerate() {
        let tvec = vec![tau; classes.len()];
        let (v, _) = net.forward(&x, &tvec, classes, false)?;
        x0_hat = x0_from_v(&x, &v, tau)?;
        if i + 1 < taus.len() {
            let eps = Tensor::gaussian(&shape, rng)?;
            x = noise_to(&x0_hat, taus[i + 1], &eps)?;
        }
    }
    Ok(x0_hat)
}

pub(crate) fn sample_shape(n: usize, (t, h, w): (usize, usize, usize)) -> Vec<usize> {
    if t == 1 {
        vec![n, h, w]
    } else {
        vec![n, t, h, w]
    }
}

// ── Flow-matching training ──────────────────────────────────────────────

/// Fraction of batch elements trained with the null class so the net can be
/// sampled with classifier-free guidance.
const NULL_CLASS_FRACTION: f64 = 0.1;

/// Draws per-sample (tau, maybe-null class) pairs, then one eps tensor.
/// A fixed draw order keeps training runs reproducible.
fn draw_fm_batch(
    x0: &Tensor,
    classes: &[usize],
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<Option<usize>>, Tensor)> {
    let n = x0.shape()[0];
    let mut taus = Vec::with_capacity(n);
    let mut cls = Vec::with_capacity(n);
    for &c in classes.iter().take(n) {
        taus.push(rng.uniform());
        cls.push(if rng.uniform() < NULL_CLASS_FRACTION {
            None
        } else {
            Some(c)
        });
    }
    let eps = Tensor::gaussian(x0.shape(), rng)?;
    Ok((taus, cls, eps))
}

/// One velocity-regression step; returns the scalar loss.
pub fn fm_train_step(
    net: &mut DenoiserNet,
    opt: &mut Adam,
    x0: &Tensor,
    classes: &[usize],
    rng: &mut Rng,
) -> Result<f64> {
    if x0.shape()[0] == 0 {
        return Err(TensorError::InvalidShape {
            op: "fm_train_step",
            shape: x0.shape().to_vec(),
            reason: "empty batch".into(),
        });
    }
    let (taus, cls, eps) = draw_fm_batch(x0, classes, rng)?;
    let x_t = noise_to_per_sample(x0, &taus, &eps)?;
    let target = v_from_pair(x0, &eps)?;
    let (v_hat, _) = net.forward(&x_t, &taus, &cls, false)?;
    let loss = v_hat.mse(&target)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "fm_train_step" });
    }
    backward(&loss)?;
    opt.step(net.weights_mut())?;
    Ok(value)
}

/// Evaluates the flow-matching loss for a fixed prediction; test oracles use
/// this to pin expected values without a network.
pub fn fm_loss_given(v_hat: &Tensor, x0: &Tensor, eps: &Tensor) -> Result<f64> {
    Ok(v_hat.mse(&v_from_pair(x0, eps)?)?.item())
}

#[derive(Clone, Debug)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Spatial resolutions to train on; each step picks one.
    pub scales: Vec<usize>,
    /// Log the smoothed loss every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            steps: 20_000,
            batch: 64,
            lr: 1e-3,
            scales: vec![32],
            log_every: 500,
        }
    }
}

/// Trains a denoiser on a dataset, drawing a batch and a training scale per
/// step. Returns the per-step loss trace.
pub fn train_teacher(
    net: &mut DenoiserNet,
    cfg: &TeacherTrainConfig,
    data: &Dataset,
    rng: &mut Rng,
    mut on_log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let n = data.len();
    let full = data.resolution();
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let scale = cfg.scales[rng.uniform_usize(cfg.scales.len())];
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.uniform_usize(n)).collect();
        let (x0_full, classes) = data.gather(&idx)?;
        let x0 = if scale == full.1 {
            x0_full
        } else {
            let f = full.1 / scale;
            downsample_area(&x0_full, (1, f, f))?
        };
        let loss = fm_train_step(net, &mut opt, &x0, &classes, rng)?;
        losses.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let window = &losses[losses.len().saturating_sub(cfg.log_every)..];
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            on_log(step + 1, avg);
        }
    }
    Ok(losses)
}
