//! Distribution-matching gradient from "real" (teacher, CFG-guided) and
//! "fake" (online-trained) score models, plus the fake model's own updates.

use super::Result;
use crate::diffusion::{fm_train_step, noise_to_per_sample, x0_from_v_per_sample};
use crate::network::DenoiserNet;
use crate::tensor::{Adam, NoGrad, Rng, Tensor};

/// Tau range for the distribution-matching gradient; the extremes are
/// excluded because both x0 estimates degenerate there.
const DMD_TAU_RANGE: (f64, f64) = (0.02, 0.98);

pub struct DmdOutcome {
    /// Surrogate loss whose gradient w.r.t. the student output equals `g/N`.
    pub surrogate: Tensor,
    /// Mean |g| over the batch, for logging.
    pub grad_scale: f64,
}

/// Core computation over velocity closures so analytic oracles can stand in
/// for the networks: vreal/vfake map (x_t, taus) to velocity predictions.
pub fn dmd_grad_with(
    student_x0: &Tensor,
    rng: &mut Rng,
    vreal: impl FnOnce(&Tensor, &[f64]) -> Result<Tensor>,
    vfake: impl FnOnce(&Tensor, &[f64]) -> Result<Tensor>,
) -> Result<DmdOutcome> {
    let n = student_x0.shape()[0];
    let taus: Vec<f64> = (0..n)
        .map(|_| rng.uniform_range(DMD_TAU_RANGE.0, DMD_TAU_RANGE.1))
        .collect();
    let eps = Tensor::gaussian(student_x0.shape(), rng)?;

    let g = {
        let _nograd = NoGrad::new();
        let sg = student_x0.detach();
        let x_t = noise_to_per_sample(&sg, &taus, &eps)?;
        let x0_real = x0_from_v_per_sample(&x_t, &vreal(&x_t, &taus)?, &taus)?;
        let x0_fake = x0_from_v_per_sample(&x_t, &vfake(&x_t, &taus)?, &taus)?;
        // per-sample normalizer: mean |x0_real - student_x0|
        let mut bshape = vec![n];
        bshape.extend(std::iter::repeat(1).take(sg.shape().len() - 1));
        let reduce_axes: Vec<usize> = (1..sg.shape().len()).collect();
        let diff = x0_real.sub(&sg)?;
        let absdiff = diff.square()?.add_scalar(1e-24)?; // |.| via sqrt of squares
        let absdiff = Tensor::from_vec(
            absdiff.data().iter().map(|v| v.sqrt()).collect(),
            absdiff.shape(),
        )?;
        let norm = absdiff
            .mean_axes(&reduce_axes, false)?
            .add_scalar(1e-8)?
            .reshape(&bshape)?;
        x0_fake.sub(&x0_real)?.div(&norm)?
    };

    let grad_scale = g.data().iter().map(|v| v.abs()).sum::<f64>() / g.numel() as f64;
    // 0.5/N * sum (x - (x - g))^2 has gradient g/N at the current point
    let target = student_x0.detach().sub(&g)?.detach();
    let surrogate = student_x0
        .sub(&target)?
        .square()?
        .sum_all()?
        .scale(0.5 / n as f64)?;
    Ok(DmdOutcome {
        surrogate,
        grad_scale,
    })
}

/// Network-backed distribution matching gradient. The real score uses
/// classifier-free guidance at scale `w`; the fake score is conditional.
pub fn dmd_grad(
    student_x0: &Tensor,
    classes: &[Option<usize>],
    teacher: &DenoiserNet,
    fake_net: &DenoiserNet,
    w: f64,
    rng: &mut Rng,
) -> Result<DmdOutcome> {
    dmd_grad_with(
        student_x0,
        rng,
        |x_t, taus| {
            let (v_cond, _) = teacher.forward(x_t, taus, classes, false)?;
            if w == 1.0 {
                return Ok(v_cond);
            }
            let nulls = vec![None; classes.len()];
            let (v_uncond, _) = teacher.forward(x_t, taus, &nulls, false)?;
            v_uncond.add(&v_cond.sub(&v_uncond)?.scale(w)?)
        },
        |x_t, taus| {
            let (v, _) = fake_net.forward(x_t, taus, classes, false)?;
            Ok(v)
        },
    )
}

/// One regression step of the fake model on detached student outputs.
pub fn fake_train_step(
    fake_net: &mut DenoiserNet,
    opt: &mut Adam,
    student_samples: &Tensor,
    classes: &[usize],
    rng: &mut Rng,
) -> Result<f64> {
    fm_train_step(fake_net, opt, &student_samples.detach(), classes, rng)
}
