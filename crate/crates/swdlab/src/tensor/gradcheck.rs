//! Finite-difference gradient verification.

use super::{backward, Result, Tensor};

const FD_STEP: f64 = 1e-5;

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-4)
}

/// Compares reverse-mode gradients of a scalar-valued `f` at `point` against
/// central finite differences over every coordinate. Returns the max
/// relative error.
pub fn grad_check(f: impl Fn(&Tensor) -> Result<Tensor>, point: &Tensor) -> Result<f64> {
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, &coords)
}

/// Same as [`grad_check`] but probes only the listed coordinates; useful for
/// large parameter tensors where full sweeps are too slow.
pub fn grad_check_coords(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    point: &Tensor,
    coords: &[usize],
) -> Result<f64> {
    let leaf = point.detach().requiring_grad();
    let loss = f(&leaf)?;
    backward(&loss)?;
    let ad = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);

    let base = point.to_vec();
    let mut max_err: f64 = 0.0;
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += FD_STEP;
        let mut minus = base.clone();
        minus[i] -= FD_STEP;
        let fp = f(&Tensor::from_vec(plus, point.shape())?)?.item();
        let fm = f(&Tensor::from_vec(minus, point.shape())?)?.item();
        let fd = (fp - fm) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(ad[i], fd));
    }
    Ok(max_err)
}
