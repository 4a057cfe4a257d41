//! Resolution-change operators and the noisy-upsampling strategy experiment.
//!
//! Downsampling is area (block-mean) pooling: alias-safe and exactly
//! mean-preserving. Upsampling is separable Catmull-Rom bicubic with clamped
//! edges for spatial axes, and two-frame linear blending for time. Both
//! directions are linear maps, so they participate in autodiff with their
//! adjoints as backward passes.

use crate::diffusion::noise_to;
use crate::tensor::{Rng, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

mod experiment;
pub use experiment::{run_strategy_experiment, StrategyCell, StrategyExperimentConfig};

/// (t, h, w) geometry of the trailing sample axes; leading axes are batch.
fn trailing_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape.len() {
        2 => Ok((1, 1, shape[0], shape[1])),
        3 => Ok((shape[0], 1, shape[1], shape[2])),
        4 => Ok((shape[0], shape[1], shape[2], shape[3])),
        _ => Err(TensorError::InvalidShape {
            op: "resample",
            shape: shape.to_vec(),
            reason: "expects rank 2, 3, or 4".into(),
        }),
    }
}

fn rebuild_shape(orig: &[usize], t: usize, h: usize, w: usize) -> Vec<usize> {
    match orig.len() {
        2 => vec![h, w],
        3 => vec![orig[0], h, w],
        _ => vec![orig[0], t, h, w],
    }
}

/// Block-mean pooling by integer factors per (t, h, w) axis.
/// Preserves the global mean exactly.
pub fn downsample_area(x: &Tensor, (ft, fh, fw): (usize, usize, usize)) -> Result<Tensor> {
    let (n, t, h, w) = trailing_dims(x.shape())?;
    if ft == 0 || fh == 0 || fw == 0 || t % ft != 0 || h % fh != 0 || w % fw != 0 {
        return Err(TensorError::InvalidShape {
            op: "downsample_area",
            shape: x.shape().to_vec(),
            reason: format!("factors ({ft},{fh},{fw}) do not divide ({t},{h},{w})"),
        });
    }
    let (ot, oh, ow) = (t / ft, h / fh, w / fw);
    let block = (ft * fh * fw) as f64;
    let mut out = vec![0.0; n * ot * oh * ow];
    let src = x.data();
    for b in 0..n {
        for tt in 0..ot {
            for hh in 0..oh {
                for ww in 0..ow {
                    let mut acc = 0.0;
                    for dt in 0..ft {
                        for dh in 0..fh {
                            for dw in 0..fw {
                                let si = ((b * t + tt * ft + dt) * h + hh * fh + dh) * w
                                    + ww * fw
                                    + dw;
                                acc += src[si];
                            }
                        }
                    }
                    out[((b * ot + tt) * oh + hh) * ow + ww] = acc / block;
                }
            }
        }
    }
    let out_shape = rebuild_shape(x.shape(), ot, oh, ow);
    let in_shape = x.shape().to_vec();
    Tensor::from_op(
        "downsample_area",
        out_shape,
        out,
        vec![x.clone()],
        Box::new(move |up, _| {
            let mut g = vec![0.0; in_shape.iter().product()];
            for b in 0..n {
                for tt in 0..ot {
                    for hh in 0..oh {
                        for ww in 0..ow {
                            let gv = up[((b * ot + tt) * oh + hh) * ow + ww] / block;
                            for dt in 0..ft {
                                for dh in 0..fh {
                                    for dw in 0..fw {
                                        let si = ((b * t + tt * ft + dt) * h + hh * fh + dh) * w
                                            + ww * fw
                                            + dw;
                                        g[si] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![g]
        }),
    )
}

/// Precomputed interpolation taps for one axis: per output index, a base
/// input index and weights over consecutive clamped positions.
struct AxisTaps {
    n_in: usize,
    n_out: usize,
    /// (clamped input indices, weights) per output position.
    taps: Vec<(Vec<usize>, Vec<f64>)>,
}

fn catmull_rom_taps(n_in: usize, n_out: usize) -> AxisTaps {
    let scale = n_in as f64 / n_out as f64;
    let taps = (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let f = src - i0;
            let i0 = i0 as i64;
            // Catmull-Rom weights (a = -0.5) over i0-1 .. i0+2
            let w0 = 0.5 * (-f * f * f + 2.0 * f * f - f);
            let w1 = 0.5 * (3.0 * f * f * f - 5.0 * f * f + 2.0);
            let w2 = 0.5 * (-3.0 * f * f * f + 4.0 * f * f + f);
            let w3 = 0.5 * (f * f * f - f * f);
            let idx: Vec<usize> = (-1..=2)
                .map(|d| (i0 + d).clamp(0, n_in as i64 - 1) as usize)
                .collect();
            (idx, vec![w0, w1, w2, w3])
        })
        .collect();
    AxisTaps { n_in, n_out, taps }
}

fn linear_time_taps(n_in: usize, n_out: usize) -> AxisTaps {
    let taps = (0..n_out)
        .map(|o| {
            // align-corners mapping so n_out == n_in is the identity and a
            // static video stays static
            let src = if n_out == 1 {
                0.0
            } else {
                o as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
            };
            let i0 = src.floor().min(n_in as f64 - 1.0) as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let f = src - i0 as f64;
            (vec![i0, i1], vec![1.0 - f, f])
        })
        .collect();
    AxisTaps { n_in, n_out, taps }
}

/// Applies taps along the middle axis of an (outer, axis, inner) view.
/// Linear, so the backward pass is the adjoint scatter.
fn resize_axis(op: &'static str, x: &Tensor, axis: usize, taps: AxisTaps) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    debug_assert_eq!(shape[axis], taps.n_in);
    if taps.n_in == taps.n_out {
        // exact identity; keep bitwise equality with the untouched tensor
        return x.reshape(&shape);
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (n_in, n_out) = (taps.n_in, taps.n_out);
    let mut out = vec![0.0; outer * n_out * inner];
    let src = x.data();
    for b in 0..outer {
        for (o, (idx, wts)) in taps.taps.iter().enumerate() {
            for i in 0..inner {
                let mut acc = 0.0;
                for (ii, wt) in idx.iter().zip(wts) {
                    acc += wt * src[(b * n_in + ii) * inner + i];
                }
                out[(b * n_out + o) * inner + i] = acc;
            }
        }
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = n_out;
    Tensor::from_op(
        op,
        out_shape,
        out,
        vec![x.clone()],
        Box::new(move |up, _| {
            let mut g = vec![0.0; outer * n_in * inner];
            for b in 0..outer {
                for (o, (idx, wts)) in taps.taps.iter().enumerate() {
                    for i in 0..inner {
                        let gv = up[(b * n_out + o) * inner + i];
                        for (ii, wt) in idx.iter().zip(wts) {
                            g[(b * n_in + ii) * inner + i] += wt * gv;
                        }
                    }
                }
            }
            vec![g]
        }),
    )
}

fn area_taps(n_in: usize, n_out: usize) -> AxisTaps {
    debug_assert!(n_out <= n_in);
    let scale = n_in as f64 / n_out as f64;
    let taps = (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in) - 1;
            let mut idx = Vec::with_capacity(last - first + 1);
            let mut wts = Vec::with_capacity(last - first + 1);
            for i in first..=last {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    idx.push(i);
                    wts.push(overlap / scale);
                }
            }
            (idx, wts)
        })
        .collect();
    AxisTaps { n_in, n_out, taps }
}

/// Area downscale to an arbitrary `(t, h, w)` target, fractional box
/// overlap per output cell. Equals block-mean pooling whenever the ratio is
/// an integer, and preserves the global mean exactly either way. The scale
/// schedules need this generality: 128 -> 96 is a 4/3 ratio.
pub fn resize_area(x: &Tensor, target: (usize, usize, usize)) -> Result<Tensor> {
    let (_, t, h, w) = trailing_dims(x.shape())?;
    let (tt, th, tw) = target;
    if tt > t || th > h || tw > w {
        return Err(TensorError::InvalidShape {
            op: "resize_area",
            shape: x.shape().to_vec(),
            reason: format!("target {target:?} exceeds source ({t},{h},{w})"),
        });
    }
    let rank = x.shape().len();
    let mut out = x.clone();
    if tw != w {
        out = resize_axis("resize_area", &out, rank - 1, area_taps(w, tw))?;
    }
    if th != h {
        out = resize_axis("resize_area", &out, rank - 2, area_taps(h, th))?;
    }
    if tt != t {
        if rank < 3 {
            return Err(TensorError::InvalidShape {
                op: "resize_area",
                shape: x.shape().to_vec(),
                reason: "no time axis to resize".into(),
            });
        }
        out = resize_axis("resize_area", &out, rank - 3, area_taps(t, tt))?;
    }
    Ok(out)
}

/// Separable bicubic resize of the spatial axes to `(target_h, target_w)`.
/// Upsampling only; the scale schedules use non-integer ratios like 64 -> 96,
/// so the target is given explicitly instead of a factor.
pub fn upsample_bicubic(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = trailing_dims(x.shape())?;
    if target_h < h || target_w < w {
        return Err(TensorError::InvalidShape {
            op: "upsample_bicubic",
            shape: x.shape().to_vec(),
            reason: format!("target ({target_h},{target_w}) smaller than source ({h},{w})"),
        });
    }
    let rank = x.shape().len();
    let x = resize_axis("upsample_bicubic", x, rank - 1, catmull_rom_taps(w, target_w))?;
    resize_axis("upsample_bicubic", &x, rank - 2, catmull_rom_taps(h, target_h))
}

/// Temporal upsampling by blending the two nearest frames at each output
/// frame's normalized time coordinate. Takes `[T,H,W]` or `[N,T,H,W]`.
pub fn temporal_blend_upsample(x: &Tensor, target_t: usize) -> Result<Tensor> {
    if x.shape().len() < 3 {
        return Err(TensorError::InvalidShape {
            op: "temporal_blend_upsample",
            shape: x.shape().to_vec(),
            reason: "expects a time axis".into(),
        });
    }
    let axis = x.shape().len() - 3;
    let t = x.shape()[axis];
    if target_t < t {
        return Err(TensorError::InvalidShape {
            op: "temporal_blend_upsample",
            shape: x.shape().to_vec(),
            reason: format!("target frames {target_t} < source {t}"),
        });
    }
    resize_axis("temporal_blend_upsample", x, axis, linear_time_taps(t, target_t))
}

/// Upsamples to a `(t, h, w)` target: bicubic spatially, frame blending in
/// time. A no-op when the target equals the source resolution.
pub fn upsample_to(x: &Tensor, target: (usize, usize, usize)) -> Result<Tensor> {
    let (_, t, h, w) = trailing_dims(x.shape())?;
    let mut out = x.clone();
    if target.1 != h || target.2 != w {
        out = upsample_bicubic(&out, target.1, target.2)?;
    }
    if target.0 != t {
        out = temporal_blend_upsample(&out, target.0)?;
    }
    Ok(out)
}

/// The three ways to build a full-resolution noisy sample from data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Noise the full-resolution data directly (reference).
    A,
    /// Upsample the clean low-resolution data, then noise.
    B,
    /// Noise at low resolution, then upsample the noisy field.
    C,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "A" | "a" => Some(Strategy::A),
            "B" | "b" => Some(Strategy::B),
            "C" | "c" => Some(Strategy::C),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::A => "A",
            Strategy::B => "B",
            Strategy::C => "C",
        }
    }
}

/// Builds `x_t` at the target scale under the chosen strategy. Strategy A
/// needs the original full-resolution data.
pub fn strategy_transition(
    x0_low: &Tensor,
    tau: f64,
    target: (usize, usize, usize),
    strategy: Strategy,
    rng: &mut Rng,
    x0_full: Option<&Tensor>,
) -> Result<Tensor> {
    match strategy {
        Strategy::A => {
            let x0 = x0_full.ok_or_else(|| TensorError::InvalidShape {
                op: "strategy_transition",
                shape: x0_low.shape().to_vec(),
                reason: "strategy A requires the full-resolution x0".into(),
            })?;
            let eps = Tensor::gaussian(x0.shape(), rng)?;
            noise_to(x0, tau, &eps)
        }
        Strategy::B => {
            let up = upsample_to(x0_low, target)?;
            let eps = Tensor::gaussian(up.shape(), rng)?;
            noise_to(&up, tau, &eps)
        }
        Strategy::C => {
            let eps = Tensor::gaussian(x0_low.shape(), rng)?;
            let noisy = noise_to(x0_low, tau, &eps)?;
            upsample_to(&noisy, target)
        }
    }
}

#[cfg(test)]
mod tests;
