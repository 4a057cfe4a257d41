//! Resolution-agnostic positional encoding.
//!
//! Token coordinates are normalized to [0, 1) per axis as `i / n`, so a grid
//! of n patches is a strict subset of the coordinates of a 2n-patch grid and
//! encodings stay consistent across scales. Channels are split per axis and
//! filled with sin/cos pairs at linearly spaced frequencies.

use crate::tensor::{Result, Tensor, TensorError};

/// Channel budget per axis. Images split the width evenly over (h, w);
/// video gives a quarter to time and splits the rest spatially.
fn axis_channels(width: usize, video: bool) -> Vec<usize> {
    if video {
        let t = width / 4;
        let rest = width - t;
        let h = rest / 2;
        vec![t, h, rest - h]
    } else {
        vec![width / 2, width - width / 2]
    }
}

fn fill_axis(out: &mut [f64], l: usize, width: usize, ch_off: usize, ch: usize, coords: &[f64]) {
    let pairs = ch / 2;
    for (token, &u) in coords.iter().enumerate() {
        for k in 0..pairs {
            let arg = std::f64::consts::PI * k as f64 * u;
            out[token * width + ch_off + 2 * k] = arg.sin();
            out[token * width + ch_off + 2 * k + 1] = arg.cos();
        }
    }
    let _ = l;
}

/// Encoding for a `(t, h, w)` patch grid, shape `[t*h*w, width]`.
/// Grids beyond `max_grid` are refused: their coordinates would exceed the
/// frequency resolution of the channel budget.
pub fn pos_encoding(
    grid: (usize, usize, usize),
    width: usize,
    max_grid: (usize, usize, usize),
) -> Result<Tensor> {
    let (t, h, w) = grid;
    if t == 0 || h == 0 || w == 0 {
        return Err(TensorError::InvalidShape {
            op: "pos_encoding",
            shape: vec![t, h, w],
            reason: "empty grid".into(),
        });
    }
    if t > max_grid.0 || h > max_grid.1 || w > max_grid.2 {
        return Err(TensorError::InvalidShape {
            op: "pos_encoding",
            shape: vec![t, h, w],
            reason: format!("grid exceeds cap {max_grid:?}"),
        });
    }
    let video = t > 1;
    let chans = axis_channels(width, video);
    let l = t * h * w;
    let mut data = vec![0.0; l * width];

    let coord = |i: usize, n: usize| i as f64 / n as f64;
    let mut token = 0usize;
    let mut coords_t = vec![0.0; l];
    let mut coords_h = vec![0.0; l];
    let mut coords_w = vec![0.0; l];
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                coords_t[token] = coord(ti, t);
                coords_h[token] = coord(hi, h);
                coords_w[token] = coord(wi, w);
                token += 1;
            }
        }
    }

    if video {
        let mut off = 0;
        fill_axis(&mut data, l, width, off, chans[0], &coords_t);
        off += chans[0];
        fill_axis(&mut data, l, width, off, chans[1], &coords_h);
        off += chans[1];
        fill_axis(&mut data, l, width, off, chans[2], &coords_w);
    } else {
        fill_axis(&mut data, l, width, 0, chans[0], &coords_h);
        fill_axis(&mut data, l, width, chans[0], chans[1], &coords_w);
    }
    Tensor::from_vec(data, &[l, width])
}
