//! Nonlinearities, normalization, and embedding lookups.

use super::{numel_of, Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

fn gelu_val(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::from_op(
            "exp",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|up, node| vec![up.iter().zip(node.data()).map(|(&g, &y)| g * y).collect()]),
        )
    }

    pub fn ln(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| x.ln()).collect();
        Tensor::from_op(
            "ln",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|up, node| {
                let x = node.parent_data(0);
                vec![up.iter().zip(x).map(|(&g, &xv)| g / xv).collect()]
            }),
        )
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| gelu_val(x)).collect();
        Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|up, node| {
                let x = node.parent_data(0);
                vec![up.iter().zip(x).map(|(&g, &xv)| g * gelu_deriv(xv)).collect()]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| sigmoid_val(x)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|up, node| {
                let y = node.data();
                vec![up.iter().zip(y).map(|(&g, &s)| g * s * (1.0 - s)).collect()]
            }),
        )
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&self) -> Result<Tensor> {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        Tensor::from_op(
            "softplus",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|up, node| {
                let x = node.parent_data(0);
                vec![up.iter().zip(x).map(|(&g, &xv)| g * sigmoid_val(xv)).collect()]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let c = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax_last",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let rows = self.numel() / c;
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * c..(r + 1) * c];
            let y = &mut data[r * c..(r + 1) * c];
            let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - mx).exp();
                z += *yi;
            }
            for yi in y.iter_mut() {
                *yi /= z;
            }
        }
        Tensor::from_op(
            "softmax_last",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |up, node| {
                let y = node.data();
                let mut g = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * c..(r + 1) * c];
                    let us = &up[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(us).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        g[r * c + j] = ys[j] * (us[j] - dot);
                    }
                }
                vec![g]
            }),
        )
    }

    /// Layer normalization over the last axis, no learned affine.
    pub fn layer_norm_last(&self) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let c = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm_last",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let rows = self.numel() / c;
        let mut data = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.data()[r * c..(r + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for (o, &v) in data[r * c..(r + 1) * c].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
        }
        Tensor::from_op(
            "layer_norm_last",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |up, node| {
                let y = node.data();
                let mut g = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * c..(r + 1) * c];
                    let us = &up[r * c..(r + 1) * c];
                    let mean_u: f64 = us.iter().sum::<f64>() / c as f64;
                    let mean_uy: f64 = us.iter().zip(ys).map(|(&a, &b)| a * b).sum::<f64>() / c as f64;
                    let inv = inv_std[r];
                    for j in 0..c {
                        g[r * c + j] = inv * (us[j] - mean_u - ys[j] * mean_uy);
                    }
                }
                vec![g]
            }),
        )
    }

    /// Gathers rows of a `[K, C]` table; gradient scatter-adds back.
    pub fn index_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "index_rows",
                shape: shape.to_vec(),
                reason: "expects a rank-2 table".into(),
            });
        }
        let (k, c) = (shape[0], shape[1]);
        for &id in ids {
            if id >= k {
                return Err(TensorError::InvalidShape {
                    op: "index_rows",
                    shape: shape.to_vec(),
                    reason: format!("row id {id} out of range {k}"),
                });
            }
        }
        let n = ids.len();
        let mut data = vec![0.0; n * c];
        for (i, &id) in ids.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&self.data()[id * c..(id + 1) * c]);
        }
        let ids_bw = ids.to_vec();
        Tensor::from_op(
            "index_rows",
            vec![n, c],
            data,
            vec![self.clone()],
            Box::new(move |up, _| {
                let mut g = vec![0.0; k * c];
                for (i, &id) in ids_bw.iter().enumerate() {
                    for j in 0..c {
                        g[id * c + j] += up[i * c + j];
                    }
                }
                vec![g]
            }),
        )
    }

    /// Mean squared error against a target, averaged over all elements.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        self.sub(target)?.square()?.mean_all()
    }
}

/// Constant identity-like mask of shape `[l, l]`, used to zero Gram diagonals.
pub fn eye_mask(l: usize, diag: f64, off: f64) -> Tensor {
    let mut data = vec![off; l * l];
    for i in 0..l {
        data[i * l + i] = diag;
    }
    Tensor::from_vec(data, &[l, l]).expect("eye_mask")
}

pub(crate) fn assert_same_numel(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if numel_of(a) == numel_of(b) {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}
