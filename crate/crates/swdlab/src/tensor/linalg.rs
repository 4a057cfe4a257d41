//! Dense matrix products. Plain ikj loops; fast enough at lab scale and the
//! per-element summation order is fixed, which keeps results bit-stable.

use super::{Result, Tensor, TensorError};

/// c[m,n] = a[m,k] * b[k,n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] += aik * b_row[j];
            }
        }
    }
    c
}

/// c[m,n] = a^T * b with a[k,m], b[k,n]
pub(crate) fn mm_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += aki * b_row[j];
            }
        }
    }
    c
}

/// c[m,n] = a * b^T with a[m,k], b[n,k]
pub(crate) fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cij) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for kk in 0..k {
                s += a_row[kk] * b_row[kk];
            }
            *cij = s;
        }
    }
    c
}

impl Tensor {
    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm(self.data(), other.data(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |up, node| {
                let a = node.parent_data(0);
                let b = node.parent_data(1);
                let ga = mm_bt(up, b, m, n, k); // dC * B^T
                let gb = mm_at(a, up, m, k, n); // A^T * dC
                vec![ga, gb]
            }),
        )
    }

    /// Batched matrix product: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bsz * m * n];
        for bi in 0..bsz {
            let c = mm(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &other.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
            data[bi * m * n..(bi + 1) * m * n].copy_from_slice(&c);
        }
        Tensor::from_op(
            "bmm",
            vec![bsz, m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |up, node| {
                let a = node.parent_data(0);
                let b = node.parent_data(1);
                let mut ga = vec![0.0; bsz * m * k];
                let mut gb = vec![0.0; bsz * k * n];
                for bi in 0..bsz {
                    let upb = &up[bi * m * n..(bi + 1) * m * n];
                    let ab = &a[bi * m * k..(bi + 1) * m * k];
                    let bb = &b[bi * k * n..(bi + 1) * k * n];
                    ga[bi * m * k..(bi + 1) * m * k].copy_from_slice(&mm_bt(upb, bb, m, n, k));
                    gb[bi * k * n..(bi + 1) * k * n].copy_from_slice(&mm_at(ab, upb, m, k, n));
                }
                vec![ga, gb]
            }),
        )
    }

    /// Affine map over the last axis: `x[..., in] * w[in, out] + b[out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let (ws, rank) = (w.shape(), shape.len());
        if ws.len() != 2 || rank == 0 || shape[rank - 1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: ws.to_vec(),
            });
        }
        let rows: usize = shape[..rank - 1].iter().product();
        let flat = self.reshape(&[rows, ws[0]])?;
        let mut out = flat.matmul(w)?;
        if let Some(bias) = b {
            out = out.add(bias)?;
        }
        let mut out_shape = shape;
        out_shape[rank - 1] = ws[1];
        out.reshape(&out_shape)
    }
}
