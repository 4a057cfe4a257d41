//! Minimal n-dimensional tensor engine with reverse-mode automatic
//! differentiation.
//!
//! Tensors are immutable after creation; every op produces a fresh tensor and,
//! when gradients are enabled and an input requires them, a backward closure.
//! Storage is `f64` throughout. All evaluation is single-threaded with a fixed
//! order, so results are bit-reproducible for fixed inputs and seeds.

pub(crate) mod fft;
mod gradcheck;
mod io;
mod linalg;
pub(crate) mod nn;
mod optim;
mod rng;

pub use fft::{fft_1d_power, fft2_power_full, rfft_power2};
pub use gradcheck::{grad_check, grad_check_coords};
pub use io::{load_swt1, save_swt1, save_swt1_f32, Dtype};
pub use optim::Adam;
pub use rng::Rng;

use std::sync::{Arc, Mutex};

/// Errors surfaced by tensor construction and ops.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor file error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

// Gradient recording is on by default; `NoGrad` turns it off for a scope.
thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// RAII guard that disables gradient recording on the current thread.
pub struct NoGrad {
    prev: bool,
}

impl NoGrad {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGrad { prev }
    }
}

impl Default for NoGrad {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGrad {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: (upstream gradient, this node) -> gradient per parent.
type BackwardFn = Box<dyn Fn(&[f64], &Node) -> Vec<Vec<f64>> + Send + Sync>;

pub struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    leaf: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

impl Node {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn parent_data(&self, i: usize) -> &[f64] {
        self.parents[i].data()
    }
}

/// Handle to an immutable tensor value, cheap to clone.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.shape(),
            self.requires_grad()
        )
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    // ── Construction ────────────────────────────────────────────────────

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape wants {} values, got {}", numel_of(shape), data.len()),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor(Arc::new(Node {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            leaf: true,
            grad: Mutex::new(None),
            parents: Vec::new(),
            backward: None,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; numel_of(shape)], shape).expect("zeros")
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Tensor::from_vec(vec![value; numel_of(shape)], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[1]).expect("scalar")
    }

    /// Standard normal entries, deterministic given the rng state.
    pub fn gaussian(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
        if shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gaussian",
                shape: shape.to_vec(),
                reason: "empty shape".into(),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "gaussian",
                shape: shape.to_vec(),
                reason: "zero-sized dimension".into(),
            });
        }
        let n = numel_of(shape);
        Tensor::from_vec(rng.normal_vec(n), shape)
    }

    /// Marks a leaf tensor as a gradient-accumulating parameter.
    pub fn requiring_grad(self) -> Tensor {
        assert!(self.0.leaf, "requiring_grad is only valid on leaf tensors");
        Tensor(Arc::new(Node {
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: true,
            leaf: true,
            grad: Mutex::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// New leaf sharing this tensor's storage, outside the autodiff graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Node {
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: false,
            leaf: true,
            grad: Mutex::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.leaf
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn take_grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().unwrap().take()
    }

    fn ptr(&self) -> *const Node {
        Arc::as_ptr(&self.0)
    }

    // ── Graph construction ──────────────────────────────────────────────

    /// Builds an op result node. Parents and the backward closure are kept
    /// only when some input participates in the graph.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op}: bad output buffer");
        check_finite(op, &data)?;
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        Ok(Tensor(Arc::new(Node {
            shape,
            data: Arc::new(data),
            requires_grad: track,
            leaf: false,
            grad: Mutex::new(None),
            parents: if track { parents } else { Vec::new() },
            backward: if track { Some(backward) } else { None },
        })))
    }

    /// Custom differentiable unary op from raw parts. The backward closure
    /// maps the upstream gradient to the gradient w.r.t. `input`.
    pub fn unary_from_parts(
        op: &'static str,
        input: &Tensor,
        out_shape: &[usize],
        out_data: Vec<f64>,
        backward: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Tensor> {
        Tensor::from_op(
            op,
            out_shape.to_vec(),
            out_data,
            vec![input.clone()],
            Box::new(move |up, _| vec![backward(up)]),
        )
    }
}

// ── Backward pass ───────────────────────────────────────────────────────

/// Reverse-mode pass from a scalar loss. Gradients of reachable leaves with
/// `requires_grad` accumulate into their `grad` slots; repeated calls keep
/// accumulating until `zero_grad`.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.requires_grad() {
        return Ok(()); // nothing reachable
    }

    // Iterative post-order DFS; reversed it yields consumers before producers.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: std::collections::HashSet<*const Node> = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.ptr());
    while let Some((node, child)) = stack.pop() {
        let parents = &node.0.parents;
        if child < parents.len() {
            stack.push((node.clone(), child + 1));
            let p = &parents[child];
            if p.requires_grad() && visited.insert(p.ptr()) {
                stack.push((p.clone(), 0));
            }
        } else {
            order.push(node);
        }
    }

    loss.accumulate_grad(&[1.0]);
    for node in order.iter().rev() {
        let Some(upstream) = (if node.0.leaf {
            None
        } else {
            node.take_grad()
        }) else {
            continue;
        };
        if let Some(bw) = &node.0.backward {
            let grads = bw(&upstream, &node.0);
            debug_assert_eq!(grads.len(), node.0.parents.len());
            for (parent, g) in node.0.parents.iter().zip(grads) {
                if parent.requires_grad() {
                    debug_assert_eq!(g.len(), parent.numel());
                    parent.accumulate_grad(&g);
                }
            }
        }
    }
    Ok(())
}

// ── Broadcasting helpers ────────────────────────────────────────────────

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` embedded in `out` (right-aligned), 0 on broadcast dims.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[offset + i] = s;
        }
        s *= shape[i];
    }
    strides
}

/// Odometer walk over `out_shape`, yielding linear offsets into two operands.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel_of(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for lin in 0..n {
        f(lin, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    // (a, b, upstream) -> (grad_a, grad_b)
    df: fn(f64, f64, f64) -> (f64, f64),
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape().to_vec();
        return Tensor::from_op(
            op,
            shape,
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |up, node| {
                let av = node.parent_data(0);
                let bv = node.parent_data(1);
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..up.len() {
                    let (da, db) = df(av[i], bv[i], up[i]);
                    ga[i] = da;
                    gb[i] = db;
                }
                vec![ga, gb]
            }),
        );
    }

    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; numel_of(&out_shape)];
    {
        let av = a.data();
        let bv = b.data();
        for_each_broadcast(&out_shape, &sa, &sb, |lin, ia, ib| {
            data[lin] = f(av[ia], bv[ib]);
        });
    }
    let out_shape_bw = out_shape.clone();
    Tensor::from_op(
        op,
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |up, node| {
            let av = node.parent_data(0);
            let bv = node.parent_data(1);
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for_each_broadcast(&out_shape_bw, &sa, &sb, |lin, ia, ib| {
                let (da, db) = df(av[ia], bv[ib], up[lin]);
                ga[ia] += da;
                gb[ib] += db;
            });
            vec![ga, gb]
        }),
    )
}

// ── Elementwise and reduction ops ───────────────────────────────────────

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast("add", self, other, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast("sub", self, other, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast("mul", self, other, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast(
            "div",
            self,
            other,
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| k * x).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |up, _| vec![up.iter().map(|&g| k * g).collect()]),
        )
    }

    pub fn add_scalar(&self, k: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x + k).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|up, _| vec![up.to_vec()]),
        )
    }

    /// Elementwise square, a common enough idiom to deserve its own op.
    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |up, _| vec![vec![up[0]; n]]),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            "mean_all",
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |up, _| vec![vec![up[0] / n as f64; n]]),
        )
    }

    /// Sum over the given axes. With `keepdim` the reduced axes stay as 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        reduce_axes("sum_axes", self, axes, keepdim, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        reduce_axes("mean_axes", self, axes, keepdim, true)
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel_of(new_shape) != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                reason: format!("numel {} != {}", numel_of(new_shape), self.numel()),
            });
        }
        let old_shape = self.shape().to_vec();
        Tensor::from_op(
            "reshape",
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |up, _| {
                let _ = &old_shape;
                vec![up.to_vec()]
            }),
        )
    }

    /// Reorders axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: axes.to_vec(),
                reason: format!("not a permutation of 0..{rank}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_copy(self.data(), self.shape(), axes);
        let inverse: Vec<usize> = {
            let mut inv = vec![0usize; rank];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            inv
        };
        let out_shape_bw = out_shape.clone();
        Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |up, _| vec![permute_copy(up, &out_shape_bw, &inverse)]),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape().to_vec(),
                reason: "expects rank 2".into(),
            });
        }
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no tensors".into(),
            });
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: parts[0].shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        for p in parts.iter().skip(1) {
            let mut a = parts[0].shape().to_vec();
            let mut b = p.shape().to_vec();
            a[axis] = 0;
            b[axis] = 0;
            if a != b {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_axis: usize = axis_sizes.iter().sum();
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = total_axis;

        let mut data = vec![0.0; outer * total_axis * inner];
        for o in 0..outer {
            let mut at = 0usize;
            for (p, &asz) in parts.iter().zip(&axis_sizes) {
                let src = &p.data()[o * asz * inner..(o + 1) * asz * inner];
                let dst = &mut data[(o * total_axis + at) * inner..(o * total_axis + at + asz) * inner];
                dst.copy_from_slice(src);
                at += asz;
            }
        }
        let sizes_bw = axis_sizes.clone();
        Tensor::from_op(
            "concat",
            out_shape,
            data,
            parts.to_vec(),
            Box::new(move |up, _| {
                let mut grads: Vec<Vec<f64>> =
                    sizes_bw.iter().map(|&asz| vec![0.0; outer * asz * inner]).collect();
                for o in 0..outer {
                    let mut at = 0usize;
                    for (gi, &asz) in sizes_bw.iter().enumerate() {
                        let src = &up[(o * total_axis + at) * inner..(o * total_axis + at + asz) * inner];
                        grads[gi][o * asz * inner..(o + 1) * asz * inner].copy_from_slice(src);
                        at += asz;
                    }
                }
                grads
            }),
        )
    }

    /// Contiguous slice `start..start+len` along one axis.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice_axis",
                shape: shape.to_vec(),
                reason: format!("slice {start}..{} on axis {axis}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let asz = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &self.data()[(o * asz + start) * inner..(o * asz + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let total = self.numel();
        Tensor::from_op(
            "slice_axis",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |up, _| {
                let mut g = vec![0.0; total];
                for o in 0..outer {
                    let dst = &mut g[(o * asz + start) * inner..(o * asz + start + len) * inner];
                    dst.copy_from_slice(&up[o * len * inner..(o + 1) * len * inner]);
                }
                vec![g]
            }),
        )
    }
}

fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_stride: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for item in out.iter_mut() {
        *item = data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_stride[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_stride[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn reduce_axes(
    op: &'static str,
    t: &Tensor,
    axes: &[usize],
    keepdim: bool,
    mean: bool,
) -> Result<Tensor> {
    let shape = t.shape().to_vec();
    let rank = shape.len();
    let mut reduce = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(TensorError::InvalidShape {
                op,
                shape: shape.clone(),
                reason: format!("axis {a} out of range"),
            });
        }
        reduce[a] = true;
    }
    let kept_shape: Vec<usize> = (0..rank).map(|i| if reduce[i] { 1 } else { shape[i] }).collect();
    let out_shape: Vec<usize> = if keepdim {
        kept_shape.clone()
    } else {
        let s: Vec<usize> = (0..rank).filter(|&i| !reduce[i]).map(|i| shape[i]).collect();
        if s.is_empty() {
            vec![1]
        } else {
            s
        }
    };
    let count: usize = (0..rank).filter(|&i| reduce[i]).map(|i| shape[i]).product();
    let scale = if mean { 1.0 / count as f64 } else { 1.0 };

    // Accumulate in input order into the kept-dims index.
    let out_strides = broadcast_strides(&kept_shape, &shape);
    let mut acc = vec![0.0; numel_of(&kept_shape)];
    {
        let data = t.data();
        let zero = vec![0usize; rank];
        for_each_broadcast_single(&shape, &out_strides, &zero, |lin, io| {
            acc[io] += data[lin];
        });
    }
    if mean {
        for v in acc.iter_mut() {
            *v *= scale;
        }
    }
    let in_shape = shape.clone();
    Tensor::from_op(
        op,
        out_shape,
        acc,
        vec![t.clone()],
        Box::new(move |up, _| {
            let mut g = vec![0.0; numel_of(&in_shape)];
            let zero = vec![0usize; in_shape.len()];
            for_each_broadcast_single(&in_shape, &out_strides, &zero, |lin, io| {
                g[lin] = up[io] * scale;
            });
            vec![g]
        }),
    )
}

fn for_each_broadcast_single(
    out_shape: &[usize],
    sa: &[usize],
    _unused: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let n = numel_of(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    for lin in 0..n {
        f(lin, ia);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
