//! Maximum mean discrepancy: raw two-sample estimators plus the
//! differentiable per-image feature losses used for distillation.

use super::Result;
use crate::network::FeatureMap;
use crate::tensor::{nn::eye_mask, Rng, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelSpec {
    Linear,
    Rbf { bandwidth: f64 },
}

impl KernelSpec {
    pub fn rbf_median(pooled: &Tensor) -> KernelSpec {
        KernelSpec::Rbf {
            bandwidth: median_bandwidth(pooled),
        }
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => x.iter().zip(y).map(|(&a, &b)| a * b).sum(),
            KernelSpec::Rbf { bandwidth } => {
                let d2: f64 = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
        }
    }
}

/// Median pairwise distance over the rows of `[N, D]` points. The usual
/// default bandwidth; deterministic given the input.
pub fn median_bandwidth(points: &Tensor) -> f64 {
    let n = points.shape()[0];
    let d = points.shape()[1];
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    let data = points.data();
    for i in 0..n {
        for j in i + 1..n {
            let mut d2 = 0.0;
            for k in 0..d {
                let diff = data[i * d + k] - data[j * d + k];
                d2 += diff * diff;
            }
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2].max(1e-12)
}

fn slice_row(data: &[f64], i: usize, d: usize) -> &[f64] {
    &data[i * d..(i + 1) * d]
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "mmd2",
            shape: s.to_vec(),
            reason: "expects [N, D] sample matrices".into(),
        });
    }
    Ok((s[0], s[1]))
}

/// Unbiased U-statistic estimator of the squared MMD: within-set terms
/// exclude the diagonal. With equal sample counts the paired form (cross
/// terms also off-diagonal) is used, which vanishes identically when the
/// two sets are equal. Needs at least two samples per side.
pub fn mmd2(x: &Tensor, y: &Tensor, kernel: KernelSpec) -> Result<f64> {
    let (n, d) = rows(x)?;
    let (m, d2) = rows(y)?;
    if d != d2 {
        return Err(TensorError::ShapeMismatch {
            op: "mmd2",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if n < 2 || m < 2 {
        return Err(TensorError::InvalidShape {
            op: "mmd2",
            shape: vec![n, m],
            reason: "unbiased estimate needs at least 2 samples per side".into(),
        });
    }
    let xd = x.data();
    let yd = y.data();
    if n == m {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += kernel.eval(slice_row(xd, i, d), slice_row(xd, j, d))
                        + kernel.eval(slice_row(yd, i, d), slice_row(yd, j, d))
                        - kernel.eval(slice_row(xd, i, d), slice_row(yd, j, d))
                        - kernel.eval(slice_row(xd, j, d), slice_row(yd, i, d));
                }
            }
        }
        return Ok(acc / (n * (n - 1)) as f64);
    }
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kxx += kernel.eval(slice_row(xd, i, d), slice_row(xd, j, d));
            }
        }
    }
    kxx /= (n * (n - 1)) as f64;
    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kyy += kernel.eval(slice_row(yd, i, d), slice_row(yd, j, d));
            }
        }
    }
    kyy /= (m * (m - 1)) as f64;
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            kxy += kernel.eval(slice_row(xd, i, d), slice_row(yd, j, d));
        }
    }
    kxy /= (n * m) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Biased (V-statistic) estimator; with the linear kernel this equals the
/// squared mean gap exactly.
pub fn mmd2_biased(x: &Tensor, y: &Tensor, kernel: KernelSpec) -> Result<f64> {
    let (n, d) = rows(x)?;
    let (m, d2) = rows(y)?;
    if d != d2 {
        return Err(TensorError::ShapeMismatch {
            op: "mmd2_biased",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let xd = x.data();
    let yd = y.data();
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            kxx += kernel.eval(slice_row(xd, i, d), slice_row(xd, j, d));
        }
    }
    kxx /= (n * n) as f64;
    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            kyy += kernel.eval(slice_row(yd, i, d), slice_row(yd, j, d));
        }
    }
    kyy /= (m * m) as f64;
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            kxy += kernel.eval(slice_row(xd, i, d), slice_row(yd, j, d));
        }
    }
    kxy /= (n * m) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Permutation two-sample test on the unbiased statistic. The pooled Gram
/// matrix is computed once and resampled, so the permutations are cheap.
/// Returns (observed mmd2, p-value).
pub fn mmd_permutation_test(
    x: &Tensor,
    y: &Tensor,
    kernel: KernelSpec,
    permutations: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let (n, d) = rows(x)?;
    let (m, _) = rows(y)?;
    let total = n + m;
    let mut pooled = x.to_vec();
    pooled.extend_from_slice(y.data());
    let mut gram = vec![0.0; total * total];
    for i in 0..total {
        for j in i..total {
            let k = kernel.eval(slice_row(&pooled, i, d), slice_row(&pooled, j, d));
            gram[i * total + j] = k;
            gram[j * total + i] = k;
        }
    }
    let stat = |labels: &[usize]| -> f64 {
        // first n entries of `labels` form set X
        let (xs, ys) = labels.split_at(n);
        let mut kxx = 0.0;
        for &i in xs {
            for &j in xs {
                if i != j {
                    kxx += gram[i * total + j];
                }
            }
        }
        kxx /= (n * (n - 1)) as f64;
        let mut kyy = 0.0;
        for &i in ys {
            for &j in ys {
                if i != j {
                    kyy += gram[i * total + j];
                }
            }
        }
        kyy /= (m * (m - 1)) as f64;
        let mut kxy = 0.0;
        for &i in xs {
            for &j in ys {
                kxy += gram[i * total + j];
            }
        }
        kxy /= (n * m) as f64;
        kxx + kyy - 2.0 * kxy
    };
    let ident: Vec<usize> = (0..total).collect();
    let observed = stat(&ident);
    let mut labels = ident;
    let mut exceed = 0usize;
    for _ in 0..permutations {
        for i in (1..total).rev() {
            let j = rng.uniform_usize(i + 1);
            labels.swap(i, j);
        }
        if stat(&labels) >= observed {
            exceed += 1;
        }
    }
    let p = (exceed as f64 + 1.0) / (permutations as f64 + 1.0);
    Ok((observed, p))
}

/// Which estimator the distillation loss uses over the token features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmdVariant {
    /// Per-image squared distance between token means (linear kernel).
    Main,
    /// Per-image unbiased RBF MMD over token sets.
    Rbf,
    /// Squared distance between whole-batch token means.
    BatchMean,
    /// Same loss as `Main`; the feature pipeline skips noising instead.
    NoNoise,
}

impl MmdVariant {
    pub fn parse(s: &str) -> Option<MmdVariant> {
        match s {
            "main" => Some(MmdVariant::Main),
            "rbf" => Some(MmdVariant::Rbf),
            "batch_mean" => Some(MmdVariant::BatchMean),
            "no_noise" => Some(MmdVariant::NoNoise),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MmdVariant::Main => "main",
            MmdVariant::Rbf => "rbf",
            MmdVariant::BatchMean => "batch_mean",
            MmdVariant::NoNoise => "no_noise",
        }
    }

    pub fn skips_noising(self) -> bool {
        self == MmdVariant::NoNoise
    }
}

/// Differentiable distillation loss between real and fake feature maps.
/// Gradient flows through `f_fake` only in practice (the real branch is
/// produced without a graph), but nothing here enforces that.
pub fn mmd_loss(f_real: &FeatureMap, f_fake: &FeatureMap, variant: MmdVariant) -> Result<Tensor> {
    let (n, c) = (f_real.batch(), f_real.channels());
    if n != f_fake.batch() || c != f_fake.channels() {
        return Err(TensorError::ShapeMismatch {
            op: "mmd_loss",
            lhs: f_real.tokens.shape().to_vec(),
            rhs: f_fake.tokens.shape().to_vec(),
        });
    }
    match variant {
        MmdVariant::Main | MmdVariant::NoNoise => {
            // sum_n || mean_l real - mean_l fake ||^2
            let mr = f_real.token_means()?;
            let mf = f_fake.token_means()?;
            mr.sub(&mf)?.square()?.sum_all()
        }
        MmdVariant::BatchMean => {
            let mr = f_real.tokens.mean_axes(&[0, 1], false)?;
            let mf = f_fake.tokens.mean_axes(&[0, 1], false)?;
            mr.sub(&mf)?.square()?.sum_all()
        }
        MmdVariant::Rbf => {
            let l = f_real.token_count();
            let lf = f_fake.token_count();
            if l != lf || l < 2 {
                return Err(TensorError::InvalidShape {
                    op: "mmd_loss",
                    shape: vec![l, lf],
                    reason: "rbf variant needs matching token sets of size >= 2".into(),
                });
            }
            // shared bandwidth from the pooled detached tokens
            let pooled = Tensor::concat(
                &[
                    f_real.tokens.detach().reshape(&[n * l, c])?,
                    f_fake.tokens.detach().reshape(&[n * lf, c])?,
                ],
                0,
            )?;
            let sigma = median_bandwidth(&pooled);
            // paired unbiased form: all four terms off-diagonal, so equal
            // token sets give exactly zero
            let kxx = rbf_gram(&f_real.tokens, &f_real.tokens, sigma)?;
            let kyy = rbf_gram(&f_fake.tokens, &f_fake.tokens, sigma)?;
            let kxy = rbf_gram(&f_real.tokens, &f_fake.tokens, sigma)?;
            let kyx = kxy.permute(&[0, 2, 1])?;
            let combined = kxx.add(&kyy)?.sub(&kxy)?.sub(&kyx)?;
            let mask = eye_mask(l, 0.0, 1.0).reshape(&[1, l, l])?;
            combined
                .mul(&mask)?
                .sum_all()?
                .scale(1.0 / (l * (l - 1)) as f64)
        }
    }
}

/// Per-image RBF kernel matrix between token sets: `[N, L, L]`.
fn rbf_gram(a: &Tensor, b: &Tensor, sigma: f64) -> Result<Tensor> {
    let bt = b.permute(&[0, 2, 1])?; // [N, C, L]
    let gram = a.bmm(&bt)?; // [N, La, Lb]
    let sa = a.square()?.sum_axes(&[2], true)?; // [N, La, 1]
    let sb = b.square()?.sum_axes(&[2], true)?.permute(&[0, 2, 1])?; // [N, 1, Lb]
    let d2 = sa.add(&sb)?.sub(&gram.scale(2.0)?)?;
    d2.scale(-1.0 / (2.0 * sigma * sigma))?.exp()
}
