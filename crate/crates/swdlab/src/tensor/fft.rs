//! FFT front-end for spectral analysis: iterative radix-2 with a Bluestein
//! chirp-z fallback so non-power-of-two sizes keep working.
//!
//! Analysis code wants squared magnitudes, so the public surface is mostly
//! power spectra. No autodiff here.

use super::{Result, Tensor, TensorError};

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place radix-2 FFT, `sign = -1` forward, `+1` inverse (unscaled).
fn radix2(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    debug_assert!(is_pow2(n));
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Bluestein chirp-z transform for arbitrary n (forward DFT).
fn bluestein(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let m = (2 * n - 1).next_power_of_two();
    let mut ar = vec![0.0; m];
    let mut ai = vec![0.0; m];
    let mut br = vec![0.0; m];
    let mut bi = vec![0.0; m];
    // chirp c_k = exp(-i pi k^2 / n); k^2 mod 2n keeps the angle exact.
    let mut cr = vec![0.0; n];
    let mut ci = vec![0.0; n];
    for k in 0..n {
        let e = (k * k) % (2 * n);
        let ang = -std::f64::consts::PI * e as f64 / n as f64;
        cr[k] = ang.cos();
        ci[k] = ang.sin();
        ar[k] = re[k] * cr[k] - im[k] * ci[k];
        ai[k] = re[k] * ci[k] + im[k] * cr[k];
        br[k] = cr[k];
        bi[k] = -ci[k];
        if k > 0 {
            br[m - k] = cr[k];
            bi[m - k] = -ci[k];
        }
    }
    radix2(&mut ar, &mut ai, -1.0);
    radix2(&mut br, &mut bi, -1.0);
    for i in 0..m {
        let r = ar[i] * br[i] - ai[i] * bi[i];
        ai[i] = ar[i] * bi[i] + ai[i] * br[i];
        ar[i] = r;
    }
    radix2(&mut ar, &mut ai, 1.0);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        let (vr, vi) = (ar[k] * scale, ai[k] * scale);
        re[k] = vr * cr[k] - vi * ci[k];
        im[k] = vr * ci[k] + vi * cr[k];
    }
}

/// Forward DFT, any length.
pub(crate) fn fft_inplace(re: &mut [f64], im: &mut [f64]) {
    if is_pow2(re.len()) {
        radix2(re, im, -1.0);
    } else {
        bluestein(re, im);
    }
}

/// Inverse DFT with 1/n scaling, any length.
pub(crate) fn ifft_inplace(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    for v in im.iter_mut() {
        *v = -*v;
    }
    fft_inplace(re, im);
    let s = 1.0 / n as f64;
    for v in re.iter_mut() {
        *v *= s;
    }
    for v in im.iter_mut() {
        *v *= -s;
    }
}

/// 2-D DFT over a row-major h x w grid.
pub(crate) fn fft2_inplace(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    let run = |re: &mut [f64], im: &mut [f64]| {
        if inverse {
            ifft_inplace(re, im)
        } else {
            fft_inplace(re, im)
        }
    };
    for r in 0..h {
        run(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w]);
    }
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        run(&mut cr, &mut ci);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
}

fn field_dims(field: &Tensor) -> Result<(usize, usize)> {
    let s = field.shape();
    if s.len() != 2 || s[0] < 2 || s[1] < 2 {
        return Err(TensorError::InvalidShape {
            op: "rfft_power2",
            shape: s.to_vec(),
            reason: "expects a 2-D field with H, W >= 2".into(),
        });
    }
    Ok((s[0], s[1]))
}

/// Full `H x W` squared-magnitude spectrum of a real 2-D field.
pub fn fft2_power_full(field: &Tensor) -> Result<Tensor> {
    let (h, w) = field_dims(field)?;
    let mut re = field.to_vec();
    let mut im = vec![0.0; h * w];
    fft2_inplace(&mut re, &mut im, h, w, false);
    let power: Vec<f64> = re.iter().zip(&im).map(|(&r, &i)| r * r + i * i).collect();
    Tensor::from_vec(power, &[h, w])
}

/// Power on the half-spectrum grid `H x (W/2 + 1)` with conjugate columns
/// folded in, so `sum(power) / (H*W) == sum(field^2)` holds exactly.
pub fn rfft_power2(field: &Tensor) -> Result<Tensor> {
    let (h, w) = field_dims(field)?;
    let full = fft2_power_full(field)?;
    let wc = w / 2 + 1;
    let mut out = vec![0.0; h * wc];
    let fd = full.data();
    for r in 0..h {
        for c in 0..wc {
            let mut p = fd[r * w + c];
            let mirror = (w - c) % w;
            if mirror != c {
                p += fd[r * w + mirror];
            }
            out[r * wc + c] = p;
        }
    }
    Tensor::from_vec(out, &[h, wc])
}

/// Inverse 2-D DFT; the imaginary part is left in `im`.
pub(crate) fn ifft2(re: &mut [f64], im: &mut [f64], h: usize, w: usize) {
    fft2_inplace(re, im, h, w, true);
}

/// Squared magnitudes of the 1-D DFT of a real series.
pub fn fft_1d_power(series: &[f64]) -> Vec<f64> {
    let mut re = series.to_vec();
    let mut im = vec![0.0; series.len()];
    fft_inplace(&mut re, &mut im);
    re.iter().zip(&im).map(|(&r, &i)| r * r + i * i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (j, &v) in x.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft_pow2_and_bluestein() {
        let mut rng = Rng::new(5, 0);
        for n in [8usize, 12, 7, 16, 20] {
            let x = rng.normal_vec(n);
            let mut re = x.clone();
            let mut im = vec![0.0; n];
            fft_inplace(&mut re, &mut im);
            let want = naive_dft(&x);
            for k in 0..n {
                assert!((re[k] - want[k].0).abs() < 1e-9, "n={n} k={k}");
                assert!((im[k] - want[k].1).abs() < 1e-9, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn ifft_inverts_fft() {
        let mut rng = Rng::new(9, 1);
        for n in [16usize, 10] {
            let x = rng.normal_vec(n);
            let mut re = x.clone();
            let mut im = vec![0.0; n];
            fft_inplace(&mut re, &mut im);
            ifft_inplace(&mut re, &mut im);
            for k in 0..n {
                assert!((re[k] - x[k]).abs() < 1e-10);
                assert!(im[k].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_field_power_at_dc() {
        let c = 1.75;
        let field = Tensor::full(&[8, 8], c).unwrap();
        let p = rfft_power2(&field).unwrap();
        let dc = p.data()[0];
        let want = (c * 64.0) * (c * 64.0);
        assert!((dc - want).abs() / want < 1e-12);
        let rest: f64 = p.data()[1..].iter().sum();
        assert!(rest < 1e-9 * want);
    }

    #[test]
    fn cosine_concentrates_in_one_bin() {
        let (h, w) = (16usize, 16usize);
        let k = 3usize;
        let mut data = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                data[r * w + c] = (2.0 * std::f64::consts::PI * k as f64 * c as f64 / w as f64).cos();
            }
        }
        let field = Tensor::from_vec(data, &[h, w]).unwrap();
        let p = rfft_power2(&field).unwrap();
        let wc = w / 2 + 1;
        let total: f64 = p.data().iter().sum::<f64>() - p.data()[0];
        let at_k = p.data()[k]; // row 0, column k
        assert!(at_k / total > 0.99, "tone leak: {at_k} of {total}");
        let _ = wc;
    }

    #[test]
    fn parseval_on_random_fields() {
        let mut rng = Rng::new(77, 0);
        for &(h, w) in &[(8usize, 8usize), (16, 8), (12, 6)] {
            let field = Tensor::gaussian(&[h, w], &mut rng).unwrap();
            let p = rfft_power2(&field).unwrap();
            let lhs: f64 = p.data().iter().sum::<f64>() / (h * w) as f64;
            let rhs: f64 = field.data().iter().map(|&v| v * v).sum();
            assert!((lhs - rhs).abs() / rhs < 1e-10, "{h}x{w}: {lhs} vs {rhs}");
        }
    }
}
