//! Radially averaged power spectra, temporal spectra, and the
//! noise-masking analysis that decides how far a noisy field can be
//! downsampled without losing signal.

use crate::diffusion::{mix_stream, noise_to};
use crate::tensor::{fft, Rng, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Mean power per integer frequency bin. Bin 0 is DC and frequencies are
/// strictly increasing.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub bins: Vec<(usize, f64)>,
    pub sample_count: usize,
    /// Elements per analyzed sample (H*W for fields, T for pixel series).
    /// Unit-variance white noise has this as its flat per-bin power under
    /// the unnormalized DFT convention used throughout.
    pub cells_per_sample: usize,
}

impl Spectrum {
    pub fn max_freq(&self) -> usize {
        self.bins.last().map(|&(f, _)| f).unwrap_or(0)
    }

    pub fn power_at(&self, f: usize) -> Option<f64> {
        self.bins.iter().find(|&&(bf, _)| bf == f).map(|&(_, p)| p)
    }

    /// Flat white-noise power per bin for the same geometry.
    pub fn white_noise_level(&self) -> f64 {
        self.cells_per_sample as f64
    }
}

/// Radially averaged power spectral density over a set of equally shaped
/// 2-D fields: the full 2-D power spectrum binned by rounded radial
/// frequency and averaged within each bin and across fields.
pub fn rapsd(fields: &[Tensor]) -> Result<Spectrum> {
    if fields.is_empty() {
        return Err(TensorError::InvalidShape {
            op: "rapsd",
            shape: vec![],
            reason: "empty field set".into(),
        });
    }
    let shape = fields[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "rapsd",
            shape,
            reason: "expects 2-D fields".into(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let signed = |i: usize, n: usize| -> f64 {
        if i <= n / 2 {
            i as f64
        } else {
            i as f64 - n as f64
        }
    };
    let max_r = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt().round() as usize;
    let mut acc = vec![0.0f64; max_r + 1];
    let mut counts = vec![0u64; max_r + 1];
    for field in fields {
        if field.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "rapsd",
                lhs: shape,
                rhs: field.shape().to_vec(),
            });
        }
        let power = fft::fft2_power_full(field)?;
        let pd = power.data();
        for ky in 0..h {
            let fy = signed(ky, h);
            for kx in 0..w {
                let fx = signed(kx, w);
                let r = (fx * fx + fy * fy).sqrt().round() as usize;
                acc[r] += pd[ky * w + kx];
                counts[r] += 1;
            }
        }
    }
    let bins = acc
        .iter()
        .zip(&counts)
        .enumerate()
        .filter(|(_, (_, &c))| c > 0)
        .map(|(f, (&a, &c))| (f, a / c as f64))
        .collect();
    Ok(Spectrum {
        bins,
        sample_count: fields.len(),
        cells_per_sample: h * w,
    })
}

/// 1-D power spectrum along the time axis, averaged over pixels and videos.
/// Mirrored frequency pairs are averaged, so bins run 0..=T/2.
pub fn temporal_psd(videos: &[Tensor]) -> Result<Spectrum> {
    if videos.is_empty() {
        return Err(TensorError::InvalidShape {
            op: "temporal_psd",
            shape: vec![],
            reason: "empty video set".into(),
        });
    }
    let shape = videos[0].shape().to_vec();
    if shape.len() != 3 || shape[0] < 4 {
        return Err(TensorError::InvalidShape {
            op: "temporal_psd",
            shape,
            reason: "expects [T,H,W] videos with T >= 4".into(),
        });
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let half = t / 2;
    let mut acc = vec![0.0f64; half + 1];
    let mut counts = vec![0u64; half + 1];
    let mut series = vec![0.0; t];
    for video in videos {
        if video.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "temporal_psd",
                lhs: shape,
                rhs: video.shape().to_vec(),
            });
        }
        let vd = video.data();
        for pix in 0..h * w {
            for f in 0..t {
                series[f] = vd[f * h * w + pix];
            }
            let power = fft::fft_1d_power(&series);
            for k in 0..=half {
                let mirror = (t - k) % t;
                let p = if mirror == k {
                    power[k]
                } else {
                    0.5 * (power[k] + power[mirror])
                };
                acc[k] += p;
                counts[k] += 1;
            }
        }
    }
    let bins = acc
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(f, (&a, &c))| (f, a / c as f64))
        .collect();
    Ok(Spectrum {
        bins,
        sample_count: videos.len(),
        cells_per_sample: t,
    })
}

/// Spectrum of the forward process at `tau`: every field gets fresh noise
/// from its own stream, then the set is analyzed like clean data.
pub fn noisy_spectrum(x0s: &[Tensor], tau: f64, rng: &Rng) -> Result<Spectrum> {
    let noisy: Result<Vec<Tensor>> = x0s
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut srng = rng.substream(mix_stream(rng.stream(), 0x57EC + i as u64));
            let eps = Tensor::gaussian(x0.shape(), &mut srng)?;
            noise_to(x0, tau, &eps)
        })
        .collect();
    let noisy = noisy?;
    match noisy[0].shape().len() {
        3 => temporal_psd(&noisy),
        _ => rapsd(&noisy),
    }
}

/// Smallest frequency f* (>= 1) such that injected noise dominates the
/// signal by a factor of `rho` at every frequency >= f*. Returns
/// `max_freq + 1` when nothing is masked.
pub fn crossover_frequency(signal: &Spectrum, tau: f64, rho: f64) -> usize {
    assert!(rho > 1.0, "dominance ratio must exceed 1");
    let noise = signal.white_noise_level();
    let lhs = tau * tau * noise;
    let keep = (1.0 - tau) * (1.0 - tau);
    let mut fstar = signal.max_freq() + 1;
    for &(f, s) in signal.bins.iter().rev() {
        if f == 0 {
            break;
        }
        if lhs >= rho * keep * s {
            fstar = f;
        } else {
            break;
        }
    }
    fstar
}

/// Largest downsampling factor d in {1, 2, 4, 8} such that the resolution
/// `full_res / d` still represents every unmasked frequency
/// (`Nyquist(full_res / d) >= f*`). Falls back to 1: not downsampling is
/// always safe.
pub fn safe_scale(signal: &Spectrum, tau: f64, full_res: usize, rho: f64) -> usize {
    assert!(full_res.is_power_of_two(), "full_res must be a power of two");
    let fstar = crossover_frequency(signal, tau, rho);
    for d in [8usize, 4, 2] {
        if full_res / d >= 2 && full_res / (2 * d) >= fstar {
            return d;
        }
    }
    1
}

/// Least-squares slope of `ln(power)` against `ln(1 + f)` over the bins in
/// `[f_lo, f_hi]`. The `1 + f` abscissa matches the spectral envelope of
/// the power-law generator, so its textures fit to their exponent exactly.
pub fn fit_loglog_slope(spectrum: &Spectrum, f_lo: usize, f_hi: usize) -> Result<f64> {
    let pts: Vec<(f64, f64)> = spectrum
        .bins
        .iter()
        .filter(|&&(f, p)| f >= f_lo && f <= f_hi && p > 0.0)
        .map(|&(f, p)| ((1.0 + f as f64).ln(), p.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(TensorError::InvalidShape {
            op: "fit_loglog_slope",
            shape: vec![f_lo, f_hi],
            reason: "not enough bins in range".into(),
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in pts {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    Ok(num / den)
}

/// One row of the spectrum report: signal, analytic noise floor, measured
/// noisy power, and whether the bin is masked at this tau.
#[derive(Clone, Debug)]
pub struct SpectrumRow {
    pub tau: f64,
    pub freq: usize,
    pub signal_power: f64,
    pub noise_power: f64,
    pub noisy_power: f64,
    pub masked: bool,
}

/// Full analysis over a tau list: shared clean spectrum, per-tau noisy
/// spectra, and per-bin masking decisions.
pub fn analyze(fields: &[Tensor], taus: &[f64], rho: f64, rng: &Rng) -> Result<Vec<SpectrumRow>> {
    let signal = rapsd(fields)?;
    let noise = signal.white_noise_level();
    let mut rows = Vec::new();
    for (ti, &tau) in taus.iter().enumerate() {
        let noisy = noisy_spectrum(fields, tau, &rng.substream(mix_stream(rng.stream(), ti as u64)))?;
        let fstar = crossover_frequency(&signal, tau, rho);
        for (&(f, s), &(nf, np)) in signal.bins.iter().zip(&noisy.bins) {
            debug_assert_eq!(f, nf);
            rows.push(SpectrumRow {
                tau,
                freq: f,
                signal_power: s,
                noise_power: noise,
                noisy_power: np,
                masked: f >= fstar,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[SpectrumRow]) -> String {
    let mut out = String::from("tau,freq,signal_power,noise_power,noisy_power,masked\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6e},{:.6e},{:.6e},{}\n",
            r.tau, r.freq, r.signal_power, r.noise_power, r.noisy_power, r.masked
        ));
    }
    out
}
