//! Procedural datasets with known spectral structure.
//!
//! Three families: power-law textures (random-phase fields whose radially
//! averaged spectrum follows `(1 + f)^-beta`), blob scenes (class id + 1
//! separated Gaussian bumps), and moving-blob videos (one bump translating
//! at a constant integer velocity per sample, wrapping at the borders).

use super::Result;
use crate::tensor::{self, Rng, Tensor, TensorError};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    PowerlawTexture,
    BlobScene,
    MovingBlobVideo,
}

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::PowerlawTexture => "powerlaw",
            DataKind::BlobScene => "blobs",
            DataKind::MovingBlobVideo => "video",
        }
    }

    pub fn parse(s: &str) -> Option<DataKind> {
        match s {
            "powerlaw" => Some(DataKind::PowerlawTexture),
            "blobs" => Some(DataKind::BlobScene),
            "video" => Some(DataKind::MovingBlobVideo),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataSpec {
    pub kind: DataKind,
    pub classes: usize,
    /// Spectral exponent per class (power-law textures only).
    pub betas: Vec<f64>,
    /// (t, h, w); t = 1 for images.
    pub resolution: (usize, usize, usize),
}

impl DataSpec {
    pub fn powerlaw(h: usize, w: usize) -> DataSpec {
        DataSpec {
            kind: DataKind::PowerlawTexture,
            classes: 2,
            betas: vec![1.5, 2.5],
            resolution: (1, h, w),
        }
    }

    pub fn blobs(h: usize, w: usize, classes: usize) -> DataSpec {
        DataSpec {
            kind: DataKind::BlobScene,
            classes,
            betas: vec![],
            resolution: (1, h, w),
        }
    }

    pub fn video(t: usize, h: usize, w: usize) -> DataSpec {
        DataSpec {
            kind: DataKind::MovingBlobVideo,
            classes: 2,
            betas: vec![],
            resolution: (t, h, w),
        }
    }
}

/// A generated sample set normalized to zero mean and unit std.
pub struct Dataset {
    pub x0: Tensor,
    pub classes: Vec<usize>,
    /// Per-sample (vy, vx) for video data.
    pub velocities: Option<Vec<(i64, i64)>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (t, h, w) of one sample.
    pub fn resolution(&self) -> (usize, usize, usize) {
        let s = self.x0.shape();
        match s.len() {
            3 => (1, s[1], s[2]),
            4 => (s[1], s[2], s[3]),
            _ => unreachable!("dataset rank"),
        }
    }

    /// Copies the selected samples into a batch tensor.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.x0.numel() / self.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut classes = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.x0.data()[i * per..(i + 1) * per]);
            classes.push(self.classes[i]);
        }
        let mut shape = self.x0.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::from_vec(data, &shape)?, classes))
    }

    pub fn sample(&self, i: usize) -> Result<Tensor> {
        let (x, _) = self.gather(&[i])?;
        let s = x.shape()[1..].to_vec();
        x.reshape(&s)
    }
}

fn normalize_in_place(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-12);
    for v in data.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

/// Random-phase field with amplitude envelope `(1 + r)^(-beta/2)`.
fn powerlaw_field(h: usize, w: usize, beta: f64, rng: &mut Rng) -> Vec<f64> {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    let signed = |i: usize, n: usize| -> f64 {
        let k = if i <= n / 2 { i as i64 } else { i as i64 - n as i64 };
        k as f64
    };
    for ky in 0..h {
        for kx in 0..w {
            // fill each conjugate pair once, from its canonical member
            let cy = (h - ky) % h;
            let cx = (w - kx) % w;
            let canonical = (ky, kx) <= (cy, cx);
            if !canonical {
                continue;
            }
            let fy = signed(ky, h);
            let fx = signed(kx, w);
            let r = (fx * fx + fy * fy).sqrt();
            let amp = (1.0 + r).powf(-beta / 2.0);
            if (ky, kx) == (cy, cx) {
                // self-conjugate bins must be real
                let sign = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
                re[ky * w + kx] = amp * sign;
            } else {
                let phase = rng.uniform() * 2.0 * std::f64::consts::PI;
                re[ky * w + kx] = amp * phase.cos();
                im[ky * w + kx] = amp * phase.sin();
                re[cy * w + cx] = re[ky * w + kx];
                im[cy * w + cx] = -im[ky * w + kx];
            }
        }
    }
    tensor::fft::ifft2(&mut re, &mut im, h, w);
    re
}

/// Gaussian bump field with `k` well-separated unit-height bumps.
fn blob_field(h: usize, w: usize, k: usize, rng: &mut Rng) -> Vec<f64> {
    let sigma = h as f64 / 16.0;
    let margin = 2.0 * sigma;
    let mut min_dist = 4.0 * sigma;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(k);
    let mut failures = 0usize;
    while centers.len() < k {
        let cy = rng.uniform_range(margin, h as f64 - margin);
        let cx = rng.uniform_range(margin, w as f64 - margin);
        if centers
            .iter()
            .all(|&(y, x)| ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() >= min_dist)
        {
            centers.push((cy, cx));
        } else {
            failures += 1;
            if failures % 500 == 0 {
                min_dist *= 0.9; // crowded grid, relax deterministically
            }
        }
    }
    let mut field = vec![0.0; h * w];
    for (cy, cx) in centers {
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                field[y * w + x] += (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    field
}

/// One bump translating on a torus with constant integer velocity.
fn moving_blob_video(
    t: usize,
    h: usize,
    w: usize,
    rng: &mut Rng,
) -> (Vec<f64>, (i64, i64)) {
    let sigma = h as f64 / 8.0;
    let py0 = rng.uniform_usize(h) as i64;
    let px0 = rng.uniform_usize(w) as i64;
    let vel = loop {
        let vy = rng.uniform_usize(5) as i64 - 2;
        let vx = rng.uniform_usize(5) as i64 - 2;
        if vy != 0 || vx != 0 {
            break (vy, vx);
        }
    };
    let mut video = vec![0.0; t * h * w];
    for f in 0..t {
        let cy = (py0 + vel.0 * f as i64).rem_euclid(h as i64) as f64;
        let cx = (px0 + vel.1 * f as i64).rem_euclid(w as i64) as f64;
        let frame = &mut video[f * h * w..(f + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = {
                    let d = (y as f64 - cy).abs();
                    d.min(h as f64 - d)
                };
                let dx = {
                    let d = (x as f64 - cx).abs();
                    d.min(w as f64 - d)
                };
                frame[y * w + x] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    (video, vel)
}

/// Generates `n` samples. Sample `i` draws from its own rng stream, so the
/// set is independent of generation order.
pub fn gen_dataset(spec: &DataSpec, n: usize, rng: &Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(TensorError::InvalidShape {
            op: "gen_dataset",
            shape: vec![0],
            reason: "n must be >= 1".into(),
        });
    }
    let (t, h, w) = spec.resolution;
    let per = t * h * w;
    let mut data = Vec::with_capacity(n * per);
    let mut classes = Vec::with_capacity(n);
    let mut velocities = Vec::new();
    for i in 0..n {
        let mut srng = rng.substream(mix_stream(rng.stream(), i as u64));
        match spec.kind {
            DataKind::PowerlawTexture => {
                let class = i % spec.classes;
                let beta = spec.betas[class % spec.betas.len()];
                data.extend_from_slice(&powerlaw_field(h, w, beta, &mut srng));
                classes.push(class);
            }
            DataKind::BlobScene => {
                let class = i % spec.classes;
                data.extend_from_slice(&blob_field(h, w, class + 1, &mut srng));
                classes.push(class);
            }
            DataKind::MovingBlobVideo => {
                let (video, vel) = moving_blob_video(t, h, w, &mut srng);
                data.extend_from_slice(&video);
                velocities.push(vel);
                let speed = vel.0.abs() + vel.1.abs();
                classes.push(((speed - 1) as usize).min(spec.classes - 1));
            }
        }
    }
    normalize_in_place(&mut data);
    let shape = if t == 1 { vec![n, h, w] } else { vec![n, t, h, w] };
    Ok(Dataset {
        x0: Tensor::from_vec(data, &shape)?,
        classes,
        velocities: if velocities.is_empty() { None } else { Some(velocities) },
    })
}

/// Splitmix-style stream derivation so per-item streams never collide with
/// sequentially numbered ones.
pub fn mix_stream(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `x0.swt1` and `classes.csv` into a directory.
pub fn save_dataset<P: AsRef<Path>>(dir: P, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))?;
    tensor::save_swt1(dir.join("x0.swt1"), &data.x0)?;
    let mut csv = String::from("index,class\n");
    for (i, c) in data.classes.iter().enumerate() {
        csv.push_str(&format!("{i},{c}\n"));
    }
    std::fs::write(dir.join("classes.csv"), csv)
        .map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))
}

pub fn load_dataset<P: AsRef<Path>>(dir: P) -> Result<Dataset> {
    let dir = dir.as_ref();
    let x0 = tensor::load_swt1(dir.join("x0.swt1"))?;
    let text = std::fs::read_to_string(dir.join("classes.csv"))
        .map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))?;
    let mut classes = Vec::new();
    for line in text.lines().skip(1) {
        let (_, c) = line
            .split_once(',')
            .ok_or_else(|| TensorError::Io(format!("classes.csv: bad line {line:?}")))?;
        classes.push(
            c.parse()
                .map_err(|_| TensorError::Io(format!("classes.csv: bad class {c:?}")))?,
        );
    }
    if classes.len() != x0.shape()[0] {
        return Err(TensorError::Io(format!(
            "classes.csv has {} rows for {} samples",
            classes.len(),
            x0.shape()[0]
        )));
    }
    Ok(Dataset {
        x0,
        classes,
        velocities: None,
    })
}
