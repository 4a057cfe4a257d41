//! Quality metrics and benchmarking: Fréchet distance and kernel MMD in the
//! teacher's feature space, wall-clock latency, analytic FLOP counts, and
//! the comparative experiments built on top of them.

use crate::diffusion::{mix_stream, Dataset};
use crate::distill::{
    distill_run, mmd2, scalewise_sample, DistillConfig, KernelSpec, LossWeights,
};
use crate::network::{DenoiserNet, NetConfig};
use crate::schedule::ScheduleSpec;
use crate::tensor::{NoGrad, Rng, Tensor, TensorError};
use nalgebra::{DMatrix, DVector};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Per-image token-mean features from the teacher's middle block at tau = 0.
pub fn teacher_features(
    teacher: &DenoiserNet,
    samples: &Tensor,
    classes: &[usize],
) -> Result<Tensor> {
    let _g = NoGrad::new();
    let n = samples.shape()[0];
    let cls: Vec<Option<usize>> = classes.iter().take(n).map(|&c| Some(c)).collect();
    let taus = vec![0.0; n];
    let (_, features) = teacher.forward(samples, &taus, &cls, true)?;
    features.expect("features requested").token_means()
}

#[derive(Clone, Copy, Debug)]
pub struct FdResult {
    pub value: f64,
    /// A near-singular covariance was stabilized with a 1e-6 ridge.
    pub ridge_applied: bool,
}

/// Fréchet distance between Gaussians fitted to teacher features of the two
/// sample sets: sqrt(|mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))), with the
/// matrix square root taken through symmetric eigendecompositions.
pub fn fd_teacher(
    teacher: &DenoiserNet,
    samples: &Tensor,
    sample_classes: &[usize],
    reference: &Tensor,
    reference_classes: &[usize],
) -> Result<FdResult> {
    let c = teacher.config.width;
    for (name, set) in [("samples", samples), ("reference", reference)] {
        if set.shape()[0] < 2 * c {
            return Err(TensorError::InvalidShape {
                op: "fd_teacher",
                shape: set.shape().to_vec(),
                reason: format!("{name}: need at least {} samples for a stable covariance", 2 * c),
            });
        }
    }
    let fa = teacher_features(teacher, samples, sample_classes)?;
    let fb = teacher_features(teacher, reference, reference_classes)?;
    Ok(frechet_from_features(&fa, &fb))
}

/// Fréchet distance between Gaussians fitted to two feature matrices.
pub fn frechet_from_features(fa: &Tensor, fb: &Tensor) -> FdResult {
    let (mu1, mut s1) = gaussian_fit(fa);
    let (mu2, mut s2) = gaussian_fit(fb);
    let c = mu1.len();
    let min_eig = |m: &DMatrix<f64>| {
        m.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::MAX, f64::min)
    };
    let mut ridge_applied = false;
    if min_eig(&s1) < 1e-10 || min_eig(&s2) < 1e-10 {
        ridge_applied = true;
        for i in 0..c {
            s1[(i, i)] += 1e-6;
            s2[(i, i)] += 1e-6;
        }
    }
    // tr sqrt(S1 S2) via the symmetric product sqrt(S1)^T S2 sqrt(S1)
    let e1 = s1.clone().symmetric_eigen();
    let sqrt_vals = DVector::from_iterator(c, e1.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    let s1_sqrt = &e1.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * e1.eigenvectors.transpose();
    let inner = &s1_sqrt * &s2 * &s1_sqrt;
    let inner_sym = (inner.clone() + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner_sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let mean_gap: f64 = (&mu1 - &mu2).norm_squared();
    let fd2 = mean_gap + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    FdResult {
        value: fd2.max(0.0).sqrt(),
        ridge_applied,
    }
}

fn gaussian_fit(features: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, c) = (features.shape()[0], features.shape()[1]);
    let data = features.data();
    let mut mu = DVector::zeros(c);
    for i in 0..n {
        for j in 0..c {
            mu[j] += data[i * c + j];
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(c, c);
    for i in 0..n {
        for a in 0..c {
            let da = data[i * c + a] - mu[a];
            for b in a..c {
                cov[(a, b)] += da * (data[i * c + b] - mu[b]);
            }
        }
    }
    for a in 0..c {
        for b in a..c {
            let v = cov[(a, b)] / (n as f64 - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mu, cov)
}

/// Unbiased kernel MMD between teacher features of the two sets, RBF with
/// the median-heuristic bandwidth over the pooled features.
pub fn mmd_metric(
    teacher: &DenoiserNet,
    samples: &Tensor,
    sample_classes: &[usize],
    reference: &Tensor,
    reference_classes: &[usize],
) -> Result<f64> {
    let fa = teacher_features(teacher, samples, sample_classes)?;
    let fb = teacher_features(teacher, reference, reference_classes)?;
    let pooled = Tensor::concat(&[fa.clone(), fb.clone()], 0)?;
    mmd2(&fa, &fb, KernelSpec::rbf_median(&pooled))
}

#[derive(Clone, Copy, Debug)]
pub struct LatencyStats {
    pub sec_per_sample_mean: f64,
    pub sec_per_sample_std: f64,
    pub runs: usize,
    pub batch: usize,
}

/// Times a sampler closure over repeated runs, two warmups excluded.
/// Per-sample figures divide by the batch the closure produces.
pub fn latency_bench(
    mut sampler: impl FnMut() -> Result<Tensor>,
    runs: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    let mut batch = 0usize;
    for _ in 0..warmup {
        batch = sampler()?.shape()[0];
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = std::time::Instant::now();
        let out = sampler()?;
        times.push(t0.elapsed().as_secs_f64());
        batch = out.shape()[0];
    }
    let per: Vec<f64> = times.iter().map(|t| t / batch as f64).collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    let var = per.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / per.len() as f64;
    Ok(LatencyStats {
        sec_per_sample_mean: mean,
        sec_per_sample_std: var.sqrt(),
        runs,
        batch,
    })
}

/// Analytic multiply-adds per generated sample for a net run over a
/// schedule: per step, attention 4LC^2 + 2L^2C, MLP 8LC^2, plus patch
/// embeddings and the conditioning path.
pub fn flop_estimate(config: &NetConfig, schedule: &ScheduleSpec) -> f64 {
    let c = config.width as f64;
    let depth = config.depth as f64;
    let mut total = 0.0;
    for scale in &schedule.scales {
        let (t, h, w) = scale.as_tuple();
        let l = config.tokens_for(t, h, w) as f64;
        let p = config.patch_dim() as f64;
        let attn = 4.0 * l * c * c + 2.0 * l * l * c;
        let mlp = 8.0 * l * c * c;
        let blocks = depth * (attn + mlp + 6.0 * c * c);
        let embed = 2.0 * l * p * c + 4.0 * c * c;
        total += blocks + embed;
    }
    total
}

/// One row of a quality/latency comparison.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub name: String,
    pub steps: usize,
    pub fd: f64,
    pub ridge_applied: bool,
    pub mmd: f64,
    pub sec_per_sample: f64,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("name,steps,fd_teacher,ridge,mmd,sec_per_sample\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6e},{},{:.6e},{:.6e}\n",
            r.name, r.steps, r.fd, r.ridge_applied, r.mmd, r.sec_per_sample
        ));
    }
    out
}

/// Evaluates one student: scale-wise samples against held-out reference
/// data, scored with FD and MMD in the metric teacher's feature space, plus
/// measured sampling latency.
pub fn evaluate_student(
    name: &str,
    student: &DenoiserNet,
    schedule: &ScheduleSpec,
    metric_teacher: &DenoiserNet,
    reference: &Dataset,
    eval_n: usize,
    latency_runs: usize,
    rng: &Rng,
) -> Result<ReportRow> {
    let (samples, classes) = sample_student(student, schedule, eval_n, rng)?;
    let (ref_x, ref_cls) = reference.gather(&(0..reference.len()).collect::<Vec<_>>())?;
    let fd = fd_teacher(metric_teacher, &samples, &classes, &ref_x, &ref_cls)?;
    let mmd = mmd_metric(metric_teacher, &samples, &classes, &ref_x, &ref_cls)?;
    let latency = {
        let mut lrng = rng.substream(mix_stream(rng.stream(), 0x1A7E));
        let bench_classes: Vec<Option<usize>> = (0..8).map(|i| Some(i % student.config.num_classes)).collect();
        latency_bench(
            || {
                scalewise_sample(student, schedule, &bench_classes, &mut lrng, false)
                    .map(|(out, _)| out)
            },
            latency_runs,
            2,
        )?
    };
    Ok(ReportRow {
        name: name.to_string(),
        steps: schedule.len(),
        fd: fd.value,
        ridge_applied: fd.ridge_applied,
        mmd,
        sec_per_sample: latency.sec_per_sample_mean,
    })
}

/// Draws `n` scale-wise samples with balanced classes.
pub fn sample_student(
    student: &DenoiserNet,
    schedule: &ScheduleSpec,
    n: usize,
    rng: &Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let classes: Vec<usize> = (0..n).map(|i| i % student.config.num_classes).collect();
    let cls_opt: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();
    let mut srng = rng.substream(mix_stream(rng.stream(), 0x5A3));
    let (samples, _) = scalewise_sample(student, schedule, &cls_opt, &mut srng, false)?;
    Ok((samples, classes))
}

#[derive(Clone, Debug)]
pub struct RobustnessCell {
    pub teacher: String,
    pub mode: String,
    pub fd: f64,
}

pub fn robustness_csv(cells: &[RobustnessCell]) -> String {
    let mut out = String::from("teacher,mode,fd_teacher\n");
    for c in cells {
        out.push_str(&format!("{},{},{:.6e}\n", c.teacher, c.mode, c.fd));
    }
    out
}

/// The scale-adapted-teacher probe: distill four students (two teachers
/// crossed with MMD-only / DMD-only objectives) and report FD against the
/// same reference with the same metric teacher.
#[allow(clippy::too_many_arguments)]
pub fn lowres_robustness(
    teacher_full: &DenoiserNet,
    teacher_highres: &DenoiserNet,
    synth_full: &Dataset,
    synth_highres: &Dataset,
    metric_teacher: &DenoiserNet,
    reference: &Dataset,
    template: &DistillConfig,
    eval_n: usize,
    rng: &Rng,
) -> Result<Vec<RobustnessCell>> {
    let mut cells = Vec::new();
    let cases = [
        ("full", LossWeights::mmd_only(), "mmd_only"),
        ("full", LossWeights::dmd_only(), "dmd_only"),
        ("highres_only", LossWeights::mmd_only(), "mmd_only"),
        ("highres_only", LossWeights::dmd_only(), "dmd_only"),
    ];
    for (i, (tname, weights, mode)) in cases.into_iter().enumerate() {
        let (teacher, data) = if tname == "full" {
            (teacher_full, synth_full)
        } else {
            (teacher_highres, synth_highres)
        };
        let mut cfg = template.clone();
        cfg.weights = weights;
        let run_rng = rng.substream(mix_stream(rng.stream(), 0xB0B + i as u64));
        let (student, _) = distill_run(teacher, data, cfg.clone(), run_rng, None, |_, _| {})?;
        let eval_rng = rng.substream(mix_stream(rng.stream(), 0xE7A + i as u64));
        let (samples, classes) = sample_student(&student, &cfg.schedule, eval_n, &eval_rng)?;
        let (ref_x, ref_cls) = reference.gather(&(0..reference.len()).collect::<Vec<_>>())?;
        let fd = fd_teacher(metric_teacher, &samples, &classes, &ref_x, &ref_cls)?;
        cells.push(RobustnessCell {
            teacher: tname.to_string(),
            mode: mode.to_string(),
            fd: fd.value,
        });
    }
    Ok(cells)
}
