//! Scale-wise distillation: the training loop that turns a many-step
//! teacher into a few-step progressive-resolution student, and the
//! progressive stochastic sampler the student is used with.
//!
//! One training step: pick a sampling-step index from the schedule, build
//! the student input the same way the sampler would (upsample the coarser
//! clean data and renoise; pure noise for the first step), predict clean
//! data at the target scale, and match its distribution against real data
//! at that scale with MMD in teacher feature space, optionally plus the
//! distribution-matching (DMD) gradient and an adversarial head.

mod dmd;
mod features;
mod gan;
mod mmd;

pub use dmd::{dmd_grad, dmd_grad_with, fake_train_step, DmdOutcome};
pub use features::{draw_feature_noise, feature_pipeline, FeatureDraws};
pub use gan::{gan_losses, DiscHead, GanLosses};
pub use mmd::{
    median_bandwidth, mmd2, mmd2_biased, mmd_loss, mmd_permutation_test, KernelSpec, MmdVariant,
};

use crate::diffusion::{noise_to, sample_shape, x0_from_v, Dataset};
use crate::network::{DenoiserNet, Role};
use crate::resample::{resize_area, upsample_to};
use crate::schedule::{ScaleSpec, ScheduleSpec};
use crate::tensor::{self, backward, Adam, NoGrad, Rng, Tensor, TensorError};
use std::path::Path;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// MMD term weight; 1 in every published configuration, 0 only for the
    /// DMD-only robustness probe.
    pub mmd: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mmd: 1.0, alpha: 1.0, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn mmd_only() -> LossWeights {
        LossWeights { mmd: 1.0, alpha: 0.0, beta: 0.0 }
    }

    pub fn dmd_only() -> LossWeights {
        LossWeights { mmd: 0.0, alpha: 1.0, beta: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub schedule: ScheduleSpec,
    pub weights: LossWeights,
    /// Tau interval for noising before feature extraction.
    pub mmd_noise_interval: (f64, f64),
    pub mmd_variant: MmdVariant,
    /// Guidance scale for the real score inside the DMD gradient.
    pub cfg_scale: f64,
    pub lr_gen: f64,
    pub lr_fake: f64,
    pub lr_disc: f64,
    pub steps: usize,
    pub batch: usize,
    /// Fake-model regression steps per generator step.
    pub fake_steps_per_gen: usize,
    /// Rolling-checkpoint period (0 = only the final state is saved).
    pub checkpoint_every: usize,
}

impl DistillConfig {
    pub fn new(schedule: ScheduleSpec) -> DistillConfig {
        DistillConfig {
            schedule,
            weights: LossWeights::default(),
            mmd_noise_interval: (0.0, 0.6),
            mmd_variant: MmdVariant::Main,
            cfg_scale: 4.5,
            lr_gen: 1e-4,
            lr_fake: 1e-4,
            lr_disc: 1e-4,
            steps: 3000,
            batch: 32,
            fake_steps_per_gen: 2,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let violations = self.schedule.validate();
        if !violations.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "distill_config",
                shape: vec![self.schedule.len()],
                reason: format!("schedule invalid: {}", violations[0]),
            });
        }
        let (lo, hi) = self.mmd_noise_interval;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) || lo >= hi {
            return Err(TensorError::InvalidShape {
                op: "distill_config",
                shape: vec![],
                reason: format!("mmd noise interval [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1"),
            });
        }
        if self.weights.mmd < 0.0 || self.weights.alpha < 0.0 || self.weights.beta < 0.0 {
            return Err(TensorError::InvalidShape {
                op: "distill_config",
                shape: vec![],
                reason: "loss weights must be non-negative".into(),
            });
        }
        if self.weights.mmd == 0.0 && self.weights.alpha == 0.0 && self.weights.beta == 0.0 {
            return Err(TensorError::InvalidShape {
                op: "distill_config",
                shape: vec![],
                reason: "all loss weights are zero".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub step: usize,
    /// 1-based sampling-step index trained this iteration.
    pub step_index: usize,
    pub mmd: f64,
    pub dmd: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub d_accuracy: f64,
    pub fake_fm: f64,
    pub total: f64,
}

pub fn breakdown_csv_header() -> &'static str {
    "step,step_index,mmd,dmd,gan_g,gan_d,d_accuracy,fake_fm,total\n"
}

pub fn breakdown_csv_row(b: &LossBreakdown) -> String {
    format!(
        "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.4},{:.6e},{:.6e}\n",
        b.step, b.step_index, b.mmd, b.dmd, b.gan_g, b.gan_d, b.d_accuracy, b.fake_fm, b.total
    )
}

/// All mutable state of one distillation run; checkpointable mid-flight.
pub struct DistillRun {
    pub config: DistillConfig,
    pub student: DenoiserNet,
    pub fake: Option<DenoiserNet>,
    pub disc: Option<DiscHead>,
    opt_gen: Adam,
    opt_fake: Adam,
    opt_disc: Adam,
    pub rng: Rng,
    pub step: usize,
}

impl DistillRun {
    /// Student (and, with the full objective, fake model and head) start as
    /// copies of the teacher.
    pub fn new(teacher: &DenoiserNet, config: DistillConfig, rng: Rng) -> Result<DistillRun> {
        config.validate()?;
        let compat = config
            .schedule
            .check_patch_compat(teacher.config.patch, teacher.config.temporal_patch);
        if !compat.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "distill_run",
                shape: vec![],
                reason: format!("schedule incompatible with patching: {}", compat[0]),
            });
        }
        let mut student = teacher.clone().with_role(Role::Student);
        student.set_trainable(true);
        let fake = if config.weights.alpha > 0.0 || config.weights.beta > 0.0 {
            let mut f = teacher.clone().with_role(Role::Fake);
            f.set_trainable(true);
            Some(f)
        } else {
            None
        };
        let mut init_rng = rng.substream(rng.stream() ^ 0xD15C);
        let disc = if config.weights.beta > 0.0 {
            Some(DiscHead::init(teacher.config.width, &mut init_rng))
        } else {
            None
        };
        let (lr_gen, lr_fake, lr_disc) = (config.lr_gen, config.lr_fake, config.lr_disc);
        Ok(DistillRun {
            config,
            student,
            fake,
            disc,
            opt_gen: Adam::new(lr_gen),
            opt_fake: Adam::new(lr_fake),
            opt_disc: Adam::new(lr_disc),
            rng,
            step: 0,
        })
    }

    /// One full iteration: generator update, then fake-model and
    /// discriminator updates when the objective uses them.
    pub fn train_step(&mut self, teacher: &DenoiserNet, data: &Dataset) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let n_steps = cfg.schedule.len();
        let batch = cfg.batch;
        let mut out = LossBreakdown {
            step: self.step,
            ..Default::default()
        };

        // batch and step-index draws come first, in a fixed order
        let idx: Vec<usize> = (0..batch).map(|_| self.rng.uniform_usize(data.len())).collect();
        let k = 1 + self.rng.uniform_usize(n_steps); // 1-based sampling step
        out.step_index = k;
        let (x0_full, classes) = data.gather(&idx)?;
        let cls_opt: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();

        let target_scale = cfg.schedule.scales[k - 1];
        let tau_k = cfg.schedule.taus[k - 1];
        let x_target = resize_to_scale(&x0_full, target_scale)?;

        // the same transition the sampler performs: coarser clean data,
        // upsampled and renoised at the timestep paired with this scale
        let x_in = if k == 1 {
            Tensor::gaussian(&sample_shape(batch, target_scale.as_tuple()), &mut self.rng)?
        } else {
            let prev = resize_to_scale(&x0_full, cfg.schedule.scales[k - 2])?;
            let up = upsample_to(&prev, target_scale.as_tuple())?;
            let eps = Tensor::gaussian(up.shape(), &mut self.rng)?;
            noise_to(&up, tau_k, &eps)?
        };

        let taus = vec![tau_k; batch];
        let (v_hat, _) = self.student.forward(&x_in, &taus, &cls_opt, false)?;
        let x0_hat = x0_from_v(&x_in, &v_hat, tau_k)?;

        // MMD in teacher feature space, shared (tau, eps) across branches
        let mut total: Option<Tensor> = None;
        if cfg.weights.mmd > 0.0 {
            let draws = draw_feature_noise(
                x_target.shape(),
                cfg.mmd_noise_interval,
                cfg.mmd_variant.skips_noising(),
                &mut self.rng,
            )?;
            let f_fake = feature_pipeline(teacher, &x0_hat, &cls_opt, &draws, true)?;
            let f_real = feature_pipeline(teacher, &x_target, &cls_opt, &draws, false)?;
            let mmd = mmd_loss(&f_real, &f_fake, cfg.mmd_variant)?;
            out.mmd = mmd.item();
            total = Some(mmd.scale(cfg.weights.mmd)?);
        }

        if cfg.weights.alpha > 0.0 {
            let fake_net = self.fake.as_ref().expect("fake model exists when alpha > 0");
            let dmd = dmd_grad(
                &x0_hat,
                &cls_opt,
                teacher,
                fake_net,
                cfg.cfg_scale,
                &mut self.rng,
            )?;
            out.dmd = dmd.surrogate.item();
            let term = dmd.surrogate.scale(cfg.weights.alpha)?;
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }

        if cfg.weights.beta > 0.0 {
            let fake_net = self.fake.as_ref().expect("fake model exists when beta > 0");
            let head = self.disc.as_ref().expect("disc head exists when beta > 0");
            let draws_g = draw_feature_noise(
                x_target.shape(),
                cfg.mmd_noise_interval,
                cfg.mmd_variant.skips_noising(),
                &mut self.rng,
            )?;
            let feat_fake = feature_pipeline(fake_net, &x0_hat, &cls_opt, &draws_g, true)?
                .token_means()?;
            let g_loss = feat_fake
                .linear_logits_with(head)?
                .neg()?
                .softplus()?
                .mean_all()?;
            out.gan_g = g_loss.item();
            let term = g_loss.scale(cfg.weights.beta)?;
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }

        let total = total.expect("config validation rejects all-zero weights");
        out.total = total.item();
        if !out.total.is_finite() {
            return Err(TensorError::NonFinite { op: "swd_training_step" });
        }
        backward(&total)?;
        self.opt_gen.step(self.student.weights_mut())?;
        teacher.zero_grads();
        if let Some(f) = &self.fake {
            f.zero_grads();
        }
        if let Some(d) = &self.disc {
            d.zero_grads();
        }

        // fake-model regression on what the student just produced
        if cfg.weights.alpha > 0.0 || cfg.weights.beta > 0.0 {
            let fake_net = self.fake.as_mut().expect("fake model");
            let student_out = x0_hat.detach();
            for _ in 0..cfg.fake_steps_per_gen {
                out.fake_fm =
                    fake_train_step(fake_net, &mut self.opt_fake, &student_out, &classes, &mut self.rng)?;
            }
        }

        // adversarial update: head plus fake-model weights
        if cfg.weights.beta > 0.0 {
            let fake_net = self.fake.as_mut().expect("fake model");
            let head = self.disc.as_mut().expect("disc head");
            let draws_d = draw_feature_noise(
                x_target.shape(),
                cfg.mmd_noise_interval,
                cfg.mmd_variant.skips_noising(),
                &mut self.rng,
            )?;
            let fr = feature_pipeline(fake_net, &x_target, &cls_opt, &draws_d, true)?.token_means()?;
            let ff = feature_pipeline(fake_net, &x0_hat.detach(), &cls_opt, &draws_d, true)?
                .token_means()?;
            let losses = gan_losses(head, &fr, &ff)?;
            out.gan_d = losses.d_loss.item();
            out.d_accuracy = losses.d_accuracy;
            backward(&losses.d_loss)?;
            self.opt_disc.step(head.weights_mut())?;
            self.opt_fake.step(fake_net.weights_mut())?;
            fake_net.zero_grads();
            head.zero_grads();
        }

        self.step += 1;
        out.step = self.step;
        Ok(out)
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    pub fn save_state<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))?;
        self.student.save(dir.join("student"))?;
        if let Some(f) = &self.fake {
            f.save(dir.join("fake"))?;
        }
        if let Some(d) = &self.disc {
            let ddir = dir.join("disc");
            std::fs::create_dir_all(&ddir)
                .map_err(|e| TensorError::Io(format!("{}: {e}", ddir.display())))?;
            for (name, t) in d.weights() {
                tensor::save_swt1(ddir.join(format!("{name}.swt1")), t)?;
            }
        }
        save_moments(dir, "opt_gen", &self.opt_gen)?;
        save_moments(dir, "opt_fake", &self.opt_fake)?;
        save_moments(dir, "opt_disc", &self.opt_disc)?;
        let (seed, stream, pos) = self.rng.state();
        let meta = format!(
            "step={}\nseed={seed}\nstream={stream}\nword_pos={pos}\nopt_gen_t={}\nopt_fake_t={}\nopt_disc_t={}\n",
            self.step,
            self.opt_gen.step_count(),
            self.opt_fake.step_count(),
            self.opt_disc.step_count(),
        );
        std::fs::write(dir.join("state.txt"), meta)
            .map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))
    }

    /// Restores a run saved by `save_state`; bitwise continuation of the
    /// interrupted run.
    pub fn load_state<P: AsRef<Path>>(dir: P, config: DistillConfig) -> Result<DistillRun> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("state.txt"))
            .map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))?;
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<u128> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TensorError::Io(format!("state.txt missing {k}")))
        };
        let mut student = DenoiserNet::load(dir.join("student"))?;
        student.set_trainable(true);
        let fake = if dir.join("fake").exists() {
            let mut f = DenoiserNet::load(dir.join("fake"))?;
            f.set_trainable(true);
            Some(f)
        } else {
            None
        };
        let disc = if dir.join("disc").exists() {
            let mut d = DiscHead::init(student.config.width, &mut Rng::new(0, 0));
            for (name, t) in d.weights_mut().iter_mut() {
                *t = tensor::load_swt1(dir.join("disc").join(format!("{name}.swt1")))?.requiring_grad();
            }
            Some(d)
        } else {
            None
        };
        let mut opt_gen = Adam::new(config.lr_gen);
        let mut opt_fake = Adam::new(config.lr_fake);
        let mut opt_disc = Adam::new(config.lr_disc);
        load_moments(dir, "opt_gen", &mut opt_gen)?;
        load_moments(dir, "opt_fake", &mut opt_fake)?;
        load_moments(dir, "opt_disc", &mut opt_disc)?;
        opt_gen.set_step_count(get("opt_gen_t")? as u64);
        opt_fake.set_step_count(get("opt_fake_t")? as u64);
        opt_disc.set_step_count(get("opt_disc_t")? as u64);
        let rng = Rng::from_state(get("seed")? as u64, get("stream")? as u64, get("word_pos")?);
        Ok(DistillRun {
            config,
            student,
            fake,
            disc,
            opt_gen,
            opt_fake,
            opt_disc,
            rng,
            step: get("step")? as usize,
        })
    }
}

fn save_moments(dir: &Path, name: &str, opt: &Adam) -> Result<()> {
    for (pname, m, v) in opt.moments() {
        let base = format!("{name}.{pname}");
        tensor::save_swt1(
            dir.join(format!("{base}.m.swt1")),
            &Tensor::from_vec(m.to_vec(), &[m.len()])?,
        )?;
        tensor::save_swt1(
            dir.join(format!("{base}.v.swt1")),
            &Tensor::from_vec(v.to_vec(), &[v.len()])?,
        )?;
    }
    Ok(())
}

fn load_moments(dir: &Path, name: &str, opt: &mut Adam) -> Result<()> {
    let prefix = format!("{name}.");
    let entries = std::fs::read_dir(dir).map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))?;
    let mut names: Vec<String> = Vec::new();
    for e in entries.flatten() {
        let fname = e.file_name().to_string_lossy().to_string();
        if let Some(rest) = fname.strip_prefix(&prefix) {
            if let Some(p) = rest.strip_suffix(".m.swt1") {
                names.push(p.to_string());
            }
        }
    }
    names.sort();
    for p in names {
        let m = tensor::load_swt1(dir.join(format!("{name}.{p}.m.swt1")))?.to_vec();
        let v = tensor::load_swt1(dir.join(format!("{name}.{p}.v.swt1")))?.to_vec();
        opt.restore_moment(&p, m, v);
    }
    Ok(())
}

/// Integer-or-fractional area downscale of a full-resolution batch to a
/// schedule scale; identity when the scale already matches.
pub fn resize_to_scale(x: &Tensor, scale: ScaleSpec) -> Result<Tensor> {
    resize_area(x, scale.as_tuple())
}

/// Progressive stochastic multistep sampling: start from noise at the
/// lowest scale, predict clean data, upsample it to the next scale and
/// renoise at that scale's timestep, repeat; the final clean prediction is
/// returned without renoising. Optionally keeps every intermediate
/// prediction.
pub fn scalewise_sample(
    student: &DenoiserNet,
    schedule: &ScheduleSpec,
    classes: &[Option<usize>],
    rng: &mut Rng,
    keep_intermediates: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let n = classes.len();
    // all noise upfront: the initial field at s_1, then one eps per
    // transition, drawn in loop order
    let mut noises = vec![Tensor::gaussian(&sample_shape(n, schedule.scales[0].as_tuple()), rng)?];
    for scale in schedule.scales.iter().skip(1) {
        noises.push(Tensor::gaussian(&sample_shape(n, scale.as_tuple()), rng)?);
    }
    scalewise_sample_with_noise(student, schedule, classes, &noises, keep_intermediates)
}

/// Sampler core with explicit noise tensors: `noises[0]` seeds the first
/// step, `noises[i]` renoises the transition into step i+1. Exposing the
/// noise makes causality (a later eps cannot change earlier steps) directly
/// testable.
pub fn scalewise_sample_with_noise(
    student: &DenoiserNet,
    schedule: &ScheduleSpec,
    classes: &[Option<usize>],
    noises: &[Tensor],
    keep_intermediates: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let violations = schedule.validate();
    if !violations.is_empty() {
        return Err(TensorError::InvalidShape {
            op: "scalewise_sample",
            shape: vec![schedule.len()],
            reason: format!("schedule invalid: {}", violations[0]),
        });
    }
    if noises.len() != schedule.len() {
        return Err(TensorError::InvalidShape {
            op: "scalewise_sample",
            shape: vec![noises.len()],
            reason: format!("need {} noise tensors", schedule.len()),
        });
    }
    let _g = NoGrad::new();
    let n = classes.len();
    let mut x = noises[0].clone();
    let mut intermediates = Vec::new();
    let mut x0_hat = x.clone();
    for i in 0..schedule.len() {
        let tau = schedule.taus[i];
        let (v, _) = student.forward(&x, &vec![tau; n], classes, false)?;
        x0_hat = x0_from_v(&x, &v, tau)?;
        if keep_intermediates {
            intermediates.push(x0_hat.clone());
        }
        if i + 1 < schedule.len() {
            let next = schedule.scales[i + 1];
            let up = upsample_to(&x0_hat, next.as_tuple())?;
            x = noise_to(&up, schedule.taus[i + 1], &noises[i + 1])?;
        }
    }
    Ok((x0_hat, intermediates))
}

/// Runs a full distillation. `on_step` sees every loss breakdown (for CSV
/// logging and periodic quality evals). Healthy states are checkpointed on
/// the configured cadence; on divergence the error names the last good
/// rolling checkpoint instead of persisting the corrupted state.
pub fn distill_run(
    teacher: &DenoiserNet,
    data: &Dataset,
    config: DistillConfig,
    rng: Rng,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&LossBreakdown, &DenoiserNet),
) -> Result<(DenoiserNet, Vec<LossBreakdown>)> {
    let steps = config.steps;
    let every = config.checkpoint_every;
    let mut run = DistillRun::new(teacher, config, rng)?;
    let mut log = Vec::with_capacity(steps);
    let mut last_good: Option<std::path::PathBuf> = None;
    while run.step < steps {
        match run.train_step(teacher, data) {
            Ok(b) => {
                on_step(&b, &run.student);
                log.push(b);
                if let Some(dir) = checkpoint_dir {
                    if every > 0 && run.step % every == 0 && run.step < steps {
                        let path = dir.join("last_good");
                        run.save_state(&path)?;
                        last_good = Some(path);
                    }
                }
            }
            Err(e) => {
                let where_good = match &last_good {
                    Some(p) => format!("last good state saved to {}", p.display()),
                    None => "no checkpoint was reached before the failure".to_string(),
                };
                return Err(TensorError::Io(format!(
                    "distillation diverged at step {}: {e}; {where_good}",
                    run.step
                )));
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        run.save_state(dir.join("final_state"))?;
    }
    Ok((run.student, log))
}

// Small helper so the generator phase can reuse the head's forward while
// the head itself stays borrowed immutably.
trait LinearLogits {
    fn linear_logits_with(&self, head: &DiscHead) -> Result<Tensor>;
}

impl LinearLogits for Tensor {
    fn linear_logits_with(&self, head: &DiscHead) -> Result<Tensor> {
        head.logits(self)
    }
}

#[cfg(test)]
mod tests;
