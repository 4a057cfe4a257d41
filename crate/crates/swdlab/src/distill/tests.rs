use super::*;
use crate::diffusion::{analytic_gaussian_v, gen_dataset, stochastic_sample, DataSpec};
use crate::network::{FeatureMap, NetConfig};
use crate::tensor::grad_check_coords;

fn tiny_config() -> NetConfig {
    NetConfig {
        patch: 4,
        temporal_patch: 1,
        width: 32,
        depth: 2,
        heads: 4,
        num_classes: 2,
        max_grid: (8, 16, 16),
    }
}

fn tiny_teacher(seed: u64) -> DenoiserNet {
    let mut net = DenoiserNet::init(tiny_config(), Role::Teacher, &mut Rng::new(seed, 0)).unwrap();
    net.set_trainable(false);
    net
}

fn feat(tokens: Tensor) -> FeatureMap {
    FeatureMap { tokens }
}

// ── mmd2 estimators ─────────────────────────────────────────────────────

#[test]
fn mmd2_of_identical_sets_is_exactly_zero() {
    let mut rng = Rng::new(1, 0);
    let x = Tensor::gaussian(&[10, 3], &mut rng).unwrap();
    assert_eq!(mmd2(&x, &x, KernelSpec::Linear).unwrap(), 0.0);
    assert_eq!(mmd2(&x, &x, KernelSpec::Rbf { bandwidth: 1.0 }).unwrap(), 0.0);
    assert_eq!(mmd2_biased(&x, &x, KernelSpec::Linear).unwrap().abs(), 0.0);
}

#[test]
fn biased_linear_mmd_equals_squared_mean_gap() {
    let mut rng = Rng::new(2, 0);
    let x = Tensor::gaussian(&[12, 4], &mut rng).unwrap();
    let y = Tensor::gaussian(&[9, 4], &mut rng).unwrap();
    let got = mmd2_biased(&x, &y, KernelSpec::Linear).unwrap();
    let mx = x.mean_axes(&[0], false).unwrap();
    let my = y.mean_axes(&[0], false).unwrap();
    let want: f64 = mx
        .data()
        .iter()
        .zip(my.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn linear_mmd_recovers_known_mean_gap() {
    // X ~ N(0, I), Y ~ N(e1, I): squared mean gap is 1; average a few
    // independent estimates to stay inside the 10% band
    let n = 1000;
    let d = 4;
    let mut acc = 0.0;
    for s in 0..3 {
        let mut rng = Rng::new(3, s);
        let x = Tensor::gaussian(&[n, d], &mut rng).unwrap();
        let mut yv = rng.normal_vec(n * d);
        for i in 0..n {
            yv[i * d] += 1.0;
        }
        let y = Tensor::from_vec(yv, &[n, d]).unwrap();
        acc += mmd2(&x, &y, KernelSpec::Linear).unwrap();
    }
    let got = acc / 3.0;
    assert!((got - 1.0).abs() < 0.1, "mmd2 {got}");
}

#[test]
fn unbiased_estimator_centered_under_null() {
    // 1000 resamplings with P = Q: the mean estimate sits within 3 standard
    // errors of zero
    let reps = 1000;
    let (n, d) = (24usize, 3usize);
    let mut vals = Vec::with_capacity(reps);
    for r in 0..reps {
        let mut rng = Rng::new(4, r as u64);
        let x = Tensor::gaussian(&[n, d], &mut rng).unwrap();
        let y = Tensor::gaussian(&[n, d], &mut rng).unwrap();
        vals.push(mmd2(&x, &y, KernelSpec::Rbf { bandwidth: 1.5 }).unwrap());
    }
    let mean = vals.iter().sum::<f64>() / reps as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64;
    let se = (var / reps as f64).sqrt();
    assert!(mean.abs() < 3.0 * se, "null mean {mean} exceeds 3 SE {se}");
}

#[test]
fn mmd2_rejects_degenerate_inputs() {
    let x = Tensor::zeros(&[1, 3]);
    let y = Tensor::zeros(&[5, 3]);
    assert!(mmd2(&x, &y, KernelSpec::Linear).is_err());
    let z = Tensor::zeros(&[5, 2]);
    assert!(mmd2(&y, &z, KernelSpec::Linear).is_err());
}

#[test]
fn permutation_test_separates_and_accepts() {
    let mut rng = Rng::new(5, 0);
    let x = Tensor::gaussian(&[40, 2], &mut rng).unwrap();
    let y_far = Tensor::gaussian(&[40, 2], &mut rng).unwrap().add_scalar(2.0).unwrap();
    let kernel = KernelSpec::Rbf { bandwidth: 1.0 };
    let (_, p_far) = mmd_permutation_test(&x, &y_far, kernel, 200, &mut rng).unwrap();
    assert!(p_far < 0.01, "clearly separated sets not rejected: p {p_far}");
    let y_same = Tensor::gaussian(&[40, 2], &mut rng).unwrap();
    let (_, p_same) = mmd_permutation_test(&x, &y_same, kernel, 200, &mut rng).unwrap();
    assert!(p_same > 0.01, "null rejected: p {p_same}");
}

// ── mmd_loss over feature maps ──────────────────────────────────────────

#[test]
fn mmd_loss_zero_on_identical_features() {
    let mut rng = Rng::new(6, 0);
    let tokens = Tensor::gaussian(&[3, 8, 5], &mut rng).unwrap();
    for variant in [MmdVariant::Main, MmdVariant::Rbf, MmdVariant::BatchMean] {
        let loss = mmd_loss(&feat(tokens.clone()), &feat(tokens.clone()), variant).unwrap();
        assert!(
            loss.item().abs() < 1e-12,
            "{variant:?} loss {} on identical features",
            loss.item()
        );
    }
}

#[test]
fn main_variant_equals_per_image_biased_linear_mmd() {
    let mut rng = Rng::new(7, 0);
    let fr = Tensor::gaussian(&[4, 6, 5], &mut rng).unwrap();
    let ff = Tensor::gaussian(&[4, 6, 5], &mut rng).unwrap();
    let loss = mmd_loss(&feat(fr.clone()), &feat(ff.clone()), MmdVariant::Main)
        .unwrap()
        .item();
    let mut want = 0.0;
    for i in 0..4 {
        let xr = fr.slice_axis(0, i, 1).unwrap().reshape(&[6, 5]).unwrap();
        let xf = ff.slice_axis(0, i, 1).unwrap().reshape(&[6, 5]).unwrap();
        want += mmd2_biased(&xr, &xf, KernelSpec::Linear).unwrap();
    }
    assert!(
        (loss - want).abs() / want.abs().max(1e-30) < 1e-10,
        "{loss} vs {want}"
    );
}

#[test]
fn main_variant_invariant_to_token_permutation() {
    let mut rng = Rng::new(8, 0);
    let fr = Tensor::gaussian(&[2, 5, 4], &mut rng).unwrap();
    let ff = Tensor::gaussian(&[2, 5, 4], &mut rng).unwrap();
    let base = mmd_loss(&feat(fr.clone()), &feat(ff.clone()), MmdVariant::Main)
        .unwrap()
        .item();
    // rotate tokens inside each image of the fake branch
    let rolled = Tensor::concat(
        &[ff.slice_axis(1, 2, 3).unwrap(), ff.slice_axis(1, 0, 2).unwrap()],
        1,
    )
    .unwrap();
    let perm = mmd_loss(&feat(fr), &feat(rolled), MmdVariant::Main).unwrap().item();
    assert!((base - perm).abs() < 1e-12);
}

#[test]
fn mmd_loss_is_nonnegative_and_detects_mean_shift() {
    let mut rng = Rng::new(9, 0);
    let fr = Tensor::gaussian(&[3, 6, 4], &mut rng).unwrap();
    let ff = fr.add_scalar(0.5).unwrap();
    for variant in [MmdVariant::Main, MmdVariant::BatchMean] {
        let loss = mmd_loss(&feat(fr.clone()), &feat(ff.clone()), variant).unwrap().item();
        assert!(loss > 0.0, "{variant:?} missed a mean shift");
    }
    // batch mismatch is an error
    let bad = Tensor::gaussian(&[2, 6, 4], &mut rng).unwrap();
    assert!(mmd_loss(&feat(fr), &feat(bad), MmdVariant::Main).is_err());
}

// ── feature pipeline ────────────────────────────────────────────────────

#[test]
fn collapsed_interval_equals_no_noise_variant() {
    let teacher = tiny_teacher(10);
    let mut rng = Rng::new(11, 0);
    let samples = Tensor::gaussian(&[2, 8, 8], &mut rng).unwrap();
    let classes = [Some(0), Some(1)];
    let draws_zero = draw_feature_noise(samples.shape(), (0.0, 0.0), false, &mut Rng::new(12, 0)).unwrap();
    let draws_skip = draw_feature_noise(samples.shape(), (0.0, 0.6), true, &mut Rng::new(12, 0)).unwrap();
    let a = feature_pipeline(&teacher, &samples, &classes, &draws_zero, false).unwrap();
    let b = feature_pipeline(&teacher, &samples, &classes, &draws_skip, false).unwrap();
    for (x, y) in a.tokens.data().iter().zip(b.tokens.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn shared_draws_make_identical_inputs_identical_features() {
    let teacher = tiny_teacher(13);
    let mut rng = Rng::new(14, 0);
    let samples = Tensor::gaussian(&[3, 8, 8], &mut rng).unwrap();
    let classes = [Some(0), Some(1), Some(0)];
    let draws = draw_feature_noise(samples.shape(), (0.0, 0.6), false, &mut rng).unwrap();
    let real = feature_pipeline(&teacher, &samples, &classes, &draws, false).unwrap();
    let fake = feature_pipeline(&teacher, &samples, &classes, &draws, true).unwrap();
    let loss = mmd_loss(&real, &fake, MmdVariant::Main).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn gradient_reaches_fake_branch_only() {
    let teacher = tiny_teacher(15);
    let mut rng = Rng::new(16, 0);
    let real_in = Tensor::gaussian(&[2, 8, 8], &mut rng).unwrap().requiring_grad();
    let fake_in = Tensor::gaussian(&[2, 8, 8], &mut rng).unwrap().requiring_grad();
    let classes = [Some(0), Some(1)];
    let draws = draw_feature_noise(real_in.shape(), (0.0, 0.6), false, &mut rng).unwrap();
    let real = feature_pipeline(&teacher, &real_in, &classes, &draws, false).unwrap();
    let fake = feature_pipeline(&teacher, &fake_in, &classes, &draws, true).unwrap();
    assert!(!real.tokens.requires_grad());
    assert!(fake.tokens.requires_grad());
    let loss = mmd_loss(&real, &fake, MmdVariant::Main).unwrap();
    backward(&loss).unwrap();
    assert!(real_in.grad().is_none(), "real branch leaked gradient");
    let gf = fake_in.grad().expect("fake branch must receive gradient");
    assert!(gf.iter().any(|&v| v != 0.0));
}

// ── DMD ─────────────────────────────────────────────────────────────────

#[test]
fn dmd_gradient_vanishes_when_fake_equals_teacher() {
    let teacher = tiny_teacher(17);
    let fake = teacher.clone().with_role(Role::Fake);
    let mut rng = Rng::new(18, 0);
    let x0 = Tensor::gaussian(&[3, 8, 8], &mut rng).unwrap();
    let out = dmd_grad(&x0, &[Some(0), Some(1), Some(0)], &teacher, &fake, 1.0, &mut rng).unwrap();
    assert_eq!(out.grad_scale, 0.0);
    assert_eq!(out.surrogate.item(), 0.0);
}

#[test]
fn dmd_descent_points_toward_the_real_mean() {
    // analytic 1-D oracles: fake is N(0,1), real is N(1,1); the descent
    // direction -g must be positive for every sample
    let mut rng = Rng::new(19, 0);
    let student_x0 = Tensor::gaussian(&[64, 1], &mut rng).unwrap().requiring_grad();
    let out = dmd_grad_with(
        &student_x0,
        &mut rng,
        |x_t, taus| {
            // per-sample tau oracle, real mean 1
            per_sample_oracle(x_t, taus, 1.0)
        },
        |x_t, taus| per_sample_oracle(x_t, taus, 0.0),
    )
    .unwrap();
    backward(&out.surrogate).unwrap();
    let g = student_x0.grad().unwrap();
    assert!(g.iter().all(|&v| v < 0.0), "some descent directions point away");
    assert!(out.grad_scale > 0.0);
}

fn per_sample_oracle(x_t: &Tensor, taus: &[f64], mu: f64) -> Result<Tensor> {
    let mut out = Vec::with_capacity(x_t.numel());
    for (i, &tau) in taus.iter().enumerate() {
        let xi = Tensor::from_vec(vec![x_t.data()[i]], &[1])?;
        out.push(analytic_gaussian_v(&xi, tau, mu, 1.0)?.data()[0]);
    }
    Tensor::from_vec(out, x_t.shape())
}

#[test]
fn dmd_is_stop_gradient_for_teacher_and_fake() {
    let teacher = tiny_teacher(20);
    let mut fake = tiny_teacher(21).with_role(Role::Fake);
    fake.set_trainable(true);
    let mut rng = Rng::new(22, 0);
    let x0 = Tensor::gaussian(&[2, 8, 8], &mut rng).unwrap().requiring_grad();
    let out = dmd_grad(&x0, &[Some(0), Some(1)], &teacher, &fake, 2.0, &mut rng).unwrap();
    backward(&out.surrogate).unwrap();
    assert!(x0.grad().is_some());
    for (name, t) in fake.weights() {
        assert!(t.grad().is_none(), "fake weight {name} received gradient");
    }
}

// ── GAN head ────────────────────────────────────────────────────────────

#[test]
fn identical_feature_batches_score_half_accuracy() {
    let mut rng = Rng::new(23, 0);
    let head = DiscHead::init(8, &mut rng);
    let feats = Tensor::gaussian(&[16, 8], &mut rng).unwrap();
    let out = gan_losses(&head, &feats, &feats).unwrap();
    assert_eq!(out.d_accuracy, 0.5);
    // non-saturating generator loss equals mean softplus(-logit)
    let logits = head.logits(&feats).unwrap();
    let want: f64 = logits
        .data()
        .iter()
        .map(|&v| (-v).max(0.0) + (-(-v).abs()).exp().ln_1p())
        .sum::<f64>()
        / logits.numel() as f64;
    assert!((out.g_loss.item() - want).abs() < 1e-12);
}

#[test]
fn head_learns_separable_features() {
    let mut rng = Rng::new(24, 0);
    let mut head = DiscHead::init(6, &mut rng);
    let mut opt = Adam::new(5e-3);
    let real = Tensor::gaussian(&[32, 6], &mut rng).unwrap().add_scalar(1.5).unwrap();
    let fake = Tensor::gaussian(&[32, 6], &mut rng).unwrap().add_scalar(-1.5).unwrap();
    let mut acc = 0.0;
    for _ in 0..200 {
        let out = gan_losses(&head, &real, &fake).unwrap();
        acc = out.d_accuracy;
        backward(&out.d_loss).unwrap();
        opt.step(head.weights_mut()).unwrap();
    }
    assert!(acc > 0.95, "separable features not separated: acc {acc}");
}

// ── training step and sampler ───────────────────────────────────────────

fn small_distill_config(steps: usize, weights: LossWeights) -> DistillConfig {
    let schedule = ScheduleSpec {
        taus: vec![1.0, 0.7, 0.4],
        scales: vec![ScaleSpec::square(8), ScaleSpec::square(12), ScaleSpec::square(16)],
    };
    let mut cfg = DistillConfig::new(schedule);
    cfg.steps = steps;
    cfg.batch = 4;
    cfg.cfg_scale = 2.0;
    cfg.weights = weights;
    cfg
}

#[test]
fn train_step_bit_deterministic() {
    let teacher = tiny_teacher(25);
    let data = gen_dataset(&DataSpec::powerlaw(16, 16), 32, &Rng::new(26, 0)).unwrap();
    let run_once = || {
        let cfg = small_distill_config(3, LossWeights::default());
        let mut run = DistillRun::new(&teacher, cfg, Rng::new(27, 5)).unwrap();
        let mut breakdowns = Vec::new();
        for _ in 0..3 {
            breakdowns.push(run.train_step(&teacher, &data).unwrap());
        }
        let w = run.student.weights().get("head.w").unwrap().to_vec();
        (breakdowns, w)
    };
    let (b1, w1) = run_once();
    let (b2, w2) = run_once();
    assert_eq!(w1, w2);
    for (a, b) in b1.iter().zip(&b2) {
        assert_eq!(a.total, b.total);
        assert_eq!(a.step_index, b.step_index);
    }
}

#[test]
fn mmd_only_run_skips_fake_and_disc() {
    let teacher = tiny_teacher(28);
    let cfg = small_distill_config(2, LossWeights::mmd_only());
    let run = DistillRun::new(&teacher, cfg, Rng::new(29, 0)).unwrap();
    assert!(run.fake.is_none());
    assert!(run.disc.is_none());
}

#[test]
fn mmd_only_iteration_faster_than_full_objective() {
    let teacher = tiny_teacher(30);
    let data = gen_dataset(&DataSpec::powerlaw(16, 16), 32, &Rng::new(31, 0)).unwrap();
    let time_for = |weights: LossWeights| {
        let cfg = small_distill_config(6, weights);
        let mut run = DistillRun::new(&teacher, cfg, Rng::new(32, 0)).unwrap();
        run.train_step(&teacher, &data).unwrap(); // warm up allocators
        let t0 = std::time::Instant::now();
        for _ in 0..5 {
            run.train_step(&teacher, &data).unwrap();
        }
        t0.elapsed().as_secs_f64() / 5.0
    };
    let mmd_only = time_for(LossWeights::mmd_only());
    let full = time_for(LossWeights::default());
    assert!(
        mmd_only < full,
        "mmd-only iteration ({mmd_only:.4}s) not faster than full ({full:.4}s)"
    );
}

#[test]
fn full_objective_step_runs_and_logs_all_parts() {
    let teacher = tiny_teacher(33);
    let data = gen_dataset(&DataSpec::powerlaw(16, 16), 32, &Rng::new(34, 0)).unwrap();
    let cfg = small_distill_config(2, LossWeights { mmd: 1.0, alpha: 1.0, beta: 0.1 });
    let mut run = DistillRun::new(&teacher, cfg, Rng::new(35, 0)).unwrap();
    let b = run.train_step(&teacher, &data).unwrap();
    assert!(b.mmd >= 0.0);
    assert!(b.fake_fm > 0.0, "fake model did not train");
    assert!(b.gan_d > 0.0, "disc loss missing");
    assert!(b.total.is_finite());
}

#[test]
fn swd_step_gradient_matches_finite_differences() {
    // MMD-only path on a depth-2/width-32 config with frozen randomness:
    // the loss as a function of one student weight
    let teacher = tiny_teacher(36);
    let mut student = teacher.clone().with_role(Role::Student);
    student.set_trainable(true);
    let mut rng = Rng::new(37, 0);
    let x0_full = Tensor::gaussian(&[2, 16, 16], &mut rng).unwrap();
    let x_target = resize_to_scale(&x0_full, ScaleSpec::square(16)).unwrap();
    let prev = resize_to_scale(&x0_full, ScaleSpec::square(8)).unwrap();
    let up = upsample_to(&prev, (1, 16, 16)).unwrap();
    let eps = Tensor::gaussian(up.shape(), &mut rng).unwrap();
    let x_in = noise_to(&up, 0.7, &eps).unwrap();
    let classes = [Some(0), Some(1)];
    let draws = draw_feature_noise(x_target.shape(), (0.0, 0.6), false, &mut rng).unwrap();
    let f_real = feature_pipeline(&teacher, &x_target, &classes, &draws, false).unwrap();

    let wname = "block1.mlp.w1";
    let w0 = student.weights().get(wname).unwrap().detach();
    let loss_of = {
        let teacher = teacher.clone();
        let student = student.clone();
        let (x_in, draws, f_real) = (x_in.clone(), draws, f_real);
        move |w: &Tensor| {
            let mut s = student.clone();
            s.weights_mut().insert(wname.to_string(), w.clone());
            let (v, _) = s.forward(&x_in, &[0.7, 0.7], &classes, false)?;
            let x0_hat = x0_from_v(&x_in, &v, 0.7)?;
            let f_fake = feature_pipeline(&teacher, &x0_hat, &classes, &draws, true)?;
            mmd_loss(&f_real, &f_fake, MmdVariant::Main)
        }
    };
    let probe: Vec<usize> = (0..w0.numel()).step_by(w0.numel() / 20).collect();
    let err = grad_check_coords(loss_of, &w0, &probe).unwrap();
    assert!(err < 1e-3, "swd step grad err {err}");
}

#[test]
fn scalewise_single_step_schedule_is_one_shot() {
    let teacher = tiny_teacher(38);
    let schedule = ScheduleSpec {
        taus: vec![1.0],
        scales: vec![ScaleSpec::square(16)],
    };
    let mut rng = Rng::new(39, 0);
    let (out, inter) = scalewise_sample(&teacher, &schedule, &[Some(0); 2], &mut rng, true).unwrap();
    assert_eq!(out.shape(), &[2, 16, 16]);
    assert_eq!(inter.len(), 1);
}

#[test]
fn degenerate_schedule_matches_stochastic_sampler_bitwise() {
    let teacher = tiny_teacher(40);
    let taus = vec![1.0, 0.7, 0.45, 0.2];
    let schedule = ScheduleSpec::constant(&taus, ScaleSpec::square(16));
    let classes = [Some(0), Some(1)];
    let (sw, _) = scalewise_sample(&teacher, &schedule, &classes, &mut Rng::new(41, 3), false).unwrap();
    let st = stochastic_sample(&teacher, &taus, &classes, &mut Rng::new(41, 3), (1, 16, 16)).unwrap();
    assert_eq!(sw.data(), st.data(), "degenerate scale-wise != stochastic sampler");
}

#[test]
fn later_noise_cannot_change_earlier_steps() {
    let teacher = tiny_teacher(42);
    let schedule = ScheduleSpec {
        taus: vec![1.0, 0.6, 0.3],
        scales: vec![ScaleSpec::square(8), ScaleSpec::square(16), ScaleSpec::square(16)],
    };
    let classes = [Some(0)];
    let mut rng = Rng::new(43, 0);
    let noises: Vec<Tensor> = vec![
        Tensor::gaussian(&[1, 8, 8], &mut rng).unwrap(),
        Tensor::gaussian(&[1, 16, 16], &mut rng).unwrap(),
        Tensor::gaussian(&[1, 16, 16], &mut rng).unwrap(),
    ];
    let (_, base) =
        scalewise_sample_with_noise(&teacher, &schedule, &classes, &noises, true).unwrap();
    let mut tweaked = noises.clone();
    tweaked[2] = Tensor::gaussian(&[1, 16, 16], &mut rng).unwrap();
    let (_, changed) =
        scalewise_sample_with_noise(&teacher, &schedule, &classes, &tweaked, true).unwrap();
    assert_eq!(base[0].data(), changed[0].data());
    assert_eq!(base[1].data(), changed[1].data());
    assert!(base[2].data() != changed[2].data());
}

#[test]
fn sampler_deterministic_under_fixed_seed() {
    let teacher = tiny_teacher(44);
    let schedule = ScheduleSpec {
        taus: vec![1.0, 0.5],
        scales: vec![ScaleSpec::square(8), ScaleSpec::square(16)],
    };
    let a = scalewise_sample(&teacher, &schedule, &[Some(1)], &mut Rng::new(45, 0), false).unwrap();
    let b = scalewise_sample(&teacher, &schedule, &[Some(1)], &mut Rng::new(45, 0), false).unwrap();
    assert_eq!(a.0.data(), b.0.data());
}

// ── run-level behavior ──────────────────────────────────────────────────

#[test]
fn resumed_run_matches_uninterrupted_bitwise() {
    let teacher = tiny_teacher(46);
    let data = gen_dataset(&DataSpec::powerlaw(16, 16), 24, &Rng::new(47, 0)).unwrap();
    let cfg = small_distill_config(8, LossWeights::default());

    let mut straight = DistillRun::new(&teacher, cfg.clone(), Rng::new(48, 0)).unwrap();
    for _ in 0..8 {
        straight.train_step(&teacher, &data).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let mut first = DistillRun::new(&teacher, cfg.clone(), Rng::new(48, 0)).unwrap();
    for _ in 0..4 {
        first.train_step(&teacher, &data).unwrap();
    }
    first.save_state(dir.path().join("mid")).unwrap();
    let mut resumed = DistillRun::load_state(dir.path().join("mid"), cfg).unwrap();
    assert_eq!(resumed.step, 4);
    for _ in 0..4 {
        resumed.train_step(&teacher, &data).unwrap();
    }

    for (name, t) in straight.student.weights() {
        let r = &resumed.student.weights()[name];
        assert_eq!(t.data(), r.data(), "weight {name} diverged after resume");
    }
    let fs = straight.fake.as_ref().unwrap();
    let fr = resumed.fake.as_ref().unwrap();
    for (name, t) in fs.weights() {
        assert_eq!(t.data(), fr.weights()[name].data(), "fake weight {name} diverged");
    }
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let teacher = tiny_teacher(49);
    let data = gen_dataset(&DataSpec::powerlaw(16, 16), 24, &Rng::new(50, 0)).unwrap();
    let mut cfg = small_distill_config(50, LossWeights::mmd_only());
    cfg.lr_gen = 1e25; // forces a non-finite loss within a few steps
    cfg.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let err = distill_run(&teacher, &data, cfg, Rng::new(51, 0), Some(dir.path()), |_, _| {})
        .unwrap_err()
        .to_string();
    assert!(err.contains("diverged"), "{err}");
    assert!(err.contains("last good state"), "{err}");
    assert!(dir.path().join("last_good").join("student").join("manifest.txt").exists());
    // the saved rolling checkpoint is loadable
    let cfg2 = small_distill_config(50, LossWeights::mmd_only());
    let restored = DistillRun::load_state(dir.path().join("last_good"), cfg2).unwrap();
    assert!(restored.step >= 1);
}
