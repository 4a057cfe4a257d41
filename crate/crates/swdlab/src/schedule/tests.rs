use super::*;
use crate::diffusion::{gen_dataset, DataKind, DataSpec};
use crate::spectral::rapsd;
use crate::tensor::{Rng, Tensor};

#[test]
fn published_image_schedules_validate() {
    // the six-step medium-model row and the four-step large-model row
    let med = ScheduleSpec::parse("t=1000,945,896,790,737,602; s=32,48,64,80,96,128").unwrap();
    assert!(med.validate().is_empty(), "{:?}", med.validate());
    assert_eq!(med.len(), 6);
    assert!((med.taus[3] - 0.790).abs() < 1e-12);

    let large = ScheduleSpec::parse("t=1000,896,737,602; s=64,80,96,128").unwrap();
    assert!(large.validate().is_empty());
    assert_eq!(large.target(), ScaleSpec::square(128));

    let sdxl = ScheduleSpec::parse("t=1000,800,600,400; s=64,80,96,128").unwrap();
    assert!(sdxl.validate().is_empty());

    let flux = ScheduleSpec::parse("t=1000,945,790,602; s=32,64,96,128").unwrap();
    assert!(flux.validate().is_empty());
}

#[test]
fn published_video_schedule_validates() {
    let wan = ScheduleSpec::parse("t=1000,896,737,602; s=6x20x34,11x30x52,16x40x70,21x60x104")
        .unwrap();
    assert!(wan.validate().is_empty(), "{:?}", wan.validate());
    assert_eq!(wan.scales[0], ScaleSpec::video(6, 20, 34));
    assert_eq!(wan.target(), ScaleSpec::video(21, 60, 104));
    // patch compatibility is a separate, model-dependent question
    assert!(!wan.check_patch_compat(4, 2).is_empty());
    assert!(wan.check_patch_compat(2, 1).is_empty());
}

#[test]
fn violations_name_index_and_rule() {
    let spec = ScheduleSpec {
        taus: vec![1.0, 0.8, 0.6],
        scales: vec![ScaleSpec::square(64), ScaleSpec::square(32), ScaleSpec::square(128)],
    };
    let v = spec.validate();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].index, 1);
    assert!(v[0].rule.contains("decreases"), "{}", v[0].rule);

    let not_from_one = ScheduleSpec {
        taus: vec![0.9, 0.5],
        scales: vec![ScaleSpec::square(32), ScaleSpec::square(64)],
    };
    assert!(not_from_one.validate().iter().any(|v| v.rule.contains("1.0")));

    let non_decreasing_tau = ScheduleSpec {
        taus: vec![1.0, 0.5, 0.5],
        scales: vec![ScaleSpec::square(32); 3],
    };
    assert!(!non_decreasing_tau.validate().is_empty());
}

#[test]
fn serialize_parse_round_trip() {
    for text in [
        "t=1000,896,737,602; s=64,80,96,128",
        "t=1000,945,896,790,737,602; s=32,48,64,80,96,128",
        "t=1000,896,737,602; s=6x20x34,11x30x52,16x40x70,21x60x104",
        "t=1000,500; s=2x16x16,4x32x32",
    ] {
        let spec = ScheduleSpec::parse(text).unwrap();
        assert_eq!(spec.serialize(), text, "canonical text round trip");
        assert_eq!(ScheduleSpec::parse(&spec.serialize()).unwrap(), spec);
    }
}

#[test]
fn parse_errors_carry_positions() {
    let e = ScheduleSpec::parse("t=1000,abc; s=32,64").unwrap_err();
    assert!(e.position > 0 && e.message.contains("abc"), "{e}");
    assert!(ScheduleSpec::parse("s=32,64").is_err());
    assert!(ScheduleSpec::parse("t=1000,900; s=32").is_err()); // length mismatch
    assert!(ScheduleSpec::parse("t=1000,1200; s=32,64").is_err()); // out of range
    assert!(ScheduleSpec::parse("t=1000,900; s=32,4x4").is_err()); // bad triple
}

#[test]
fn constant_helper_and_target() {
    let c = ScheduleSpec::constant(&[1.0, 0.6], ScaleSpec::square(64));
    assert!(c.validate().is_empty());
    assert_eq!(c.scales, vec![ScaleSpec::square(64); 2]);
}

fn powerlaw_spectrum(beta: f64, res: usize, n: usize, seed: u64) -> crate::spectral::Spectrum {
    let spec = DataSpec {
        kind: DataKind::PowerlawTexture,
        classes: 1,
        betas: vec![beta],
        resolution: (1, res, res),
    };
    let data = gen_dataset(&spec, n, &Rng::new(seed, 0)).unwrap();
    let fields: Vec<Tensor> = (0..n).map(|i| data.sample(i).unwrap()).collect();
    rapsd(&fields).unwrap()
}

#[test]
fn suggest_output_always_validates() {
    let s = powerlaw_spectrum(2.5, 64, 64, 1);
    for n in [2usize, 3, 4, 6] {
        for rho in [2.0, 3.0, 6.0] {
            for floor in [0.4, 0.6, 0.74] {
                let spec = suggest(&s, n, ScaleSpec::square(64), rho, floor);
                assert!(spec.validate().is_empty(), "{spec:?}");
                assert_eq!(spec.target(), ScaleSpec::square(64));
            }
        }
    }
}

#[test]
fn suggest_two_steps_starts_at_the_cap() {
    // at tau = 1 everything above DC is masked, so the first step may run at
    // the 8x floor regardless of the data
    let s = powerlaw_spectrum(1.5, 64, 64, 2);
    let spec = suggest(&s, 2, ScaleSpec::square(64), 3.0, 0.6);
    assert_eq!(spec.scales[0], ScaleSpec::square(8));
    assert_eq!(spec.scales[1], ScaleSpec::square(64));
}

#[test]
fn suggest_on_noise_dominated_data_rises_late() {
    // weak signal: even mid taus keep the 8x cap, then the target pins the end
    let weak = {
        let mut s = powerlaw_spectrum(1.5, 64, 64, 3);
        for b in s.bins.iter_mut() {
            b.1 *= 1e-4;
        }
        s
    };
    let spec = suggest(&weak, 4, ScaleSpec::square(64), 3.0, 0.6);
    assert!(spec.validate().is_empty());
    assert_eq!(spec.scales[0], ScaleSpec::square(8));
    assert_eq!(spec.scales[1], ScaleSpec::square(8));
    assert_eq!(spec.scales[3], ScaleSpec::square(64));
}

mod props {
    use super::{ScaleSpec, ScheduleSpec};
    use crate::tensor::Rng;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn parse_serialize_identity_on_generated_specs(
            n in 2usize..7,
            seed in 0u64..500,
        ) {
            let mut rng = Rng::new(seed, 9);
            let mut ts: Vec<i64> = vec![1000];
            let mut t = 1000i64;
            for _ in 1..n {
                t -= 1 + rng.uniform_usize(300) as i64;
                if t <= 0 { t = 1; }
                ts.push(t);
            }
            let mut ok = true;
            for w in ts.windows(2) { if w[1] >= w[0] { ok = false; } }
            prop_assume!(ok);
            let mut scales = Vec::new();
            let mut s = 8 + rng.uniform_usize(8);
            for _ in 0..n {
                scales.push(ScaleSpec::square(s));
                s += rng.uniform_usize(16);
            }
            let spec = ScheduleSpec {
                taus: ts.iter().map(|&t| t as f64 / 1000.0).collect(),
                scales,
            };
            prop_assert!(spec.validate().is_empty());
            let back = ScheduleSpec::parse(&spec.serialize()).unwrap();
            prop_assert_eq!(back, spec);
        }
    }
}
