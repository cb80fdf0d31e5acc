use proptest::prelude::*;
use trace_core::cli::TraceConfig;
use trace_core::curriculum::{
    align_loss, bce_loss, ce_loss, dice_loss, run_stage, total_loss, train_all, FrozenTeacher, LossWeights,
    RandomStreamTeacher, StageId, TrainConfig, TrainState,
};
use trace_core::model::TraceModel;
use trace_core::numerics::gradcheck::{check, random_tensor};
use trace_core::numerics::{Graph, Rng, Tensor};
use trace_core::synth::{make_dataset, ClipDims, ClipSample, DatasetConfig};
use trace_core::Error;

const LN2: f64 = std::f64::consts::LN_2;

fn loss_of(f: impl for<'g> Fn(&'g Graph<f64>) -> trace_core::Result<trace_core::numerics::Var<'g, f64>>) -> f64 {
    let g = Graph::new();
    f(&g).unwrap().value().item()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce_oracle(s: &[f64], m: &[f64]) -> f64 {
    s.iter()
        .zip(m)
        .map(|(&s, &m)| -(m * sigmoid(s).ln() + (1.0 - m) * (1.0 - sigmoid(s)).ln()))
        .sum::<f64>()
        / s.len() as f64
}

fn mask(shape: &[usize], f: impl Fn(usize) -> bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| f64::from(u8::from(f(i))))
}

// ------------------------------------------------------------ losses

#[test]
fn bce_examples() {
    let m = mask(&[2, 1, 4, 4], |i| i % 3 == 0);
    let l = loss_of(|g| bce_loss(g.constant(Tensor::zeros(&[2, 1, 4, 4])), &m));
    assert!((l - LN2).abs() < 1e-12);

    let ones = mask(&[1, 1, 4, 4], |_| true);
    let l = loss_of(|g| bce_loss(g.constant(Tensor::full(&[1, 1, 4, 4], 30.0)), &ones));
    assert!(l < 1e-9 && l >= 0.0);

    let s = Tensor::new(&[1, 1, 2, 2], vec![0.3, -1.2, 2.5, -0.1]).unwrap();
    let m = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    let l = loss_of(|g| bce_loss(g.constant(s.clone()), &m));
    assert!((l - bce_oracle(s.data(), m.data())).abs() < 1e-12);
}

#[test]
fn dice_examples() {
    let m = mask(&[1, 1, 16, 16], |i| (i / 16) < 8);
    let exact = Tensor::from_fn(&[1, 1, 16, 16], |i| if m.data()[i] > 0.5 { 30.0 } else { -30.0 });
    assert!(loss_of(|g| dice_loss(g.constant(exact.clone()), &m)) < 1e-3);

    // Σpm = 0, Σp = ΣM = 128, so the loss is 1 - ε / (256 + ε).
    let inverse = Tensor::from_fn(&[1, 1, 16, 16], |i| if m.data()[i] > 0.5 { -30.0 } else { 30.0 });
    let l = loss_of(|g| dice_loss(g.constant(inverse.clone()), &m));
    assert!((l - (1.0 - 1.0 / 257.0)).abs() < 1e-9, "{l}");

    let empty = Tensor::zeros(&[1, 1, 16, 16]);
    let l = loss_of(|g| dice_loss(g.constant(Tensor::full(&[1, 1, 16, 16], -30.0)), &empty));
    assert!(l.abs() < 1e-9);

    let bad = loss_of_result(|g| dice_loss(g.constant(Tensor::zeros(&[1, 1, 4, 4])), &empty));
    assert!(matches!(bad, Err(Error::Shape { .. })));
}

fn loss_of_result(
    f: impl for<'g> Fn(&'g Graph<f64>) -> trace_core::Result<trace_core::numerics::Var<'g, f64>>,
) -> trace_core::Result<f64> {
    let g = Graph::new();
    f(&g).map(|v| v.value().item())
}

#[test]
fn ce_examples() {
    let l = loss_of(|g| ce_loss(g.constant(Tensor::zeros(&[4, 3])), &[0, 1, 2, 1]));
    assert!((l - 3f64.ln()).abs() < 1e-12);

    let sharp = Tensor::new(&[2, 3], vec![30.0, 0.0, 0.0, 0.0, 0.0, 30.0]).unwrap();
    assert!(loss_of(|g| ce_loss(g.constant(sharp.clone()), &[0, 2])) < 1e-12);

    let z = [1.0f64, -0.5, 0.25];
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    let hand = Tensor::new(&[1, 3], z.to_vec()).unwrap();
    let l = loss_of(|g| ce_loss(g.constant(hand.clone()), &[1]));
    assert!((l - (lse + 0.5)).abs() < 1e-12);

    let err = loss_of_result(|g| ce_loss(g.constant(Tensor::zeros(&[1, 3])), &[3])).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn total_loss_weights() {
    let w = LossWeights::default();
    assert!((w.combine(0.2, 0.1, 0.6) - 0.6).abs() < 1e-12);
    assert!((LossWeights::EQUAL.combine(0.2, 0.1, 0.6) - 0.45).abs() < 1e-12);
    let seg_only = LossWeights { seg: 1.0, cls: 0.0 };
    assert!((seg_only.combine(0.2, 0.1, 0.6) - 0.3).abs() < 1e-12);

    let s = |v: f64| Tensor::new(&[1], vec![v]).unwrap();
    let l = loss_of(|g| total_loss(g.constant(s(0.2)), g.constant(s(0.1)), Some(g.constant(s(0.6))), w));
    assert!((l - 0.6).abs() < 1e-12);
    let l = loss_of(|g| total_loss(g.constant(s(0.2)), g.constant(s(0.1)), None, w));
    assert!((l - 0.3).abs() < 1e-12);

    let mut cfg = TrainConfig::default();
    assert_eq!(cfg.loss_weights(), w);
    cfg.toggles.equal_lambda = true;
    assert_eq!(cfg.loss_weights(), LossWeights::EQUAL);
}

#[test]
fn align_examples() {
    let mut rng = Rng::new(1);
    let t = random_tensor(&[2, 256], 1.0, &mut rng);
    assert_eq!(loss_of(|g| align_loss(g.constant(t.clone()), &t)), 0.0);

    let e = |k: usize| Tensor::from_fn(&[1, 256], |i| f64::from(u8::from(i == k)));
    let l = loss_of(|g| align_loss(g.constant(e(3)), &e(200)));
    assert!((l - 2.0 / 256.0).abs() < 1e-15);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = Rng::new(9);
    let m = mask(&[2, 1, 3, 3], |i| i % 2 == 0);
    let target = random_tensor(&[2, 5], 1.0, &mut rng);
    let s = random_tensor(&[2, 1, 3, 3], 2.0, &mut rng);
    let cases: Vec<(&str, Tensor<f64>, Box<dyn for<'g> Fn(&'g Graph<f64>, &[trace_core::numerics::Var<'g, f64>]) -> trace_core::Result<trace_core::numerics::Var<'g, f64>>>)> = vec![
        ("bce", s.clone(), Box::new(|_, v| bce_loss(v[0], &m))),
        ("dice", s.clone(), Box::new(|_, v| dice_loss(v[0], &m))),
        ("seg", s, Box::new(|_, v| bce_loss(v[0], &m)?.add(dice_loss(v[0], &m)?))),
        ("ce", random_tensor(&[4, 3], 2.0, &mut rng), Box::new(|_, v| ce_loss(v[0], &[0, 2, 1, 2]))),
        ("align", random_tensor(&[2, 5], 1.0, &mut rng), Box::new(|_, v| align_loss(v[0], &target))),
    ];
    for (name, x, f) in cases {
        let r = check(&[x], |g, v| f(g, v), 1e-5, usize::MAX, &mut rng).unwrap();
        assert!(r.max_rel_err < 1e-6, "{name}: {r:?}");
    }
}

proptest! {
    #[test]
    fn losses_are_non_negative(
        s in prop::collection::vec(-40.0f64..40.0, 16),
        bits in prop::collection::vec(any::<bool>(), 16),
        labels in prop::collection::vec(0usize..3, 4),
        z in prop::collection::vec(-40.0f64..40.0, 12),
    ) {
        let st = Tensor::new(&[1, 1, 4, 4], s).unwrap();
        let m = Tensor::new(&[1, 1, 4, 4], bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
        let zt = Tensor::new(&[4, 3], z).unwrap();
        prop_assert!(loss_of(|g| bce_loss(g.constant(st.clone()), &m)) >= 0.0);
        let d = loss_of(|g| dice_loss(g.constant(st.clone()), &m));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(loss_of(|g| ce_loss(g.constant(zt.clone()), &labels)) >= 0.0);
        let target = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        prop_assert!(loss_of(|g| align_loss(g.constant(zt.clone()), &target)) >= 0.0);
    }
}

// ------------------------------------------------------------ stages

const TINY: &str = "\
encoder.channels = 8,8,8,8
encoder.depths = 1,1,1,1
encoder.heads = 1,1,1,1
encoder.ffn_expansion = 2
encoder.reduction = 2,2,1,1
head.embed_dim = 8
atf.dim = 16
atf.cnn_channels = 4,8
atf.cls_hidden = 8
train.epochs_s1a = 1
train.epochs_s1b = 1
train.epochs_s2_warmup = 1
train.epochs_s2 = 1
train.epochs_s3_atf = 1
train.epochs_s3_e2e = 1
train.lr_s1a = 0.001
train.lr_s1b = 0.001
train.lr_s2 = 0.001
train.lr_s3 = 0.001
train.frame_batch = 8
train.clip_batch = 2
train.accum = 2
data.frames = 4
";

struct Setup {
    cfg: TraceConfig,
    data: Vec<ClipSample>,
    teacher: RandomStreamTeacher,
}

fn setup(extra: &str) -> Setup {
    setup_sized(extra, 32)
}

fn setup_sized(extra: &str, size: usize) -> Setup {
    let cfg = TraceConfig::parse(&format!("{TINY}{extra}data.height = {size}\ndata.width = {size}\n")).unwrap();
    let ds = make_dataset(&DatasetConfig {
        clips: 9,
        animals: 3,
        dims: ClipDims {
            height: size,
            width: size,
            frames: 4,
        },
        seed: 3,
    })
    .unwrap();
    let teacher = RandomStreamTeacher::new(cfg.train.teacher_seed, cfg.atf_feat_channels(), cfg.atf.dim);
    Setup {
        cfg,
        data: ds.train,
        teacher,
    }
}

fn fresh(s: &Setup) -> TrainState {
    TrainState {
        model: TraceModel::new(&s.cfg.model_config().unwrap(), s.cfg.train.seed).unwrap(),
        completed: Vec::new(),
    }
}

fn snapshot(state: &TrainState) -> Vec<(String, Tensor<f32>)> {
    state.model.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
}

#[test]
fn each_stage_moves_exactly_its_trainable_parameters() {
    // Without weight decay an Adam update is zero exactly when the gradient is,
    // so the changed set is the set of parameters that received gradients.
    // At 64x64 every encoder stage has more than one key for attention.
    let s = setup_sized("train.weight_decay = 0\n", 64);
    let mut state = fresh(&s);
    for stage in s.cfg.train.plan() {
        let before = snapshot(&state);
        let mut lines = 0;
        run_stage(&mut state, stage, &s.cfg.train, &s.data, &s.teacher, &mut |_| lines += 1).unwrap();
        assert!(lines > 0);
        for ((name, old), e) in before.iter().zip(state.model.store.entries()) {
            let moved = !old.bitwise_eq(&e.value);
            assert_eq!(moved, stage.trainable(name), "{} / {name}", stage.name());
        }
    }
    assert_eq!(state.completed, s.cfg.train.plan());
}

#[test]
fn freeze_sets_follow_the_schedule() {
    let groups = ["encoder.s1.patch.w", "head.fuse.w", "atf.stream_b.proj.w", "atf.w_q.w", "cls.fc1.w"];
    let expect = [
        (StageId::S1a, [false, true, false, false, false]),
        (StageId::S1b, [true, true, false, false, false]),
        (StageId::S2Warmup, [false, false, true, false, false]),
        (StageId::S2, [false, false, true, true, false]),
        (StageId::S3Atf, [false, true, true, true, true]),
        (StageId::S3E2e, [true, true, true, true, true]),
    ];
    for (stage, row) in expect {
        for (name, want) in groups.iter().zip(row) {
            assert_eq!(stage.trainable(name), want, "{} / {name}", stage.name());
        }
        assert_eq!(stage.encoder_frozen(), !row[0]);
    }
}

#[test]
fn stages_must_run_in_order() {
    let s = setup("");
    let mut state = fresh(&s);
    let err = run_stage(&mut state, StageId::S2, &s.cfg.train, &s.data, &s.teacher, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Sequencing(_)));
    assert_eq!(err.exit_code(), 2);
    run_stage(&mut state, StageId::S1a, &s.cfg.train, &s.data, &s.teacher, &mut |_| {}).unwrap();
    let err = run_stage(&mut state, StageId::S1a, &s.cfg.train, &s.data, &s.teacher, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Sequencing(_)));

    let skip = setup("ablation.no_s2 = true\n");
    let mut state = fresh(&skip);
    let err = run_stage(&mut state, StageId::S2Warmup, &skip.cfg.train, &skip.data, &skip.teacher, &mut |_| {})
        .unwrap_err();
    assert!(matches!(err, Error::Sequencing(_)));
}

#[test]
fn nan_loss_aborts_with_a_numeric_error() {
    let mut s = setup("");
    s.data[0].frames.data_mut()[5] = f32::NAN;
    let mut state = fresh(&s);
    let err = run_stage(&mut state, StageId::S1a, &s.cfg.train, &s.data, &s.teacher, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("s1a"), "{err}");
}

#[test]
fn training_is_deterministic_and_ablations_complete() {
    let s = setup("");
    let run = |s: &Setup| {
        let mut state = fresh(s);
        let mut log = Vec::new();
        train_all(&mut state, &s.cfg.train, &s.data, &s.teacher, &mut |l| log.push(l.to_string())).unwrap();
        (snapshot(&state), log)
    };
    let (a, la) = run(&s);
    let (b, lb) = run(&s);
    assert_eq!(la, lb);
    for ((n, x), (_, y)) in a.iter().zip(&b) {
        assert!(x.bitwise_eq(y), "{n}");
    }
    let fields: Vec<&str> = la[0].split(' ').collect();
    assert_eq!(fields.len(), 6);
    assert_eq!(fields[0], "s1a");

    for extra in [
        "ablation.no_s2 = true\n",
        "ablation.no_e2e = true\n",
        "ablation.no_atf = true\n",
        "ablation.no_psi = true\n",
        "ablation.equal_lambda = true\n",
        "ablation.concat_fusion = true\n",
        "train.mask_prior = predicted\n",
    ] {
        let s = setup(extra);
        let mut state = fresh(&s);
        train_all(&mut state, &s.cfg.train, &s.data, &s.teacher, &mut |_| {}).unwrap();
        assert_eq!(state.completed, s.cfg.train.plan(), "{extra}");
    }
}

#[test]
fn teacher_is_seeded_and_deterministic() {
    let a = RandomStreamTeacher::new(7, 8, 16);
    let b = RandomStreamTeacher::new(7, 8, 16);
    let c = RandomStreamTeacher::new(8, 8, 16);
    let pooled = Tensor::from_fn(&[4, 8], |i| (i as f32 * 0.37).sin());
    let frames = Tensor::zeros(&[4, 3, 32, 32]);
    let ea = a.embed(&pooled, &frames).unwrap();
    assert_eq!(ea.len(), a.dim());
    assert_eq!(ea, b.embed(&pooled, &frames).unwrap());
    assert_ne!(ea, c.embed(&pooled, &frames).unwrap());
    assert!(a.embed(&Tensor::zeros(&[4, 5]), &frames).is_err());
}
