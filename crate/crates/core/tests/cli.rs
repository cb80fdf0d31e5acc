use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trace_core::cli::{Checkpoint, TraceConfig};
use trace_core::curriculum::MaskPrior;
use trace_core::error::Error;

const TINY: &str = "\
encoder.channels = 8,8,8,8
encoder.depths = 1,1,1,1
encoder.heads = 1,1,1,1
encoder.ffn_expansion = 2
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
train.accum = 1
data.height = 32
data.width = 32
data.frames = 4
";

fn trace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trace"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("run trace")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    let out = trace(&[
        "generate", "--out", p(&data), "--clips", "12", "--animals", "3", "--seed", "5", "--height", "32",
        "--width", "32", "--frames", "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn tiny_config(root: &Path) -> PathBuf {
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    cfg
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn config_serialization_is_a_fixed_point() {
    let cfg = TraceConfig::parse(TINY).unwrap();
    let text = cfg.serialize();
    let again = TraceConfig::parse(&text).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(text, again.serialize());
    assert_eq!(TraceConfig::parse("").unwrap(), TraceConfig::default());
    let predicted = TraceConfig::parse("train.mask_prior = predicted").unwrap();
    assert_eq!(predicted.train.mask_prior, MaskPrior::Predicted);
    assert!(predicted.serialize().contains("train.mask_prior = predicted"));
}

#[test]
fn desk_profile_parses() {
    let cfg = TraceConfig::parse(include_str!("../../../configs/desk.cfg")).unwrap();
    assert_eq!(cfg.model_config().unwrap(), TraceConfig::default().model_config().unwrap());
    assert_eq!(cfg.train.epochs, TraceConfig::default().train.epochs);
}

#[test]
fn config_rejects_unknown_repeated_and_bad_values() {
    for text in [
        "train.no_such_key = 1",
        "train.seed = 1\ntrain.seed = 2",
        "train.seed = many",
        "train.mask_prior = oracle",
        "ablation.no_tgaa = true",
        "ablation.no_atf = true\nablation.concat_fusion = true",
        "data.height = 100",
        "no equals sign",
    ] {
        let err = TraceConfig::parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{text}: {err}");
    }
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut ck = Checkpoint::default();
    ck.meta.insert("k".into(), "v".into());
    ck.tensors.push((
        "a".into(),
        trace_core::numerics::Tensor::new(&[2, 2], vec![1.0f32, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap(),
    ));
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.tensors.len(), 1);
    assert!(back.tensors[0].1.bitwise_eq(&ck.tensors[0].1));

    let bytes = fs::read(&path).unwrap();
    for at in [0, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "byte {at}: {err}");
    }
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Integrity(_))));
}

#[test]
fn generate_is_deterministic_and_guards_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = tiny_data(a.path());
    let db = tiny_data(b.path());
    let ta = tree(&da);
    assert!(!ta.is_empty());
    assert_eq!(ta, tree(&db));

    let again = trace(&["generate", "--out", p(&da), "--clips", "12", "--animals", "3"]);
    assert_eq!(again.status.code(), Some(2));
    fs::write(da.join("keep.txt"), "x").unwrap();
    let forced = trace(&[
        "generate", "--out", p(&da), "--clips", "12", "--animals", "3", "--seed", "5", "--height", "32",
        "--width", "32", "--frames", "4", "--force",
    ]);
    assert!(forced.status.success());
    assert!(da.join("keep.txt").exists());

    let bad = trace(&["generate", "--out", p(&a.path().join("x")), "--height", "100"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = trace(&["generate", "--out", p(&a.path().join("y")), "--bogus"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_eval_infer_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = tiny_data(root);
    let cfg = tiny_config(root);
    let full = root.join("full.ckpt");
    let out = trace(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&full)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = String::from_utf8_lossy(&out.stdout);
    for stage in ["s1a", "s1b", "s2-warmup", "s2", "s3-atf", "s3-e2e"] {
        assert!(log.lines().any(|l| l.starts_with(&format!("{stage} "))), "no log for {stage}");
        assert!(root.join(format!("full.ckpt.{stage}")).exists());
    }

    // Stop after the segmentation stages, then resume the rest.
    let part = root.join("part.ckpt");
    for stage in ["s1a", "s1b"] {
        let mut args = vec!["train", "--config", p(&cfg), "--data", p(&data), "--stage", stage, "--out", p(&part)];
        let resume = part.clone();
        if stage == "s1b" {
            args.extend(["--resume", p(&resume)]);
        }
        let r = trace(&args);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let resumed = root.join("resumed.ckpt");
    let r = trace(&["train", "--data", p(&data), "--resume", p(&part), "--out", p(&resumed)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let a = Checkpoint::load(&full).unwrap();
    let b = Checkpoint::load(&resumed).unwrap();
    assert_eq!(a.meta, b.meta);
    assert_eq!(a.tensors.len(), b.tensors.len());
    for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
        assert_eq!(na, nb);
        assert!(ta.bitwise_eq(tb), "{na} differs after resume");
    }

    // Out-of-order stage.
    let r = trace(&["train", "--config", p(&cfg), "--data", p(&data), "--stage", "s3", "--out", p(&root.join("x.ckpt"))]);
    assert_eq!(r.status.code(), Some(2));

    let report = root.join("report.json");
    let r = trace(&["eval", "--ckpt", p(&full), "--data", p(&data), "--split", "test", "--report", p(&report)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rep = trace_core::metrics::read_report(&report).unwrap();
    assert!(rep.seg.frames > 0 && rep.cls.is_some());

    let base = root.join("base.json");
    let r = trace(&["eval", "--baseline", "psi-stats", "--data", p(&data), "--report", p(&base)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let clip = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap();
    let pred = root.join("pred");
    let r = trace(&["infer", "--ckpt", p(&full), "--clip", p(&clip), "--out", p(&pred)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(pred.join("pred_mask_03.pgm").exists());
    let txt = fs::read_to_string(pred.join("pred.txt")).unwrap();
    assert!(txt.starts_with("label="));
    let total: f64 = txt
        .lines()
        .filter_map(|l| l.strip_prefix("prob_"))
        .map(|l| l.split_once('=').unwrap().1.parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);

    // A clip with the wrong frame count is refused.
    fs::remove_file(clip.join("frame_03.ppm")).ok();
    let r = trace(&["infer", "--ckpt", p(&full), "--clip", p(&clip), "--out", p(&pred)]);
    assert_eq!(r.status.code(), Some(3));

    // A corrupted checkpoint exits with the integrity code.
    let mut bytes = fs::read(&full).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let broken = root.join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let r = trace(&["eval", "--ckpt", p(&broken), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(r.status.code(), Some(5));
}
