//! Implementations of the four subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::TraceConfig;
use super::{BaselineArg, SplitArg, StageArg};
use crate::curriculum::{evaluate, run_stage, RandomStreamTeacher, StageId, TrainState};
use crate::error::{Error, Result};
use crate::metrics::{cls_metrics, write_report, MetricReport, SegAccumulator};
use crate::model::{TraceModel, CLASS_NAMES, NUM_CLASSES};
use crate::synth::baseline::BaselineConfig;
use crate::synth::dataset::{count_frames, load_dataset, read_clip_frames, write_dataset};
use crate::synth::{otsu_segment, pnm, psi_stats_features, ClipDims, ClipSample, DatasetConfig, PsiStatsBaseline, Split};

const META_CONFIG: &str = "config";
const META_STAGES: &str = "stages";

/// Snapshot of a training state with the configuration it was built from.
pub fn to_checkpoint(cfg: &TraceConfig, state: &TrainState) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.meta.insert(META_CONFIG.into(), cfg.serialize());
    let stages: Vec<&str> = state.completed.iter().map(|s| s.name()).collect();
    ck.meta.insert(META_STAGES.into(), stages.join(","));
    ck.tensors = state
        .model
        .store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect();
    ck
}

/// Rebuilds the configuration and training state stored by [`to_checkpoint`].
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(TraceConfig, TrainState)> {
    let text = ck
        .meta
        .get(META_CONFIG)
        .ok_or_else(|| Error::Integrity("checkpoint has no configuration".into()))?;
    let cfg = TraceConfig::parse(text)?;
    let completed = ck
        .meta
        .get(META_STAGES)
        .map(String::as_str)
        .unwrap_or("")
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| StageId::parse(s).ok_or_else(|| Error::Integrity(format!("unknown stage {s} in checkpoint"))))
        .collect::<Result<Vec<_>>>()?;
    let mut model = TraceModel::new(&cfg.model_config()?, cfg.train.seed)?;
    model.load_values(ck.tensors.clone())?;
    Ok((cfg, TrainState { model, completed }))
}

pub fn load_model(path: &Path) -> Result<(TraceConfig, TrainState)> {
    from_checkpoint(&Checkpoint::load(path)?)
}

pub fn generate(out: &Path, clips: usize, animals: usize, seed: u64, hwt: (usize, usize, usize), force: bool) -> Result<()> {
    let n = generate_quiet(out, clips, animals, seed, hwt, force)?;
    println!("wrote {n} clips to {}", out.display());
    Ok(())
}

/// [`generate`] without console output; returns the number of clips written.
pub fn generate_quiet(
    out: &Path,
    clips: usize,
    animals: usize,
    seed: u64,
    hwt: (usize, usize, usize),
    force: bool,
) -> Result<usize> {
    let (height, width, frames) = hwt;
    let cfg = DatasetConfig {
        clips,
        animals,
        dims: ClipDims { height, width, frames },
        seed,
    };
    crate::synth::plan_dataset(&cfg)?;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(Error::Config(format!(
                    "{} is not empty; pass --force to replace the dataset in it",
                    out.display()
                )));
            }
            clear_dataset(out)?;
        }
    }
    Ok(write_dataset(out, &cfg)?.len())
}

/// Removes clip directories and the split index left by an earlier run.
fn clear_dataset(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_dir() && name.starts_with("clip_") {
            fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        } else if name == "splits.txt" {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn stages_for(arg: StageArg) -> &'static [StageId] {
    match arg {
        StageArg::All => &StageId::ALL,
        StageArg::S1a => &[StageId::S1a],
        StageArg::S1b => &[StageId::S1b],
        StageArg::S2 => &[StageId::S2Warmup, StageId::S2],
        StageArg::S3 => &[StageId::S3Atf, StageId::S3E2e],
    }
}

fn check_frames(cfg: &TraceConfig, clips: &[ClipSample]) -> Result<()> {
    for c in clips {
        let d = c.dims();
        if d.frames != cfg.data.frames {
            return Err(Error::Data(format!(
                "clip {} has {} frames, configuration expects {}",
                c.id, d.frames, cfg.data.frames
            )));
        }
    }
    Ok(())
}

fn stage_path(out: &Path, stage: StageId) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".{}", stage.name()));
    PathBuf::from(s)
}

pub fn train(config: Option<&Path>, data: &Path, stage: StageArg, resume: Option<&Path>, out: &Path) -> Result<()> {
    let given = config.map(TraceConfig::load).transpose()?;
    let (cfg, mut state) = match resume {
        Some(path) => {
            let (stored, state) = load_model(path)?;
            match given {
                Some(c) if c.model_config()? != stored.model_config()? => {
                    return Err(Error::Config(
                        "configuration architecture differs from the resumed checkpoint".into(),
                    ))
                }
                Some(c) => (c, state),
                None => (stored, state),
            }
        }
        None => {
            let cfg = given.unwrap_or_default();
            let model = TraceModel::new(&cfg.model_config()?, cfg.train.seed)?;
            (
                cfg,
                TrainState {
                    model,
                    completed: Vec::new(),
                },
            )
        }
    };
    let ds = load_dataset(data)?;
    check_frames(&cfg, &ds.train)?;
    let plan = cfg.train.plan();
    let todo: Vec<StageId> = stages_for(stage)
        .iter()
        .copied()
        .filter(|s| plan.contains(s) && !(stage == StageArg::All && state.completed.contains(s)))
        .collect();
    if todo.is_empty() {
        println!("# nothing to run: requested stages are disabled or already complete");
    }
    let teacher = RandomStreamTeacher::new(cfg.train.teacher_seed, cfg.atf_feat_channels(), cfg.atf.dim);
    println!("# stage epoch step loss_seg loss_cls loss_total");
    for s in todo {
        let summary = run_stage(&mut state, s, &cfg.train, &ds.train, &teacher, &mut |l| println!("{l}"))?;
        let path = stage_path(out, s);
        to_checkpoint(&cfg, &state).save(&path)?;
        println!(
            "# finished {} ({} epochs, {} steps), checkpoint {}",
            s.name(),
            summary.epochs,
            summary.steps,
            path.display()
        );
    }
    to_checkpoint(&cfg, &state).save(out)
}

fn split_of(arg: SplitArg) -> Split {
    match arg {
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

/// Otsu masks on the gas maps and the gas-statistics classifier fitted on the training split.
pub fn baseline_report(train: &[ClipSample], eval: &[ClipSample], seed: u64, bf1_tolerance: f64) -> Result<MetricReport> {
    let feats: Vec<[f64; 3]> = train.iter().map(|c| psi_stats_features(&c.gas)).collect();
    let labels: Vec<usize> = train.iter().map(|c| c.label.index()).collect();
    let clf = PsiStatsBaseline::fit(
        &feats,
        &labels,
        BaselineConfig {
            seed,
            ..Default::default()
        },
    )?;
    let mut seg = SegAccumulator::default();
    for clip in eval {
        let d = clip.dims();
        let hw = d.height * d.width;
        for f in 0..d.frames {
            let gas = &clip.gas.data()[f * hw..(f + 1) * hw];
            let gt: Vec<u8> = clip.masks.data()[f * hw..(f + 1) * hw].iter().map(|&v| (v > 0.5) as u8).collect();
            seg.add_frame(&otsu_segment(gas, d.width, d.height), &gt, d.width, d.height, bf1_tolerance)?;
        }
    }
    let ef: Vec<[f64; 3]> = eval.iter().map(|c| psi_stats_features(&c.gas)).collect();
    let probs = clf.predict_proba(&ef)?;
    let pred: Vec<usize> = probs.iter().map(|p| crate::model::atf::argmax(p)).collect();
    let truth: Vec<usize> = eval.iter().map(|c| c.label.index()).collect();
    Ok(MetricReport {
        seg: seg.finish()?,
        cls: Some(cls_metrics(&pred, &truth, &probs, NUM_CLASSES)?),
    })
}

pub fn eval(ckpt: Option<&Path>, data: &Path, split: SplitArg, report: &Path, baseline: Option<BaselineArg>, seed: u64) -> Result<()> {
    let model = match (baseline, ckpt) {
        (None, Some(path)) => Some(load_model(path)?),
        (None, None) => return Err(Error::Config("eval needs --ckpt or --baseline".into())),
        _ => None,
    };
    let mut ds = load_dataset(data)?;
    let split = split_of(split);
    let sort = |v: &mut Vec<ClipSample>| v.sort_by(|a, b| a.id.cmp(&b.id));
    sort(&mut ds.train);
    sort(&mut ds.val);
    sort(&mut ds.test);
    let clips = ds.split(split);
    if clips.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.name())));
    }
    let r = match model {
        Some((cfg, state)) => {
            check_frames(&cfg, clips)?;
            evaluate(&state.model, clips, cfg.bf1_tolerance)?
        }
        // Only the gas-statistics baseline exists.
        None => baseline_report(&ds.train, clips, seed, crate::metrics::seg::BF1_TOLERANCE)?,
    };
    write_report(&r, report)?;
    let c = r.cls.as_ref().expect("evaluation scores classification");
    println!(
        "{} split: {} clips, {} frames, mIoU {:.4}, Dice {:.4}, BF1 {:.4}, kappa {:.4}, accuracy {:.4}",
        split.name(),
        c.clips,
        r.seg.frames,
        r.seg.miou,
        r.seg.dice,
        r.seg.bf1,
        c.kappa,
        c.acc
    );
    Ok(())
}

pub fn infer(ckpt: &Path, clip: &Path, out: &Path) -> Result<()> {
    let (cfg, state) = load_model(ckpt)?;
    let t = count_frames(clip);
    if t != cfg.data.frames {
        return Err(Error::Contract(format!(
            "{} holds {t} frames, the model expects {}",
            clip.display(),
            cfg.data.frames
        )));
    }
    let (frames, gas, _) = read_clip_frames(clip, t)?;
    let pred = state.model.predict_clip(&frames, &gas)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (f, m) in pred.masks.iter().enumerate() {
        pnm::write_mask(&out.join(format!("pred_mask_{f:02}.pgm")), pred.width, pred.height, m)?;
    }
    let mut text = format!("label={}\n", CLASS_NAMES[pred.label]);
    for (name, p) in CLASS_NAMES.iter().zip(&pred.probs) {
        let _ = writeln!(text, "prob_{name}={p:.16e}");
    }
    let path = out.join("pred.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("{} -> {} ({} masks)", clip.display(), CLASS_NAMES[pred.label], pred.masks.len());
    Ok(())
}
