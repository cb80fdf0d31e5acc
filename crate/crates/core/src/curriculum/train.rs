//! Stage runner: batching, feature caches for frozen encoders, gradient
//! accumulation, freeze verification and evaluation.

use std::fmt;

use super::losses::{align_loss, bce_loss, ce_loss, dice_loss, total_loss};
use super::teacher::FrozenTeacher;
use super::{MaskPrior, StageId, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{cls_metrics, MetricReport, SegAccumulator};
use crate::model::atf::{atf_forward, stream_a, stream_b, stream_c};
use crate::model::encoder::clamp_gas;
use crate::model::head::{encode_mask_prior, fuse_stages, predict};
use crate::model::{Fusion, TraceModel, NUM_CLASSES};
use crate::numerics::{cosine_lr, AdamW, AdamWConfig, Graph, Rng, Tensor};
use crate::synth::ClipSample;

/// Model parameters plus the stages already applied to them.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: TraceModel<f32>,
    pub completed: Vec<StageId>,
}

/// One optimiser step of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub stage: StageId,
    pub epoch: usize,
    pub step: usize,
    pub loss_seg: f64,
    pub loss_cls: f64,
    pub loss_total: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {:.6} {:.6} {:.6}",
            self.stage.name(),
            self.epoch,
            self.step,
            self.loss_seg,
            self.loss_cls,
            self.loss_total
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: StageId,
    pub epochs: usize,
    pub steps: usize,
    /// Mean total loss over the last epoch.
    pub last_epoch_loss: f64,
}

/// Concatenates tensors along the first axis.
fn stack(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("nothing to stack".into()))?
        .shape()
        .to_vec();
    let mut shape = first.clone();
    shape[0] = 0;
    let mut data = Vec::new();
    for t in parts {
        if t.shape()[1..] != first[1..] {
            return Err(Error::shape("stack", &first, t.shape()));
        }
        shape[0] += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// Row `i` of the leading axis, keeping a leading axis of one.
fn row(t: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let s = t.shape();
    let n: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = 1;
    Tensor::from_parts(shape, t.data()[i * n..(i + 1) * n].to_vec())
}

/// Ground-truth mask of the previous frame, zeros before the first one.
fn prev_masks(masks: &Tensor<f32>) -> Tensor<f32> {
    let s = masks.shape();
    let n: usize = s[1..].iter().product();
    let mut data = vec![0f32; masks.len()];
    data[n..].copy_from_slice(&masks.data()[..masks.len() - n]);
    Tensor::from_parts(s.to_vec(), data)
}

/// Per-clip training tensors with the gas maps already clamped.
struct ClipTensors {
    frames: Tensor<f32>,
    gas: Tensor<f32>,
    masks: Tensor<f32>,
    prev: Tensor<f32>,
    label: usize,
}

fn prepare(data: &[ClipSample]) -> Result<Vec<ClipTensors>> {
    if data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let t0 = data[0].frames.shape().to_vec();
    data.iter()
        .map(|c| {
            if c.frames.shape() != t0 {
                return Err(Error::Data(format!(
                    "clip {} has shape {:?}, expected {t0:?}",
                    c.id,
                    c.frames.shape()
                )));
            }
            Ok(ClipTensors {
                frames: c.frames.clone(),
                gas: clamp_gas(&c.gas).0,
                masks: c.masks.clone(),
                prev: prev_masks(&c.masks),
                label: c.label.index(),
            })
        })
        .collect()
}

/// Replaces every clip's prior masks with the model's own autoregressive
/// predictions, using cached features when the encoder is frozen.
fn refresh_priors(model: &TraceModel<f32>, clips: &mut [ClipTensors], cache: Option<&[Vec<Tensor<f32>>]>) -> Result<()> {
    for (i, c) in clips.iter_mut().enumerate() {
        let g = Graph::new();
        let p = model.store.bind_constant(&g);
        let feats = match cache {
            Some(cache) => cache[i].iter().map(|f| g.constant(f.clone())).collect(),
            None => model.encode(&p, g.constant(c.frames.clone()), g.constant(c.gas.clone()))?,
        };
        let fused = fuse_stages(&p, &model.head, &feats)?;
        let s = c.masks.shape().to_vec();
        let (masks, _) = model.rollout(&p, fused, s[2], s[3])?;
        let hw = s[2] * s[3];
        let mut data = vec![0f32; c.masks.len()];
        for (t, m) in masks.iter().take(s[0] - 1).enumerate() {
            for (d, &v) in data[(t + 1) * hw..(t + 2) * hw].iter_mut().zip(m) {
                *d = f32::from(v);
            }
        }
        c.prev = Tensor::new(&s, data)?;
    }
    Ok(())
}

impl StageCtx<'_> {
    fn refresh(&mut self, model: &TraceModel<f32>) -> Result<()> {
        if self.cfg.mask_prior == MaskPrior::Predicted {
            refresh_priors(model, &mut self.clips, self.cache.as_deref())?;
        }
        Ok(())
    }
}

/// Encoder features of every clip, `[T, C_s, h_s, w_s]` per stage.
fn encode_all(model: &TraceModel<f32>, clips: &[ClipTensors]) -> Result<Vec<Vec<Tensor<f32>>>> {
    clips
        .iter()
        .map(|c| {
            let g = Graph::new();
            let p = model.store.bind_constant(&g);
            let feats = model.encode(&p, g.constant(c.frames.clone()), g.constant(c.gas.clone()))?;
            Ok(feats.into_iter().map(|v| v.value()).collect())
        })
        .collect()
}

fn check_finite(loss: f64, stage: StageId, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "loss became {loss} in stage {} at epoch {epoch}, step {step}",
            stage.name()
        )))
    }
}

fn add_grads(acc: &mut Vec<Option<Tensor<f32>>>, grads: Vec<Option<Tensor<f32>>>) {
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

struct Losses {
    seg: f64,
    cls: f64,
    total: f64,
}

/// Everything one stage needs besides the parameters.
struct StageCtx<'a> {
    stage: StageId,
    cfg: &'a TrainConfig,
    clips: Vec<ClipTensors>,
    teacher: &'a dyn FrozenTeacher,
    cache: Option<Vec<Vec<Tensor<f32>>>>,
}

/// Runs `stage` on the training clips, updating `state` in place.
pub fn run_stage(
    state: &mut TrainState,
    stage: StageId,
    cfg: &TrainConfig,
    data: &[ClipSample],
    teacher: &dyn FrozenTeacher,
    log: &mut dyn FnMut(&LogLine),
) -> Result<StageSummary> {
    cfg.validate()?;
    let plan = cfg.plan();
    let pos = plan.iter().position(|&s| s == stage).ok_or_else(|| {
        Error::Sequencing(format!("stage {} is disabled by the ablation switches", stage.name()))
    })?;
    if state.completed != plan[..pos] {
        let done: Vec<_> = state.completed.iter().map(|s| s.name()).collect();
        let need: Vec<_> = plan[..pos].iter().map(|s| s.name()).collect();
        return Err(Error::Sequencing(format!(
            "stage {} needs completed stages {need:?}, checkpoint has {done:?}",
            stage.name()
        )));
    }
    let model = &mut state.model;
    model.store.set_trainable(|n| stage.trainable(n));
    let frozen_before: Vec<(usize, Tensor<f32>)> = model
        .store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.frozen)
        .map(|(i, e)| (i, e.value.clone()))
        .collect();

    let summary = run_body(model, stage, cfg, data, teacher, log).map_err(|e| match e {
        Error::Numeric(m) if !m.starts_with("loss became") => {
            Error::Numeric(format!("stage {}: {m}", stage.name()))
        }
        e => e,
    })?;

    for (i, before) in &frozen_before {
        let e = &model.store.entries()[*i];
        if !e.value.bitwise_eq(before) {
            return Err(Error::Contract(format!(
                "frozen parameter {} changed during stage {}",
                e.name,
                stage.name()
            )));
        }
    }
    model.store.unfreeze_all();
    state.completed.push(stage);
    Ok(summary)
}

fn run_body(
    model: &mut TraceModel<f32>,
    stage: StageId,
    cfg: &TrainConfig,
    data: &[ClipSample],
    teacher: &dyn FrozenTeacher,
    log: &mut dyn FnMut(&LogLine),
) -> Result<StageSummary> {
    let clips = prepare(data)?;
    let cache = if stage.encoder_frozen() {
        Some(encode_all(model, &clips)?)
    } else {
        None
    };
    let mut ctx = StageCtx {
        stage,
        cfg,
        clips,
        teacher,
        cache,
    };
    match stage {
        StageId::S1a | StageId::S1b => run_frames(model, &mut ctx, log),
        _ => run_clips(model, &mut ctx, log),
    }
}

/// Runs every remaining stage of the plan.
pub fn train_all(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &[ClipSample],
    teacher: &dyn FrozenTeacher,
    log: &mut dyn FnMut(&LogLine),
) -> Result<Vec<StageSummary>> {
    let todo: Vec<StageId> = cfg
        .plan()
        .into_iter()
        .filter(|s| !state.completed.contains(s))
        .collect();
    todo.into_iter()
        .map(|s| run_stage(state, s, cfg, data, teacher, log))
        .collect()
}

fn optimiser(cfg: &TrainConfig) -> AdamW<f32> {
    AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    })
}

fn epoch_rng(cfg: &TrainConfig, stage: StageId, epoch: usize) -> Rng {
    Rng::new(cfg.seed)
        .child("train")
        .child(stage.name())
        .child_indexed("epoch", epoch as u64)
}

/// Segmentation stages: shuffled frame batches.
fn run_frames(model: &mut TraceModel<f32>, ctx: &mut StageCtx, log: &mut dyn FnMut(&LogLine)) -> Result<StageSummary> {
    let (stage, cfg) = (ctx.stage, ctx.cfg);
    let t = ctx.clips[0].frames.shape()[0];
    let items: Vec<(usize, usize)> = (0..ctx.clips.len()).flat_map(|c| (0..t).map(move |i| (c, i))).collect();
    let per_epoch = items.len().div_ceil(cfg.frame_batch);
    let epochs = cfg.epochs.get(stage);
    let total = epochs * per_epoch;
    let mut opt = optimiser(cfg);
    let mut step = 0;
    let mut last = 0.0;
    for epoch in 0..epochs {
        ctx.refresh(model)?;
        let mut order = items.clone();
        epoch_rng(cfg, stage, epoch).shuffle(&mut order);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.frame_batch) {
            let pick = |f: &dyn Fn(&ClipTensors) -> &Tensor<f32>| -> Result<Tensor<f32>> {
                let rows: Vec<Tensor<f32>> = batch.iter().map(|&(c, i)| row(f(&ctx.clips[c]), i)).collect();
                stack(&rows.iter().collect::<Vec<_>>())
            };
            let masks = pick(&|c| &c.masks)?;
            let prev = pick(&|c| &c.prev)?;
            let g = Graph::new();
            let p = model.store.bind(&g);
            let feats = match &ctx.cache {
                Some(cache) => {
                    let n = cache[0].len();
                    (0..n)
                        .map(|s| {
                            let rows: Vec<Tensor<f32>> = batch.iter().map(|&(c, i)| row(&cache[c][s], i)).collect();
                            Ok(g.constant(stack(&rows.iter().collect::<Vec<_>>())?))
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                None => model.encode(&p, g.constant(pick(&|c| &c.frames)?), g.constant(pick(&|c| &c.gas)?))?,
            };
            let fused = fuse_stages(&p, &model.head, &feats)?;
            let prior = encode_mask_prior(&p, &model.head, g.constant(prev))?;
            let logits = predict(&p, &model.head, fused, prior)?;
            let loss = bce_loss(logits, &masks)?.add(dice_loss(logits, &masks)?)?;
            let value = loss.value().item() as f64;
            check_finite(value, stage, epoch, step)?;
            g.backward(loss)?;
            opt.step(&mut model.store, &p.grads(), cosine_lr(cfg.lr.get(stage), step, total))?;
            log(&LogLine {
                stage,
                epoch,
                step,
                loss_seg: value,
                loss_cls: 0.0,
                loss_total: value,
            });
            sum += value;
            step += 1;
        }
        last = sum / per_epoch as f64;
    }
    Ok(StageSummary {
        stage,
        epochs,
        steps: step,
        last_epoch_loss: last,
    })
}

/// Inputs shared by every step of the alignment stages.
struct AlignCache {
    /// Pooled deepest features `[T, C, 1, 1]` per clip.
    f4: Vec<Tensor<f32>>,
    /// Pooled prior features `[T, P, 1, 1]` per clip.
    prior: Vec<Tensor<f32>>,
    /// Temporal mean frame `[1, 3, H, W]` per clip.
    mean: Vec<Tensor<f32>>,
    target: Vec<Tensor<f32>>,
}

fn pooled(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let hw = s[2] * s[3];
    let data: Vec<f32> = t.data().chunks(hw).map(|c| c.iter().sum::<f32>() / hw as f32).collect();
    Tensor::from_parts(vec![s[0], s[1], 1, 1], data)
}

fn align_cache(model: &TraceModel<f32>, ctx: &StageCtx) -> Result<AlignCache> {
    let cache = ctx.cache.as_ref().expect("alignment runs with a frozen encoder");
    let mut out = AlignCache {
        f4: Vec::new(),
        prior: Vec::new(),
        mean: Vec::new(),
        target: Vec::new(),
    };
    for (clip, feats) in ctx.clips.iter().zip(cache) {
        let f4 = pooled(feats.last().expect("encoder has stages"));
        let g = Graph::new();
        let p = model.store.bind_constant(&g);
        let prior = encode_mask_prior(&p, &model.head, g.constant(clip.prev.clone()))?.value();
        let s = clip.frames.shape();
        let t = s[0];
        let mean = g
            .constant(clip.frames.clone())
            .mean_axes(&[0], true)?
            .value();
        let flat = f4.reshape(&[t, f4.shape()[1]])?;
        let target = ctx.teacher.embed(&flat, &clip.frames)?;
        let d = target.len();
        out.f4.push(f4);
        out.prior.push(pooled(&prior));
        out.mean.push(mean);
        out.target.push(Tensor::new(&[1, d], target)?);
    }
    Ok(out)
}

/// Clip-level stages: micro-batches of clips with gradient accumulation.
fn run_clips(model: &mut TraceModel<f32>, ctx: &mut StageCtx, log: &mut dyn FnMut(&LogLine)) -> Result<StageSummary> {
    let (stage, cfg) = (ctx.stage, ctx.cfg);
    let align = matches!(stage, StageId::S2Warmup | StageId::S2);
    if align && model.cfg.fusion == Fusion::LastFrame {
        return Err(Error::Sequencing("alignment needs the temporal module".into()));
    }
    let align_inputs = if align {
        // The head is frozen here, so one rollout serves every epoch.
        ctx.refresh(model)?;
        Some(align_cache(model, ctx)?)
    } else {
        None
    };
    if let Some(a) = &align_inputs {
        let d = model.cfg.atf.dim;
        if ctx.teacher.dim() != d || a.target.iter().any(|t| t.len() != d) {
            return Err(Error::Config(format!("teacher width {} differs from clip embedding width {d}", ctx.teacher.dim())));
        }
    }
    let n = ctx.clips.len();
    let group = cfg.clip_batch * cfg.accum;
    let per_epoch = n.div_ceil(group);
    let epochs = cfg.epochs.get(stage);
    let total = epochs * per_epoch;
    let weights = cfg.loss_weights();
    let mut opt = optimiser(cfg);
    let mut step = 0;
    let mut last = 0.0;
    for epoch in 0..epochs {
        if !align {
            ctx.refresh(model)?;
        }
        let mut order: Vec<usize> = (0..n).collect();
        epoch_rng(cfg, stage, epoch).shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(group) {
            let mut grads = Vec::new();
            let mut agg = Losses {
                seg: 0.0,
                cls: 0.0,
                total: 0.0,
            };
            for micro in chunk.chunks(cfg.clip_batch) {
                let share = micro.len() as f64 / chunk.len() as f64;
                let g = Graph::new();
                let p = model.store.bind(&g);
                let (loss, parts) = match &align_inputs {
                    Some(a) => {
                        let gather = |v: &[Tensor<f32>]| stack(&micro.iter().map(|&c| &v[c]).collect::<Vec<_>>());
                        let (b, t) = (micro.len(), a.f4[0].shape()[0]);
                        let sa = stream_a(&p, &model.atf, g.constant(gather(&a.prior)?), b, t)?;
                        let sb = stream_b(&p, &model.atf, g.constant(gather(&a.f4)?), b, t)?;
                        let sc = stream_c(&p, &model.atf, g.constant(gather(&a.mean)?), b, 1)?;
                        let f_hat = atf_forward(&p, &model.atf, sa, sb, sc)?.f_hat;
                        let loss = align_loss(f_hat, &gather(&a.target)?)?;
                        let v = loss.value().item() as f64;
                        (loss, Losses { seg: 0.0, cls: 0.0, total: v })
                    }
                    None => {
                        let gather = |f: &dyn Fn(&ClipTensors) -> &Tensor<f32>| {
                            stack(&micro.iter().map(|&c| f(&ctx.clips[c])).collect::<Vec<_>>())
                        };
                        let frames = gather(&|c| &c.frames)?;
                        let masks = gather(&|c| &c.masks)?;
                        let (b, t) = (micro.len(), ctx.clips[micro[0]].frames.shape()[0]);
                        let feats = match &ctx.cache {
                            Some(cache) => (0..cache[0].len())
                                .map(|s| {
                                    Ok(g.constant(stack(&micro.iter().map(|&c| &cache[c][s]).collect::<Vec<_>>())?))
                                })
                                .collect::<Result<Vec<_>>>()?,
                            None => model.encode(&p, g.constant(frames.clone()), g.constant(gather(&|c| &c.gas)?))?,
                        };
                        let fused = fuse_stages(&p, &model.head, &feats)?;
                        let prior = encode_mask_prior(&p, &model.head, g.constant(gather(&|c| &c.prev)?))?;
                        let logits = predict(&p, &model.head, fused, prior)?;
                        let bce = bce_loss(logits, &masks)?;
                        let dice = dice_loss(logits, &masks)?;
                        let f4 = *feats.last().expect("encoder has stages");
                        let cls_logits = model.classify_clip(&p, f4, prior, g.constant(frames), b, t)?;
                        let labels: Vec<usize> = micro.iter().map(|&c| ctx.clips[c].label).collect();
                        let ce = ce_loss(cls_logits, &labels)?;
                        let loss = total_loss(bce, dice, Some(ce), weights)?;
                        let seg = (bce.value().item() + dice.value().item()) as f64;
                        let cls = ce.value().item() as f64;
                        (loss, Losses { seg, cls, total: loss.value().item() as f64 })
                    }
                };
                check_finite(parts.total, stage, epoch, step)?;
                g.backward(loss.scale(share as f32))?;
                add_grads(&mut grads, p.grads());
                agg.seg += share * parts.seg;
                agg.cls += share * parts.cls;
                agg.total += share * parts.total;
            }
            opt.step(&mut model.store, &grads, cosine_lr(cfg.lr.get(stage), step, total))?;
            log(&LogLine {
                stage,
                epoch,
                step,
                loss_seg: agg.seg,
                loss_cls: agg.cls,
                loss_total: agg.total,
            });
            sum += agg.total;
            step += 1;
        }
        last = sum / per_epoch as f64;
    }
    Ok(StageSummary {
        stage,
        epochs,
        steps: step,
        last_epoch_loss: last,
    })
}

/// Autoregressive predictions on `clips`, scored against their masks and labels.
pub fn evaluate(model: &TraceModel<f32>, clips: &[ClipSample], bf1_tolerance: f64) -> Result<MetricReport> {
    let mut seg = SegAccumulator::default();
    let (mut pred, mut truth, mut probs) = (Vec::new(), Vec::new(), Vec::new());
    for clip in clips {
        let out = model.predict_clip(&clip.frames, &clip.gas)?;
        let hw = out.height * out.width;
        for (f, m) in out.masks.iter().enumerate() {
            let gt: Vec<u8> = clip.masks.data()[f * hw..(f + 1) * hw].iter().map(|&v| (v > 0.5) as u8).collect();
            seg.add_frame(m, &gt, out.width, out.height, bf1_tolerance)?;
        }
        pred.push(out.label);
        truth.push(clip.label.index());
        probs.push(out.probs);
    }
    Ok(MetricReport {
        seg: seg.finish()?,
        cls: Some(cls_metrics(&pred, &truth, &probs, NUM_CLASSES)?),
    })
}
