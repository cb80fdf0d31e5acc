//! Three-stream temporal fusion over a clip and the flux classifier.

use super::layers::{global_avg_pool, register, Conv, Init, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::numerics::{lit, Bound, Float, ParamId, ParamStore, Rng, Var};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Cross-frame attention with the CNN residual.
    Attention,
    /// `Linear([a; mean_T b; c])`.
    Concat,
    /// No temporal module: classify the last frame's pooled deepest features.
    LastFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtfConfig {
    pub dim: usize,
    pub feat_channels: usize,
    pub prior_channels: usize,
    pub cnn_channels: (usize, usize),
    pub cls_hidden: usize,
    pub beta_b_init: f64,
    pub beta_c_init: f64,
    pub ln_eps: f64,
}

impl Default for AtfConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            feat_channels: 256,
            prior_channels: 16,
            cnn_channels: (16, 32),
            cls_hidden: 128,
            beta_b_init: 1.0,
            beta_c_init: 0.1,
            ln_eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StreamC {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct AtfParams {
    pub cfg: AtfConfig,
    pub proj_a: Linear,
    pub proj_b: Linear,
    pub stream_c: StreamC,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_r: Linear,
    pub beta_b: ParamId,
    pub beta_c: ParamId,
    pub ln: LayerNorm,
    /// Present only for the concatenation variant.
    pub concat: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct ClsHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Name prefixes of the stream projectors trained during alignment warm-up.
pub const STREAM_PREFIXES: [&str; 3] = ["atf.stream_a.", "atf.stream_b.", "atf.stream_c."];

impl AtfParams {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &Rng, cfg: &AtfConfig, fusion: Fusion) -> Result<Self> {
        let d = cfg.dim;
        let (c1, c2) = cfg.cnn_channels;
        let stream_c = StreamC {
            conv1: Conv::standard(store, rng, "atf.stream_c.conv1", 3, c1, 3, 2, 1)?,
            conv2: Conv::standard(store, rng, "atf.stream_c.conv2", c1, c2, 3, 2, 1)?,
            proj: Linear::standard(store, rng, "atf.stream_c.proj", c2, d)?,
        };
        let concat = match fusion {
            Fusion::Concat => Some(Linear::standard(store, rng, "atf.concat", 3 * d, d)?),
            _ => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            proj_a: Linear::standard(store, rng, "atf.stream_a.proj", cfg.prior_channels, d)?,
            proj_b: Linear::standard(store, rng, "atf.stream_b.proj", cfg.feat_channels, d)?,
            stream_c,
            w_q: Linear::standard(store, rng, "atf.w_q", d, d)?,
            w_k: Linear::standard(store, rng, "atf.w_k", d, d)?,
            w_v: Linear::standard(store, rng, "atf.w_v", d, d)?,
            w_r: Linear::standard(store, rng, "atf.w_r", d, d)?,
            beta_b: register(store, rng, "atf.beta_b", &[1], Init::Const(cfg.beta_b_init))?,
            beta_c: register(store, rng, "atf.beta_c", &[1], Init::Const(cfg.beta_c_init))?,
            ln: LayerNorm::new(store, rng, "atf.ln", d, cfg.ln_eps)?,
            concat,
        })
    }
}

impl ClsHead {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &Rng, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::standard(store, rng, "cls.fc1", d_in, hidden)?,
            fc2: Linear::standard(store, rng, "cls.fc2", hidden, NUM_CLASSES)?,
        })
    }
}

fn check_clip(shape: &[usize], b: usize, t: usize, what: &str) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract(format!("{what}: clip has no frames")));
    }
    if shape.is_empty() || shape[0] != b * t {
        return Err(Error::Contract(format!(
            "{what}: expected {b}x{t} frames along the first axis, got {shape:?}"
        )));
    }
    Ok(())
}

/// Temporal descriptors `b: [B, T, d]` from per-frame deepest features `[B*T, C4, h4, w4]`.
pub fn stream_b<'g, F: Float>(
    p: &Bound<'g, F>,
    atf: &AtfParams,
    f4: Var<'g, F>,
    b: usize,
    t: usize,
) -> Result<Var<'g, F>> {
    let s = f4.shape();
    check_clip(&s, b, t, "stream_b")?;
    let pooled = global_avg_pool(f4)?.reshape(&[b, t, s[1]])?;
    atf.proj_b.forward(p, pooled)
}

/// Mask stream `a: [B, d]` from per-frame prior features `[B*T, 16, H, W]`.
pub fn stream_a<'g, F: Float>(
    p: &Bound<'g, F>,
    atf: &AtfParams,
    prior: Var<'g, F>,
    b: usize,
    t: usize,
) -> Result<Var<'g, F>> {
    let s = prior.shape();
    check_clip(&s, b, t, "stream_a")?;
    let pooled = global_avg_pool(prior)?.reshape(&[b, t, s[1]])?;
    atf.proj_a.forward(p, pooled.mean_axes(&[1], false)?)
}

/// CNN stream `c: [B, d]` from the clip's frames `[B*T, 3, H, W]` (run on their temporal mean).
pub fn stream_c<'g, F: Float>(
    p: &Bound<'g, F>,
    atf: &AtfParams,
    frames: Var<'g, F>,
    b: usize,
    t: usize,
) -> Result<Var<'g, F>> {
    let s = frames.shape();
    check_clip(&s, b, t, "stream_c")?;
    let mean = frames
        .reshape(&[b, t, s[1], s[2], s[3]])?
        .mean_axes(&[1], false)?;
    let h = atf.stream_c.conv1.forward(p, mean)?.gelu();
    let h = atf.stream_c.conv2.forward(p, h)?.gelu();
    atf.stream_c.proj.forward(p, global_avg_pool(h)?)
}

pub struct AtfOutput<'g, F: Float> {
    /// Clip embedding `[B, d]`.
    pub f_hat: Var<'g, F>,
    /// Attention over frames `[B, 1, T]`, when the attention path ran.
    pub weights: Option<Var<'g, F>>,
}

/// Single-query cross-frame attention and the CNN residual.
pub fn atf_forward<'g, F: Float>(
    p: &Bound<'g, F>,
    atf: &AtfParams,
    a: Var<'g, F>,
    b: Var<'g, F>,
    c: Var<'g, F>,
) -> Result<AtfOutput<'g, F>> {
    let sb = b.shape();
    if sb.len() != 3 || sb[1] == 0 {
        return Err(Error::Contract(format!("temporal descriptors must be [B, T, d], got {sb:?}")));
    }
    let (bs, d) = (sb[0], sb[2]);
    if a.shape() != [bs, d] || c.shape() != [bs, d] {
        return Err(Error::Contract(format!(
            "stream shapes disagree: a {:?}, b {sb:?}, c {:?}",
            a.shape(),
            c.shape()
        )));
    }
    if let Some(lin) = &atf.concat {
        let mean_b = b.mean_axes(&[1], false)?;
        let f_hat = lin.forward(p, Var::concat(&[a, mean_b, c], 1)?)?;
        return Ok(AtfOutput { f_hat, weights: None });
    }
    let beta_b = p.var(atf.beta_b);
    let q = atf.w_q.forward(p, a)?.reshape(&[bs, 1, d])?;
    let k = atf.w_k.forward(p, b)?.mul(beta_b)?;
    let v = atf.w_v.forward(p, b)?.mul(beta_b)?;
    let weights = q.matmul_t(k)?.scale(lit(1.0 / (d as f64).sqrt())).softmax_last()?;
    let z = weights.matmul(v)?.reshape(&[bs, d])?;
    let r = atf.w_r.forward(p, c)?.mul(p.var(atf.beta_c))?;
    let f_hat = atf.ln.forward(p, z.add(r)?)?;
    Ok(AtfOutput {
        f_hat,
        weights: Some(weights),
    })
}

/// Flux logits `[B, 3]` in class order `[HF, CTRL, LF]`.
pub fn classify<'g, F: Float>(p: &Bound<'g, F>, head: &ClsHead, f_hat: Var<'g, F>) -> Result<Var<'g, F>> {
    let h = head.fc1.forward(p, f_hat)?.gelu();
    head.fc2.forward(p, h)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of plain logits in f64.
pub fn softmax_probs<F: Float>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
