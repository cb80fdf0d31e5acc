//! Encoder, decode head, temporal fusion and their assembly into one model.

pub mod atf;
pub mod encoder;
pub mod head;
pub mod layers;

pub use atf::{AtfConfig, AtfParams, ClsHead, Fusion, NUM_CLASSES};
pub use encoder::{EncoderConfig, EncoderParams, GasMode};
pub use head::{HeadConfig, HeadParams};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Float, Graph, ParamStore, Rng, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const HEAD_PREFIX: &str = "head.";
pub const ATF_PREFIX: &str = "atf.";
pub const CLS_PREFIX: &str = "cls.";

/// Class names in logit order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["HF", "CTRL", "LF"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub atf: AtfConfig,
    pub gas_mode: GasMode,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            atf: AtfConfig::default(),
            gas_mode: GasMode::Gated,
            fusion: Fusion::Attention,
        }
    }
}

impl ModelConfig {
    /// Width of the classifier input: the clip embedding, or the pooled
    /// deepest features when there is no temporal module.
    pub fn cls_input(&self) -> usize {
        match self.fusion {
            Fusion::LastFrame => self.atf.feat_channels,
            _ => self.atf.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let deepest = *self.encoder.channels.last().expect("validated non-empty");
        if self.atf.feat_channels != deepest {
            return Err(Error::Config(format!(
                "temporal module expects {} feature channels, encoder ends with {deepest}",
                self.atf.feat_channels
            )));
        }
        if self.atf.prior_channels != self.head.prior_channels {
            return Err(Error::Config("mask-prior channel counts disagree".into()));
        }
        Ok(())
    }
}

/// Every learnable tensor of the model plus the ids that address them.
#[derive(Clone, Debug)]
pub struct TraceModel<F: Float> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub atf: AtfParams,
    pub cls: ClsHead,
}

/// Which parameter group a name belongs to.
pub fn group_of(name: &str) -> &'static str {
    [ENCODER_PREFIX, HEAD_PREFIX, ATF_PREFIX, CLS_PREFIX]
        .into_iter()
        .find(|p| name.starts_with(p))
        .unwrap_or("")
}

impl<F: Float> TraceModel<F> {
    /// Fresh model whose initial values depend only on `seed` and parameter names.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = Rng::new(seed).child("init");
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &rng, &cfg.encoder)?;
        let head = HeadParams::new(&mut store, &rng, &cfg.head, &cfg.encoder.channels)?;
        let atf = AtfParams::new(&mut store, &rng, &cfg.atf, cfg.fusion)?;
        let cls = ClsHead::new(&mut store, &rng, cfg.cls_input(), cfg.atf.cls_hidden)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            head,
            atf,
            cls,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Overwrites every parameter from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<F>)>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} tensors, model expects {}",
                values.len(),
                self.store.len()
            )));
        }
        for (name, value) in values {
            let id = self
                .store
                .id(&name)
                .ok_or_else(|| Error::Integrity(format!("unexpected tensor {name}")))?;
            self.store
                .set(id, value)
                .map_err(|e| Error::Integrity(format!("tensor {name}: {e}")))?;
        }
        Ok(())
    }

    /// Stage features for `frames: [N, 3, H, W]` and `gas: [N, 1, H, W]`.
    pub fn encode<'g>(&self, p: &Bound<'g, F>, frames: Var<'g, F>, gas: Var<'g, F>) -> Result<Vec<Var<'g, F>>> {
        encoder::encoder_forward(p, &self.encoder, self.cfg.gas_mode, frames, gas)
    }

    /// Clip logits `[B, 3]` from per-frame tensors laid out `[B*T, ..]`.
    pub fn classify_clip<'g>(
        &self,
        p: &Bound<'g, F>,
        f4: Var<'g, F>,
        prior: Var<'g, F>,
        frames: Var<'g, F>,
        b: usize,
        t: usize,
    ) -> Result<Var<'g, F>> {
        let f_hat = self.clip_embedding(p, f4, prior, frames, b, t)?;
        atf::classify(p, &self.cls, f_hat)
    }

    /// Clip embedding `[B, d]`; for last-frame fusion this is the pooled deepest map of frame `T`.
    pub fn clip_embedding<'g>(
        &self,
        p: &Bound<'g, F>,
        f4: Var<'g, F>,
        prior: Var<'g, F>,
        frames: Var<'g, F>,
        b: usize,
        t: usize,
    ) -> Result<Var<'g, F>> {
        if self.cfg.fusion == Fusion::LastFrame {
            let s = f4.shape();
            if t == 0 || s[0] != b * t {
                return Err(Error::Contract(format!("expected {b}x{t} frames, got {s:?}")));
            }
            let last = f4.reshape(&[b, t, s[1], s[2], s[3]])?.narrow(1, t - 1, 1)?;
            return last.reshape(&[b, s[1], s[2], s[3]])?.mean_axes(&[2, 3], false);
        }
        let a = atf::stream_a(p, &self.atf, prior, b, t)?;
        let bb = atf::stream_b(p, &self.atf, f4, b, t)?;
        let c = atf::stream_c(p, &self.atf, frames, b, t)?;
        Ok(atf::atf_forward(p, &self.atf, a, bb, c)?.f_hat)
    }

    /// Feeds each frame's binarized mask to the next frame's prior, starting
    /// from an empty mask. `fused` holds the fused features of `T` frames.
    /// Returns the masks and the prior features used at each frame.
    pub fn rollout<'g>(
        &self,
        p: &Bound<'g, F>,
        fused: Var<'g, F>,
        h: usize,
        w: usize,
    ) -> Result<(Vec<Vec<u8>>, Vec<Var<'g, F>>)> {
        let g = fused.graph();
        let t = fused.shape()[0];
        let mut prev = Tensor::<F>::zeros(&[1, 1, h, w]);
        let mut masks = Vec::with_capacity(t);
        let mut priors = Vec::with_capacity(t);
        for i in 0..t {
            let prior = head::encode_mask_prior(p, &self.head, g.constant(prev.clone()))?;
            let logits = head::predict(p, &self.head, fused.narrow(0, i, 1)?, prior)?.value();
            let mask = head::binarize(logits.data());
            prev = Tensor::from_fn(&[1, 1, h, w], |j| if mask[j] == 1 { F::one() } else { F::zero() });
            priors.push(prior);
            masks.push(mask);
        }
        Ok((masks, priors))
    }

    /// Autoregressive prediction on one clip of `T` frames (`[T, 3, H, W]`, `[T, 1, H, W]`).
    pub fn predict_clip(&self, frames: &Tensor<F>, gas: &Tensor<F>) -> Result<ClipPrediction> {
        let s = frames.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::Contract(format!("clip frames must be [T, 3, H, W], got {s:?}")));
        }
        let (t, h, w) = (s[0], s[2], s[3]);
        let (gas, _) = encoder::clamp_gas(gas);
        let g = Graph::new();
        let p = self.store.bind_constant(&g);
        let fv = g.constant(frames.clone());
        let feats = self.encode(&p, fv, g.constant(gas))?;
        let fused = head::fuse_stages(&p, &self.head, &feats)?;
        let (masks, priors) = self.rollout(&p, fused, h, w)?;
        let prior = Var::concat(&priors, 0)?;
        let f4 = *feats.last().expect("encoder has stages");
        let logits = self.classify_clip(&p, f4, prior, fv, 1, t)?.value();
        let row: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
        Ok(ClipPrediction {
            masks,
            label: atf::argmax(&row),
            probs: atf::softmax_probs(&row),
            height: h,
            width: w,
        })
    }
}

/// Output of [`TraceModel::predict_clip`].
#[derive(Clone, Debug)]
pub struct ClipPrediction {
    /// One `{0,1}` mask per frame, row-major.
    pub masks: Vec<Vec<u8>>,
    pub label: usize,
    pub probs: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

/// Closed-form scalar count for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let a = &cfg.atf;
    let d = a.dim;
    let (c1, c2) = a.cnn_channels;
    let lin = |i: usize, o: usize| i * o + o;
    let streams = lin(a.prior_channels, d) + lin(a.feat_channels, d) + (27 * c1 + c1) + (9 * c1 * c2 + c2) + lin(c2, d);
    let attn = 4 * lin(d, d) + 2 + 2 * d;
    let concat = if cfg.fusion == Fusion::Concat { lin(3 * d, d) } else { 0 };
    let cls = lin(cfg.cls_input(), a.cls_hidden) + lin(a.cls_hidden, NUM_CLASSES);
    cfg.encoder.param_count() + cfg.head.param_count(&cfg.encoder.channels) + streams + attn + concat + cls
}
