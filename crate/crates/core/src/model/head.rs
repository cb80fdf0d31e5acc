//! All-MLP decode head with a previous-frame mask prior.

use super::layers::{register, Conv, Init};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Conv2dSpec, Float, ParamId, ParamStore, Rng, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub prior_hidden: usize,
    pub prior_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            prior_hidden: 8,
            prior_channels: 16,
        }
    }
}

impl HeadConfig {
    pub fn param_count(&self, stage_channels: &[usize]) -> usize {
        let e = self.embed_dim;
        let proj: usize = stage_channels.iter().map(|c| c * e + e).sum();
        let fuse = stage_channels.len() * e * e + e;
        let pred = e + self.prior_channels + 1;
        let prior = (9 * self.prior_hidden + self.prior_hidden)
            + (9 * self.prior_hidden * self.prior_channels + self.prior_channels);
        proj + fuse + pred + prior
    }
}

/// Two 3×3 convs turning a 1-channel mask into prior features.
#[derive(Clone, Debug)]
pub struct MaskPriorEncoder {
    pub conv1: Conv,
    pub conv2: Conv,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub cfg: HeadConfig,
    pub proj: Vec<Conv>,
    pub fuse: Conv,
    /// The final 1×1 conv over `[fused; prior]`, split by input group.
    pub pred_feat: Conv,
    pub pred_prior: Conv,
    pub pred_bias: ParamId,
    pub prior: MaskPriorEncoder,
}

impl HeadParams {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &Rng,
        cfg: &HeadConfig,
        stage_channels: &[usize],
    ) -> Result<Self> {
        let e = cfg.embed_dim;
        let proj = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv::standard(store, rng, &format!("head.proj{}", i + 1), c, e, 1, 1, 0))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv::standard(store, rng, "head.fuse", e * stage_channels.len(), e, 1, 1, 0)?;
        let one = Conv2dSpec::new(1, 0);
        let pred_feat = Conv::new(store, rng, "head.pred_feat", e, 1, 1, one, Init::fan_in(e + cfg.prior_channels), None)?;
        let pred_prior = Conv::new(
            store,
            rng,
            "head.pred_prior",
            cfg.prior_channels,
            1,
            1,
            one,
            Init::fan_in(e + cfg.prior_channels),
            None,
        )?;
        let pred_bias = register(store, rng, "head.pred_bias", &[1], Init::Zeros)?;
        let prior = MaskPriorEncoder {
            conv1: Conv::standard(store, rng, "head.prior1", 1, cfg.prior_hidden, 3, 1, 1)?,
            conv2: Conv::standard(store, rng, "head.prior2", cfg.prior_hidden, cfg.prior_channels, 3, 1, 1)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            proj,
            fuse,
            pred_feat,
            pred_prior,
            pred_bias,
            prior,
        })
    }
}

/// `[B, 1, H, W]` mask in `[0, 1]` to `[B, 16, H, W]` prior features.
pub fn encode_mask_prior<'g, F: Float>(
    p: &Bound<'g, F>,
    head: &HeadParams,
    prev_mask: Var<'g, F>,
) -> Result<Var<'g, F>> {
    let h = head.prior.conv1.forward(p, prev_mask)?.gelu();
    head.prior.conv2.forward(p, h)
}

/// Stage fusion at quarter resolution, `[B, embed, H/4, W/4]`.
pub fn fuse_stages<'g, F: Float>(p: &Bound<'g, F>, head: &HeadParams, stages: &[Var<'g, F>]) -> Result<Var<'g, F>> {
    let first = stages
        .first()
        .ok_or_else(|| Error::Contract("decode head needs stage features".into()))?
        .shape();
    if stages.len() != head.proj.len() {
        return Err(Error::Contract(format!(
            "decode head built for {} stages, got {}",
            head.proj.len(),
            stages.len()
        )));
    }
    let (b, hq, wq) = (first[0], first[2], first[3]);
    let mut parts = Vec::with_capacity(stages.len());
    for (f, proj) in stages.iter().zip(&head.proj) {
        if f.shape()[0] != b {
            return Err(Error::Contract(format!(
                "stage batch sizes differ: {} vs {b}",
                f.shape()[0]
            )));
        }
        parts.push(proj.forward(p, *f)?.resize_bilinear(hq, wq)?);
    }
    let cat = Var::concat(&parts, 1)?;
    Ok(head.fuse.forward(p, cat)?.gelu())
}

/// Logit map from quarter-resolution fused features and full-resolution prior features.
pub fn predict<'g, F: Float>(
    p: &Bound<'g, F>,
    head: &HeadParams,
    fused: Var<'g, F>,
    prior: Var<'g, F>,
) -> Result<Var<'g, F>> {
    let ps = prior.shape();
    if fused.shape()[0] != ps[0] {
        return Err(Error::Contract("prior and stage features disagree on batch size".into()));
    }
    // A 1×1 conv commutes with bilinear resizing, so the fused branch is
    // projected before upsampling.
    let a = head.pred_feat.forward(p, fused)?.resize_bilinear(ps[2], ps[3])?;
    let b = head.pred_prior.forward(p, prior)?;
    a.add(b)?.add(p.var(head.pred_bias))
}

pub struct SegOutput<'g, F: Float> {
    /// Raw logits `[B, 1, H, W]`.
    pub logits: Var<'g, F>,
    /// Prior features `[B, 16, H, W]`.
    pub prior: Var<'g, F>,
}

/// Full decode head: stage fusion plus the prior encoded from `prev_mask`.
pub fn segment<'g, F: Float>(
    p: &Bound<'g, F>,
    head: &HeadParams,
    stages: &[Var<'g, F>],
    prev_mask: Var<'g, F>,
) -> Result<SegOutput<'g, F>> {
    let fused = fuse_stages(p, head, stages)?;
    let prior = encode_mask_prior(p, head, prev_mask)?;
    let logits = predict(p, head, fused, prior)?;
    Ok(SegOutput { logits, prior })
}

/// `1[σ(s) > 0.5]`, i.e. `s > 0`.
pub fn binarize<F: Float>(logits: &[F]) -> Vec<u8> {
    logits.iter().map(|&s| u8::from(s > F::zero())).collect()
}
