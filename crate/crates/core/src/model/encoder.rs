//! Gas-conditioned hierarchical transformer encoder.

use std::sync::atomic::{AtomicU64, Ordering};

use super::layers::{grid_to_tokens, register, tokens_to_grid, Conv, Init, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::numerics::{lit, Bound, Conv2dSpec, Float, ParamId, ParamStore, Rng, Tensor, Var};

/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

static CLAMPED_GAS: AtomicU64 = AtomicU64::new(0);

/// Number of gas-map values clamped into `[0, 1]` since process start.
pub fn clamped_gas_count() -> u64 {
    CLAMPED_GAS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub depths: Vec<usize>,
    /// `(kernel, stride)` of each overlapping patch embedding.
    pub patch: Vec<(usize, usize)>,
    pub reduction: Vec<usize>,
    pub heads: Vec<usize>,
    pub ffn_expansion: usize,
    pub gas_hidden: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![32, 64, 160, 256],
            depths: vec![2, 2, 2, 2],
            patch: vec![(7, 4), (3, 2), (3, 2), (3, 2)],
            reduction: vec![8, 4, 2, 1],
            heads: vec![1, 2, 5, 8],
            ffn_expansion: 4,
            gas_hidden: 8,
            ln_eps: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0
            || [self.depths.len(), self.patch.len(), self.reduction.len(), self.heads.len()]
                .iter()
                .any(|&l| l != n)
        {
            return Err(Error::Config("encoder per-stage lists must share one length".into()));
        }
        for s in 0..n {
            let (c, h) = (self.channels[s], self.heads[s]);
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: {c} channels not divisible by {h} heads",
                    s + 1
                )));
            }
            if self.reduction[s] == 0 || self.depths[s] == 0 {
                return Err(Error::Config(format!("stage {}: zero depth or reduction", s + 1)));
            }
            let (k, stride) = self.patch[s];
            if k == 0 || stride == 0 {
                return Err(Error::Config(format!("stage {}: zero patch kernel or stride", s + 1)));
            }
        }
        if self.ffn_expansion == 0 || self.gas_hidden == 0 || self.in_channels == 0 {
            return Err(Error::Config("ffn_expansion, gas_hidden and in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Padding of the patch embedding at `stage` (0-based): half the kernel.
    pub fn patch_pad(&self, stage: usize) -> usize {
        self.patch[stage].0 / 2
    }

    /// Spatial size of every stage output for an `h × w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        check_input_dims(h, w)?;
        let mut out = Vec::with_capacity(self.stages());
        let (mut ch, mut cw) = (h, w);
        for s in 0..self.stages() {
            let (k, stride) = self.patch[s];
            let pad = self.patch_pad(s);
            let len = |n: usize| crate::numerics::kernels::conv_out_len(n, k, stride, pad);
            match (len(ch), len(cw)) {
                (Some(a), Some(b)) => (ch, cw) = (a, b),
                _ => return Err(Error::Geometry(format!("stage {} has no output for {h}x{w}", s + 1))),
            }
            out.push((ch, cw));
        }
        Ok(out)
    }

    /// Closed-form parameter count of one stage.
    pub fn stage_param_count(&self, stage: usize) -> usize {
        let c = self.channels[stage];
        let c_in = if stage == 0 { self.in_channels } else { self.channels[stage - 1] };
        let k = self.patch[stage].0;
        let r = self.reduction[stage];
        let e = self.ffn_expansion * c;
        let g = self.gas_hidden;
        let embed = c * c_in * k * k + c + 2 * c;
        let attn = 4 * (c * c + c) + if r > 1 { c * c * r * r + c + 2 * c } else { 0 };
        let ffn = (c * e + e) + (e * 9 + e) + (e * c + c);
        let block = attn + 2 * c + ffn + 2 * c;
        let gas = (g + g) + (g + 1) + 2 * c;
        embed + self.depths[stage] * block + gas
    }

    pub fn param_count(&self) -> usize {
        (0..self.stages()).map(|s| self.stage_param_count(s)).sum()
    }
}

pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::Geometry(format!(
            "input {h}x{w}: height and width must be positive multiples of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Whether the gas map modulates attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GasMode {
    Gated,
    /// Plain spatial-reduction attention; the gas map is ignored.
    Bypass,
}

/// Per-stage gas conditioning: the key-side MLP and the dispersion gate.
#[derive(Clone, Debug)]
pub struct GasGate {
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub w_g: ParamId,
    pub b_g: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub sr: Option<(Conv, LayerNorm)>,
    pub heads: usize,
    pub reduction: usize,
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub fc1: Linear,
    pub dw: Conv,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn: AttnParams,
    pub ln1: LayerNorm,
    pub ffn: FfnParams,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub patch: Conv,
    pub patch_ln: LayerNorm,
    pub gas: GasGate,
    pub blocks: Vec<BlockParams>,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub stages: Vec<StageParams>,
}

impl GasGate {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &Rng, name: &str, c: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp1: Linear::new(store, rng, &format!("{name}.mlp1"), 1, hidden, Init::Normal(1.0), Some(Init::Zeros))?,
            mlp2: Linear::new(store, rng, &format!("{name}.mlp2"), hidden, 1, Init::Zeros, Some(Init::Zeros))?,
            w_g: register(store, rng, &format!("{name}.w_g"), &[c, 1, 1, 1], Init::Zeros)?,
            b_g: register(store, rng, &format!("{name}.b_g"), &[c], Init::Zeros)?,
        })
    }

    /// `σ(MLP(ψ))` on `[.., 1]` gas values.
    pub fn key_gate<'g, F: Float>(&self, p: &Bound<'g, F>, psi: Var<'g, F>) -> Result<Var<'g, F>> {
        let h = self.mlp1.forward(p, psi)?.gelu();
        Ok(self.mlp2.forward(p, h)?.sigmoid())
    }
}

impl AttnParams {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &Rng,
        name: &str,
        c: usize,
        heads: usize,
        reduction: usize,
        ln_eps: f64,
    ) -> Result<Self> {
        let sr = if reduction > 1 {
            let conv = Conv::standard(store, rng, &format!("{name}.sr"), c, c, reduction, reduction, 0)?;
            let ln = LayerNorm::new(store, rng, &format!("{name}.sr_ln"), c, ln_eps)?;
            Some((conv, ln))
        } else {
            None
        };
        Ok(Self {
            q: Linear::standard(store, rng, &format!("{name}.q"), c, c)?,
            k: Linear::standard(store, rng, &format!("{name}.k"), c, c)?,
            v: Linear::standard(store, rng, &format!("{name}.v"), c, c)?,
            o: Linear::standard(store, rng, &format!("{name}.o"), c, c)?,
            sr,
            heads,
            reduction,
        })
    }
}

impl FfnParams {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &Rng, name: &str, c: usize, hidden: usize) -> Result<Self> {
        let spec = Conv2dSpec::grouped(1, 1, hidden);
        Ok(Self {
            fc1: Linear::standard(store, rng, &format!("{name}.fc1"), c, hidden)?,
            dw: Conv::new(store, rng, &format!("{name}.dw"), hidden, hidden, 3, spec, Init::fan_in(9), Some(Init::Zeros))?,
            fc2: Linear::standard(store, rng, &format!("{name}.fc2"), hidden, c)?,
        })
    }
}

impl EncoderParams {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stages());
        for s in 0..cfg.stages() {
            let c = cfg.channels[s];
            let c_in = if s == 0 { cfg.in_channels } else { cfg.channels[s - 1] };
            let (k, stride) = cfg.patch[s];
            let name = format!("encoder.s{}", s + 1);
            let patch = Conv::standard(store, rng, &format!("{name}.patch"), c_in, c, k, stride, cfg.patch_pad(s))?;
            let patch_ln = LayerNorm::new(store, rng, &format!("{name}.patch_ln"), c, cfg.ln_eps)?;
            let gas = GasGate::new(store, rng, &format!("{name}.gas"), c, cfg.gas_hidden)?;
            let mut blocks = Vec::with_capacity(cfg.depths[s]);
            for j in 0..cfg.depths[s] {
                let bname = format!("{name}.b{}", j + 1);
                blocks.push(BlockParams {
                    attn: AttnParams::new(store, rng, &format!("{bname}.attn"), c, cfg.heads[s], cfg.reduction[s], cfg.ln_eps)?,
                    ln1: LayerNorm::new(store, rng, &format!("{bname}.ln1"), c, cfg.ln_eps)?,
                    ffn: FfnParams::new(store, rng, &format!("{bname}.ffn"), c, cfg.ffn_expansion * c)?,
                    ln2: LayerNorm::new(store, rng, &format!("{bname}.ln2"), c, cfg.ln_eps)?,
                });
            }
            stages.push(StageParams {
                patch,
                patch_ln,
                gas,
                blocks,
                channels: c,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }
}

/// Clamps a gas map into `[0, 1]`, counting the values that moved.
pub fn clamp_gas<F: Float>(psi: &Tensor<F>) -> (Tensor<F>, usize) {
    let mut out = psi.clone();
    let mut moved = 0;
    for v in out.data_mut() {
        let c = v.max(F::zero()).min(F::one());
        if c != *v || v.is_nan() {
            moved += 1;
            *v = if v.is_nan() { F::zero() } else { c };
        }
    }
    if moved > 0 {
        CLAMPED_GAS.fetch_add(moved as u64, Ordering::Relaxed);
        log::warn!("clamped {moved} gas values into [0, 1]");
    }
    (out, moved)
}

/// Overlapping patch embedding: strided conv, flatten to tokens, layer norm.
pub fn overlap_patch_embed<'g, F: Float>(
    p: &Bound<'g, F>,
    stage: &StageParams,
    x: Var<'g, F>,
) -> Result<(Var<'g, F>, usize, usize)> {
    let y = stage.patch.forward(p, x)?;
    let s = y.shape();
    let (h, w) = (s[2], s[3]);
    let tokens = stage.patch_ln.forward(p, grid_to_tokens(y)?)?;
    Ok((tokens, h, w))
}

/// Bilinear pooling of the gas map to `h × w`.
pub fn pool_gas<'g, F: Float>(psi: Var<'g, F>, h: usize, w: usize) -> Result<Var<'g, F>> {
    psi.resize_bilinear(h, w)
}

/// Dispersion gate `σ(W_g * ψ + b_g) ⊙ Y` on a `[B, C, h, w]` grid.
pub fn spatial_dispersion_gate<'g, F: Float>(
    p: &Bound<'g, F>,
    gate: &GasGate,
    y: Var<'g, F>,
    psi_hat: Var<'g, F>,
) -> Result<Var<'g, F>> {
    let c = y.shape()[1];
    let w = p.var(gate.w_g).reshape(&[1, c, 1, 1])?;
    let b = p.var(gate.b_g).reshape(&[1, c, 1, 1])?;
    let g = psi_hat.mul(w)?.add(b)?.sigmoid();
    g.mul(y)
}

/// Intermediate values of one attention call.
pub struct Attention<'g, F: Float> {
    /// `QK_rᵀ/√d_h`, `[B, heads, N, N_r]`.
    pub scores: Var<'g, F>,
    /// Scores after the key-side gas gate.
    pub weighted: Var<'g, F>,
    /// Output-projected attention result before the dispersion gate, `[B, C, h, w]`.
    pub y: Var<'g, F>,
    /// Block context `z` as tokens `[B, N, C]`.
    pub z: Var<'g, F>,
}

#[allow(clippy::too_many_arguments)]
pub fn gas_weighted_attention<'g, F: Float>(
    p: &Bound<'g, F>,
    attn: &AttnParams,
    gate: &GasGate,
    mode: GasMode,
    x: Var<'g, F>,
    psi_hat: Var<'g, F>,
    h: usize,
    w: usize,
) -> Result<Attention<'g, F>> {
    let s = x.shape();
    let (b, n, c) = (s[0], s[1], s[2]);
    let r = attn.reduction;
    if n != h * w {
        return Err(Error::shape("gas_weighted_attention", &s, &[b, h * w, c]));
    }
    if h % r != 0 || w % r != 0 {
        return Err(Error::Geometry(format!(
            "reduction ratio {r} does not divide the {h}x{w} token grid"
        )));
    }
    let heads = attn.heads;
    let dh = c / heads;
    let (hr, wr) = (h / r, w / r);
    let nr = hr * wr;

    let kv_src = match &attn.sr {
        Some((conv, ln)) => {
            let grid = tokens_to_grid(x, h, w)?;
            ln.forward(p, grid_to_tokens(conv.forward(p, grid)?)?)?
        }
        None => x,
    };
    let split = |t: Var<'g, F>, len: usize| -> Result<Var<'g, F>> {
        t.reshape(&[b, len, heads, dh])?.permute(&[0, 2, 1, 3])
    };
    let q = split(attn.q.forward(p, x)?, n)?;
    let k = split(attn.k.forward(p, kv_src)?, nr)?;
    let mut v = split(attn.v.forward(p, kv_src)?, nr)?;

    let scores = q.matmul_t(k)?.scale(lit(1.0 / (dh as f64).sqrt()));
    let weighted = match mode {
        GasMode::Gated => {
            let psi_r = pool_gas(psi_hat, hr, wr)?.reshape(&[b, nr, 1])?;
            let g = gate.key_gate(p, psi_r)?;
            v = v.mul(g.add_scalar(F::one()).reshape(&[b, 1, nr, 1])?)?;
            scores.mul(g.reshape(&[b, 1, 1, nr])?)?
        }
        GasMode::Bypass => scores,
    };
    let probs = weighted.softmax_last()?;
    let out = probs.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, c])?;
    let y = tokens_to_grid(attn.o.forward(p, out)?, h, w)?;
    let z = match mode {
        GasMode::Gated => spatial_dispersion_gate(p, gate, y, psi_hat)?,
        GasMode::Bypass => y,
    };
    Ok(Attention {
        scores,
        weighted,
        y,
        z: grid_to_tokens(z)?,
    })
}

/// Linear expand, 3×3 depthwise conv on the grid, gelu, linear project.
pub fn mix_ffn<'g, F: Float>(
    p: &Bound<'g, F>,
    ffn: &FfnParams,
    x: Var<'g, F>,
    h: usize,
    w: usize,
) -> Result<Var<'g, F>> {
    let hidden = ffn.fc1.forward(p, x)?;
    let grid = tokens_to_grid(hidden, h, w)?;
    let mixed = ffn.dw.forward(p, grid)?.gelu();
    ffn.fc2.forward(p, grid_to_tokens(mixed)?)
}

/// `x' = LN(x + z)`, `x_out = LN(x' + MixFFN(x'))`.
#[allow(clippy::too_many_arguments)]
pub fn tgaa_block<'g, F: Float>(
    p: &Bound<'g, F>,
    block: &BlockParams,
    gate: &GasGate,
    mode: GasMode,
    x: Var<'g, F>,
    psi_hat: Var<'g, F>,
    h: usize,
    w: usize,
) -> Result<Var<'g, F>> {
    let z = gas_weighted_attention(p, &block.attn, gate, mode, x, psi_hat, h, w)?.z;
    let x1 = block.ln1.forward(p, x.add(z)?)?;
    let f = mix_ffn(p, &block.ffn, x1, h, w)?;
    block.ln2.forward(p, x1.add(f)?)
}

/// One stage: patch embedding, gas pooling and `depth` blocks. Returns `[B, C, h, w]`.
pub fn stage_forward<'g, F: Float>(
    p: &Bound<'g, F>,
    stage: &StageParams,
    mode: GasMode,
    x: Var<'g, F>,
    psi: Var<'g, F>,
) -> Result<Var<'g, F>> {
    let (mut t, h, w) = overlap_patch_embed(p, stage, x)?;
    let psi_hat = pool_gas(psi, h, w)?;
    for block in &stage.blocks {
        t = tgaa_block(p, block, &stage.gas, mode, t, psi_hat, h, w)?;
    }
    tokens_to_grid(t, h, w)
}

/// Runs all stages on `v: [B, 3, H, W]` and `ψ: [B, 1, H, W]`, returning `[F1..F4]`.
pub fn encoder_forward<'g, F: Float>(
    p: &Bound<'g, F>,
    enc: &EncoderParams,
    mode: GasMode,
    v: Var<'g, F>,
    psi: Var<'g, F>,
) -> Result<Vec<Var<'g, F>>> {
    let (sv, sp) = (v.shape(), psi.shape());
    if sv.len() != 4 || sp.len() != 4 || sv[0] != sp[0] || sp[1] != 1 || sv[2..] != sp[2..] {
        return Err(Error::Data(format!(
            "frames {sv:?} and gas map {sp:?} are not co-registered"
        )));
    }
    if sv[1] != enc.cfg.in_channels {
        return Err(Error::shape("encoder_forward", &sv, &[sv[0], enc.cfg.in_channels, sv[2], sv[3]]));
    }
    check_input_dims(sv[2], sv[3])?;
    let mut x = v;
    let mut feats = Vec::with_capacity(enc.stages.len());
    for stage in &enc.stages {
        x = stage_forward(p, stage, mode, x, psi)?;
        feats.push(x);
    }
    Ok(feats)
}
