//! Parameter-holding building blocks shared by the encoder, head and fusion module.

use crate::error::Result;
use crate::numerics::{Bound, Conv2dSpec, Float, ParamId, ParamStore, Rng, Tensor, Var};

/// Initial value of a freshly registered tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
}

impl Init {
    pub fn tensor<F: Float>(self, shape: &[usize], rng: &mut Rng) -> Tensor<F> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Const(c) => Tensor::full(shape, F::from_f64(c)),
            Init::Normal(std) => Tensor::from_fn(shape, |_| F::from_f64(std * rng.normal())),
        }
    }

    /// Scaled normal with variance `1 / fan_in`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Normal(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

/// Registers `name` under a child stream of `rng` keyed by the name, so the
/// initial value does not depend on registration order.
pub fn register<F: Float>(
    store: &mut ParamStore<F>,
    rng: &Rng,
    name: &str,
    shape: &[usize],
    init: Init,
) -> Result<ParamId> {
    let mut r = rng.child(name);
    store.add(name, init.tensor(shape, &mut r))
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        let w = register(store, rng, &format!("{name}.w"), &[d_in, d_out], weight)?;
        let b = bias
            .map(|init| register(store, rng, &format!("{name}.b"), &[d_out], init))
            .transpose()?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn standard<F: Float>(
        store: &mut ParamStore<F>,
        rng: &Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, d_in, d_out, Init::fan_in(d_in), Some(Init::Zeros))
    }

    pub fn forward<'g, F: Float>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        x.linear(p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: Conv2dSpec,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        let groups = spec.groups.max(1);
        let w = register(store, rng, &format!("{name}.w"), &[c_out, c_in / groups, k, k], weight)?;
        let b = bias
            .map(|init| register(store, rng, &format!("{name}.b"), &[c_out], init))
            .transpose()?;
        Ok(Self { w, b, spec })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn standard<F: Float>(
        store: &mut ParamStore<F>,
        rng: &Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let spec = Conv2dSpec::new(stride, pad);
        Self::new(store, rng, name, c_in, c_out, k, spec, Init::fan_in(fan_in), Some(Init::Zeros))
    }

    pub fn forward<'g, F: Float>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        x.conv2d(p.var(self.w), self.b.map(|b| p.var(b)), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &Rng, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: register(store, rng, &format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: register(store, rng, &format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward<'g, F: Float>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// `[B, C, h, w]` grid to `[B, h*w, C]` tokens.
pub fn grid_to_tokens<'g, F: Float>(x: Var<'g, F>) -> Result<Var<'g, F>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// `[B, h*w, C]` tokens to `[B, C, h, w]` grid.
pub fn tokens_to_grid<'g, F: Float>(x: Var<'g, F>, h: usize, w: usize) -> Result<Var<'g, F>> {
    let s = x.shape();
    x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}

/// Spatial mean of `[B, C, H, W]` to `[B, C]`.
pub fn global_avg_pool<'g, F: Float>(x: Var<'g, F>) -> Result<Var<'g, F>> {
    x.mean_axes(&[2, 3], false)
}
