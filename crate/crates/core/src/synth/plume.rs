//! Breath-cycle plume simulation: Gaussian puffs emitted in pulses, advected
//! by wind and widening with age.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::encoder::check_input_dims;
use crate::numerics::{Rng, Tensor};

/// Clip-level flux class, in classifier logit order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FluxClass {
    HighFlux = 0,
    Control = 1,
    LowFlux = 2,
}

impl FluxClass {
    pub const ALL: [FluxClass; 3] = [FluxClass::HighFlux, FluxClass::Control, FluxClass::LowFlux];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FluxClass::HighFlux => "HF",
            FluxClass::Control => "CTRL",
            FluxClass::LowFlux => "LF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Physical knobs of one simulated exhalation sequence. Lengths are in
/// pixels and frames; positions are fractions of the frame size.
#[derive(Clone, Debug, PartialEq)]
pub struct PlumeParams {
    pub period: f64,
    pub amplitude: f64,
    /// Width growth of a puff per frame of age.
    pub growth: f64,
    /// Puff width at emission.
    pub base_width: f64,
    /// Advection velocity `(vx, vy)` in px/frame.
    pub wind: (f64, f64),
    /// White noise on the gas map.
    pub sigma_bg: f64,
    pub source: (f64, f64),
    /// Breath phase at frame 0, radians.
    pub phase: f64,
}

impl PlumeParams {
    /// Class defaults before per-clip jitter.
    pub fn for_class(class: FluxClass) -> Self {
        let (period, amplitude) = match class {
            FluxClass::HighFlux => (8.0, 0.9),
            FluxClass::Control => (12.0, 0.6),
            FluxClass::LowFlux => (18.0, 0.35),
        };
        Self {
            period,
            amplitude,
            growth: 0.6,
            base_width: 3.5,
            wind: (2.0, 0.0),
            sigma_bg: 0.08,
            source: (0.2, 0.5),
            phase: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period >= 2.0) {
            return Err(Error::Config(format!("breath period {} must be at least 2 frames", self.period)));
        }
        if !(self.amplitude >= 0.0) || !(self.base_width > 0.0) || !(self.growth >= 0.0) || !(self.sigma_bg >= 0.0) {
            return Err(Error::Config("plume amplitude, widths and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Frame geometry of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipDims {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

impl Default for ClipDims {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 16,
        }
    }
}

/// One labelled clip with co-registered frames, gas maps and masks.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub id: String,
    pub animal: u32,
    pub label: FluxClass,
    /// `[T, 3, H, W]`, values in `[0, 1]` on the 8-bit grid.
    pub frames: Tensor<f32>,
    /// `[T, 1, H, W]`, values in `[0, 1]` on the 16-bit grid.
    pub gas: Tensor<f32>,
    /// `[T, 1, H, W]` in `{0, 1}`.
    pub masks: Tensor<f32>,
}

impl ClipSample {
    pub fn dims(&self) -> ClipDims {
        let s = self.frames.shape();
        ClipDims {
            frames: s[0],
            height: s[2],
            width: s[3],
        }
    }
}

/// Scene traits shared by every clip of one animal.
#[derive(Clone, Debug)]
pub struct AnimalTraits {
    pub source: (f64, f64),
    pub head_temp: f64,
    pub spread: f64,
    pub wind_angle: f64,
}

impl AnimalTraits {
    pub fn draw(rng: &mut Rng) -> Self {
        Self {
            source: (rng.range(0.12, 0.3), rng.range(0.3, 0.7)),
            head_temp: rng.range(0.3, 0.5),
            spread: rng.range(0.85, 1.15),
            wind_angle: rng.range(-0.35, 0.35),
        }
    }
}

/// Frames before the clip start during which the plume already develops.
const WARMUP_FRAMES: usize = 14;
/// Emissions per frame.
const SUBSTEPS: usize = 2;
/// Ground-truth threshold on the noise-free concentration.
pub const MASK_THRESHOLD: f64 = 0.1;
const MAX_AGE: f64 = 30.0;

struct Puff {
    time: f64,
    strength: f64,
    drift: (f64, f64),
}

/// Noise-free concentration fields `[T][H*W]`.
pub fn concentration(params: &PlumeParams, dims: ClipDims, rng: &mut Rng) -> Vec<Vec<f64>> {
    let (h, w) = (dims.height, dims.width);
    let scale = w as f64 / 64.0;
    let puffs: Vec<Puff> = (0..(WARMUP_FRAMES + dims.frames) * SUBSTEPS)
        .map(|i| {
            let time = i as f64 / SUBSTEPS as f64 - WARMUP_FRAMES as f64;
            let s = (2.0 * PI * time / params.period + params.phase).sin().max(0.0);
            Puff {
                time,
                strength: params.amplitude * s * s,
                drift: (0.15 * rng.normal(), 0.25 * rng.normal()),
            }
        })
        .collect();
    let speed = (params.wind.0.powi(2) + params.wind.1.powi(2)).sqrt().max(1e-9);
    let (ux, uy) = (params.wind.0 / speed, params.wind.1 / speed);
    let src = (params.source.0 * w as f64, params.source.1 * h as f64);
    let s0 = params.base_width * scale;
    let mut out = Vec::with_capacity(dims.frames);
    for t in 0..dims.frames {
        let mut field = vec![0.0; h * w];
        for p in &puffs {
            let age = t as f64 - p.time;
            if age < 0.0 || age > MAX_AGE || p.strength < 1e-4 {
                continue;
            }
            let cx = src.0 + (params.wind.0 + p.drift.0) * age * scale;
            let cy = src.1 + (params.wind.1 + p.drift.1) * age * scale;
            let sa = s0 + params.growth * age * scale;
            let sc = 0.7 * s0 + 0.6 * params.growth * age * scale;
            let peak = p.strength * s0 * s0 / (sa * sc) / SUBSTEPS as f64;
            let reach = 4.0 * sa.max(sc);
            let x0 = ((cx - reach).floor().max(0.0)) as usize;
            let x1 = ((cx + reach).ceil().min(w as f64 - 1.0)).max(-1.0);
            let y0 = ((cy - reach).floor().max(0.0)) as usize;
            let y1 = ((cy + reach).ceil().min(h as f64 - 1.0)).max(-1.0);
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            for y in y0..=(y1 as usize) {
                let dy = y as f64 + 0.5 - cy;
                for x in x0..=(x1 as usize) {
                    let dx = x as f64 + 0.5 - cx;
                    let along = dx * ux + dy * uy;
                    let across = -dx * uy + dy * ux;
                    let e = 0.5 * ((along / sa).powi(2) + (across / sc).powi(2));
                    if e < 12.0 {
                        field[y * w + x] += peak * (-e).exp();
                    }
                }
            }
        }
        out.push(field);
    }
    out
}

/// Slowly drifting ambient CO₂ sources that do not belong to the plume.
fn clutter(dims: ClipDims, rng: &mut Rng) -> Vec<Vec<f64>> {
    let (h, w) = (dims.height as f64, dims.width as f64);
    let n = 2 + rng.below(4);
    let blobs: Vec<[f64; 6]> = (0..n)
        .map(|_| {
            [
                rng.range(0.0, w),
                rng.range(0.0, h),
                rng.range(-0.6, 0.6),
                rng.range(-0.6, 0.6),
                rng.range(0.1, 0.25) * w,
                rng.range(0.05, 0.3),
            ]
        })
        .collect();
    (0..dims.frames)
        .map(|t| {
            let mut f = vec![0.0; dims.height * dims.width];
            for b in &blobs {
                let (cx, cy) = (b[0] + b[2] * t as f64, b[1] + b[3] * t as f64);
                for (i, v) in f.iter_mut().enumerate() {
                    let dx = (i % dims.width) as f64 + 0.5 - cx;
                    let dy = (i / dims.width) as f64 + 0.5 - cy;
                    *v += b[5] * (-0.5 * (dx * dx + dy * dy) / (b[4] * b[4])).exp();
                }
            }
            f
        })
        .collect()
}

/// Thermal background: barn gradient plus the animal's warm head at the source.
fn thermal_background(traits: &AnimalTraits, dims: ClipDims, rng: &mut Rng) -> Vec<f64> {
    let (h, w) = (dims.height as f64, dims.width as f64);
    let tilt = (rng.range(-0.08, 0.08), rng.range(-0.08, 0.08));
    let base = rng.range(0.12, 0.22);
    let (hx, hy) = (traits.source.0 * w - 0.08 * w, traits.source.1 * h);
    let (rx, ry) = (0.14 * w, 0.2 * h);
    (0..dims.height * dims.width)
        .map(|i| {
            let x = (i % dims.width) as f64 + 0.5;
            let y = (i / dims.width) as f64 + 0.5;
            let grad = base + tilt.0 * x / w + tilt.1 * y / h;
            let d = ((x - hx) / rx).powi(2) + ((y - hy) / ry).powi(2);
            grad + traits.head_temp * (-2.0 * d).exp()
        })
        .collect()
}

/// Iron-style false-colour ramp.
fn ramp(u: f64) -> [f64; 3] {
    let c = |v: f64| v.clamp(0.0, 1.0);
    [c(3.0 * u), c(3.0 * u - 1.0), c(3.0 * u - 2.0)]
}

fn quantize(v: f64, levels: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * levels).round() / levels) as f32
}

/// Simulates one clip. Plume, gas noise and thermal noise draw from separate
/// child streams of `rng`, so the gas noise can be redrawn without touching
/// the masks.
pub fn generate_clip(
    params: &PlumeParams,
    traits: &AnimalTraits,
    dims: ClipDims,
    rng: &Rng,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    params.validate()?;
    check_input_dims(dims.height, dims.width)?;
    if dims.frames == 0 {
        return Err(Error::Config("clips need at least one frame".into()));
    }
    let conc = concentration(params, dims, &mut rng.child("plume"));
    let mut gas_rng = rng.child("gas");
    let ambient = gas_rng.range(0.05, 0.3);
    let clut = clutter(dims, &mut gas_rng);
    let mut thermal_rng = rng.child("thermal");
    let bg = thermal_background(traits, dims, &mut thermal_rng);

    let (t, hw) = (dims.frames, dims.height * dims.width);
    let mut frames = vec![0f32; t * 3 * hw];
    let mut gas = vec![0f32; t * hw];
    let mut masks = vec![0f32; t * hw];
    for f in 0..t {
        for i in 0..hw {
            let c = conc[f][i];
            masks[f * hw + i] = if c > MASK_THRESHOLD { 1.0 } else { 0.0 };
            let psi = 0.8 * c + ambient + clut[f][i] + params.sigma_bg * gas_rng.normal();
            gas[f * hw + i] = quantize(psi, 65535.0);
            let u = bg[i] + 0.5 * c + 0.01 * thermal_rng.normal();
            let rgb = ramp(u);
            for (ch, v) in rgb.into_iter().enumerate() {
                frames[(f * 3 + ch) * hw + i] = quantize(v, 255.0);
            }
        }
    }
    let (h, w) = (dims.height, dims.width);
    Ok((
        Tensor::new(&[t, 3, h, w], frames)?,
        Tensor::new(&[t, 1, h, w], gas)?,
        Tensor::new(&[t, 1, h, w], masks)?,
    ))
}

/// Per-clip draw of the plume parameters around the class defaults.
pub fn jittered_params(class: FluxClass, traits: &AnimalTraits, rng: &mut Rng) -> PlumeParams {
    let mut p = PlumeParams::for_class(class);
    p.amplitude *= rng.range(0.85, 1.15);
    p.period *= rng.range(0.9, 1.1);
    p.growth *= traits.spread;
    let speed = rng.range(1.6, 2.4);
    let angle = traits.wind_angle + rng.range(-0.2, 0.2);
    p.wind = (speed * angle.cos(), speed * angle.sin());
    p.source = (
        traits.source.0 + rng.range(-0.02, 0.02),
        traits.source.1 + rng.range(-0.03, 0.03),
    );
    p.phase = rng.range(0.0, 2.0 * PI);
    p
}
