//! Flat `section.key = value` configuration covering architecture, schedule,
//! ablation switches, data geometry and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::curriculum::TrainConfig;
use crate::error::{Error, Result};
use crate::model::encoder::check_input_dims;
use crate::model::{AtfConfig, EncoderConfig, HeadConfig, ModelConfig};
use crate::synth::ClipDims;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Feature and prior widths are taken from the encoder and head.
    pub atf: AtfConfig,
    pub train: TrainConfig,
    pub data: ClipDims,
    pub bf1_tolerance: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            atf: AtfConfig::default(),
            train: TrainConfig::default(),
            data: ClipDims::default(),
            bf1_tolerance: crate::metrics::seg::BF1_TOLERANCE,
        }
    }
}

type Getter = fn(&TraceConfig) -> String;
type Setter = fn(&mut TraceConfig, &str) -> Result<()>;

struct Field {
    key: &'static str,
    get: Getter,
    set: Setter,
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("invalid value for {key}: {v:?}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v)),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! field {
    ($key:literal, $c:ident => $place:expr, num) => {
        Field {
            key: $key,
            get: |$c| $place.to_string(),
            set: |$c, v| {
                $place = num($key, v)?;
                Ok(())
            },
        }
    };
    ($key:literal, $c:ident => $place:expr, bool) => {
        Field {
            key: $key,
            get: |$c| $place.to_string(),
            set: |$c, v| {
                $place = boolean($key, v)?;
                Ok(())
            },
        }
    };
    ($key:literal, $c:ident => $place:expr, list) => {
        Field {
            key: $key,
            get: |$c| join(&$place),
            set: |$c, v| {
                $place = list($key, v)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        field!("encoder.in_channels", c => c.encoder.in_channels, num),
        field!("encoder.channels", c => c.encoder.channels, list),
        field!("encoder.depths", c => c.encoder.depths, list),
        Field {
            key: "encoder.patch_kernels",
            get: |c| join(&c.encoder.patch.iter().map(|p| p.0).collect::<Vec<_>>()),
            set: |c, v| set_patch(c, v, 0),
        },
        Field {
            key: "encoder.patch_strides",
            get: |c| join(&c.encoder.patch.iter().map(|p| p.1).collect::<Vec<_>>()),
            set: |c, v| set_patch(c, v, 1),
        },
        field!("encoder.reduction", c => c.encoder.reduction, list),
        field!("encoder.heads", c => c.encoder.heads, list),
        field!("encoder.ffn_expansion", c => c.encoder.ffn_expansion, num),
        field!("encoder.gas_hidden", c => c.encoder.gas_hidden, num),
        field!("encoder.ln_eps", c => c.encoder.ln_eps, num),
        field!("head.embed_dim", c => c.head.embed_dim, num),
        field!("head.prior_hidden", c => c.head.prior_hidden, num),
        field!("head.prior_channels", c => c.head.prior_channels, num),
        field!("atf.dim", c => c.atf.dim, num),
        Field {
            key: "atf.cnn_channels",
            get: |c| join(&[c.atf.cnn_channels.0, c.atf.cnn_channels.1]),
            set: |c, v| match list("atf.cnn_channels", v)?[..] {
                [a, b] => {
                    c.atf.cnn_channels = (a, b);
                    Ok(())
                }
                _ => Err(bad("atf.cnn_channels", v)),
            },
        },
        field!("atf.cls_hidden", c => c.atf.cls_hidden, num),
        field!("atf.beta_b_init", c => c.atf.beta_b_init, num),
        field!("atf.beta_c_init", c => c.atf.beta_c_init, num),
        field!("atf.ln_eps", c => c.atf.ln_eps, num),
        field!("train.epochs_s1a", c => c.train.epochs.s1a, num),
        field!("train.epochs_s1b", c => c.train.epochs.s1b, num),
        field!("train.epochs_s2_warmup", c => c.train.epochs.s2_warmup, num),
        field!("train.epochs_s2", c => c.train.epochs.s2, num),
        field!("train.epochs_s3_atf", c => c.train.epochs.s3_atf, num),
        field!("train.epochs_s3_e2e", c => c.train.epochs.s3_e2e, num),
        field!("train.lr_s1a", c => c.train.lr.s1a, num),
        field!("train.lr_s1b", c => c.train.lr.s1b, num),
        field!("train.lr_s2", c => c.train.lr.s2, num),
        field!("train.lr_s3", c => c.train.lr.s3, num),
        field!("train.weight_decay", c => c.train.weight_decay, num),
        field!("train.frame_batch", c => c.train.frame_batch, num),
        field!("train.clip_batch", c => c.train.clip_batch, num),
        field!("train.accum", c => c.train.accum, num),
        field!("train.lambda_seg", c => c.train.weights.seg, num),
        field!("train.lambda_cls", c => c.train.weights.cls, num),
        field!("train.mask_prior", c => c.train.mask_prior, num),
        field!("train.seed", c => c.train.seed, num),
        field!("train.teacher_seed", c => c.train.teacher_seed, num),
        field!("ablation.no_tgaa", c => c.train.toggles.no_tgaa, bool),
        field!("ablation.no_psi", c => c.train.toggles.no_psi, bool),
        field!("ablation.no_atf", c => c.train.toggles.no_atf, bool),
        field!("ablation.no_s2", c => c.train.toggles.no_s2, bool),
        field!("ablation.no_e2e", c => c.train.toggles.no_e2e, bool),
        field!("ablation.equal_lambda", c => c.train.toggles.equal_lambda, bool),
        field!("ablation.concat_fusion", c => c.train.toggles.concat_fusion, bool),
        field!("data.height", c => c.data.height, num),
        field!("data.width", c => c.data.width, num),
        field!("data.frames", c => c.data.frames, num),
        field!("eval.bf1_tolerance", c => c.bf1_tolerance, num),
    ]
}

fn set_patch(c: &mut TraceConfig, v: &str, which: usize) -> Result<()> {
    let key = if which == 0 { "encoder.patch_kernels" } else { "encoder.patch_strides" };
    let vals = list(key, v)?;
    if vals.len() != c.encoder.patch.len() {
        c.encoder.patch.resize(vals.len(), (1, 1));
    }
    for (p, x) in c.encoder.patch.iter_mut().zip(vals) {
        if which == 0 {
            p.0 = x;
        } else {
            p.1 = x;
        }
    }
    Ok(())
}

impl TraceConfig {
    /// Parses `key = value` lines on top of the defaults. Blank lines and `#`
    /// comments are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let table = fields();
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let f = table
                .iter()
                .find(|f| f.key == k)
                .ok_or_else(|| Error::Config(format!("line {}: unknown key {k}", n + 1)))?;
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: {k} given twice", n + 1)));
            }
            (f.set)(&mut cfg, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, grouped by section.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for f in fields() {
            let s = f.key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {s}");
                section = s;
            }
            let _ = writeln!(out, "{} = {}", f.key, (f.get)(self));
        }
        out
    }

    /// Channel width of the deepest encoder stage.
    pub fn atf_feat_channels(&self) -> usize {
        self.encoder.channels.last().copied().unwrap_or(0)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut atf = self.atf.clone();
        atf.feat_channels = *self
            .encoder
            .channels
            .last()
            .ok_or_else(|| Error::Config("encoder needs at least one stage".into()))?;
        atf.prior_channels = self.head.prior_channels;
        let mut m = ModelConfig {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            atf,
            ..ModelConfig::default()
        };
        self.train.toggles.apply(&mut m)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        check_input_dims(self.data.height, self.data.width)?;
        if self.data.frames == 0 {
            return Err(Error::Config("data.frames must be positive".into()));
        }
        if !(self.bf1_tolerance >= 0.0) {
            return Err(Error::Config("eval.bf1_tolerance must be non-negative".into()));
        }
        Ok(())
    }
}
