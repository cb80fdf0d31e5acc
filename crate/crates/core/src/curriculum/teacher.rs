//! Fixed clip encoders used as alignment targets.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// A non-trainable clip embedder. Implementations must be deterministic.
pub trait FrozenTeacher {
    fn dim(&self) -> usize;

    /// Embeds one clip from its pooled deepest features `[T, C]` and its frames `[T, 3, H, W]`.
    fn embed(&self, pooled: &Tensor<f32>, frames: &Tensor<f32>) -> Result<Vec<f32>>;
}

/// Randomly initialised copy of the deep-feature stream: per-frame linear
/// map, temporal mean, then a fixed projection. The output is standardised
/// so that it lives on the same scale as a layer-normalised embedding.
#[derive(Clone, Debug)]
pub struct RandomStreamTeacher {
    c: usize,
    d: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    proj: Vec<f64>,
}

impl RandomStreamTeacher {
    pub fn new(seed: u64, feat_channels: usize, dim: usize) -> Self {
        let rng = Rng::new(seed).child("teacher");
        let draw = |name: &str, n: usize, std: f64| {
            let mut r = rng.child(name);
            (0..n).map(|_| std * r.normal()).collect::<Vec<f64>>()
        };
        Self {
            c: feat_channels,
            d: dim,
            w1: draw("stream", feat_channels * dim, 1.0 / (feat_channels as f64).sqrt()),
            b1: draw("bias", dim, 0.1),
            proj: draw("proj", dim * dim, 1.0 / (dim as f64).sqrt()),
        }
    }
}

impl FrozenTeacher for RandomStreamTeacher {
    fn dim(&self) -> usize {
        self.d
    }

    fn embed(&self, pooled: &Tensor<f32>, _frames: &Tensor<f32>) -> Result<Vec<f32>> {
        let s = pooled.shape();
        if s.len() != 2 || s[1] != self.c || s[0] == 0 {
            return Err(Error::Contract(format!(
                "teacher expects [T, {}] pooled features, got {s:?}",
                self.c
            )));
        }
        let (t, c, d) = (s[0], self.c, self.d);
        let mut mean = vec![0.0; d];
        for row in pooled.data().chunks(c) {
            for j in 0..d {
                let mut acc = self.b1[j];
                for (i, &x) in row.iter().enumerate() {
                    acc += x as f64 * self.w1[i * d + j];
                }
                mean[j] += acc / t as f64;
            }
        }
        let mut out: Vec<f64> = (0..d)
            .map(|j| (0..d).map(|i| mean[i] * self.proj[i * d + j]).sum())
            .collect();
        let mu = out.iter().sum::<f64>() / d as f64;
        let var = out.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        out.iter_mut().for_each(|v| *v = (*v - mu) * inv);
        Ok(out.into_iter().map(|v| v as f32).collect())
    }
}
