//! Threshold segmentation and gas-statistics classification without learning
//! from frames.

use crate::error::{Error, Result};
use crate::model::layers::Linear;
use crate::model::NUM_CLASSES;
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Rng, Tensor};

const BINS: usize = 256;

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * BINS as f32) as usize).min(BINS - 1)
}

/// Otsu threshold on a 256-bin histogram: the largest between-class variance
/// wins, ties go to the lowest threshold. Pixels in bins strictly above the
/// returned bin are foreground. `None` when fewer than two bins are occupied.
pub fn otsu_threshold(img: &[f32]) -> Option<usize> {
    let mut hist = [0u64; BINS];
    img.iter().for_each(|&v| hist[bin_of(v)] += 1);
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = img.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0);
    for (t, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        s0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = s0 / w0 - (sum_all - s0) / w1;
        let between = w0 * w1 * d * d;
        if between > best.0 {
            best = (between, t);
        }
    }
    Some(best.1)
}

fn morph(mask: &[u8], w: usize, h: usize, dilate: bool) -> Vec<u8> {
    let mut out = vec![0u8; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let on = mask[yy * w + xx] != 0;
                    if dilate {
                        acc |= on;
                    } else {
                        acc &= on;
                    }
                }
            }
            out[y * w + x] = acc as u8;
        }
    }
    out
}

/// 3x3 opening; neighbours outside the image are ignored.
pub fn open3(mask: &[u8], w: usize, h: usize) -> Vec<u8> {
    morph(&morph(mask, w, h, false), w, h, true)
}

/// 3x3 closing; neighbours outside the image are ignored.
pub fn close3(mask: &[u8], w: usize, h: usize) -> Vec<u8> {
    morph(&morph(mask, w, h, true), w, h, false)
}

/// Otsu threshold followed by 3x3 opening and closing.
pub fn otsu_segment(img: &[f32], w: usize, h: usize) -> Vec<u8> {
    assert_eq!(img.len(), w * h, "image size");
    let Some(t) = otsu_threshold(img) else {
        return vec![0; img.len()];
    };
    let raw: Vec<u8> = img.iter().map(|&v| (bin_of(v) > t) as u8).collect();
    close3(&open3(&raw, w, h), w, h)
}

/// `[mean, variance, dominant frequency bin]` of a `[T, 1, H, W]` gas clip.
/// The frequency bin is the DFT peak over `k = 1..=T/2` of the mean-removed
/// per-frame average; a flat series reports bin 0.
pub fn psi_stats_features(gas: &Tensor<f32>) -> [f64; 3] {
    let t = gas.shape()[0];
    let v: Vec<f64> = gas.to_f64_vec();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let per = v.len() / t;
    let series: Vec<f64> = v.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
    let mu = series.iter().sum::<f64>() / t as f64;
    let mut best = (1e-12, 0usize);
    for k in 1..=t / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, s) in series.iter().enumerate() {
            let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / t as f64;
            re += (s - mu) * a.cos();
            im += (s - mu) * a.sin();
        }
        let mag = re.hypot(im);
        if mag > best.0 * (1.0 + 1e-9) {
            best = (mag, k);
        }
    }
    [mean, var, best.1 as f64]
}

/// Two-layer classifier on standardised gas statistics.
#[derive(Clone, Debug)]
pub struct PsiStatsBaseline {
    store: ParamStore<f64>,
    l1: Linear,
    l2: Linear,
    mean: [f64; 3],
    std: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct BaselineConfig {
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            lr: 1e-2,
            steps: 500,
            seed: 42,
        }
    }
}

impl PsiStatsBaseline {
    /// Full-batch AdamW with cross-entropy.
    pub fn fit(features: &[[f64; 3]], labels: &[usize], cfg: BaselineConfig) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Data(format!(
                "baseline needs matching non-empty features and labels, got {} and {}",
                features.len(),
                labels.len()
            )));
        }
        let n = features.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for j in 0..3 {
            mean[j] = features.iter().map(|f| f[j]).sum::<f64>() / n;
            let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        let rng = Rng::new(cfg.seed).child("psi_stats");
        let mut store = ParamStore::new();
        let l1 = Linear::standard(&mut store, &rng, "baseline.fc1", 3, cfg.hidden)?;
        let l2 = Linear::standard(&mut store, &rng, "baseline.fc2", cfg.hidden, NUM_CLASSES)?;
        let mut model = Self { store, l1, l2, mean, std };
        let x = model.design(features);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..cfg.steps {
            let g = Graph::new();
            let p = model.store.bind(&g);
            let h = model.l1.forward(&p, g.constant(x.clone()))?.gelu();
            let loss = model.l2.forward(&p, h)?.cross_entropy(labels)?;
            if !loss.value().all_finite() {
                return Err(Error::Numeric("baseline loss diverged".into()));
            }
            g.backward(loss)?;
            opt.step(&mut model.store, &p.grads(), cfg.lr)?;
        }
        Ok(model)
    }

    fn design(&self, features: &[[f64; 3]]) -> Tensor<f64> {
        Tensor::from_fn(&[features.len(), 3], |i| {
            let (r, j) = (i / 3, i % 3);
            (features[r][j] - self.mean[j]) / self.std[j]
        })
    }

    /// Class probabilities per row.
    pub fn predict_proba(&self, features: &[[f64; 3]]) -> Result<Vec<Vec<f64>>> {
        let g = Graph::new();
        let p = self.store.bind_constant(&g);
        let h = self.l1.forward(&p, g.constant(self.design(features)))?.gelu();
        let probs = self.l2.forward(&p, h)?.softmax_last()?.value();
        Ok(probs.data().chunks(NUM_CLASSES).map(|r| r.to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_empty() {
        assert!(otsu_segment(&[0.4; 64], 8, 8).iter().all(|&m| m == 0));
    }

    #[test]
    fn opening_drops_isolated_pixels() {
        let mut m = vec![0u8; 49];
        m[24] = 1;
        assert!(open3(&m, 7, 7).iter().all(|&v| v == 0));
    }

    #[test]
    fn closing_fills_single_holes() {
        let mut m = vec![1u8; 49];
        m[24] = 0;
        assert!(close3(&m, 7, 7).iter().all(|&v| v == 1));
    }
}
