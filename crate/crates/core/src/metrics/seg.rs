//! Per-frame overlap, boundary and localisation scores for binary masks.

use crate::error::{Error, Result};

/// Tversky weights on false positives and false negatives.
pub const TVERSKY_ALPHA: f64 = 0.3;
pub const TVERSKY_BETA: f64 = 0.7;
/// Default boundary-match tolerance in pixels.
pub const BF1_TOLERANCE: f64 = 2.0;

/// Confusion counts of one predicted / reference mask pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn of(pred: &[u8], gt: &[u8]) -> Self {
        let mut c = Counts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn ratio(num: f64, den: f64) -> f64 {
        if den == 0.0 {
            1.0
        } else {
            num / den
        }
    }

    /// Foreground IoU; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        Self::ratio(self.tp as f64, (self.tp + self.fp + self.fn_) as f64)
    }

    pub fn iou_background(&self) -> f64 {
        Self::ratio(self.tn as f64, (self.tn + self.fp + self.fn_) as f64)
    }

    pub fn dice(&self) -> f64 {
        Self::ratio(2.0 * self.tp as f64, (2 * self.tp + self.fp + self.fn_) as f64)
    }

    pub fn tversky(&self, alpha: f64, beta: f64) -> f64 {
        let tp = self.tp as f64;
        Self::ratio(tp, tp + alpha * self.fp as f64 + beta * self.fn_ as f64)
    }
}

/// Foreground pixels with at least one 4-neighbour in the background. Pixels
/// outside the image count as background.
pub fn boundary(mask: &[u8], w: usize, h: usize) -> Vec<(usize, usize)> {
    let on = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask[y as usize * w + x as usize] != 0
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == 0 {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            if !(on(xi - 1, yi) && on(xi + 1, yi) && on(xi, yi - 1) && on(xi, yi + 1)) {
                out.push((x, y));
            }
        }
    }
    out
}

fn dist2(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    dx * dx + dy * dy
}

/// Distance from each point of `from` to its nearest point in `to`.
fn nearest(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&a| to.iter().map(|&b| dist2(a, b)).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

/// Symmetric Hausdorff distance between two non-empty point sets.
pub fn hausdorff(a: &[(usize, usize)], b: &[(usize, usize)]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("Hausdorff distance needs two non-empty sets".into()));
    }
    let fwd = nearest(a, b).into_iter().fold(0.0, f64::max);
    let bwd = nearest(b, a).into_iter().fold(0.0, f64::max);
    Ok(fwd.max(bwd))
}

/// Boundary F1 with match tolerance `theta`.
pub fn boundary_f1(pred: &[(usize, usize)], gt: &[(usize, usize)], theta: f64) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hit = |d: Vec<f64>| d.iter().filter(|&&v| v <= theta).count() as f64;
    let precision = hit(nearest(pred, gt)) / pred.len() as f64;
    let recall = hit(nearest(gt, pred)) / gt.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean pixel-centre position `(x, y)` of the foreground.
pub fn centroid(mask: &[u8], w: usize) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m != 0) {
        sx += (i % w) as f64;
        sy += (i / w) as f64;
        n += 1;
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Scores of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScores {
    pub miou: f64,
    pub dice: f64,
    pub tversky: f64,
    pub bf1: f64,
    pub hausdorff: f64,
    pub cle: f64,
}

pub fn frame_scores(pred: &[u8], gt: &[u8], w: usize, h: usize, theta: f64) -> Result<FrameScores> {
    if pred.len() != w * h || gt.len() != w * h {
        return Err(Error::shape("frame_scores", &[pred.len()], &[gt.len()]));
    }
    let c = Counts::of(pred, gt);
    let diag = ((w * w + h * h) as f64).sqrt();
    let (bp, bg) = (boundary(pred, w, h), boundary(gt, w, h));
    let (hd, cle) = match (centroid(pred, w), centroid(gt, w)) {
        (None, None) => (0.0, 0.0),
        (Some(p), Some(g)) => (hausdorff(&bp, &bg)?, (p.0 - g.0).hypot(p.1 - g.1)),
        _ => (diag, diag),
    };
    Ok(FrameScores {
        miou: 0.5 * (c.iou() + c.iou_background()),
        dice: c.dice(),
        tversky: c.tversky(TVERSKY_ALPHA, TVERSKY_BETA),
        bf1: boundary_f1(&bp, &bg, theta),
        hausdorff: hd,
        cle,
    })
}

/// Frame-averaged segmentation scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub dice: f64,
    pub tversky: f64,
    pub bf1: f64,
    pub hausdorff_px: f64,
    pub cle_px: f64,
    pub frames: usize,
}

/// Running frame average, accumulated in call order.
#[derive(Clone, Debug, Default)]
pub struct SegAccumulator {
    sum: [f64; 6],
    frames: usize,
}

impl SegAccumulator {
    pub fn push(&mut self, s: FrameScores) {
        let v = [s.miou, s.dice, s.tversky, s.bf1, s.hausdorff, s.cle];
        self.sum.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        self.frames += 1;
    }

    pub fn add_frame(&mut self, pred: &[u8], gt: &[u8], w: usize, h: usize, theta: f64) -> Result<()> {
        self.push(frame_scores(pred, gt, w, h, theta)?);
        Ok(())
    }

    pub fn finish(&self) -> Result<SegMetrics> {
        if self.frames == 0 {
            return Err(Error::Data("no frames to score".into()));
        }
        let m = |i: usize| self.sum[i] / self.frames as f64;
        Ok(SegMetrics {
            miou: m(0),
            dice: m(1),
            tversky: m(2),
            bf1: m(3),
            hausdorff_px: m(4),
            cle_px: m(5),
            frames: self.frames,
        })
    }
}

/// Scores `frames` mask pairs of size `w x h` laid out back to back.
pub fn seg_metrics(pred: &[u8], gt: &[u8], w: usize, h: usize, theta: f64) -> Result<SegMetrics> {
    if pred.len() != gt.len() || w * h == 0 || pred.len() % (w * h) != 0 {
        return Err(Error::shape("seg_metrics", &[pred.len()], &[gt.len()]));
    }
    let mut acc = SegAccumulator::default();
    for (p, g) in pred.chunks(w * h).zip(gt.chunks(w * h)) {
        acc.add_frame(p, g, w, h, theta)?;
    }
    acc.finish()
}
