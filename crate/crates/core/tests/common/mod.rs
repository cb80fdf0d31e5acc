//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use trace_core::model::encoder::{AttnParams, GasGate};
use trace_core::numerics::gradcheck::random_tensor;
use trace_core::numerics::{ParamId, ParamStore, Rng, Tensor, Var};
use trace_core::Result;

pub const EPS: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `x W + b` with `W` stored `[in, out]`.
pub fn lin(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), d_in);
    (0..d_out)
        .map(|j| {
            let mut acc = b.map_or(0.0, |b| b.data()[j]);
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * w.data()[i * d_out + j];
            }
            acc
        })
        .collect()
}

pub fn ln(x: &[f64], gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + EPS).sqrt() * gamma.data()[i] + beta.data()[i])
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct Lin<'a>(&'a Tensor<f64>, Option<&'a Tensor<f64>>);

pub fn lin_of<'a>(s: &'a ParamStore<f64>, l: &trace_core::model::layers::Linear) -> Lin<'a> {
    Lin(s.get(l.w), l.b.map(|b| s.get(b)))
}

impl Lin<'_> {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        lin(x, self.0, self.1)
    }
}

pub fn key_gate_oracle(s: &ParamStore<f64>, gate: &GasGate, psi: f64) -> f64 {
    let h: Vec<f64> = lin_of(s, &gate.mlp1).apply(&[psi]).into_iter().map(gelu).collect();
    sigmoid(lin_of(s, &gate.mlp2).apply(&h)[0])
}

/// Loop-by-loop attention for one batch element: tokens `x[n][c]` on an
/// `h × w` grid, returning the block context `z[n][c]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    s: &ParamStore<f64>,
    attn: &AttnParams,
    gate: &GasGate,
    gated: bool,
    x: &[Vec<f64>],
    psi: &[f64],
    h: usize,
    w: usize,
) -> Vec<Vec<f64>> {
    let c = x[0].len();
    let r = attn.reduction;
    let (hr, wr) = (h / r, w / r);
    let kv_src: Vec<Vec<f64>> = match &attn.sr {
        None => x.to_vec(),
        Some((conv, norm)) => {
            let wt = s.get(conv.w);
            let bt = s.get(conv.b.unwrap());
            let mut out = Vec::new();
            for oy in 0..hr {
                for ox in 0..wr {
                    let mut tok = vec![0.0; c];
                    for (co, t) in tok.iter_mut().enumerate() {
                        let mut acc = bt.data()[co];
                        for ci in 0..c {
                            for ky in 0..r {
                                for kx in 0..r {
                                    let xi = (oy * r + ky) * w + ox * r + kx;
                                    acc += wt.at(&[co, ci, ky, kx]) * x[xi][ci];
                                }
                            }
                        }
                        *t = acc;
                    }
                    out.push(ln(&tok, s.get(norm.gamma), s.get(norm.beta)));
                }
            }
            out
        }
    };
    let nr = kv_src.len();
    let g: Vec<f64> = if gated {
        assert_eq!(r, 1, "oracle pools gas only at r = 1");
        psi.iter().map(|&p| key_gate_oracle(s, gate, p)).collect()
    } else {
        vec![0.0; nr]
    };
    let q: Vec<Vec<f64>> = x.iter().map(|t| lin_of(s, &attn.q).apply(t)).collect();
    let k: Vec<Vec<f64>> = kv_src.iter().map(|t| lin_of(s, &attn.k).apply(t)).collect();
    let v: Vec<Vec<f64>> = kv_src.iter().map(|t| lin_of(s, &attn.v).apply(t)).collect();
    let dh = c / attn.heads;
    let mut out = vec![vec![0.0; c]; x.len()];
    for head in 0..attn.heads {
        let cols = head * dh..(head + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = (0..nr)
                .map(|j| {
                    let a: f64 = cols.clone().map(|d| qi[d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt();
                    if gated {
                        a * g[j]
                    } else {
                        a
                    }
                })
                .collect();
            let p = softmax(&scores);
            for d in cols.clone() {
                out[i][d] = (0..nr)
                    .map(|j| p[j] * v[j][d] * if gated { 1.0 + g[j] } else { 1.0 })
                    .sum();
            }
        }
    }
    let y: Vec<Vec<f64>> = out.iter().map(|t| lin_of(s, &attn.o).apply(t)).collect();
    if !gated {
        return y;
    }
    let wg = s.get(gate.w_g);
    let bg = s.get(gate.b_g);
    y.iter()
        .enumerate()
        .map(|(i, t)| {
            t.iter()
                .enumerate()
                .map(|(ch, &yv)| sigmoid(wg.data()[ch] * psi[i] + bg.data()[ch]) * yv)
                .collect()
        })
        .collect()
}

// ------------------------------------------------------------ helpers

pub fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng, scale: f64) {
    for i in 0..store.len() {
        let id = ParamId(i);
        let shape = store.get(id).shape().to_vec();
        let t = random_tensor(&shape, scale, rng);
        store.set(id, t).unwrap();
    }
}

pub fn fill(store: &mut ParamStore<f64>, id: ParamId, v: f64) {
    let shape = store.get(id).shape().to_vec();
    store.set(id, Tensor::full(&shape, v)).unwrap();
}

pub fn rows(t: &Tensor<f64>, n: usize) -> Vec<Vec<f64>> {
    t.data().chunks(t.len() / n).map(|c| c.to_vec()).collect()
}

pub fn project<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = Rng::new(seed).child("proj");
    let w = random_tensor(&y.shape(), 1.0, &mut rng);
    Ok(y.mul(y.graph().constant(w))?.sum_all())
}

/// Every score of one frame (mIoU, Dice, Tversky, BF1, Hausdorff, CLE), by
/// direct per-pixel loops.
pub fn seg_oracle(pred: &[u8], gt: &[u8], w: usize, h: usize, theta: f64) -> [f64; 6] {
    let at = |m: &[u8], x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && m[(y as usize) * w + x as usize] == 1;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    let mut tn = 0.0;
    for i in 0..w * h {
        match (pred[i], gt[i]) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fn_ += 1.0,
            _ => tn += 1.0,
        }
    }
    let safe = |n: f64, d: f64| if d == 0.0 { 1.0 } else { n / d };
    let miou = (safe(tp, tp + fp + fn_) + safe(tn, tn + fp + fn_)) / 2.0;
    let dice = safe(2.0 * tp, 2.0 * tp + fp + fn_);
    let ti = safe(tp, tp + 0.3 * fp + 0.7 * fn_);
    let edge = |m: &[u8]| {
        let mut v = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if at(m, x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !at(m, x + dx, y + dy)) {
                    v.push((x as f64, y as f64));
                }
            }
        }
        v
    };
    let (ep, eg) = (edge(pred), edge(gt));
    let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let directed = |a: &[(f64, f64)], b: &[(f64, f64)]| {
        a.iter()
            .map(|&p| b.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    let within = |a: &[(f64, f64)], b: &[(f64, f64)]| a.iter().filter(|&&p| b.iter().any(|&q| d(p, q) <= theta)).count() as f64;
    let diag = ((w * w + h * h) as f64).sqrt();
    let npred = pred.iter().filter(|&&v| v == 1).count();
    let ngt = gt.iter().filter(|&&v| v == 1).count();
    let (bf1, hd, cle) = if npred == 0 && ngt == 0 {
        (1.0, 0.0, 0.0)
    } else if npred == 0 || ngt == 0 {
        (0.0, diag, diag)
    } else {
        let p = within(&ep, &eg) / ep.len() as f64;
        let r = within(&eg, &ep) / eg.len() as f64;
        let bf1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let hd = directed(&ep, &eg).max(directed(&eg, &ep));
        let c = |m: &[u8], n: usize| {
            let (mut sx, mut sy) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    if m[y * w + x] == 1 {
                        sx += x as f64;
                        sy += y as f64;
                    }
                }
            }
            (sx / n as f64, sy / n as f64)
        };
        (bf1, hd, d(c(pred, npred), c(gt, ngt)))
    };
    [miou, dice, ti, bf1, hd, cle]
}


/// `[acc, bacc, macro_f1, kappa, gini]` by counting: per-class recall and
/// precision from the label lists, κ from observed and marginal agreement, and
/// one-vs-rest AUC over every positive/negative pair with ties worth ½.
pub fn cls_oracle(pred: &[usize], truth: &[usize], probs: &[Vec<f64>], classes: usize) -> [f64; 5] {
    let n = truth.len() as f64;
    let count = |f: &dyn Fn(usize) -> bool| (0..truth.len()).filter(|&i| f(i)).count() as f64;
    let acc = count(&|i| pred[i] == truth[i]) / n;
    let (mut recall, mut f1, mut present, mut pe) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..classes {
        let tp = count(&|i| pred[i] == k && truth[i] == k);
        let actual = count(&|i| truth[i] == k);
        let predicted = count(&|i| pred[i] == k);
        if actual > 0.0 {
            recall += tp / actual;
            present += 1.0;
        }
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        pe += (actual / n) * (predicted / n);
    }
    let kappa = if pe < 1.0 {
        (acc - pe) / (1.0 - pe)
    } else if acc == 1.0 {
        1.0
    } else {
        0.0
    };
    let (mut auc, mut scored) = (0.0, 0.0);
    for k in 0..classes {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..truth.len() {
            for j in 0..truth.len() {
                if truth[i] == k && truth[j] != k {
                    den += 1.0;
                    let (a, b) = (probs[i][k], probs[j][k]);
                    num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        if den > 0.0 {
            auc += num / den;
            scored += 1.0;
        }
    }
    [acc, recall / present, f1 / classes as f64, kappa, 2.0 * auc / scored - 1.0]
}
