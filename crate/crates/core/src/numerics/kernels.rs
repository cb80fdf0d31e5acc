//! Raw slice kernels shared by the differentiable ops and the non-learned code paths.

use super::float::Float;

/// Row-major matrix product `c (+)= op(a) * op(b)`, `op(a)` being `m x k`, `op(b)` `k x n`.
///
/// `a_t` means `a` is stored as `k x m`; `b_t` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_t: bool,
    b: &[F],
    b_t: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: extents checked above; `c` is a distinct mutable borrow.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_per_group() * self.k * self.k
    }

    fn is_depthwise(&self) -> bool {
        self.cin_per_group() == 1 && self.cout_per_group() == 1
    }
}

/// `floor((n + 2 pad - k) / stride) + 1`, or `None` when the window does not fit.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output indices `[lo, hi)` whose tap at kernel offset `kk` lands inside `0..n_in`.
#[inline]
fn tap_range(n_in: usize, n_out: usize, stride: usize, pad: usize, kk: usize) -> (usize, usize) {
    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
    if n_in + pad <= kk {
        return (0, 0);
    }
    let hi = ((n_in - 1 + pad - kk) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

/// Input offset of output index `o` at kernel offset `kk`; only valid inside [`tap_range`].
#[inline]
fn tap_src(o: usize, stride: usize, pad: usize, kk: usize) -> usize {
    o * stride + kk - pad
}

fn im2col<F: Float>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let plane = g.h_out * g.w_out;
    let s = g.stride;
    for c in 0..g.cin_per_group() {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y_lo, y_hi) = tap_range(g.h, g.h_out, s, g.pad, ky);
            for kx in 0..g.k {
                let (x_lo, x_hi) = tap_range(g.w, g.w_out, s, g.pad, kx);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst.fill(F::zero());
                for oy in y_lo..y_hi {
                    let iy = tap_src(oy, s, g.pad, ky);
                    let line = &mut dst[oy * g.w_out + x_lo..oy * g.w_out + x_hi];
                    let ix0 = iy * g.w + tap_src(x_lo, s, g.pad, kx);
                    if s == 1 {
                        line.copy_from_slice(&xc[ix0..ix0 + line.len()]);
                    } else {
                        for (d, &v) in line.iter_mut().zip(xc[ix0..].iter().step_by(s)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let plane = g.h_out * g.w_out;
    let s = g.stride;
    for c in 0..g.cin_per_group() {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y_lo, y_hi) = tap_range(g.h, g.h_out, s, g.pad, ky);
            for kx in 0..g.k {
                let (x_lo, x_hi) = tap_range(g.w, g.w_out, s, g.pad, kx);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in y_lo..y_hi {
                    let iy = tap_src(oy, s, g.pad, ky);
                    let line = &src[oy * g.w_out + x_lo..oy * g.w_out + x_hi];
                    let ix0 = iy * g.w + tap_src(x_lo, s, g.pad, kx);
                    for (d, &v) in dxc[ix0..].iter_mut().step_by(s).zip(line) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass. `w` is `[c_out, c_in/groups, k, k]`.
pub fn conv2d_forward<F: Float>(g: &ConvGeom, x: &[F], w: &[F], bias: Option<&[F]>) -> Vec<F> {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let mut out = vec![F::zero(); g.batch * g.c_out * plane_out];
    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.c_out {
                let xc = &x[(b * g.c_in + c) * plane_in..][..plane_in];
                let wc = &w[c * g.k * g.k..(c + 1) * g.k * g.k];
                let oc = &mut out[(b * g.c_out + c) * plane_out..][..plane_out];
                depthwise_plane(g, xc, wc, oc);
            }
        }
    } else {
        let rows = g.col_rows();
        let mut cols = vec![F::zero(); rows * plane_out];
        let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
        for b in 0..g.batch {
            for grp in 0..g.groups {
                let xg = &x[(b * g.c_in + grp * cig) * plane_in..][..cig * plane_in];
                im2col(g, xg, &mut cols);
                let wg = &w[grp * cog * rows..(grp + 1) * cog * rows];
                let og = &mut out[(b * g.c_out + grp * cog) * plane_out..][..cog * plane_out];
                gemm(cog, rows, plane_out, wg, false, &cols, false, og, false);
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for c in 0..g.c_out {
                let bv = bias[c];
                out[(b * g.c_out + c) * plane_out..][..plane_out]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn depthwise_plane<F: Float>(g: &ConvGeom, xc: &[F], wc: &[F], oc: &mut [F]) {
    oc.fill(F::zero());
    let s = g.stride;
    for ky in 0..g.k {
        let (y_lo, y_hi) = tap_range(g.h, g.h_out, s, g.pad, ky);
        for kx in 0..g.k {
            let (x_lo, x_hi) = tap_range(g.w, g.w_out, s, g.pad, kx);
            let wv = wc[ky * g.k + kx];
            for oy in y_lo..y_hi {
                let iy = tap_src(oy, s, g.pad, ky);
                let line = &mut oc[oy * g.w_out + x_lo..oy * g.w_out + x_hi];
                let ix0 = iy * g.w + tap_src(x_lo, s, g.pad, kx);
                if s == 1 {
                    for (o, &v) in line.iter_mut().zip(&xc[ix0..ix0 + x_hi - x_lo]) {
                        *o += wv * v;
                    }
                } else {
                    for (o, &v) in line.iter_mut().zip(xc[ix0..].iter().step_by(s)) {
                        *o += wv * v;
                    }
                }
            }
        }
    }
}

/// Depthwise input and weight gradients for one channel plane.
fn depthwise_plane_backward<F: Float>(
    g: &ConvGeom,
    xc: &[F],
    wc: &[F],
    dyc: &[F],
    mut dxc: Option<&mut [F]>,
    mut dwc: Option<&mut [F]>,
) {
    let s = g.stride;
    for ky in 0..g.k {
        let (y_lo, y_hi) = tap_range(g.h, g.h_out, s, g.pad, ky);
        for kx in 0..g.k {
            let (x_lo, x_hi) = tap_range(g.w, g.w_out, s, g.pad, kx);
            let wv = wc[ky * g.k + kx];
            let mut acc = F::zero();
            for oy in y_lo..y_hi {
                let iy = tap_src(oy, s, g.pad, ky);
                let line = &dyc[oy * g.w_out + x_lo..oy * g.w_out + x_hi];
                let ix0 = iy * g.w + tap_src(x_lo, s, g.pad, kx);
                if dwc.is_some() {
                    acc += line
                        .iter()
                        .zip(xc[ix0..].iter().step_by(s))
                        .fold(F::zero(), |a, (&d, &v)| a + d * v);
                }
                if let Some(dxc) = dxc.as_deref_mut() {
                    for (d, &gv) in dxc[ix0..].iter_mut().step_by(s).zip(line) {
                        *d += wv * gv;
                    }
                }
            }
            if let Some(dwc) = dwc.as_deref_mut() {
                dwc[ky * g.k + kx] += acc;
            }
        }
    }
}

/// Gradients of the convolution with respect to input, weight and bias.
pub fn conv2d_backward<F: Float>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let mut dx = want_dx.then(|| vec![F::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![F::zero(); w.len()]);
    let db = want_db.then(|| {
        let mut db = vec![F::zero(); g.c_out];
        for b in 0..g.batch {
            for (c, d) in db.iter_mut().enumerate() {
                *d += dy[(b * g.c_out + c) * plane_out..][..plane_out]
                    .iter()
                    .copied()
                    .sum::<F>();
            }
        }
        db
    });
    if !want_dx && !want_dw {
        return (dx, dw, db);
    }
    if g.is_depthwise() {
        let kk = g.k * g.k;
        for b in 0..g.batch {
            for c in 0..g.c_out {
                let xc = &x[(b * g.c_in + c) * plane_in..][..plane_in];
                let dyc = &dy[(b * g.c_out + c) * plane_out..][..plane_out];
                let wc = &w[c * kk..(c + 1) * kk];
                let dxc = dx
                    .as_mut()
                    .map(|d| &mut d[(b * g.c_in + c) * plane_in..][..plane_in]);
                let dwc = dw.as_mut().map(|d| &mut d[c * kk..(c + 1) * kk]);
                depthwise_plane_backward(g, xc, wc, dyc, dxc, dwc);
            }
        }
        return (dx, dw, db);
    }
    let rows = g.col_rows();
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let mut cols = vec![F::zero(); rows * plane_out];
    let mut dcols = vec![F::zero(); rows * plane_out];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let dyg = &dy[(b * g.c_out + grp * cog) * plane_out..][..cog * plane_out];
            if let Some(dw) = dw.as_mut() {
                let xg = &x[(b * g.c_in + grp * cig) * plane_in..][..cig * plane_in];
                im2col(g, xg, &mut cols);
                let dwg = &mut dw[grp * cog * rows..(grp + 1) * cog * rows];
                // dW += dY * cols^T
                gemm(cog, plane_out, rows, dyg, false, &cols, true, dwg, true);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w[grp * cog * rows..(grp + 1) * cog * rows];
                // dcols = W^T * dY
                gemm(rows, cog, plane_out, wg, true, dyg, false, &mut dcols, false);
                let dxg = &mut dx[(b * g.c_in + grp * cig) * plane_in..][..cig * plane_in];
                col2im(g, &dcols, dxg);
            }
        }
    }
    (dx, dw, db)
}

/// Source taps for one axis of an align-corners=false bilinear resize.
#[derive(Clone, Debug)]
pub struct ResizeTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl ResizeTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut w_hi = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, w_hi }
    }
}

/// Bilinear resize of `planes` independent `h x w` planes (rows first, then columns).
pub fn resize_forward<F: Float>(
    x: &[F],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<F> {
    let ty = ResizeTaps::new(h, ho);
    let tx = ResizeTaps::new(w, wo);
    let wx: Vec<F> = tx.w_hi.iter().map(|&v| F::from_f64(v)).collect();
    let mut out = vec![F::zero(); planes * ho * wo];
    let mut rows = vec![F::zero(); h * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (r, line) in rows.chunks_exact_mut(wo).enumerate() {
            let s = &src[r * w..(r + 1) * w];
            for (ox, o) in line.iter_mut().enumerate() {
                let (a, b) = (s[tx.lo[ox]], s[tx.hi[ox]]);
                *o = a + (b - a) * wx[ox];
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, line) in dst.chunks_exact_mut(wo).enumerate() {
            let wy1 = F::from_f64(ty.w_hi[oy]);
            let wy0 = F::one() - wy1;
            let top = &rows[ty.lo[oy] * wo..][..wo];
            let bot = &rows[ty.hi[oy] * wo..][..wo];
            for ((o, &t), &b) in line.iter_mut().zip(top).zip(bot) {
                *o = t * wy0 + b * wy1;
            }
        }
    }
    out
}

pub fn resize_backward<F: Float>(
    dy: &[F],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<F> {
    let ty = ResizeTaps::new(h, ho);
    let tx = ResizeTaps::new(w, wo);
    let wx: Vec<F> = tx.w_hi.iter().map(|&v| F::from_f64(v)).collect();
    let mut dx = vec![F::zero(); planes * h * w];
    let mut rows = vec![F::zero(); h * wo];
    for p in 0..planes {
        rows.fill(F::zero());
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        for (oy, line) in g.chunks_exact(wo).enumerate() {
            let wy1 = F::from_f64(ty.w_hi[oy]);
            let wy0 = F::one() - wy1;
            let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
            for (r, &v) in rows[y0 * wo..][..wo].iter_mut().zip(line) {
                *r += v * wy0;
            }
            for (r, &v) in rows[y1 * wo..][..wo].iter_mut().zip(line) {
                *r += v * wy1;
            }
        }
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (r, line) in rows.chunks_exact(wo).enumerate() {
            let dr = &mut d[r * w..(r + 1) * w];
            for (ox, &v) in line.iter().enumerate() {
                let w1 = wx[ox];
                dr[tx.lo[ox]] += v * (F::one() - w1);
                dr[tx.hi[ox]] += v * w1;
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<F: Float>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    half * x * (F::one() + fast_tanh(c * (x + a * x * x * x)))
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
#[inline]
fn fast_tanh<F: Float>(u: F) -> F {
    let two = F::from_f64(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

#[inline]
pub fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = fast_tanh(u);
    let du = c * (F::one() + three * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_output_length() {
        assert_eq!(conv_out_len(256, 7, 4, 3), Some(64));
        assert_eq!(conv_out_len(320, 7, 4, 3), Some(80));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
    }

    #[test]
    fn sigmoid_is_stable_and_exact_at_zero() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
    }

    #[test]
    fn resize_taps_identity() {
        let t = ResizeTaps::new(5, 5);
        assert_eq!(t.lo, vec![0, 1, 2, 3, 4]);
        assert!(t.w_hi.iter().all(|&w| w == 0.0));
    }
}
