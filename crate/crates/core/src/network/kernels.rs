//! Dense f64 kernels for the network ops, plus their backward forms.
//!
//! Convolutions stage a zero-padded copy of the input and fuse the three
//! horizontal taps into one pass over each padded row, two output channels
//! at a time, accumulating straight into the output planes. Input gradients
//! reuse the forward kernel with transposed, 180-degree-flipped weights.
//! Reductions (weight/bias gradients) keep 8 independent partial sums so
//! they pipeline instead of serializing on one accumulator.

use super::tensor::Tensor;

fn padded(x: &Tensor) -> (Vec<f64>, usize, usize) {
    let (h, w) = (x.h, x.w);
    let (ph, pw) = (h + 2, w + 2);
    let mut xp = vec![0.0; x.c * ph * pw];
    for c in 0..x.c {
        for y in 0..h {
            let src = &x.data[(c * h + y) * w..][..w];
            xp[(c * ph + y + 1) * pw + 1..][..w].copy_from_slice(src);
        }
    }
    (xp, ph, pw)
}

const LANES: usize = 8;

#[inline]
fn dot_into(lanes: &mut [f64; LANES], tail: &mut f64, a: &[f64], b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    let n8 = a.len() - a.len() % LANES;
    for (ca, cb) in a[..n8].chunks_exact(LANES).zip(b[..n8].chunks_exact(LANES)) {
        for k in 0..LANES {
            lanes[k] += ca[k] * cb[k];
        }
    }
    for (x, y) in a[n8..].iter().zip(&b[n8..]) {
        *tail += x * y;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; LANES];
    let mut tail = 0.0;
    dot_into(&mut lanes, &mut tail, a, b);
    lanes.iter().sum::<f64>() + tail
}

#[inline]
fn sum(a: &[f64]) -> f64 {
    let mut lanes = [0.0; LANES];
    let n8 = a.len() - a.len() % LANES;
    for ca in a[..n8].chunks_exact(LANES) {
        for k in 0..LANES {
            lanes[k] += ca[k];
        }
    }
    lanes.iter().sum::<f64>() + a[n8..].iter().sum::<f64>()
}

/// 3x3 same-padding convolution. `w` is [co][ci][3][3] row-major.
pub fn conv3x3(x: &Tensor, w: &[f64], b: &[f64], co: usize) -> Tensor {
    let (ci, h, wd) = (x.c, x.h, x.w);
    assert_eq!(w.len(), co * ci * 9, "conv3x3 weight shape");
    assert_eq!(b.len(), co, "conv3x3 bias shape");
    let (xp, ph, pw) = padded(x);
    let hw = h * wd;
    let mut out = Tensor::zeros(co, h, wd);
    let (head, last) = out.data.split_at_mut((co / 2) * 2 * hw);
    for (pi, pair) in head.chunks_exact_mut(2 * hw).enumerate() {
        let o = pi * 2;
        let (p0, p1) = pair.split_at_mut(hw);
        p0.fill(b[o]);
        p1.fill(b[o + 1]);
        for y in 0..h {
            let acc0 = &mut p0[y * wd..][..wd];
            let acc1 = &mut p1[y * wd..][..wd];
            for c in 0..ci {
                for ky in 0..3 {
                    let row = &xp[(c * ph + y + ky) * pw..][..wd + 2];
                    let w0 = &w[((o * ci + c) * 3 + ky) * 3..][..3];
                    let w1 = &w[(((o + 1) * ci + c) * 3 + ky) * 3..][..3];
                    let (a0, a1, a2) = (w0[0], w0[1], w0[2]);
                    let (b0, b1, b2) = (w1[0], w1[1], w1[2]);
                    for i in 0..wd {
                        let (u, m, z) = (row[i], row[i + 1], row[i + 2]);
                        acc0[i] += u * a0 + m * a1 + z * a2;
                        acc1[i] += u * b0 + m * b1 + z * b2;
                    }
                }
            }
        }
    }
    if co % 2 == 1 {
        let o = co - 1;
        last.fill(b[o]);
        for y in 0..h {
            let acc = &mut last[y * wd..][..wd];
            for c in 0..ci {
                for ky in 0..3 {
                    let row = &xp[(c * ph + y + ky) * pw..][..wd + 2];
                    let w0 = &w[((o * ci + c) * 3 + ky) * 3..][..3];
                    let (a0, a1, a2) = (w0[0], w0[1], w0[2]);
                    for i in 0..wd {
                        acc[i] += row[i] * a0 + row[i + 1] * a1 + row[i + 2] * a2;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv3x3: (dx, dw, db).
pub fn conv3x3_backward(x: &Tensor, w: &[f64], dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (ci, h, wd) = (x.c, x.h, x.w);
    let co = dy.c;
    // dx: convolve dy with weights transposed in (o, c) and flipped in space.
    let mut wt = vec![0.0; w.len()];
    for o in 0..co {
        for c in 0..ci {
            for t in 0..9 {
                wt[(c * co + o) * 9 + t] = w[(o * ci + c) * 9 + (8 - t)];
            }
        }
    }
    let dx = conv3x3(dy, &wt, &vec![0.0; ci], ci);
    // dw and db from the padded input.
    let (xp, ph, pw) = padded(x);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for o in 0..co {
        db[o] = sum(dy.plane(o));
        for c in 0..ci {
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut lanes = [0.0; LANES];
                    let mut tail = 0.0;
                    for y in 0..h {
                        let g = &dy.data[(o * h + y) * wd..][..wd];
                        let row = &xp[(c * ph + y + ky) * pw + kx..][..wd];
                        dot_into(&mut lanes, &mut tail, g, row);
                    }
                    dw[((o * ci + c) * 3 + ky) * 3 + kx] = lanes.iter().sum::<f64>() + tail;
                }
            }
        }
    }
    (dx, dw, db)
}

/// 1x1 convolution. `w` is [co][ci].
pub fn conv1x1(x: &Tensor, w: &[f64], b: &[f64], co: usize) -> Tensor {
    let (ci, h, wd) = (x.c, x.h, x.w);
    assert_eq!(w.len(), co * ci, "conv1x1 weight shape");
    let hw = h * wd;
    let mut out = Tensor::zeros(co, h, wd);
    for o in 0..co {
        let acc = &mut out.data[o * hw..(o + 1) * hw];
        acc.fill(b[o]);
        for c in 0..ci {
            let k = w[o * ci + c];
            let src = &x.data[c * hw..(c + 1) * hw];
            for i in 0..hw {
                acc[i] += k * src[i];
            }
        }
    }
    out
}

pub fn conv1x1_backward(x: &Tensor, w: &[f64], dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (ci, h, wd) = (x.c, x.h, x.w);
    let co = dy.c;
    let mut wt = vec![0.0; w.len()];
    for o in 0..co {
        for c in 0..ci {
            wt[c * co + o] = w[o * ci + c];
        }
    }
    let dx = conv1x1(dy, &wt, &vec![0.0; ci], ci);
    let hw = h * wd;
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for o in 0..co {
        let g = dy.plane(o);
        db[o] = sum(g);
        for c in 0..ci {
            dw[o * ci + c] = dot(g, &x.data[c * hw..(c + 1) * hw]);
        }
    }
    (dx, dw, db)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Subgradient 0 at the kink (x == 0).
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
    }
}

/// Takes the forward OUTPUT s, not the input: ds = dy * s * (1 - s).
pub fn sigmoid_backward(s: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        c: s.c,
        h: s.h,
        w: s.w,
        data: s
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| g * v * (1.0 - v))
            .collect(),
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and flat argmax
/// indices (first maximum wins in (0,0),(0,1),(1,0),(1,1) scan order).
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "maxpool2 needs even dims");
    let (c, h, w) = (x.c, x.h, x.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut idx = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xq in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut where_ = 0usize;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * y + dy) * w + 2 * xq + dx;
                    if x.data[i] > best {
                        best = x.data[i];
                        where_ = i;
                    }
                }
                let o = (ch * oh + y) * ow + xq;
                out.data[o] = best;
                idx[o] = where_ as u32;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(dy: &Tensor, idx: &[u32], in_shape: (usize, usize, usize)) -> Tensor {
    let mut dx = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
    for (o, &i) in idx.iter().enumerate() {
        dx.data[i as usize] += dy.data[o];
    }
    dx
}

/// Per-axis sampling taps for bilinear scaling by integer `factor`
/// (half-pixel centers, clamped at the borders).
fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let s = (o as f64 + 0.5) / factor as f64 - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (n_in - 1) as f64 {
                (n_in - 1, n_in - 1, 0.0)
            } else {
                let f = s.floor();
                (f as usize, f as usize + 1, s - f)
            }
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    assert!(factor >= 1);
    let (c, h, w) = (x.c, x.h, x.w);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let orow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
                let bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
                orow[ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(dy: &Tensor, factor: usize, in_h: usize, in_w: usize) -> Tensor {
    let c = dy.c;
    let ty = bilinear_taps(in_h, factor);
    let tx = bilinear_taps(in_w, factor);
    let mut dx = Tensor::zeros(c, in_h, in_w);
    for ch in 0..c {
        let g = dy.plane(ch);
        let dst = dx.plane_mut(ch);
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = g[oy * dy.w + ox];
                dst[y0 * in_w + x0] += v * (1.0 - wy) * (1.0 - wx);
                dst[y0 * in_w + x1] += v * (1.0 - wy) * wx;
                dst[y1 * in_w + x0] += v * wy * (1.0 - wx);
                dst[y1 * in_w + x1] += v * wy * wx;
            }
        }
    }
    dx
}

/// Average pooling over factor x factor blocks.
pub fn avgpool(x: &Tensor, factor: usize) -> Tensor {
    assert!(factor >= 1 && x.h % factor == 0 && x.w % factor == 0);
    let (c, h, w) = (x.c, x.h, x.w);
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for xq in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = &x.data[(ch * h + y * factor + dy) * w + xq * factor..][..factor];
                    s += row.iter().sum::<f64>();
                }
                out.data[(ch * oh + y) * ow + xq] = s * inv;
            }
        }
    }
    out
}

pub fn avgpool_backward(dy: &Tensor, factor: usize) -> Tensor {
    let (c, oh, ow) = (dy.c, dy.h, dy.w);
    let (h, w) = (oh * factor, ow * factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut dx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..oh {
            for xq in 0..ow {
                let v = dy.data[(ch * oh + y) * ow + xq] * inv;
                for dyy in 0..factor {
                    let row =
                        &mut dx.data[(ch * h + y * factor + dyy) * w + xq * factor..][..factor];
                    for r in row {
                        *r += v;
                    }
                }
            }
        }
    }
    dx
}

pub fn concat_channels(xs: &[&Tensor]) -> Tensor {
    assert!(!xs.is_empty());
    let (h, w) = (xs[0].h, xs[0].w);
    let c: usize = xs.iter().map(|t| t.c).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for t in xs {
        assert!(t.h == h && t.w == w, "concat spatial mismatch");
        data.extend_from_slice(&t.data);
    }
    Tensor { c, h, w, data }
}

pub fn add(xs: &[&Tensor]) -> Tensor {
    let mut out = xs[0].clone();
    for t in &xs[1..] {
        assert!(t.c == out.c && t.h == out.h && t.w == out.w, "add shape mismatch");
        for (a, b) in out.data.iter_mut().zip(&t.data) {
            *a += b;
        }
    }
    out
}

/// F_f = sum_k a[k] (x) m_k: gate k is one spatial map shared across all
/// channels of input k. `a` has one channel per input.
pub fn attention_apply(a: &Tensor, ms: &[&Tensor]) -> Tensor {
    assert_eq!(a.c, ms.len(), "one gate channel per input");
    let (cm, h, w) = (ms[0].c, ms[0].h, ms[0].w);
    let hw = h * w;
    let mut out = Tensor::zeros(cm, h, w);
    for (k, m) in ms.iter().enumerate() {
        assert!(m.c == cm && m.h == h && m.w == w, "attention input shape");
        let gate = a.plane(k);
        for c in 0..cm {
            let src = m.plane(c);
            let dst = out.plane_mut(c);
            for i in 0..hw {
                dst[i] += gate[i] * src[i];
            }
        }
    }
    out
}

/// Returns (da, dm_k for each input).
pub fn attention_apply_backward(a: &Tensor, ms: &[&Tensor], dy: &Tensor) -> (Tensor, Vec<Tensor>) {
    let (cm, h, w) = (ms[0].c, ms[0].h, ms[0].w);
    let hw = h * w;
    let mut da = Tensor::zeros(a.c, h, w);
    let mut dms = Vec::with_capacity(ms.len());
    for (k, m) in ms.iter().enumerate() {
        let gate = a.plane(k);
        let dg = da.plane_mut(k);
        let mut dm = Tensor::zeros(cm, h, w);
        for c in 0..cm {
            let src = m.plane(c);
            let g = dy.plane(c);
            let dst = dm.plane_mut(c);
            for i in 0..hw {
                dg[i] += g[i] * src[i];
                dst[i] = gate[i] * g[i];
            }
        }
        dms.push(dm);
    }
    (da, dms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn naive_conv(x: &Tensor, w: &[f64], b: &[f64], co: usize, k: usize) -> Tensor {
        let (ci, h, wd) = (x.c, x.h, x.w);
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(co, h, wd);
        for o in 0..co {
            for y in 0..h as isize {
                for xc in 0..wd as isize {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - r, xc + kx - r);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                    acc += x.data[(c * h + sy as usize) * wd + sx as usize]
                                        * w[((o * ci + c) * k + ky as usize) * k + kx as usize];
                                }
                            }
                        }
                    }
                    out.data[(o * h + y as usize) * wd + xc as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..12 {
            let ci = rng.gen_range(1..5);
            let co = rng.gen_range(1..6);
            let h = rng.gen_range(1..7);
            let wd = rng.gen_range(1..7);
            let x = rand_tensor(&mut rng, ci, h, wd);
            let w: Vec<f64> = (0..co * ci * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv3x3(&x, &w, &b, co);
            let want = naive_conv(&x, &w, &b, co, 3);
            for i in 0..got.len() {
                assert!((got.data[i] - want.data[i]).abs() < 1e-12, "cell {i}");
            }
        }
    }

    #[test]
    fn conv1x1_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..8 {
            let ci = rng.gen_range(1..6);
            let co = rng.gen_range(1..6);
            let h = rng.gen_range(1..6);
            let wd = rng.gen_range(1..6);
            let x = rand_tensor(&mut rng, ci, h, wd);
            let w: Vec<f64> = (0..co * ci).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv1x1(&x, &w, &b, co);
            let want = naive_conv(&x, &w, &b, co, 1);
            for i in 0..got.len() {
                assert!((got.data[i] - want.data[i]).abs() < 1e-12);
            }
        }
    }

    // Backward tests below: scalar loss dot(y, seed) differentiated by
    // central differences against the analytic kernels.
    fn loss_seed(rng: &mut ChaCha8Rng, y: &Tensor) -> Tensor {
        rand_tensor(rng, y.c, y.h, y.w)
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv3x3_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (ci, co, h, wd) = (2, 3, 4, 5);
        let x = rand_tensor(&mut rng, ci, h, wd);
        let w: Vec<f64> = (0..co * ci * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seed = loss_seed(&mut rng, &conv3x3(&x, &w, &b, co));
        let (dx, dw, db) = conv3x3_backward(&x, &w, &seed);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (dot(&conv3x3(&xp, &w, &b, co), &seed)
                - dot(&conv3x3(&xm, &w, &b, co), &seed))
                / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6, "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (dot(&conv3x3(&x, &wp, &b, co), &seed)
                - dot(&conv3x3(&x, &wm, &b, co), &seed))
                / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}]");
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += eps;
            let mut bm = b.clone();
            bm[i] -= eps;
            let fd = (dot(&conv3x3(&x, &w, &bp, co), &seed)
                - dot(&conv3x3(&x, &w, &bm, co), &seed))
                / (2.0 * eps);
            assert!((fd - db[i]).abs() < 1e-6, "db[{i}]");
        }
    }

    #[test]
    fn conv1x1_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (ci, co, h, wd) = (3, 2, 3, 4);
        let x = rand_tensor(&mut rng, ci, h, wd);
        let w: Vec<f64> = (0..co * ci).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seed = loss_seed(&mut rng, &conv1x1(&x, &w, &b, co));
        let (dx, dw, db) = conv1x1_backward(&x, &w, &seed);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (dot(&conv1x1(&xp, &w, &b, co), &seed)
                - dot(&conv1x1(&xm, &w, &b, co), &seed))
                / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (dot(&conv1x1(&x, &wp, &b, co), &seed)
                - dot(&conv1x1(&x, &wm, &b, co), &seed))
                / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += eps;
            let mut bm = b.clone();
            bm[i] -= eps;
            let fd = (dot(&conv1x1(&x, &w, &bp, co), &seed)
                - dot(&conv1x1(&x, &w, &bm, co), &seed))
                / (2.0 * eps);
            assert!((fd - db[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_forward_and_backward() {
        let x = Tensor::from_vec(
            1,
            4,
            4,
            vec![
                1.0, 2.0, 5.0, 5.0, //
                3.0, 0.0, 1.0, 2.0, //
                9.0, 8.0, 0.0, 0.0, //
                7.0, 6.0, 0.0, 4.0,
            ],
        );
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data, vec![3.0, 5.0, 9.0, 4.0]);
        // Tie in the top-right block resolves to the first scanned cell.
        assert_eq!(idx[1], 2);
        let dy = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let dx = maxpool2_backward(&dy, &idx, (1, 4, 4));
        assert_eq!(dx.data[4], 1.0); // 3.0 at (1,0)
        assert_eq!(dx.data[2], 2.0); // first 5.0
        assert_eq!(dx.data[8], 3.0); // 9.0
        assert_eq!(dx.data[15], 4.0); // 4.0
        assert_eq!(dx.sum(), 10.0);
    }

    #[test]
    fn upsample_preserves_constants_and_matches_fd() {
        let c = Tensor::from_vec(1, 2, 2, vec![3.0; 4]);
        let up = upsample_bilinear(&c, 4);
        assert!(up.data.iter().all(|&v| (v - 3.0).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(&mut rng, 2, 3, 2);
        let f = 2;
        let seed = loss_seed(&mut rng, &upsample_bilinear(&x, f));
        let dx = upsample_bilinear_backward(&seed, f, x.h, x.w);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (dot(&upsample_bilinear(&xp, f), &seed)
                - dot(&upsample_bilinear(&xm, f), &seed))
                / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn avgpool_forward_and_backward() {
        let x = Tensor::from_vec(1, 2, 4, vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]);
        let y = avgpool(&x, 2);
        assert_eq!(y.data, vec![2.5, 6.5]);
        let dy = Tensor::from_vec(1, 1, 2, vec![4.0, 8.0]);
        let dx = avgpool_backward(&dy, 2);
        assert_eq!(dx.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn attention_apply_matches_definition_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ms: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, 3, 2, 2)).collect();
        let a = rand_tensor(&mut rng, 4, 2, 2);
        let refs: Vec<&Tensor> = ms.iter().collect();
        let out = attention_apply(&a, &refs);
        for c in 0..3 {
            for i in 0..4 {
                let want: f64 = (0..4).map(|k| a.plane(k)[i] * ms[k].plane(c)[i]).sum();
                assert!((out.plane(c)[i] - want).abs() < 1e-12);
            }
        }
        let seed = loss_seed(&mut rng, &out);
        let (da, dms) = attention_apply_backward(&a, &refs, &seed);
        let eps = 1e-6;
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap.data[i] += eps;
            let mut am = a.clone();
            am.data[i] -= eps;
            let fd = (dot(&attention_apply(&ap, &refs), &seed)
                - dot(&attention_apply(&am, &refs), &seed))
                / (2.0 * eps);
            assert!((fd - da.data[i]).abs() < 1e-7);
        }
        for k in 0..4 {
            for i in 0..ms[k].len() {
                let mut mp = ms.clone();
                mp[k].data[i] += eps;
                let mut mm = ms.clone();
                mm[k].data[i] -= eps;
                let rp: Vec<&Tensor> = mp.iter().collect();
                let rm: Vec<&Tensor> = mm.iter().collect();
                let fd = (dot(&attention_apply(&a, &rp), &seed)
                    - dot(&attention_apply(&a, &rm), &seed))
                    / (2.0 * eps);
                assert!((fd - dms[k].data[i]).abs() < 1e-7);
            }
        }
    }
}
