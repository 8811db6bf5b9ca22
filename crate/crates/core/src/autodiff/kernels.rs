//! Raw slice kernels behind the tape operations. Everything here is plain
//! loops over NCHW buffers; the tape owns bookkeeping and shape checks.

use super::tensor::{Real, Shape};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub input: Shape,
    /// (out_ch, in_ch, kh, kw)
    pub weight: [usize; 4],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let [_, _, kh, kw] = self.weight;
        let oh = (self.input.h() + 2 * self.pad - kh) / self.stride + 1;
        let ow = (self.input.w() + 2 * self.pad - kw) / self.stride + 1;
        (oh, ow)
    }

    pub fn output(&self) -> Shape {
        let (oh, ow) = self.out_hw();
        Shape::new(self.input.n(), self.weight[0], oh, ow)
    }

    /// Output index range along one axis whose input tap `o*stride + k - pad`
    /// lands inside `0..extent`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let top = extent + self.pad;
        let hi = if top > k {
            ((top - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let [n, ic, h, wd] = g.input.0;
    let [oc, _, kh, kw] = g.weight;
    let (oh, ow) = g.out_hw();
    let s = g.stride;
    let mut out = vec![T::zero(); n * oc * oh * ow];
    for bn in 0..n {
        for o in 0..oc {
            let plane = &mut out[(bn * oc + o) * oh * ow..][..oh * ow];
            if let Some(b) = b {
                plane.fill(b[o]);
            }
            for i in 0..ic {
                let xin = &x[(bn * ic + i) * h * wd..][..h * wd];
                for ky in 0..kh {
                    let (oy0, oy1) = g.valid_range(ky, h, oh);
                    for kx in 0..kw {
                        let wv = w[((o * ic + i) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox0, ox1) = g.valid_range(kx, wd, ow);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.pad;
                            let row = &xin[iy * wd..][..wd];
                            let orow = &mut plane[oy * ow..][..ow];
                            if s == 1 {
                                let off = ox0 + kx - g.pad;
                                for (ov, xv) in orow[ox0..ox1].iter_mut().zip(&row[off..]) {
                                    *ov = *ov + wv * *xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] = orow[ox] + wv * row[ox * s + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let [n, ic, h, wd] = g.input.0;
    let [oc, _, kh, kw] = g.weight;
    let (oh, ow) = g.out_hw();
    let s = g.stride;
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let gb = need.2.then(|| {
        let mut gb = vec![T::zero(); oc];
        for bn in 0..n {
            for (o, acc) in gb.iter_mut().enumerate() {
                let plane = &gout[(bn * oc + o) * oh * ow..][..oh * ow];
                *acc = *acc + T::lit(plane.iter().map(|&v| v.f64()).sum::<f64>());
            }
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return ConvGrads { x: None, w: None, b: gb };
    }
    for bn in 0..n {
        for o in 0..oc {
            let gplane = &gout[(bn * oc + o) * oh * ow..][..oh * ow];
            for i in 0..ic {
                let base = (bn * ic + i) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = g.valid_range(ky, h, oh);
                    for kx in 0..kw {
                        let widx = ((o * ic + i) * kh + ky) * kw + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = g.valid_range(kx, wd, ow);
                        let mut wacc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.pad;
                            let grow = &gplane[oy * ow..][..ow];
                            if s == 1 {
                                let off = base + iy * wd + ox0 + kx - g.pad;
                                let len = ox1 - ox0;
                                if gw.is_some() {
                                    let xrow = &x[off..][..len];
                                    wacc = wacc + grow[ox0..ox1]
                                        .iter()
                                        .zip(xrow)
                                        .map(|(&a, &b)| a * b)
                                        .fold(T::zero(), |s, v| s + v);
                                }
                                if let Some(gx) = gx.as_mut() {
                                    for (gv, go) in gx[off..][..len].iter_mut().zip(&grow[ox0..ox1]) {
                                        *gv = *gv + wv * *go;
                                    }
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let xi = base + iy * wd + ox * s + kx - g.pad;
                                    wacc = wacc + grow[ox] * x[xi];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xi] = gx[xi] + wv * grow[ox];
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] = gw[widx] + wacc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}

/// Per-channel mean and biased variance over (batch, height, width).
pub(crate) fn channel_stats<T: Real>(shape: Shape, x: &[T]) -> (Vec<T>, Vec<T>) {
    let [n, c, _, _] = shape.0;
    let p = shape.plane();
    let count = (n * p) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..n {
            sum += x[(b * c + ch) * p..][..p].iter().map(|&v| v.f64()).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += x[(b * c + ch) * p..][..p]
                .iter()
                .map(|&v| {
                    let d = v.f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = T::lit(m);
        var[ch] = T::lit(sq / count);
    }
    (mean, var)
}

/// Applies `f(channel, value)` to every element.
pub(crate) fn map_channels<T: Real>(shape: Shape, x: &[T], f: impl Fn(usize, T) -> T) -> Vec<T> {
    let c = shape.c();
    let p = shape.plane();
    let mut out = Vec::with_capacity(x.len());
    for (blk, chunk) in x.chunks(p).enumerate() {
        let ch = blk % c;
        out.extend(chunk.iter().map(|&v| f(ch, v)));
    }
    out
}

/// Per-channel sums of `a` and of `a*b`.
pub(crate) fn channel_sums<T: Real>(shape: Shape, a: &[T], b: &[T]) -> (Vec<f64>, Vec<f64>) {
    let c = shape.c();
    let p = shape.plane();
    let mut sa = vec![0.0f64; c];
    let mut sab = vec![0.0f64; c];
    for (blk, (ca, cb)) in a.chunks(p).zip(b.chunks(p)).enumerate() {
        let ch = blk % c;
        for (&va, &vb) in ca.iter().zip(cb) {
            sa[ch] += va.f64();
            sab[ch] += va.f64() * vb.f64();
        }
    }
    (sa, sab)
}

/// 2×2 max pool; returns values and the flat argmax index of each window.
/// Ties go to the first maximum in row-major scan order.
pub(crate) fn maxpool2x2<T: Real>(shape: Shape, x: &[T]) -> (Vec<T>, Vec<u32>) {
    let [n, c, h, w] = shape.0;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub(crate) fn upsample_nearest2x<T: Real>(shape: Shape, x: &[T]) -> Vec<T> {
    let [n, c, h, w] = shape.0;
    let ow = 2 * w;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let o = 2 * y * ow + 2 * xx;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

/// Gradient of nearest 2× upsampling: sums each 2×2 block.
pub(crate) fn upsample_nearest2x_backward<T: Real>(in_shape: Shape, g: &[T]) -> Vec<T> {
    let [n, c, h, w] = in_shape.0;
    let ow = 2 * w;
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &g[plane * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let o = 2 * y * ow + 2 * xx;
                out[plane * h * w + y * w + xx] = src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook convolution with explicit bounds checks.
    fn naive_conv(g: &ConvGeom, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
        let [n, ic, h, wd] = g.input.0;
        let [oc, _, kh, kw] = g.weight;
        let (oh, ow) = g.out_hw();
        let mut out = vec![0.0; n * oc * oh * ow];
        for bn in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for i in 0..ic {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w[((o * ic + i) * kh + ky) * kw + kx]
                                        * x[((bn * ic + i) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((bn * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_strides_and_pads() {
        for (stride, pad, h, w) in [(1, 1, 5, 6), (2, 1, 8, 8), (2, 0, 7, 9), (1, 0, 4, 4), (3, 2, 9, 5)] {
            let g = ConvGeom {
                input: Shape::new(2, 3, h, w),
                weight: [4, 3, 3, 3],
                stride,
                pad,
            };
            let x: Vec<f32> = (0..g.input.numel()).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
            let wt: Vec<f32> = (0..4 * 3 * 9).map(|i| ((i * 13 % 11) as f32 - 5.0) / 7.0).collect();
            let b = [0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&g, &x, &wt, Some(&b));
            let slow = naive_conv(&g, &x, &wt, &b);
            assert_eq!(fast.len(), slow.len());
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-4, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (v, i) = maxpool2x2(Shape::new(1, 1, 2, 2), &[3.0, 3.0, 3.0, 3.0]);
        assert_eq!(v, vec![3.0]);
        assert_eq!(i, vec![0]);
    }
}
