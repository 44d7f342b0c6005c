//! Raw loops behind the tape ops. Every reduction runs in a fixed order so
//! results are bitwise reproducible whether or not the batch axis is split
//! across threads.

use rayon::prelude::*;

use crate::scalar::Scalar;

use super::parallel_enabled;

/// `out[m,n] = a[m,k] · b[k,n]`.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [S])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if parallel_enabled() && m >= 32 {
        out.par_chunks_mut(n.max(1)).enumerate().for_each(row);
    } else {
        out.chunks_mut(n.max(1)).enumerate().for_each(row);
    }
    out
}

pub(crate) fn transpose<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    /// Input coordinate read by output `o` through kernel tap `d`, if inside.
    #[inline]
    fn src(&self, o: usize, d: usize, extent: usize) -> Option<usize> {
        let pos = (o + d) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Stride-1 zero-padded cross-correlation, NCHW input, OIHW weight.
pub(crate) fn conv2d<S: Scalar>(x: &[S], w: &[S], d: ConvDims) -> Vec<S> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let in_img = d.in_ch * d.height * d.width;
    let out_img = d.out_ch * oh * ow;
    let mut out = vec![S::zero(); d.batch * out_img];
    let per_image = |(b, out_b): (usize, &mut [S])| {
        let xb = &x[b * in_img..(b + 1) * in_img];
        for o in 0..d.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = S::zero();
                    for c in 0..d.in_ch {
                        for di in 0..d.kh {
                            let Some(si) = d.src(i, di, d.height) else { continue };
                            for dj in 0..d.kw {
                                let Some(sj) = d.src(j, dj, d.width) else { continue };
                                acc += w[((o * d.in_ch + c) * d.kh + di) * d.kw + dj]
                                    * xb[(c * d.height + si) * d.width + sj];
                            }
                        }
                    }
                    out_b[(o * oh + i) * ow + j] = acc;
                }
            }
        }
    };
    if parallel_enabled() {
        out.par_chunks_mut(out_img.max(1)).enumerate().for_each(per_image);
    } else {
        out.chunks_mut(out_img.max(1)).enumerate().for_each(per_image);
    }
    out
}

/// Gradients of `conv2d` with respect to input and weight.
pub(crate) fn conv2d_backward<S: Scalar>(x: &[S], w: &[S], g: &[S], d: ConvDims) -> (Vec<S>, Vec<S>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let in_img = d.in_ch * d.height * d.width;
    let out_img = d.out_ch * oh * ow;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    for b in 0..d.batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let gb = &g[b * out_img..(b + 1) * out_img];
        let dxb = &mut dx[b * in_img..(b + 1) * in_img];
        for o in 0..d.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let gv = gb[(o * oh + i) * ow + j];
                    if gv == S::zero() {
                        continue;
                    }
                    for c in 0..d.in_ch {
                        for di in 0..d.kh {
                            let Some(si) = d.src(i, di, d.height) else { continue };
                            for dj in 0..d.kw {
                                let Some(sj) = d.src(j, dj, d.width) else { continue };
                                let wi = ((o * d.in_ch + c) * d.kh + di) * d.kw + dj;
                                let xi = (c * d.height + si) * d.width + sj;
                                dxb[xi] += w[wi] * gv;
                                dw[wi] += xb[xi] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// 2×2 mean pooling with stride 2 over the two trailing axes.
pub(crate) fn avg_pool2<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::lit(0.25);
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                out[(p * oh + i) * ow + j] = s * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<S: Scalar>(g: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::lit(0.25);
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let gv = g[(p * oh + i) * ow + j] * quarter;
                let base = p * h * w;
                dx[base + 2 * i * w + 2 * j] += gv;
                dx[base + 2 * i * w + 2 * j + 1] += gv;
                dx[base + (2 * i + 1) * w + 2 * j] += gv;
                dx[base + (2 * i + 1) * w + 2 * j + 1] += gv;
            }
        }
    }
    dx
}

/// Norms below this are treated as zero vectors by every normalization.
pub const NORM_EPS: f64 = 1e-8;

/// L2-normalizes consecutive rows of length `n`; near-zero rows map to zero
/// and NaN rows stay NaN.
pub(crate) fn normalize_rows<S: Scalar>(x: &[S], n: usize) -> (Vec<S>, Vec<S>) {
    let eps = S::lit(NORM_EPS);
    let mut out = vec![S::zero(); x.len()];
    let mut norms = Vec::with_capacity(x.len() / n.max(1));
    for (row, out_row) in x.chunks(n).zip(out.chunks_mut(n)) {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        norms.push(norm);
        if norm >= eps || norm.is_nan() {
            for (o, &v) in out_row.iter_mut().zip(row) {
                *o = v / norm;
            }
        }
    }
    (out, norms)
}

pub(crate) fn softmax_rows<S: Scalar>(x: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (row, out_row) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    out
}
