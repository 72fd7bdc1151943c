//! Convolution-family kernels. 2-D convolutions lower to im2col + GEMM;
//! the 1-D sequence convolutions work on `[S, L, C]` tensors directly.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Conv2dAttrs {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvTranspose2dAttrs {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
}

impl Default for ConvTranspose2dAttrs {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            output_padding: (0, 0),
        }
    }
}

/// Geometry of a strided/dilated/padded window sweep over a `c x h x w` image
/// producing `ho x wo` output positions.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dh: usize,
    dw: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Range of output columns `ow` whose input column `ow*sw + off` is in bounds.
    fn valid_cols(&self, off: isize) -> (usize, usize) {
        let sw = self.sw as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + sw - 1) / sw };
        let hi = if (self.w as isize) - off <= 0 {
            0
        } else {
            ((self.w as isize - off - 1) / sw + 1).min(self.wo as isize)
        };
        (lo as usize, hi.max(lo) as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom) -> Vec<T> {
    let p = g.cols();
    let mut col = vec![T::zero(); g.rows() * p];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[r * p..(r + 1) * p];
                let off_w = (kj * g.dw) as isize - g.pw as isize;
                let (lo, hi) = g.valid_cols(off_w);
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki * g.dh) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if g.sw == 1 {
                        let s = (lo as isize + off_w) as usize;
                        out[lo..hi].copy_from_slice(&row[s..s + (hi - lo)]);
                    } else {
                        for ow in lo..hi {
                            out[ow] = row[(ow as isize * g.sw as isize + off_w) as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], g: &Geom, x: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[r * p..(r + 1) * p];
                let off_w = (kj * g.dw) as isize - g.pw as isize;
                let (lo, hi) = g.valid_cols(off_w);
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki * g.dh) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let row = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let inp = &src[oh * g.wo..(oh + 1) * g.wo];
                    for ow in lo..hi {
                        row[(ow as isize * g.sw as isize + off_w) as usize] += inp[ow];
                    }
                }
            }
        }
    }
}

fn conv_out_len(n: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    if n + 2 * p < span || s == 0 {
        return None;
    }
    Some((n + 2 * p - span) / s + 1)
}

fn conv2d_geom<T: Real>(x: &Tensor<T>, w: &Tensor<T>, a: &Conv2dAttrs) -> Result<Geom> {
    if x.rank() != 3 || w.rank() != 4 {
        return shape_err(format!(
            "conv2d expects x [C,H,W] and w [Co,Ci,kh,kw], got {:?} and {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    if w.dim(1) != c {
        return shape_err(format!(
            "conv2d input has {c} channels, weight expects {}",
            w.dim(1)
        ));
    }
    let (kh, kw) = (w.dim(2), w.dim(3));
    let ho = conv_out_len(h, kh, a.stride.0, a.padding.0, a.dilation.0);
    let wo = conv_out_len(wd, kw, a.stride.1, a.padding.1, a.dilation.1);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(Geom {
            c,
            h,
            w: wd,
            kh,
            kw,
            sh: a.stride.0,
            sw: a.stride.1,
            ph: a.padding.0,
            pw: a.padding.1,
            dh: a.dilation.0,
            dw: a.dilation.1,
            ho,
            wo,
        }),
        _ => shape_err(format!(
            "conv2d kernel {kh}x{kw} does not fit input {h}x{wd} with {a:?}"
        )),
    }
}

fn check_bias<T: Real>(b: Option<&Tensor<T>>, n: usize, op: &str) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [n] {
            return shape_err(format!("{op} bias shape {:?}, expected [{n}]", b.shape()));
        }
    }
    Ok(())
}

fn add_channel_bias<T: Real>(out: &mut [T], b: Option<&Tensor<T>>, per_channel: usize) {
    if let Some(b) = b {
        for (chunk, &bv) in out.chunks_mut(per_channel).zip(b.data()) {
            for v in chunk {
                *v += bv;
            }
        }
    }
}

fn channel_sums<T: Real>(g: &[T], channels: usize) -> Tensor<T> {
    let per = g.len() / channels.max(1);
    let data = g
        .chunks(per.max(1))
        .map(|c| c.iter().copied().sum())
        .collect();
    Tensor::new(vec![channels], data).expect("bias gradient")
}

pub(crate) fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    a: &Conv2dAttrs,
) -> Result<Tensor<T>> {
    let g = conv2d_geom(x, w, a)?;
    let co = w.dim(0);
    check_bias(b, co, "conv2d")?;
    let col = im2col(x.data(), &g);
    let (r, p) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); co * p];
    T::gemm(
        co,
        r,
        p,
        T::one(),
        w.data(),
        r,
        1,
        &col,
        p,
        1,
        T::zero(),
        &mut out,
        p,
        1,
    );
    add_channel_bias(&mut out, b, p);
    Tensor::new(vec![co, g.ho, g.wo], out)
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    a: &Conv2dAttrs,
    gy: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let g = conv2d_geom(x, w, a)?;
    let co = w.dim(0);
    let (r, p) = (g.rows(), g.cols());
    let mut grads = vec![None, None];
    if need[0] {
        let mut gcol = vec![T::zero(); r * p];
        T::gemm(
            r,
            co,
            p,
            T::one(),
            w.data(),
            1,
            r,
            gy.data(),
            p,
            1,
            T::zero(),
            &mut gcol,
            p,
            1,
        );
        let mut gx = vec![T::zero(); x.numel()];
        col2im(&gcol, &g, &mut gx);
        grads[0] = Some(Tensor::new(x.shape().to_vec(), gx)?);
    }
    if need[1] {
        let col = im2col(x.data(), &g);
        let mut gw = vec![T::zero(); co * r];
        T::gemm(
            co,
            p,
            r,
            T::one(),
            gy.data(),
            p,
            1,
            &col,
            1,
            p,
            T::zero(),
            &mut gw,
            r,
            1,
        );
        grads[1] = Some(Tensor::new(w.shape().to_vec(), gw)?);
    }
    if has_bias {
        grads.push(
            need.get(2)
                .copied()
                .unwrap_or(false)
                .then(|| channel_sums(gy.data(), co)),
        );
    }
    Ok(grads)
}

fn convt2d_geom<T: Real>(x: &Tensor<T>, w: &Tensor<T>, a: &ConvTranspose2dAttrs) -> Result<Geom> {
    if x.rank() != 3 || w.rank() != 4 {
        return shape_err(format!(
            "conv_transpose2d expects x [Ci,H,W] and w [Ci,Co,kh,kw], got {:?} and {:?}",
            x.shape(),
            w.shape()
        ));
    }
    if w.dim(0) != x.dim(0) {
        return shape_err(format!(
            "conv_transpose2d input has {} channels, weight expects {}",
            x.dim(0),
            w.dim(0)
        ));
    }
    let (h, wd) = (x.dim(1), x.dim(2));
    let (co, kh, kw) = (w.dim(1), w.dim(2), w.dim(3));
    let full = |n: usize, k: usize, s: usize, p: usize, op: usize| -> Option<usize> {
        let len = (n - 1) * s + k + op;
        (n > 0 && len > 2 * p && op < s.max(1)).then(|| len - 2 * p)
    };
    let ho = full(h, kh, a.stride.0, a.padding.0, a.output_padding.0);
    let wo = full(wd, kw, a.stride.1, a.padding.1, a.output_padding.1);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(Geom {
            c: co,
            h: ho,
            w: wo,
            kh,
            kw,
            sh: a.stride.0,
            sw: a.stride.1,
            ph: a.padding.0,
            pw: a.padding.1,
            dh: 1,
            dw: 1,
            ho: h,
            wo: wd,
        }),
        _ => shape_err(format!(
            "conv_transpose2d geometry invalid for input {h}x{wd}, kernel {kh}x{kw}, {a:?}"
        )),
    }
}

pub(crate) fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    a: &ConvTranspose2dAttrs,
) -> Result<Tensor<T>> {
    let g = convt2d_geom(x, w, a)?;
    let ci = x.dim(0);
    check_bias(b, g.c, "conv_transpose2d")?;
    let (r, p) = (g.rows(), g.cols());
    let mut col = vec![T::zero(); r * p];
    T::gemm(
        r,
        ci,
        p,
        T::one(),
        w.data(),
        1,
        r,
        x.data(),
        p,
        1,
        T::zero(),
        &mut col,
        p,
        1,
    );
    let mut out = vec![T::zero(); g.c * g.h * g.w];
    col2im(&col, &g, &mut out);
    add_channel_bias(&mut out, b, g.h * g.w);
    Tensor::new(vec![g.c, g.h, g.w], out)
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    a: &ConvTranspose2dAttrs,
    gy: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let g = convt2d_geom(x, w, a)?;
    let ci = x.dim(0);
    let (r, p) = (g.rows(), g.cols());
    let gcol = im2col(gy.data(), &g);
    let mut grads = vec![None, None];
    if need[0] {
        let mut gx = vec![T::zero(); ci * p];
        T::gemm(
            ci,
            r,
            p,
            T::one(),
            w.data(),
            r,
            1,
            &gcol,
            p,
            1,
            T::zero(),
            &mut gx,
            p,
            1,
        );
        grads[0] = Some(Tensor::new(x.shape().to_vec(), gx)?);
    }
    if need[1] {
        let mut gw = vec![T::zero(); ci * r];
        T::gemm(
            ci,
            p,
            r,
            T::one(),
            x.data(),
            p,
            1,
            &gcol,
            1,
            p,
            T::zero(),
            &mut gw,
            r,
            1,
        );
        grads[1] = Some(Tensor::new(w.shape().to_vec(), gw)?);
    }
    if has_bias {
        grads.push(
            need.get(2)
                .copied()
                .unwrap_or(false)
                .then(|| channel_sums(gy.data(), g.c)),
        );
    }
    Ok(grads)
}

fn seq_dims<T: Real>(x: &Tensor<T>, op: &str) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return shape_err(format!("{op} expects [S,L,C], got {:?}", x.shape()));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2)))
}

/// Causal depthwise conv over `[S, L, C]` with weight `[C, K]`:
/// `y[s,l,c] = b[c] + sum_k w[c,k] * x[s, l-(K-1)+k, c]`.
pub(crate) fn depthwise_conv1d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (s, l, c) = seq_dims(x, "depthwise_conv1d")?;
    if w.rank() != 2 || w.dim(0) != c {
        return shape_err(format!(
            "depthwise_conv1d weight {:?} does not match {c} channels",
            w.shape()
        ));
    }
    check_bias(b, c, "depthwise_conv1d")?;
    let k = w.dim(1);
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); x.numel()];
    for si in 0..s {
        let base = si * l * c;
        for li in 0..l {
            let o = &mut out[base + li * c..base + (li + 1) * c];
            if let Some(b) = b {
                o.copy_from_slice(b.data());
            }
            for kk in 0..k {
                let src = li as isize - (k - 1) as isize + kk as isize;
                if src < 0 {
                    continue;
                }
                let xi = &xd[base + src as usize * c..base + (src as usize + 1) * c];
                for ch in 0..c {
                    o[ch] += wd[ch * k + kk] * xi[ch];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn depthwise_conv1d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    gy: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let (s, l, c) = seq_dims(x, "depthwise_conv1d")?;
    let k = w.dim(1);
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let mut gx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut gw = need[1].then(|| vec![T::zero(); w.numel()]);
    for si in 0..s {
        let base = si * l * c;
        for li in 0..l {
            let g = &gd[base + li * c..base + (li + 1) * c];
            for kk in 0..k {
                let src = li as isize - (k - 1) as isize + kk as isize;
                if src < 0 {
                    continue;
                }
                let off = base + src as usize * c;
                if let Some(gx) = gx.as_mut() {
                    for ch in 0..c {
                        gx[off + ch] += wd[ch * k + kk] * g[ch];
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    for ch in 0..c {
                        gw[ch * k + kk] += xd[off + ch] * g[ch];
                    }
                }
            }
        }
    }
    let mut grads = vec![
        gx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
        gw.map(|v| Tensor::new(w.shape().to_vec(), v)).transpose()?,
    ];
    if has_bias {
        grads.push(need.get(2).copied().unwrap_or(false).then(|| {
            let mut gb = vec![T::zero(); c];
            for row in gd.chunks(c) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::new(vec![c], gb).expect("bias gradient")
        }));
    }
    Ok(grads)
}

/// Transposed conv along `L` of `[S, L, Ci]` with weight `[Ci, Co, K]`.
/// The full-length output (`L + K - 1`) is cropped by `pad_left`/`pad_right`.
pub(crate) fn conv_transpose1d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    pad_left: usize,
    pad_right: usize,
) -> Result<Tensor<T>> {
    let (s, l, ci) = seq_dims(x, "conv_transpose1d")?;
    if w.rank() != 3 || w.dim(0) != ci {
        return shape_err(format!(
            "conv_transpose1d weight {:?} does not match {ci} input channels",
            w.shape()
        ));
    }
    let (co, k) = (w.dim(1), w.dim(2));
    check_bias(b, co, "conv_transpose1d")?;
    let full = l + k - 1;
    if pad_left + pad_right >= full {
        return shape_err("conv_transpose1d crop removes the whole output");
    }
    let lo = full - pad_left - pad_right;
    let mut out = vec![T::zero(); s * lo * co];
    for si in 0..s {
        let xs = &x.data()[si * l * ci..(si + 1) * l * ci];
        let os = &mut out[si * lo * co..(si + 1) * lo * co];
        if let Some(b) = b {
            for row in os.chunks_mut(co) {
                row.copy_from_slice(b.data());
            }
        }
        // out[j] += x[j + pad_left - kk] * w[:, :, kk]
        for kk in 0..k {
            let (j0, j1) = tconv_range(l, lo, pad_left, kk);
            if j0 >= j1 {
                continue;
            }
            let src0 = j0 + pad_left - kk;
            T::gemm(
                j1 - j0,
                ci,
                co,
                T::one(),
                &xs[src0 * ci..],
                ci,
                1,
                &w.data()[kk..],
                co * k,
                k,
                T::one(),
                &mut os[j0 * co..],
                co,
                1,
            );
        }
    }
    Tensor::new(vec![s, lo, co], out)
}

/// Output rows `j` for which `j + pad_left - kk` indexes a valid input row.
fn tconv_range(l: usize, lo: usize, pad_left: usize, kk: usize) -> (usize, usize) {
    let j0 = kk.saturating_sub(pad_left);
    let j1 = (l + kk).saturating_sub(pad_left).min(lo);
    (j0, j1)
}

pub(crate) fn conv_transpose1d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    pad_left: usize,
    gy: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let (s, l, ci) = seq_dims(x, "conv_transpose1d")?;
    let (co, k) = (w.dim(1), w.dim(2));
    let lo = gy.dim(1);
    let mut gx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut gw = need[1].then(|| vec![T::zero(); w.numel()]);
    for si in 0..s {
        let xs = &x.data()[si * l * ci..(si + 1) * l * ci];
        let gs = &gy.data()[si * lo * co..(si + 1) * lo * co];
        for kk in 0..k {
            let (j0, j1) = tconv_range(l, lo, pad_left, kk);
            if j0 >= j1 {
                continue;
            }
            let src0 = j0 + pad_left - kk;
            let rows = j1 - j0;
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx[si * l * ci..(si + 1) * l * ci];
                // gx[src] += gy[j] * w[:, :, kk]^T
                T::gemm(
                    rows,
                    co,
                    ci,
                    T::one(),
                    &gs[j0 * co..],
                    co,
                    1,
                    &w.data()[kk..],
                    k,
                    co * k,
                    T::one(),
                    &mut gxs[src0 * ci..],
                    ci,
                    1,
                );
            }
            if let Some(gw) = gw.as_mut() {
                // gw[:, :, kk] += x[src]^T gy[j]
                T::gemm(
                    ci,
                    rows,
                    co,
                    T::one(),
                    &xs[src0 * ci..],
                    1,
                    ci,
                    &gs[j0 * co..],
                    co,
                    1,
                    T::one(),
                    &mut gw[kk..],
                    co * k,
                    k,
                );
            }
        }
    }
    let mut grads = vec![
        gx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
        gw.map(|v| Tensor::new(w.shape().to_vec(), v)).transpose()?,
    ];
    if has_bias {
        grads.push(need.get(2).copied().unwrap_or(false).then(|| {
            let mut gb = vec![T::zero(); co];
            for row in gy.data().chunks(co) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::new(vec![co], gb).expect("bias gradient")
        }));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, a: &Conv2dAttrs) -> Tensor<f64> {
        let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let ho = (h + 2 * a.padding.0 - a.dilation.0 * (kh - 1) - 1) / a.stride.0 + 1;
        let wo = (wd + 2 * a.padding.1 - a.dilation.1 * (kw - 1) - 1) / a.stride.1 + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (i * a.stride.0 + ki * a.dilation.0) as isize
                                    - a.padding.0 as isize;
                                let iw = (j * a.stride.1 + kj * a.dilation.1) as isize
                                    - a.padding.1 as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[(ci * h + ih as usize) * wd + iw as usize]
                                    * w.data()[((o * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[(o * ho + i) * wo + j] = acc;
                }
            }
        }
        Tensor::new(vec![co, ho, wo], out).unwrap()
    }

    fn ramp(shape: Vec<usize>, scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ((i * 7919 % 23) as f64 - 11.0) * scale)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv2d_matches_naive_for_stride_dilation_padding() {
        let x = ramp(vec![3, 7, 9], 0.1);
        let w = ramp(vec![2, 3, 3, 3], 0.05);
        for a in [
            Conv2dAttrs::default(),
            Conv2dAttrs {
                stride: (1, 2),
                padding: (0, 1),
                dilation: (1, 1),
            },
            Conv2dAttrs {
                stride: (1, 1),
                padding: (2, 1),
                dilation: (2, 1),
            },
            Conv2dAttrs {
                stride: (2, 3),
                padding: (1, 2),
                dilation: (1, 2),
            },
        ] {
            let y = conv2d(&x, &w, None, &a).unwrap();
            let r = naive_conv2d(&x, &w, &a);
            assert_eq!(y.shape(), r.shape());
            for (p, q) in y.data().iter().zip(r.data()) {
                assert!((p - q).abs() < 1e-12, "{a:?}");
            }
        }
    }

    #[test]
    fn conv_transpose2d_is_adjoint_of_conv2d() {
        // <conv(x), y> == <x, convT(y)> when the weights are shared.
        let a = Conv2dAttrs {
            stride: (1, 2),
            padding: (0, 1),
            dilation: (1, 1),
        };
        let at = ConvTranspose2dAttrs {
            stride: (1, 2),
            padding: (0, 1),
            output_padding: (0, 0),
        };
        let x = ramp(vec![2, 4, 9], 0.3);
        let w = ramp(vec![3, 2, 1, 3], 0.2);
        let y = conv2d(&x, &w, None, &a).unwrap();
        let v = ramp(y.shape().to_vec(), 0.7);
        // the conv weight [Co,Ci,..] read as a transposed-conv weight [Ci',Co',..]
        let xt = conv_transpose2d(&v, &w, None, &at).unwrap();
        assert_eq!(xt.shape(), x.shape());
        let lhs: f64 = y.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn conv_transpose2d_restores_odd_width() {
        let at = ConvTranspose2dAttrs {
            stride: (1, 2),
            padding: (0, 1),
            output_padding: (0, 0),
        };
        let x = Tensor::<f64>::zeros(vec![2, 3, 101]);
        let w = Tensor::<f64>::zeros(vec![2, 2, 1, 3]);
        assert_eq!(
            conv_transpose2d(&x, &w, None, &at).unwrap().shape(),
            &[2, 3, 201]
        );
    }

    #[test]
    fn depthwise_is_causal() {
        let mut x = Tensor::<f64>::zeros(vec![1, 6, 2]);
        x.data_mut()[3 * 2] = 1.0;
        let w = ramp(vec![2, 4], 1.0);
        let y = depthwise_conv1d(&x, &w, None).unwrap();
        for l in 0..3 {
            assert_eq!(y.data()[l * 2], 0.0);
        }
        assert_eq!(y.data()[3 * 2], w.data()[3]);
    }

    #[test]
    fn conv_transpose1d_preserves_length() {
        let x = ramp(vec![2, 5, 3], 0.1);
        let w = ramp(vec![3, 2, 4], 0.1);
        let y = conv_transpose1d(&x, &w, None, 1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 5, 2]);
        // naive reference
        for s in 0..2 {
            for j in 0..5 {
                for o in 0..2 {
                    let mut acc = 0.0;
                    for kk in 0..4 {
                        let src = j as isize + 1 - kk as isize;
                        if src < 0 || src >= 5 {
                            continue;
                        }
                        for i in 0..3 {
                            acc += x.data()[(s * 5 + src as usize) * 3 + i]
                                * w.data()[(i * 2 + o) * 4 + kk];
                        }
                    }
                    assert!((y.data()[(s * 5 + j) * 2 + o] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
