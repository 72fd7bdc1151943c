//! The closed operator catalog. Every operator is a pure function of its
//! input tensors plus attributes, with a hand-written vector-Jacobian product.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::conv::{self, Conv2dAttrs, ConvTranspose2dAttrs};
use crate::dsp::{self, StftConfig};
use crate::error::{shape_err, Error, Result};
use crate::ssm::kernel::{self as scan, ScanStrategy};
use crate::tensor::{strides, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Conv2d(Conv2dAttrs),
    ConvTranspose2d(ConvTranspose2dAttrs),
    /// Causal depthwise conv over `[S, L, C]`.
    DepthwiseConv1d,
    ConvTranspose1d {
        pad_left: usize,
        pad_right: usize,
    },
    /// Affine map over the last axis: `x W^T + b`.
    Dense,
    /// Per-channel (axis 0) normalization over all remaining axes, affine.
    InstanceNorm {
        eps: f64,
    },
    /// `x / sqrt(mean(x^2) + eps) * w` over the last axis.
    RmsNorm {
        eps: f64,
    },
    /// Per-channel (axis 0) learnable leaky slope.
    PRelu,
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Cos,
    Sin,
    Abs,
    Pow {
        exponent: f64,
    },
    /// `scale * x + shift`.
    Affine {
        scale: f64,
        shift: f64,
    },
    /// `atan2(y, x)` for inputs `[y, x]`, with `atan2(0, 0) = 0` and range `(-pi, pi]`.
    Atan2,
    Add,
    Sub,
    Mul,
    Concat {
        axis: usize,
    },
    Flip {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Permute {
        perm: Vec<usize>,
    },
    Mean,
    Sum,
    BatchedMatmul,
    /// Fused zero-order-hold discretization and selective scan; inputs
    /// `[u (S,L,D), delta (S,L,D), a (D,N), b (S,L,N), c (S,L,N)]`.
    SelectiveScan {
        strategy: ScanStrategy,
    },
    /// Inverse STFT of `[re (T,F), im (T,F)]` to `out_len` samples.
    Istft {
        cfg: StftConfig,
        out_len: usize,
    },
}

macro_rules! op_kinds {
    ($($kind:ident => $name:literal),* $(,)?) => {
        /// Attribute-free operator identifier.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum OpKind { $($kind),* }

        impl OpKind {
            pub const ALL: &'static [OpKind] = &[$(OpKind::$kind),*];

            pub fn name(self) -> &'static str {
                match self { $(OpKind::$kind => $name),* }
            }
        }

        impl FromStr for OpKind {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(OpKind::$kind),)*
                    other => Err(Error::UnsupportedOp(other.to_string())),
                }
            }
        }
    };
}

op_kinds! {
    Leaf => "leaf",
    Conv2d => "conv2d",
    ConvTranspose2d => "conv_transpose2d",
    DepthwiseConv1d => "depthwise_conv1d",
    ConvTranspose1d => "conv_transpose1d",
    Dense => "dense",
    InstanceNorm => "instance_norm",
    RmsNorm => "rms_norm",
    PRelu => "prelu",
    Silu => "silu",
    Sigmoid => "sigmoid",
    Softplus => "softplus",
    Exp => "exp",
    Cos => "cos",
    Sin => "sin",
    Abs => "abs",
    Pow => "pow",
    Affine => "affine",
    Atan2 => "atan2",
    Add => "add",
    Sub => "sub",
    Mul => "mul",
    Concat => "concat",
    Flip => "flip",
    Slice => "slice",
    Reshape => "reshape",
    Permute => "permute",
    Mean => "mean",
    Sum => "sum",
    BatchedMatmul => "batched_matmul",
    SelectiveScan => "selective_scan",
    Istft => "istft",
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::ConvTranspose2d(_) => OpKind::ConvTranspose2d,
            Op::DepthwiseConv1d => OpKind::DepthwiseConv1d,
            Op::ConvTranspose1d { .. } => OpKind::ConvTranspose1d,
            Op::Dense => OpKind::Dense,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::PRelu => OpKind::PRelu,
            Op::Silu => OpKind::Silu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Softplus => OpKind::Softplus,
            Op::Exp => OpKind::Exp,
            Op::Cos => OpKind::Cos,
            Op::Sin => OpKind::Sin,
            Op::Abs => OpKind::Abs,
            Op::Pow { .. } => OpKind::Pow,
            Op::Affine { .. } => OpKind::Affine,
            Op::Atan2 => OpKind::Atan2,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Concat { .. } => OpKind::Concat,
            Op::Flip { .. } => OpKind::Flip,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Mean => OpKind::Mean,
            Op::Sum => OpKind::Sum,
            Op::BatchedMatmul => OpKind::BatchedMatmul,
            Op::SelectiveScan { .. } => OpKind::SelectiveScan,
            Op::Istft { .. } => OpKind::Istft,
        }
    }
}

fn arity(op: &Op, n: usize) -> Result<()> {
    let ok = match op {
        Op::Leaf => n == 0,
        Op::Conv2d(_) | Op::ConvTranspose2d(_) | Op::DepthwiseConv1d | Op::Dense => {
            n == 2 || n == 3
        }
        Op::ConvTranspose1d { .. } => n == 2 || n == 3,
        Op::InstanceNorm { .. } => n == 3,
        Op::RmsNorm { .. }
        | Op::PRelu
        | Op::Atan2
        | Op::Add
        | Op::Sub
        | Op::Mul
        | Op::BatchedMatmul => n == 2,
        Op::Concat { .. } => n >= 1,
        Op::SelectiveScan { .. } => n == 5,
        Op::Istft { .. } => n == 2,
        _ => n == 1,
    };
    if ok {
        Ok(())
    } else {
        shape_err(format!("{} does not take {n} inputs", op.kind()))
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Angle of `(x, y)` in `(-pi, pi]`, defined as 0 at the origin.
#[inline]
pub(crate) fn angle<T: Real>(y: T, x: T) -> T {
    if x == T::zero() && y == T::zero() {
        return T::zero();
    }
    let a = y.atan2(x);
    if a <= -T::PI() {
        T::PI()
    } else {
        a
    }
}

fn unary<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` when read as broadcast to `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Visits every output index with the matching flat offsets into `a` and `b`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Tensor::new(out, data)
}

/// Gradient of a broadcast binary op: `da[i] += ga(o) * ...` summed over broadcast axes.
fn binary_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
    da: impl Fn(T, T, T) -> T,
    db: impl Fn(T, T, T) -> T,
) -> Vec<Option<Tensor<T>>> {
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    if a.shape() == b.shape() {
        let ga = need[0].then(|| {
            Tensor::new(
                a.shape().to_vec(),
                (0..gd.len()).map(|i| da(gd[i], ad[i], bd[i])).collect(),
            )
            .unwrap()
        });
        let gb = need[1].then(|| {
            Tensor::new(
                b.shape().to_vec(),
                (0..gd.len()).map(|i| db(gd[i], ad[i], bd[i])).collect(),
            )
            .unwrap()
        });
        return vec![ga, gb];
    }
    let out = g.shape().to_vec();
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut ga = need[0].then(|| vec![T::zero(); a.numel()]);
    let mut gb = need[1].then(|| vec![T::zero(); b.numel()]);
    for_each_broadcast(&out, &sa, &sb, |o, i, j| {
        if let Some(ga) = ga.as_mut() {
            ga[i] += da(gd[o], ad[i], bd[j]);
        }
        if let Some(gb) = gb.as_mut() {
            gb[j] += db(gd[o], ad[i], bd[j]);
        }
    });
    vec![
        ga.map(|v| Tensor::new(a.shape().to_vec(), v).unwrap()),
        gb.map(|v| Tensor::new(b.shape().to_vec(), v).unwrap()),
    ]
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return shape_err(format!("{op}: axis {axis} out of range for {shape:?}"));
    }
    Ok(())
}

fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs[0].shape();
    check_axis(first, axis, "concat")?;
    let mut total = 0;
    for x in xs {
        let s = x.shape();
        if s.len() != first.len()
            || s.iter()
                .enumerate()
                .any(|(i, &d)| i != axis && d != first[i])
        {
            return shape_err(format!("concat: incompatible shapes {first:?} and {s:?}"));
        }
        total += s[axis];
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    let (outer, _, inner) = outer_inner(first, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in xs {
            let block = x.dim(axis) * inner;
            data.extend_from_slice(&x.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(shape, data)
}

fn slice<T: Real>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "slice")?;
    if start > end || end > x.dim(axis) {
        return shape_err(format!(
            "slice {start}..{end} out of range for axis {axis} of {:?}",
            x.shape()
        ));
    }
    let (outer, n, inner) = outer_inner(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        let base = o * n * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Tensor::new(shape, data)
}

fn flip<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "flip")?;
    let (outer, n, inner) = outer_inner(x.shape(), axis);
    let mut data = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for i in (0..n).rev() {
            let s = (o * n + i) * inner;
            data.extend_from_slice(&x.data()[s..s + inner]);
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return shape_err(format!("invalid permutation {perm:?} for {:?}", x.shape()));
    }
    let in_strides = strides(x.shape());
    let shape: Vec<usize> = perm.iter().map(|&p| x.dim(p)).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    if n > 0 {
        let xd = x.data();
        let last = rank - 1;
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        loop {
            // innermost run
            let st = src_strides[last];
            for i in 0..shape[last] {
                data.push(xd[off + i * st]);
            }
            let mut d = last;
            loop {
                if d == 0 {
                    return Tensor::new(shape, data);
                }
                d -= 1;
                idx[d] += 1;
                off += src_strides[d];
                if idx[d] < shape[d] {
                    break;
                }
                off -= src_strides[d] * shape[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::new(shape, data)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn per_channel<T: Real>(x: &Tensor<T>, p: &Tensor<T>, op: &str) -> Result<usize> {
    if x.rank() < 1 || p.shape() != [x.dim(0)] {
        return shape_err(format!(
            "{op}: parameter {:?} does not match channels of {:?}",
            p.shape(),
            x.shape()
        ));
    }
    Ok(x.numel() / x.dim(0).max(1))
}

fn instance_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let per = per_channel(x, gamma, "instance_norm")?;
    per_channel(x, beta, "instance_norm")?;
    let n = T::of(per as f64);
    let mut out = Vec::with_capacity(x.numel());
    for (c, chunk) in x.data().chunks(per.max(1)).enumerate() {
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::of(eps)).sqrt();
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        out.extend(chunk.iter().map(|&v| (v - mean) * inv * g + b));
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn instance_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
    gy: &Tensor<T>,
    need: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let c = x.dim(0);
    let per = x.numel() / c.max(1);
    let n = T::of(per as f64);
    let mut gx = need[0].then(|| Vec::with_capacity(x.numel()));
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let xs = &x.data()[ch * per..(ch + 1) * per];
        let gs = &gy.data()[ch * per..(ch + 1) * per];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::of(eps)).sqrt();
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&xv, &g) in xs.iter().zip(gs) {
            let xh = (xv - mean) * inv;
            sum_g += g;
            sum_gx += g * xh;
        }
        gg[ch] = sum_gx;
        gb[ch] = sum_g;
        if let Some(gx) = gx.as_mut() {
            let gam = gamma.data()[ch];
            for (&xv, &g) in xs.iter().zip(gs) {
                let xh = (xv - mean) * inv;
                gx.push(gam * inv * (g - sum_g / n - xh * sum_gx / n));
            }
        }
    }
    vec![
        gx.map(|v| Tensor::new(x.shape().to_vec(), v).unwrap()),
        need[1].then(|| Tensor::new(vec![c], gg).unwrap()),
        need[2].then(|| Tensor::new(vec![c], gb).unwrap()),
    ]
}

fn rms_norm<T: Real>(x: &Tensor<T>, w: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let c = w.numel();
    if x.rank() < 1 || w.rank() != 1 || x.dim(x.rank() - 1) != c || c == 0 {
        return shape_err(format!(
            "rms_norm: x {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let n = T::of(c as f64);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let inv = T::one() / (row.iter().map(|&v| v * v).sum::<T>() / n + T::of(eps)).sqrt();
        out.extend(row.iter().zip(w.data()).map(|(&v, &wv)| v * inv * wv));
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn rms_norm_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    eps: f64,
    gy: &Tensor<T>,
    need: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let c = w.numel();
    let n = T::of(c as f64);
    let mut gx = need[0].then(|| Vec::with_capacity(x.numel()));
    let mut gw = vec![T::zero(); c];
    for (row, grow) in x.data().chunks(c).zip(gy.data().chunks(c)) {
        let inv = T::one() / (row.iter().map(|&v| v * v).sum::<T>() / n + T::of(eps)).sqrt();
        // d/dx_i of x_j * inv = inv (delta_ij - x_i x_j inv^2 / n)
        let mut dot = T::zero();
        for ((&xv, &g), (&wv, gwv)) in row.iter().zip(grow).zip(w.data().iter().zip(gw.iter_mut()))
        {
            *gwv += g * xv * inv;
            dot += g * wv * xv;
        }
        if let Some(gx) = gx.as_mut() {
            let k = dot * inv * inv * inv / n;
            gx.extend(
                row.iter()
                    .zip(grow)
                    .zip(w.data())
                    .map(|((&xv, &g), &wv)| g * wv * inv - xv * k),
            );
        }
    }
    vec![
        gx.map(|v| Tensor::new(x.shape().to_vec(), v).unwrap()),
        need[1].then(|| Tensor::new(vec![c], gw).unwrap()),
    ]
}

fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if x.rank() < 1 || w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(1) {
        return shape_err(format!(
            "dense: input {:?} incompatible with weight {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let (out_f, in_f) = (w.dim(0), w.dim(1));
    if let Some(b) = b {
        if b.shape() != [out_f] {
            return shape_err(format!("dense bias {:?}, expected [{out_f}]", b.shape()));
        }
    }
    let rows = x.numel() / in_f.max(1);
    let mut out = vec![T::zero(); rows * out_f];
    if let Some(b) = b {
        for row in out.chunks_mut(out_f) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(
        rows,
        in_f,
        out_f,
        T::one(),
        x.data(),
        in_f,
        1,
        w.data(),
        1,
        in_f,
        beta,
        &mut out,
        out_f,
        1,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(shape, out)
}

fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    gy: &Tensor<T>,
    need: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (out_f, in_f) = (w.dim(0), w.dim(1));
    let rows = x.numel() / in_f.max(1);
    let gx = need[0].then(|| {
        let mut gx = vec![T::zero(); x.numel()];
        T::gemm(
            rows,
            out_f,
            in_f,
            T::one(),
            gy.data(),
            out_f,
            1,
            w.data(),
            in_f,
            1,
            T::zero(),
            &mut gx,
            in_f,
            1,
        );
        Tensor::new(x.shape().to_vec(), gx).unwrap()
    });
    let gw = need[1].then(|| {
        let mut gw = vec![T::zero(); w.numel()];
        T::gemm(
            out_f,
            rows,
            in_f,
            T::one(),
            gy.data(),
            1,
            out_f,
            x.data(),
            in_f,
            1,
            T::zero(),
            &mut gw,
            in_f,
            1,
        );
        Tensor::new(w.shape().to_vec(), gw).unwrap()
    });
    let mut grads = vec![gx, gw];
    if has_bias {
        grads.push(need.get(2).copied().unwrap_or(false).then(|| {
            let mut gb = vec![T::zero(); out_f];
            for row in gy.data().chunks(out_f) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::new(vec![out_f], gb).unwrap()
        }));
    }
    grads
}

fn bmm_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1) {
        return shape_err(format!(
            "batched_matmul: incompatible {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok((a.dim(0), a.dim(1), a.dim(2), b.dim(2)))
}

fn batched_matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, m, k, n) = bmm_dims(a, b)?;
    let mut out = vec![T::zero(); bs * m * n];
    for i in 0..bs {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * m * k..(i + 1) * m * k],
            k,
            1,
            &b.data()[i * k * n..(i + 1) * k * n],
            n,
            1,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            n,
            1,
        );
    }
    Tensor::new(vec![bs, m, n], out)
}

fn batched_matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let (bs, m, k, n) = bmm_dims(a, b)?;
    let mut ga = need[0].then(|| vec![T::zero(); a.numel()]);
    let mut gb = need[1].then(|| vec![T::zero(); b.numel()]);
    for i in 0..bs {
        let gi = &g.data()[i * m * n..(i + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            T::gemm(
                m,
                n,
                k,
                T::one(),
                gi,
                n,
                1,
                &b.data()[i * k * n..(i + 1) * k * n],
                1,
                n,
                T::zero(),
                &mut ga[i * m * k..(i + 1) * m * k],
                k,
                1,
            );
        }
        if let Some(gb) = gb.as_mut() {
            T::gemm(
                k,
                m,
                n,
                T::one(),
                &a.data()[i * m * k..(i + 1) * m * k],
                1,
                k,
                gi,
                n,
                1,
                T::zero(),
                &mut gb[i * k * n..(i + 1) * k * n],
                n,
                1,
            );
        }
    }
    Ok(vec![
        ga.map(|v| Tensor::new(a.shape().to_vec(), v)).transpose()?,
        gb.map(|v| Tensor::new(b.shape().to_vec(), v)).transpose()?,
    ])
}

/// Evaluates `op` on `inputs`.
pub fn forward<T: Real>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    arity(op, inputs.len())?;
    let x = inputs.first().copied();
    let bias = inputs.get(2).copied();
    match op {
        Op::Leaf => Err(Error::Contract("leaf nodes have no forward".into())),
        Op::Conv2d(a) => conv::conv2d(inputs[0], inputs[1], bias, a),
        Op::ConvTranspose2d(a) => conv::conv_transpose2d(inputs[0], inputs[1], bias, a),
        Op::DepthwiseConv1d => conv::depthwise_conv1d(inputs[0], inputs[1], bias),
        Op::ConvTranspose1d {
            pad_left,
            pad_right,
        } => conv::conv_transpose1d(inputs[0], inputs[1], bias, *pad_left, *pad_right),
        Op::Dense => dense(inputs[0], inputs[1], bias),
        Op::InstanceNorm { eps } => instance_norm(inputs[0], inputs[1], inputs[2], *eps),
        Op::RmsNorm { eps } => rms_norm(inputs[0], inputs[1], *eps),
        Op::PRelu => {
            let (x, a) = (inputs[0], inputs[1]);
            let per = per_channel(x, a, "prelu")?;
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v >= T::zero() {
                        v
                    } else {
                        a.data()[i / per.max(1)] * v
                    }
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::Silu => Ok(unary(x.unwrap(), |v| v * sigmoid(v))),
        Op::Sigmoid => Ok(unary(x.unwrap(), sigmoid)),
        Op::Softplus => Ok(unary(x.unwrap(), softplus)),
        Op::Exp => Ok(unary(x.unwrap(), |v| v.exp())),
        Op::Cos => Ok(unary(x.unwrap(), |v| v.cos())),
        Op::Sin => Ok(unary(x.unwrap(), |v| v.sin())),
        Op::Abs => Ok(unary(x.unwrap(), |v| v.abs())),
        Op::Pow { exponent } => {
            let p = T::of(*exponent);
            Ok(unary(x.unwrap(), |v| v.powf(p)))
        }
        Op::Affine { scale, shift } => {
            let (s, b) = (T::of(*scale), T::of(*shift));
            Ok(unary(x.unwrap(), |v| s * v + b))
        }
        Op::Atan2 => {
            if inputs[0].shape() != inputs[1].shape() {
                return shape_err("atan2 inputs must share a shape");
            }
            Ok(inputs[0].zip_map(inputs[1], angle))
        }
        Op::Add => binary(inputs[0], inputs[1], |a, b| a + b),
        Op::Sub => binary(inputs[0], inputs[1], |a, b| a - b),
        Op::Mul => binary(inputs[0], inputs[1], |a, b| a * b),
        Op::Concat { axis } => concat(inputs, *axis),
        Op::Flip { axis } => flip(inputs[0], *axis),
        Op::Slice { axis, start, end } => slice(inputs[0], *axis, *start, *end),
        Op::Reshape { shape } => inputs[0].clone().reshaped(shape.clone()),
        Op::Permute { perm } => permute(inputs[0], perm),
        Op::Mean => {
            let x = inputs[0];
            Ok(Tensor::scalar(x.sum() / T::of(x.numel().max(1) as f64)))
        }
        Op::Sum => Ok(Tensor::scalar(inputs[0].sum())),
        Op::BatchedMatmul => batched_matmul(inputs[0], inputs[1]),
        Op::SelectiveScan { strategy } => scan::selective_scan_forward(
            inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], *strategy,
        ),
        Op::Istft { cfg, out_len } => dsp::istft_parts(inputs[0], inputs[1], cfg, *out_len),
    }
}

/// Vector-Jacobian product of `op`: returns one optional gradient per input
/// (`None` where `need[i]` is false).
pub fn backward<T: Real>(
    op: &Op,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let x = inputs.first().copied();
    let has_bias = inputs.len() == 3;
    let map1 = |f: &dyn Fn(T, T, T) -> T| -> Vec<Option<Tensor<T>>> {
        let x = x.unwrap();
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
            .collect();
        vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
    };
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Conv2d(a) => conv::conv2d_backward(inputs[0], inputs[1], has_bias, a, g, need)?,
        Op::ConvTranspose2d(a) => {
            conv::conv_transpose2d_backward(inputs[0], inputs[1], has_bias, a, g, need)?
        }
        Op::DepthwiseConv1d => {
            conv::depthwise_conv1d_backward(inputs[0], inputs[1], has_bias, g, need)?
        }
        Op::ConvTranspose1d { pad_left, .. } => {
            conv::conv_transpose1d_backward(inputs[0], inputs[1], has_bias, *pad_left, g, need)?
        }
        Op::Dense => dense_backward(inputs[0], inputs[1], has_bias, g, need),
        Op::InstanceNorm { eps } => instance_norm_backward(inputs[0], inputs[1], *eps, g, need),
        Op::RmsNorm { eps } => rms_norm_backward(inputs[0], inputs[1], *eps, g, need),
        Op::PRelu => {
            let (x, a) = (inputs[0], inputs[1]);
            let per = (x.numel() / x.dim(0).max(1)).max(1);
            let mut gx = Vec::with_capacity(x.numel());
            let mut ga = vec![T::zero(); a.numel()];
            for (i, (&v, &gv)) in x.data().iter().zip(g.data()).enumerate() {
                let c = i / per;
                if v >= T::zero() {
                    gx.push(gv);
                } else {
                    gx.push(gv * a.data()[c]);
                    ga[c] += gv * v;
                }
            }
            vec![
                need[0].then(|| Tensor::new(x.shape().to_vec(), gx).unwrap()),
                need[1].then(|| Tensor::new(a.shape().to_vec(), ga).unwrap()),
            ]
        }
        Op::Silu => map1(&|x, _, g| {
            let s = sigmoid(x);
            g * s * (T::one() + x * (T::one() - s))
        }),
        Op::Sigmoid => map1(&|_, y, g| g * y * (T::one() - y)),
        Op::Softplus => map1(&|x, _, g| g * sigmoid(x)),
        Op::Exp => map1(&|_, y, g| g * y),
        Op::Cos => map1(&|x, _, g| -g * x.sin()),
        Op::Sin => map1(&|x, _, g| g * x.cos()),
        Op::Abs => map1(&|x, _, g| {
            if x > T::zero() {
                g
            } else if x < T::zero() {
                -g
            } else {
                T::zero()
            }
        }),
        Op::Pow { exponent } => {
            let p = T::of(*exponent);
            map1(&|x, _, g| {
                if x == T::zero() && p > T::one() {
                    T::zero()
                } else {
                    g * p * x.powf(p - T::one())
                }
            })
        }
        Op::Affine { scale, .. } => {
            let s = T::of(*scale);
            map1(&|_, _, g| g * s)
        }
        Op::Atan2 => {
            let (y, xx) = (inputs[0], inputs[1]);
            let mut gy = Vec::with_capacity(y.numel());
            let mut gx = Vec::with_capacity(y.numel());
            for ((&yv, &xv), &gv) in y.data().iter().zip(xx.data()).zip(g.data()) {
                let r2 = xv * xv + yv * yv;
                if r2 == T::zero() {
                    gy.push(T::zero());
                    gx.push(T::zero());
                } else {
                    gy.push(gv * xv / r2);
                    gx.push(-gv * yv / r2);
                }
            }
            vec![
                need[0].then(|| Tensor::new(y.shape().to_vec(), gy).unwrap()),
                need[1].then(|| Tensor::new(xx.shape().to_vec(), gx).unwrap()),
            ]
        }
        Op::Add => binary_backward(inputs[0], inputs[1], g, need, |g, _, _| g, |g, _, _| g),
        Op::Sub => binary_backward(inputs[0], inputs[1], g, need, |g, _, _| g, |g, _, _| -g),
        Op::Mul => binary_backward(
            inputs[0],
            inputs[1],
            g,
            need,
            |g, _, b| g * b,
            |g, a, _| g * a,
        ),
        Op::Concat { axis } => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, x) in inputs.iter().enumerate() {
                let n = x.dim(*axis);
                grads.push(if need[i] {
                    Some(slice(g, *axis, start, start + n)?)
                } else {
                    None
                });
                start += n;
            }
            grads
        }
        Op::Flip { axis } => vec![Some(flip(g, *axis)?)],
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, n, inner) = outer_inner(x.shape(), *axis);
            let mut gx = vec![T::zero(); x.numel()];
            let w = (end - start) * inner;
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                gx[dst..dst + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            vec![Some(Tensor::new(x.shape().to_vec(), gx)?)]
        }
        Op::Reshape { .. } => vec![Some(g.clone().reshaped(inputs[0].shape().to_vec())?)],
        Op::Permute { perm } => vec![Some(permute(g, &inverse_perm(perm))?)],
        Op::Mean => {
            let x = inputs[0];
            let v = g.item() / T::of(x.numel().max(1) as f64);
            vec![Some(Tensor::full(x.shape().to_vec(), v))]
        }
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.item()))],
        Op::BatchedMatmul => batched_matmul_backward(inputs[0], inputs[1], g, need)?,
        Op::SelectiveScan { .. } => {
            scan::selective_scan_backward(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], g)?
                .into_iter()
                .zip(need)
                .map(|(t, &n)| if n { Some(t) } else { None })
                .collect()
        }
        Op::Istft { cfg, .. } => {
            let (gr, gi) = dsp::istft_parts_adjoint(g, inputs[0].dim(0), cfg)?;
            vec![need[0].then_some(gr), need[1].then_some(gi)]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn op_names_round_trip() {
        for &k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!(matches!(
            "fft3d".parse::<OpKind>(),
            Err(Error::UnsupportedOp(_))
        ));
    }

    #[test]
    fn prelu_quarter_slope() {
        let x = t(vec![1, 2], &[-2.0, 3.0]);
        let a = t(vec![1], &[0.25]);
        let y = forward(&Op::PRelu, &[&x, &a]).unwrap();
        assert_eq!(y.data(), &[-0.5, 3.0]);
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let data: Vec<f64> = (0..2 * 3 * 5)
            .map(|i| ((i * 37 % 11) as f64).sin() * 3.0 + i as f64)
            .collect();
        let x = t(vec![2, 3, 5], &data);
        let y = forward(
            &Op::InstanceNorm { eps: 1e-5 },
            &[&x, &Tensor::full(vec![2], 1.0), &Tensor::zeros(vec![2])],
        )
        .unwrap();
        for ch in y.data().chunks(15) {
            let mean: f64 = ch.iter().sum::<f64>() / 15.0;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rms_norm_gives_unit_mean_square_rows() {
        let x = t(vec![2, 4], &[1.0, -2.0, 3.0, 0.5, 1e4, 2e4, -3e4, 0.0]);
        let y = forward(
            &Op::RmsNorm { eps: 1e-5 },
            &[&x, &Tensor::full(vec![4], 1.0)],
        )
        .unwrap();
        for row in y.data().chunks(4) {
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((ms - 1.0).abs() < 1e-4, "{ms}");
        }
    }

    #[test]
    fn broadcast_mul_over_last_axis() {
        let x = t(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = t(vec![3], &[1.0, 0.0, -1.0]);
        let y = forward(&Op::Mul, &[&x, &s]).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, -3.0, 4.0, 0.0, -6.0]);
        let g = Tensor::full(vec![2, 3], 1.0);
        let grads = backward(&Op::Mul, &[&x, &s], &y, &g, &[true, true]).unwrap();
        assert_eq!(grads[1].as_ref().unwrap().data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn permute_matches_index_formula() {
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = t(vec![2, 3, 4], &data);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(y.data()[(a * 2 + b) * 3 + c], x.data()[(b * 3 + c) * 4 + a]);
                }
            }
        }
        assert_eq!(permute(&y, &inverse_perm(&[2, 0, 1])).unwrap(), x);
    }

    #[test]
    fn flip_is_involution_and_concat_slice_identity() {
        let data: Vec<f64> = (0..30).map(|i| (i as f64).cos()).collect();
        let x = t(vec![2, 5, 3], &data);
        for axis in 0..3 {
            assert_eq!(flip(&flip(&x, axis).unwrap(), axis).unwrap(), x);
        }
        let y = t(vec![2, 2, 3], &data[..12]);
        let c = concat(&[&x, &y], 1).unwrap();
        assert_eq!(slice(&c, 1, 0, 5).unwrap(), x);
        assert_eq!(slice(&c, 1, 5, 7).unwrap(), y);
    }

    #[test]
    fn angle_range_and_origin() {
        assert_eq!(angle(0.0f64, 0.0), 0.0);
        assert_eq!(angle(-0.0f64, -1.0), std::f64::consts::PI);
        assert!((angle(1.0f64, 0.0) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.3).sin()).collect();
        let x = t(vec![3, 4, 5], &data);
        let mut w = Tensor::<f64>::zeros(vec![3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let b = Tensor::zeros(vec![3]);
        let y = forward(&Op::Conv2d(Conv2dAttrs::default()), &[&x, &w, &b]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn wrong_arity_is_a_shape_error() {
        let x = Tensor::<f64>::zeros(vec![2]);
        assert!(forward(&Op::Add, &[&x]).is_err());
    }
}
