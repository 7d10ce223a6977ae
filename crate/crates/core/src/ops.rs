//! Forward kernels and their gradient rules.
//!
//! Every differentiable operation here comes as a pair: a forward function on plain
//! tensors and a backward function mapping the output gradient (plus whatever the
//! forward saved) to input gradients. [`crate::autodiff::Tape`] strings them together.
//!
//! Spatial operations read the last two axes as `H×W` and the one before as channels;
//! any leading axes are treated as a batch.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits a `[.., C, H, W]` shape into `(batch, C, H, W)`.
pub(crate) fn split_nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::dim(op, shape, &[0, 0, 0]));
    }
    let r = shape.len();
    let batch = shape[..r - 3].iter().product();
    Ok((batch, shape[r - 3], shape[r - 2], shape[r - 1]))
}

fn with_last(shape: &[usize], tail: &[usize]) -> Vec<usize> {
    let mut s = shape[..shape.len() - tail.len()].to_vec();
    s.extend_from_slice(tail);
    s
}

// ---------------------------------------------------------------- elementwise

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("add", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mul", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

/// Maps every output flat index of `expand(from -> to)` to its source flat index.
pub(crate) fn expand_index(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() != to.len() || from.iter().zip(to).any(|(&f, &t)| f != t && f != 1) {
        return Err(Error::dim("expand", from, to));
    }
    let rank = to.len();
    let mut src_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if from[d] == 1 { 0 } else { s };
        s *= from[d];
    }
    let numel: usize = to.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&src_strides).map(|(i, st)| i * st).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

/// Broadcasts size-1 axes of `x` up to `shape` (same rank).
pub fn expand(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let map = expand_index(x.shape(), shape)?;
    let data = map.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(shape, data)
}

pub(crate) fn expand_backward(map: &[usize], from: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(from);
    let d = dx.data_mut();
    for (&src, &g) in map.iter().zip(dy.data()) {
        d[src] += g;
    }
    dx
}

// ---------------------------------------------------------------- matmul

/// `c[m×p] += a[m×k] · b[k×p]`, row-major slices.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    gemm_strided(a, (k, 1), b, (p, 1), c, m, k, p);
}

/// `c[m×p] += a·b` where `a` and `b` are addressed through (row, column) strides,
/// so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    m: usize,
    k: usize,
    p: usize,
) {
    if m == 0 || p == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (p - 1) * csb);
    assert!(c.len() >= m * p);
    // SAFETY: the asserts above keep every addressed element inside the slices,
    // and `c` does not alias `a` or `b` (it is borrowed mutably).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            p,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

fn transpose_2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, p]) if k == k2 => Ok((1, *m, *k, *p)),
        ([ba, m, k], [bb, k2, p]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *p)),
        _ => Err(Error::dim("matmul", a, b)),
    }
}

/// Matrix product of `[M×K]·[K×P]`, or batched `[B×M×K]·[B×K×P]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, p) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; batch * m * p];
    for bi in 0..batch {
        gemm_acc(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * p..(bi + 1) * k * p],
            &mut out[bi * m * p..(bi + 1) * m * p],
            m,
            k,
            p,
        );
    }
    let shape = if a.rank() == 2 { vec![m, p] } else { vec![batch, m, p] };
    Tensor::new(&shape, out)
}

/// `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (batch, m, k, p) = matmul_dims(a.shape(), b.shape()).expect("checked in forward");
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    for bi in 0..batch {
        let av = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bv = &b.data()[bi * k * p..(bi + 1) * k * p];
        let dcv = &dc.data()[bi * m * p..(bi + 1) * m * p];
        gemm_strided(dcv, (p, 1), bv, (1, p), &mut da[bi * m * k..(bi + 1) * m * k], m, p, k);
        gemm_strided(av, (1, k), dcv, (p, 1), &mut db[bi * k * p..(bi + 1) * k * p], k, m, p);
    }
    (
        Tensor::new(a.shape(), da).unwrap(),
        Tensor::new(b.shape(), db).unwrap(),
    )
}

/// Swaps the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::dim("transpose", x.shape(), &[0, 0]));
    }
    let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
    let plane = rows * cols;
    let mut out = Vec::with_capacity(x.numel());
    for chunk in x.data().chunks(plane) {
        out.extend(transpose_2d(chunk, rows, cols));
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, out)
}

// ---------------------------------------------------------------- softmax

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Softmax along `axis`, with the per-slice maximum subtracted before exponentiation.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidInput(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let (outer, len, inner) = axis_geometry(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// `dx = y ⊙ (dy − Σ_axis dy⊙y)`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_geometry(y.shape(), axis);
    let (yv, gv) = (y.data(), dy.data());
    let mut dx = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: f64 = (0..len).map(|j| yv[at(j)] * gv[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = yv[at(j)] * (gv[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx).unwrap()
}

// ---------------------------------------------------------------- convolutions

/// Pointwise channel mixing: `[.., Cin, H, W]` with weight `[Cout, Cin]` and optional bias `[Cout]`.
pub fn conv1x1(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (batch, cin, h, w) = split_nchw(x.shape(), "conv1x1")?;
    let [cout, wcin] = weight.shape() else {
        return Err(Error::dim("conv1x1", x.shape(), weight.shape()));
    };
    if *wcin != cin {
        return Err(Error::dim("conv1x1", x.shape(), weight.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [*cout] {
            return Err(Error::dim("conv1x1 bias", weight.shape(), b.shape()));
        }
    }
    let cout = *cout;
    let hw = h * w;
    let mut out = vec![0.0; batch * cout * hw];
    for bi in 0..batch {
        let xin = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
        let o = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                o[co * hw..(co + 1) * hw].fill(bv);
            }
        }
        gemm_acc(weight.data(), xin, o, cout, cin, hw);
    }
    let shape = with_last(x.shape(), &[cout, h, w]);
    Tensor::new(&shape, out)
}

pub fn conv1x1_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (batch, cin, h, w) = split_nchw(x.shape(), "conv1x1").unwrap();
    let cout = weight.shape()[0];
    let hw = h * w;
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; cout];
    for bi in 0..batch {
        let xin = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
        let g = &dy.data()[bi * cout * hw..(bi + 1) * cout * hw];
        gemm_strided(weight.data(), (1, cin), g, (hw, 1), &mut dx[bi * cin * hw..(bi + 1) * cin * hw], cin, cout, hw);
        gemm_strided(g, (hw, 1), xin, (1, hw), &mut dw, cout, hw, cin);
        for (co, d) in db.iter_mut().enumerate() {
            *d += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(weight.shape(), dw).unwrap(),
        Tensor::new(&[cout], db).unwrap(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
}

/// Output positions `o` for which `o*stride + tap - padding` lands in `[0, len)`.
fn valid_range(len: usize, out_len: usize, tap: usize, g: Conv2dGeom) -> (usize, usize) {
    let lo = if tap >= g.padding {
        0
    } else {
        (g.padding - tap).div_ceil(g.stride)
    };
    let hi = if len + g.padding > tap {
        ((len - 1 + g.padding - tap) / g.stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv2d_dims(
    x: &[usize],
    weight: &[usize],
    g: Conv2dGeom,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (batch, cin, h, w) = split_nchw(x, "conv2d")?;
    let [cout, wcin, kh, kw] = weight else {
        return Err(Error::dim("conv2d", x, weight));
    };
    if *wcin != cin || kh != kw || *kh > 3 || g.stride == 0 {
        return Err(Error::dim("conv2d", x, weight));
    }
    let k = *kh;
    if h + 2 * g.padding < k || w + 2 * g.padding < k {
        return Err(Error::dim("conv2d", x, weight));
    }
    let oh = (h + 2 * g.padding - k) / g.stride + 1;
    let ow = (w + 2 * g.padding - k) / g.stride + 1;
    Ok((batch, cin, h, w, *cout, k, oh, ow))
}

/// Unfolds one `[Cin, H, W]` plane stack into `[Cin·k·k, oh·ow]` patch columns.
fn im2col(plane: &[f64], cin: usize, h: usize, w: usize, k: usize, oh: usize, ow: usize, g: Conv2dGeom) -> Vec<f64> {
    let mut col = vec![0.0; cin * k * k * oh * ow];
    for ci in 0..cin {
        let src = &plane[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(h, oh, ky, g);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(w, ow, kx, g);
                let row = &mut col[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate().take(xhi).skip(xlo) {
                        *d = src[iy * w + ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the planes, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f64], plane: &mut [f64], cin: usize, h: usize, w: usize, k: usize, oh: usize, ow: usize, g: Conv2dGeom) {
    for ci in 0..cin {
        let dst = &mut plane[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(h, oh, ky, g);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(w, ow, kx, g);
                let row = &col[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.padding;
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate().take(xhi).skip(xlo) {
                        dst[iy * w + ox * g.stride + kx - g.padding] += v;
                    }
                }
            }
        }
    }
}

/// Square-kernel 2D convolution (cross-correlation), kernel size ≤ 3, zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: Conv2dGeom) -> Result<Tensor> {
    let (batch, cin, h, w, cout, k, oh, ow) = conv2d_dims(x.shape(), weight.shape(), g)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim("conv2d bias", weight.shape(), b.shape()));
        }
    }
    let (ohw, ckk) = (oh * ow, cin * k * k);
    let mut out = vec![0.0; batch * cout * ohw];
    for bi in 0..batch {
        let col = im2col(&x.data()[bi * cin * h * w..(bi + 1) * cin * h * w], cin, h, w, k, oh, ow, g);
        let o = &mut out[bi * cout * ohw..(bi + 1) * cout * ohw];
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                o[co * ohw..(co + 1) * ohw].fill(bv);
            }
        }
        gemm_acc(weight.data(), &col, o, cout, ckk, ohw);
    }
    let shape = with_last(x.shape(), &[cout, oh, ow]);
    Tensor::new(&shape, out)
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    g: Conv2dGeom,
) -> (Tensor, Tensor, Tensor) {
    let (batch, cin, h, w, cout, k, oh, ow) =
        conv2d_dims(x.shape(), weight.shape(), g).expect("checked in forward");
    let (ohw, ckk, chw) = (oh * ow, cin * k * k, cin * h * w);
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; cout];
    let mut dcol = vec![0.0; ckk * ohw];
    for bi in 0..batch {
        let gy = &dy.data()[bi * cout * ohw..(bi + 1) * cout * ohw];
        for (co, d) in db.iter_mut().enumerate() {
            *d += gy[co * ohw..(co + 1) * ohw].iter().sum::<f64>();
        }
        let col = im2col(&x.data()[bi * chw..(bi + 1) * chw], cin, h, w, k, oh, ow, g);
        gemm_strided(gy, (ohw, 1), &col, (1, ohw), &mut dw, cout, ohw, ckk);
        dcol.fill(0.0);
        gemm_strided(weight.data(), (1, ckk), gy, (ohw, 1), &mut dcol, ckk, cout, ohw);
        col2im(&dcol, &mut dx[bi * chw..(bi + 1) * chw], cin, h, w, k, oh, ow, g);
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(weight.shape(), dw).unwrap(),
        Tensor::new(&[cout], db).unwrap(),
    )
}

// ---------------------------------------------------------------- pooling / resampling

/// Bin `i` of `out` bins over `len` inputs covers `floor(i·len/out) .. ceil((i+1)·len/out)`.
pub(crate) fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidSize("adaptive pool output must be ≥ 1".into()));
    }
    let (batch, c, h, w) = split_nchw(x.shape(), "adaptive_avg_pool")?;
    let mut out = vec![0.0; batch * c * out_h * out_w];
    for (pi, plane) in x.data().chunks(h * w).enumerate() {
        let o = &mut out[pi * out_h * out_w..(pi + 1) * out_h * out_w];
        for i in 0..out_h {
            let (r0, r1) = adaptive_bin(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1) = adaptive_bin(j, w, out_w);
                let mut s = 0.0;
                for r in r0..r1 {
                    s += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                o[i * out_w + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    debug_assert_eq!(batch * c, x.numel() / (h * w));
    let shape = with_last(x.shape(), &[out_h, out_w]);
    Tensor::new(&shape, out)
}

pub fn adaptive_avg_pool_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (out_h, out_w) = (dy.shape()[r - 2], dy.shape()[r - 1]);
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (pi, g) in dy.data().chunks(out_h * out_w).enumerate() {
        let plane = &mut d[pi * h * w..(pi + 1) * h * w];
        for i in 0..out_h {
            let (r0, r1) = adaptive_bin(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1) = adaptive_bin(j, w, out_w);
                let share = g[i * out_w + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for rr in r0..r1 {
                    for v in &mut plane[rr * w + c0..rr * w + c1] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one output coordinate under half-pixel-centre mapping with edge clamping.
fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Bilinear resize of the last two axes to `out_h × out_w`.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidSize("upsample output must be ≥ 1".into()));
    }
    let (_, _, h, w) = split_nchw(x.shape(), "upsample_bilinear")?;
    let rows: Vec<_> = (0..out_h).map(|i| bilinear_taps(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| bilinear_taps(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(x.numel() / (h * w) * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                let top = plane[r0 * w + c0] * (1.0 - fx) + plane[r0 * w + c1] * fx;
                let bot = plane[r1 * w + c0] * (1.0 - fx) + plane[r1 * w + c1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let shape = with_last(x.shape(), &[out_h, out_w]);
    Tensor::new(&shape, out)
}

pub fn upsample_bilinear_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (out_h, out_w) = (dy.shape()[r - 2], dy.shape()[r - 1]);
    let rows: Vec<_> = (0..out_h).map(|i| bilinear_taps(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| bilinear_taps(j, w, out_w)).collect();
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (pi, g) in dy.data().chunks(out_h * out_w).enumerate() {
        let plane = &mut d[pi * h * w..(pi + 1) * h * w];
        for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
                let gv = g[i * out_w + j];
                plane[r0 * w + c0] += gv * (1.0 - fy) * (1.0 - fx);
                plane[r0 * w + c1] += gv * (1.0 - fy) * fx;
                plane[r1 * w + c0] += gv * fy * (1.0 - fx);
                plane[r1 * w + c1] += gv * fy * fx;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- shape plumbing

/// Concatenates along `axis`; all other axes must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::InvalidInput(format!("concat axis {axis} out of range")));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::dim("concat", first.shape(), p.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

pub fn concat_backward(shapes: &[Vec<usize>], axis: usize, dy: &Tensor) -> Vec<Tensor> {
    let outer: usize = dy.shape()[..axis].iter().product();
    let inner: usize = dy.shape()[axis + 1..].iter().product();
    let mut grads: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (s, g) in shapes.iter().zip(grads.iter_mut()) {
            let chunk = s[axis] * inner;
            g.extend_from_slice(&dy.data()[pos..pos + chunk]);
            pos += chunk;
        }
    }
    shapes
        .iter()
        .zip(grads)
        .map(|(s, g)| Tensor::new(s, g).unwrap())
        .collect()
}

// ---------------------------------------------------------------- normalization

/// Per-row normalisation over the last axis followed by a shared scalar affine map.
///
/// Returns the output and the saved `(x̂, 1/σ)` needed by the backward pass.
pub fn normalize_last(
    x: &Tensor,
    gamma: f64,
    beta: f64,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let n = *x.shape().last().unwrap();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "normalization needs at least 2 entries, got {n}"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(x.numel() / n);
    for row in x.data().chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        xhat.extend(row.iter().map(|v| (v - mean) * is));
    }
    let xhat = Tensor::new(x.shape(), xhat)?;
    let y = xhat.map(|v| gamma * v + beta);
    Ok((y, xhat, inv_std))
}

/// Returns `(dx, dγ, dβ)`.
pub fn normalize_last_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: f64,
    dy: &Tensor,
) -> (Tensor, f64, f64) {
    let n = *xhat.shape().last().unwrap();
    let nf = n as f64;
    let mut dx = Vec::with_capacity(xhat.numel());
    let (mut dgamma, mut dbeta) = (0.0, 0.0);
    for ((xh, g), &is) in xhat.data().chunks(n).zip(dy.data().chunks(n)).zip(inv_std) {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (&a, &b) in xh.iter().zip(g) {
            dgamma += b * a;
            dbeta += b;
            sum_g += b * gamma;
            sum_gx += b * gamma * a;
        }
        for (&a, &b) in xh.iter().zip(g) {
            dx.push(is / nf * (nf * b * gamma - sum_g - a * sum_gx));
        }
    }
    (Tensor::new(xhat.shape(), dx).unwrap(), dgamma, dbeta)
}

// ---------------------------------------------------------------- projections and losses

/// Per-channel inner product of each `H×W` map with its own filter: `[.., C, H, W] → [.., C]`.
///
/// `filters` holds one `H·W` map per channel, row-major.
pub fn channel_project(x: &Tensor, filters: &[f64]) -> Result<Tensor> {
    let (_, c, h, w) = split_nchw(x.shape(), "channel_project")?;
    if filters.len() != c * h * w {
        return Err(Error::dim("channel_project", x.shape(), &[filters.len()]));
    }
    let hw = h * w;
    let out = x
        .data()
        .chunks(hw)
        .enumerate()
        .map(|(i, plane)| {
            let f = &filters[(i % c) * hw..(i % c + 1) * hw];
            plane.iter().zip(f).map(|(a, b)| a * b).sum()
        })
        .collect();
    let shape = x.shape()[..x.rank() - 2].to_vec();
    Tensor::new(&shape, out)
}

pub fn channel_project_backward(in_shape: &[usize], filters: &[f64], dy: &Tensor) -> Tensor {
    let r = in_shape.len();
    let (c, hw) = (in_shape[r - 3], in_shape[r - 2] * in_shape[r - 1]);
    let mut dx = Vec::with_capacity(in_shape.iter().product());
    for (i, &g) in dy.data().iter().enumerate() {
        let f = &filters[(i % c) * hw..(i % c + 1) * hw];
        dx.extend(f.iter().map(|v| g * v));
    }
    Tensor::new(in_shape, dx).unwrap()
}

/// Per-pixel cross-entropy of `[K, H, W]` logits, weighted per pixel and summed.
///
/// Pixels with weight 0 are skipped entirely, so their labels may be out of range.
/// Returns the loss and the per-pixel softmax needed for the gradient.
pub fn weighted_nll(logits: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(f64, Tensor)> {
    let (k, p) = class_pixel_dims(logits)?;
    if labels.len() != p || weights.len() != p {
        return Err(Error::dim("weighted_nll", logits.shape(), &[labels.len()]));
    }
    let x = logits.data();
    let mut probs = vec![0.0; k * p];
    // Neumaier-compensated sum: the loss feeds finite-difference checks, whose
    // resolution is limited by the rounding error of this reduction.
    let (mut loss, mut comp) = (0.0f64, 0.0f64);
    for px in 0..p {
        let max = (0..k).map(|c| x[c * p + px]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (x[c * p + px] - max).exp()).sum();
        for c in 0..k {
            probs[c * p + px] = (x[c * p + px] - max).exp() / z;
        }
        if weights[px] != 0.0 {
            let l = labels[px];
            if l >= k {
                return Err(Error::InvalidInput(format!("label {l} out of range for {k} classes")));
            }
            let term = weights[px] * (z.ln() + max - x[l * p + px]);
            let t = loss + term;
            comp += if loss.abs() >= term.abs() { (loss - t) + term } else { (term - t) + loss };
            loss = t;
        }
    }
    Ok((loss + comp, Tensor::new(logits.shape(), probs)?))
}

pub fn weighted_nll_backward(probs: &Tensor, labels: &[usize], weights: &[f64], g: f64) -> Tensor {
    let (k, p) = class_pixel_dims(probs).unwrap();
    let mut dx = vec![0.0; k * p];
    for px in 0..p {
        let wgt = weights[px];
        if wgt == 0.0 {
            continue;
        }
        for c in 0..k {
            let onehot = if c == labels[px] { 1.0 } else { 0.0 };
            dx[c * p + px] = g * wgt * (probs.data()[c * p + px] - onehot);
        }
    }
    Tensor::new(probs.shape(), dx).unwrap()
}

fn class_pixel_dims(t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() < 2 {
        return Err(Error::dim("cross-entropy", t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.numel() / t.shape()[0]))
}
