//! Forward and backward kernels. Every function here is a pure function of its
//! inputs; the [`Graph`](super::Graph) wires them together.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `c[p×r] += a[p×q] · b[q×r]`
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            axpy(crow, aik, &b[k * r..(k + 1) * r]);
        }
    }
}

/// `c[p×r] += a[p×q] · b[r×q]ᵀ`
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let crow = &mut c[i * r..(i + 1) * r];
        for (j, cj) in crow.iter_mut().enumerate() {
            *cj += dot(arow, &b[j * q..(j + 1) * q]);
        }
    }
}

/// `c[m×n] += x[p×m]ᵀ · y[p×n]`
fn gemm_tn<T: Scalar>(x: &[T], y: &[T], c: &mut [T], p: usize, m: usize, n: usize) {
    for i in 0..p {
        let xrow = &x[i * m..(i + 1) * m];
        let yrow = &y[i * n..(i + 1) * n];
        for (k, &xik) in xrow.iter().enumerate() {
            axpy(&mut c[k * n..(k + 1) * n], xik, yrow);
        }
    }
}

/// Resolved geometry of a (possibly batched) matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulDims {
    pub batch: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

impl MatmulDims {
    pub fn macs(&self) -> u64 {
        (self.batch * self.p * self.q * self.r) as u64
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched || self.b_batched {
            vec![self.batch, self.p, self.r]
        } else {
            vec![self.p, self.r]
        }
    }
}

/// Validates `a · b` (or `a · bᵀ` when `trans_b`). `a` may carry one leading
/// batch axis; `b` is either shared across the batch or batched identically.
pub fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    let err = || Error::shape("matmul", a, b);
    let (batch_a, p, qa) = match *a {
        [p, q] => (None, p, q),
        [bt, p, q] => (Some(bt), p, q),
        _ => return Err(err()),
    };
    let (batch_b, qb, r) = match (b, trans_b) {
        (&[q, r], false) => (None, q, r),
        (&[r, q], true) => (None, q, r),
        (&[bt, q, r], false) => (Some(bt), q, r),
        (&[bt, r, q], true) => (Some(bt), q, r),
        _ => return Err(err()),
    };
    if qa != qb {
        return Err(err());
    }
    let batch = match (batch_a, batch_b) {
        (None, None) => 1,
        (Some(x), None) => x,
        (Some(x), Some(y)) if x == y => x,
        _ => return Err(err()),
    };
    Ok(MatmulDims {
        batch,
        p,
        q: qa,
        r,
        a_batched: batch_a.is_some(),
        b_batched: batch_b.is_some(),
    })
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, false)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, true)
}

fn matmul_ex<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let (sa, sb, sc) = (d.p * d.q, d.q * d.r, d.p * d.r);
    let mut out = vec![T::zero(); d.batch * sc];
    for bi in 0..d.batch {
        let a_off = if d.a_batched { bi * sa } else { 0 };
        let b_off = if d.b_batched { bi * sb } else { 0 };
        let asl = &a.data()[a_off..a_off + sa];
        let bsl = &b.data()[b_off..b_off + sb];
        let csl = &mut out[bi * sc..(bi + 1) * sc];
        if trans_b {
            gemm_nt(asl, bsl, csl, d.p, d.q, d.r);
        } else {
            gemm_nn(asl, bsl, csl, d.p, d.q, d.r);
        }
    }
    Ok(Tensor::from_parts(d.out_shape(), out))
}

/// Gradients of a matrix product given the upstream gradient `dc`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &[T],
    trans_b: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let (sa, sb, sc) = (d.p * d.q, d.q * d.r, d.p * d.r);
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    for bi in 0..d.batch {
        let a_off = if d.a_batched { bi * sa } else { 0 };
        let b_off = if d.b_batched { bi * sb } else { 0 };
        let asl = &a.data()[a_off..a_off + sa];
        let bsl = &b.data()[b_off..b_off + sb];
        let dcs = &dc[bi * sc..(bi + 1) * sc];
        if trans_b {
            // c = a bᵀ, b: r×q
            gemm_nn(dcs, bsl, &mut da[a_off..a_off + sa], d.p, d.r, d.q);
            gemm_tn(dcs, asl, &mut db[b_off..b_off + sb], d.p, d.r, d.q);
        } else {
            gemm_nt(dcs, bsl, &mut da[a_off..a_off + sa], d.p, d.r, d.q);
            gemm_tn(asl, dcs, &mut db[b_off..b_off + sb], d.p, d.q, d.r);
        }
    }
    Ok((da, db))
}

/// Row-wise softmax over the last axis, with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let cols = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &[T]) -> Vec<T> {
    let cols = y.last_dim();
    let mut dx = vec![T::zero(); y.numel()];
    for ((yr, dyr), dxr) in y
        .data()
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let s = dot(yr, dyr);
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - s);
        }
    }
    dx
}

/// Per-row statistics retained by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let inv_d = T::lit(1.0 / d as f64);
    let eps = T::lit(eps);
    let rows = x.rows();
    let mut out = vec![T::zero(); x.numel()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for (xr, or) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        for (((o, &v), &g), &b) in or.iter_mut().zip(xr).zip(gamma.data()).zip(beta.data()) {
            *o = (v - mean) * rstd * g + b;
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = x.last_dim();
    let inv_d = T::lit(1.0 / d as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, ((xr, dyr), dxr)) in x
        .data()
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dyr[j] * gamma.data()[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
        }
        let m1 = sum_dxhat * inv_d;
        let m2 = sum_dxhat_xhat * inv_d;
        for j in 0..d {
            dxr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact-erf GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(dy)
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect()
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let err = || Error::shape("conv2d", x, w);
        let (&[cin, height, width], &[cout, cin_g, kh, kw]) = (x, w) else {
            return Err(err());
        };
        if kh != kw || stride == 0 || groups == 0 {
            return Err(err());
        }
        if cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(err());
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(err());
        }
        Ok(Self {
            cin,
            cout,
            height,
            width,
            kernel: kh,
            stride,
            padding,
            groups,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        (input + 2 * padding - kernel) / stride + 1
    }

    pub fn macs(&self) -> u64 {
        (self.kernel * self.kernel * (self.cin / self.groups) * self.cout * self.out_h * self.out_w)
            as u64
    }

    /// Output column range `[lo, hi)` whose input column `ox*stride + k - padding`
    /// lies inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if extent + p > k {
            ((extent - 1 + p - k) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

impl ConvGeometry {
    /// Unfolds `x` into `[Cin·k·k, out_h·out_w]` columns (dense convolutions only).
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane_out = self.out_h * self.out_w;
        let plane_in = self.height * self.width;
        let mut cols = vec![T::zero(); self.cin * k * k * plane_out];
        for ci in 0..self.cin {
            let ip = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.height, self.out_h);
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.width, self.out_w);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let irow = &ip[iy * self.width..(iy + 1) * self.width];
                        let drow = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in ox_lo..ox_hi {
                            drow[ox] = irow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back onto `dx`.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane_out = self.out_h * self.out_w;
        let plane_in = self.height * self.width;
        for ci in 0..self.cin {
            let dp = &mut dx[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.height, self.out_h);
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane_out..(row + 1) * plane_out];
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.width, self.out_w);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let drow = &mut dp[iy * self.width..(iy + 1) * self.width];
                        let srow = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in ox_lo..ox_hi {
                            drow[ox * s + kx - p] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [Cin, H, W]` with `w: [Cout, Cin/groups, k, k]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::shape("conv2d bias", w.shape(), b.shape()));
        }
    }
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.height * g.width;
    let mut out = vec![T::zero(); g.cout * plane_out];
    if g.groups == 1 {
        let cols = g.im2col(x.data());
        if let Some(b) = bias {
            for (op, &bv) in out.chunks_exact_mut(plane_out).zip(b.data()) {
                op.fill(bv);
            }
        }
        gemm_nn(w.data(), &cols, &mut out, g.cout, g.cin * k * k, plane_out);
        return Ok(Tensor::from_parts(vec![g.cout, g.out_h, g.out_w], out));
    }
    for co in 0..g.cout {
        let op = &mut out[co * plane_out..(co + 1) * plane_out];
        if let Some(b) = bias {
            op.fill(b.data()[co]);
        }
        let ci0 = (co / cout_g) * cin_g;
        for cig in 0..cin_g {
            let ip = &x.data()[(ci0 + cig) * plane_in..(ci0 + cig + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.height, g.out_h);
                for kx in 0..k {
                    let wv = w.data()[((co * cin_g + cig) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.width, g.out_w);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let irow = &ip[iy * g.width..(iy + 1) * g.width];
                        let orow = &mut op[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox_lo..ox_hi {
                            orow[ox] += wv * irow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.cout, g.out_h, g.out_w], out))
}

/// Returns `(dx, dw, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding, groups)?;
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.height * g.width;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); g.cout];
    if g.groups == 1 {
        let kk = g.cin * k * k;
        for (d, gp) in db.iter_mut().zip(dy.chunks_exact(plane_out)) {
            *d = gp.iter().copied().sum();
        }
        let cols = g.im2col(x.data());
        gemm_nt(dy, &cols, &mut dw, g.cout, plane_out, kk);
        let mut dcols = vec![T::zero(); kk * plane_out];
        gemm_tn(w.data(), dy, &mut dcols, g.cout, kk, plane_out);
        g.col2im(&dcols, &mut dx);
        return Ok((dx, dw, db));
    }
    for co in 0..g.cout {
        let gp = &dy[co * plane_out..(co + 1) * plane_out];
        db[co] = gp.iter().copied().sum();
        let ci0 = (co / cout_g) * cin_g;
        for cig in 0..cin_g {
            let ci = ci0 + cig;
            let ip = &x.data()[ci * plane_in..(ci + 1) * plane_in];
            let dxp = &mut dx[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.height, g.out_h);
                for kx in 0..k {
                    let widx = ((co * cin_g + cig) * k + ky) * k + kx;
                    let wv = w.data()[widx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.width, g.out_w);
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let grow = &gp[oy * g.out_w..(oy + 1) * g.out_w];
                        let irow = &ip[iy * g.width..(iy + 1) * g.width];
                        let dxrow = &mut dxp[iy * g.width..(iy + 1) * g.width];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - p;
                            acc += grow[ox] * irow[ix];
                            dxrow[ix] += wv * grow[ox];
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Column means of an `[N, D]` tensor.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(Error::shape("global_avg_pool", x.shape(), &[]));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![T::zero(); d];
    for row in x.data().chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = T::lit(1.0 / n as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(vec![d], out))
}

pub fn transpose2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[r, c] = x.shape() else {
        return Err(Error::shape("transpose2d", x.shape(), &[]));
    };
    Ok(Tensor::from_parts(vec![c, r], transpose_buf(x.data(), r, c)))
}

pub(crate) fn transpose_buf<T: Scalar>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `[N, H·dh]` → `[H, N, dh]`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let &[n, c] = x.shape() else {
        return Err(Error::shape("split_heads", x.shape(), &[heads]));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels cannot split into {heads} heads")));
    }
    let dh = c / heads;
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        for h in 0..heads {
            out[(h * n + i) * dh..(h * n + i + 1) * dh]
                .copy_from_slice(&x.data()[i * c + h * dh..i * c + (h + 1) * dh]);
        }
    }
    Ok(Tensor::from_parts(vec![heads, n, dh], out))
}

/// `[H, N, dh]` → `[N, H·dh]`.
pub fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[heads, n, dh] = x.shape() else {
        return Err(Error::shape("merge_heads", x.shape(), &[]));
    };
    let c = heads * dh;
    let mut out = vec![T::zero(); n * c];
    for h in 0..heads {
        for i in 0..n {
            out[i * c + h * dh..i * c + (h + 1) * dh]
                .copy_from_slice(&x.data()[(h * n + i) * dh..(h * n + i + 1) * dh]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

/// Cross-entropy of a logit vector against a target distribution.
/// Returns `(loss, probabilities)`; the logit gradient is `probs − target`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, target: &[T]) -> Result<(T, Vec<T>)> {
    if logits.numel() != target.len() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[target.len()]));
    }
    let z = logits.data();
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    let loss = target
        .iter()
        .zip(z)
        .map(|(&q, &v)| q * (lse - v))
        .sum::<T>();
    let probs = z.iter().map(|&v| (v - lse).exp()).collect();
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_known_product() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_zero_left_operand() {
        let z = Tensor::<f64>::zeros(&[3, 4]);
        let b = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rand::thread_rng());
        let c = matmul(&z, &b).unwrap();
        assert_eq!(c.shape(), &[3, 5]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        let a = t(&[2, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[1., 1.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3., 7.]);
        assert_eq!(matmul(&a, &b).unwrap().shape(), &[2, 1, 1]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = rand::thread_rng();
        let a = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let bt = transpose2d(&b).unwrap();
        let d = matmul_nt(&a, &b).unwrap().max_abs_diff(&matmul(&a, &bt).unwrap());
        assert!(d.unwrap() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let x = t(&[3, 2], &[0., 3f64.ln(), 5., 5. + 3f64.ln(), 0., 0.]);
        let y = softmax_rows(&x);
        for (got, want) in y.data().iter().zip([0.25, 0.75, 0.25, 0.75, 0.5, 0.5]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let y = softmax_rows(&t(&[1, 4], &[0.; 4]));
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let y = softmax_rows(&Tensor::<f32>::from_vec(&[1, 3], vec![1e4, 0.0, -1e4]).unwrap());
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::<f64>::ones(&[3]);
        let b = Tensor::<f64>::zeros(&[3]);
        let (y, _) = layer_norm(&t(&[1, 3], &[1., 2., 3.]), &g, &b, LAYER_NORM_EPS).unwrap();
        // (x - 2) / sqrt(2/3 + 1e-5)
        let s = (2.0f64 / 3.0 + 1e-5).sqrt();
        for (got, want) in y.data().iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(y.data()[0], -1.22474, epsilon = 1e-4);

        let (y, _) = layer_norm(&t(&[1, 3], &[7., 7., 7.]), &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let beta = t(&[3], &[0.5, -1., 2.]);
        let (y, _) = layer_norm(
            &Tensor::randn(&[4, 3], 1.0, &mut rand::thread_rng()),
            &Tensor::zeros(&[3]),
            &beta,
            LAYER_NORM_EPS,
        )
        .unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, beta.data());
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f32) - 10.0).abs() < 1e-4);
        assert!(gelu_scalar(-10.0f32).abs() < 1e-4);
        // Φ(1) = 0.841344746...
        assert_abs_diff_eq!(gelu_scalar(1.0f64), 0.841_344_746_068_542_9, epsilon = 1e-12);
    }

    #[test]
    fn conv_identity_1x1() {
        let x = Tensor::<f64>::randn(&[1, 5, 4], 1.0, &mut rand::thread_rng());
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1, 0, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_counts_window_overlap() {
        let x = Tensor::<f64>::ones(&[1, 5, 5]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(y.at(&[0, 2, 2]), 9.0);
        assert_eq!(y.at(&[0, 0, 2]), 6.0);
        assert_eq!(y.at(&[0, 2, 4]), 6.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 4, 4]), 4.0);
    }

    #[test]
    fn conv_output_geometry() {
        assert_eq!(ConvGeometry::out_size(224, 3, 2, 1), 112);
        let g = ConvGeometry::new(&[3, 224, 224], &[8, 3, 3, 3], 2, 1, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (112, 112));
        let g = ConvGeometry::new(&[4, 7, 7], &[4, 1, 3, 3], 2, 1, 4).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
    }

    #[test]
    fn conv_rejects_bad_groups_and_oversized_kernels() {
        assert!(ConvGeometry::new(&[3, 8, 8], &[4, 1, 3, 3], 1, 1, 3).is_err());
        assert!(ConvGeometry::new(&[4, 8, 8], &[6, 2, 3, 3], 1, 1, 3).is_err());
        assert!(ConvGeometry::new(&[1, 1, 1], &[1, 1, 3, 3], 1, 0, 1).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = t(&[2, 2], &[1., 3., 3., 1.]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2., 2.]);
        let c = Tensor::<f64>::full(&[7, 3], 2.5);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[2.5; 3]);
    }

    #[test]
    fn heads_round_trip() {
        let x = Tensor::<f64>::randn(&[5, 12], 1.0, &mut rand::thread_rng());
        let h = split_heads(&x, 3).unwrap();
        assert_eq!(h.shape(), &[3, 5, 4]);
        assert_eq!(h.at(&[1, 2, 3]), x.at(&[2, 7]));
        assert_eq!(merge_heads(&h).unwrap(), x);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_target() {
        let z = t(&[3], &[0.5, -1.0, 2.0]);
        let (loss, p) = cross_entropy(&z, &[0.0, 0.0, 1.0]).unwrap();
        let lse = (0.5f64.exp() + (-1.0f64).exp() + 2.0f64.exp()).ln();
        assert_abs_diff_eq!(loss, lse - 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
