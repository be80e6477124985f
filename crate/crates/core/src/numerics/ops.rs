//! Differentiable primitives.
//!
//! Each function computes its forward value eagerly, records it on the
//! inputs' tape, and registers a hand-written reverse rule. Shapes are
//! row-major; the only broadcasting is the bias add inside [`linear`] and
//! [`depthwise_conv1d`].

use super::array::Array;
use super::scalar::{gemm, Scalar};
use super::tape::{BackwardCtx, BackwardOp, Var};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

// ---------------------------------------------------------------- linear

struct LinearBack {
    has_bias: bool,
}

impl<T: Scalar> BackwardOp<T> for LinearBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let x = ctx.input(0);
        let w = ctx.input(1);
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let m = x.len() / din.max(1);
        let dx = ctx.needs_grad(0).then(|| {
            let mut dx = Array::zeros(x.shape());
            gemm(false, true, m, dout, din, T::one(), g.data(), w.data(), T::zero(), dx.data_mut());
            dx
        });
        let dw = ctx.needs_grad(1).then(|| {
            let mut dw = Array::zeros(w.shape());
            gemm(true, false, din, m, dout, T::one(), x.data(), g.data(), T::zero(), dw.data_mut());
            dw
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(ctx.needs_grad(2).then(|| column_sums(g.data(), m, dout)));
        }
        out
    }
}

fn column_sums<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Array<T> {
    let mut acc = vec![T::zero(); cols];
    for r in 0..rows {
        for (a, &v) in acc.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *a += v;
        }
    }
    Array::from_parts(vec![cols], acc)
}

/// `y = x W + b` over the last axis of `x`.
pub fn linear<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let value = {
        let xv = x.value();
        let wv = w.value();
        if wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.shape()[0] {
            return Err(shape_err(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        let m = xv.leading();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut y = Array::zeros(&shape);
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [dout] {
                return Err(shape_err(format!(
                    "linear: bias {:?} does not match output width {dout} (weight {:?})",
                    bv.shape(),
                    wv.shape()
                )));
            }
            for r in 0..m {
                y.data_mut()[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
            gemm(false, false, m, din, dout, T::one(), xv.data(), wv.data(), T::one(), y.data_mut());
        } else {
            gemm(false, false, m, din, dout, T::one(), xv.data(), wv.data(), T::zero(), y.data_mut());
        }
        y
    };
    let mut inputs = vec![x, w];
    inputs.extend(b);
    x.tape()
        .record("linear", value, &inputs, Box::new(LinearBack { has_bias: b.is_some() }))
}

// ---------------------------------------------------------------- matmul

struct MatmulBack;

impl<T: Scalar> BackwardOp<T> for MatmulBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let a = ctx.input(0);
        let b = ctx.input(1);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let da = ctx.needs_grad(0).then(|| {
            let mut da = Array::zeros(a.shape());
            gemm(false, true, m, n, k, T::one(), g.data(), b.data(), T::zero(), da.data_mut());
            da
        });
        let db = ctx.needs_grad(1).then(|| {
            let mut db = Array::zeros(b.shape());
            gemm(true, false, k, m, n, T::one(), a.data(), g.data(), T::zero(), db.data_mut());
            db
        });
        vec![da, db]
    }
}

/// 2-D matrix product `a[m,k] · b[k,n]`.
pub fn matmul<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let value = {
        let av = a.value();
        let bv = b.value();
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut y = Array::zeros(&[m, n]);
        gemm(false, false, m, k, n, T::one(), av.data(), bv.data(), T::zero(), y.data_mut());
        y
    };
    a.tape().record("matmul", value, &[a, b], Box::new(MatmulBack))
}

struct TransposeBack;

impl<T: Scalar> BackwardOp<T> for TransposeBack {
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        vec![Some(transpose_array(g))]
    }
}

fn transpose_array<T: Scalar>(a: &Array<T>) -> Array<T> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Array::from_parts(vec![c, r], out)
}

pub fn transpose<'t, T: Scalar>(a: Var<'t, T>) -> Result<Var<'t, T>> {
    let value = {
        let av = a.value();
        if av.rank() != 2 {
            return Err(shape_err(format!("transpose: expected 2-D, got {:?}", av.shape())));
        }
        transpose_array(&av)
    };
    a.tape().record("transpose", value, &[a], Box::new(TransposeBack))
}

// ----------------------------------------------------------- elementwise

fn same_shape<T: Scalar>(op: &str, a: &Array<T>, b: &Array<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

struct AddBack {
    sign_b: f64,
}

impl<T: Scalar> BackwardOp<T> for AddBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let s = T::from_f64(self.sign_b);
        vec![
            ctx.needs_grad(0).then(|| g.clone()),
            ctx.needs_grad(1).then(|| if self.sign_b == 1.0 { g.clone() } else { g.map(|v| v * s) }),
        ]
    }
}

pub fn add<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let value = {
        let (av, bv) = (a.value(), b.value());
        same_shape("add", &av, &bv)?;
        av.zip_map(&bv, |x, y| x + y)
    };
    a.tape().record("add", value, &[a, b], Box::new(AddBack { sign_b: 1.0 }))
}

pub fn sub<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let value = {
        let (av, bv) = (a.value(), b.value());
        same_shape("sub", &av, &bv)?;
        av.zip_map(&bv, |x, y| x - y)
    };
    a.tape().record("sub", value, &[a, b], Box::new(AddBack { sign_b: -1.0 }))
}

struct MulBack;

impl<T: Scalar> BackwardOp<T> for MulBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        vec![
            ctx.needs_grad(0).then(|| g.zip_map(ctx.input(1), |g, b| g * b)),
            ctx.needs_grad(1).then(|| g.zip_map(ctx.input(0), |g, a| g * a)),
        ]
    }
}

/// Elementwise (Hadamard) product.
pub fn mul<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let value = {
        let (av, bv) = (a.value(), b.value());
        same_shape("mul", &av, &bv)?;
        av.zip_map(&bv, |x, y| x * y)
    };
    a.tape().record("mul", value, &[a, b], Box::new(MulBack))
}

struct ScaleBack(f64);

impl<T: Scalar> BackwardOp<T> for ScaleBack {
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let s = T::from_f64(self.0);
        vec![Some(g.map(|v| v * s))]
    }
}

/// Multiplies by a constant.
pub fn scale<'t, T: Scalar>(a: Var<'t, T>, factor: f64) -> Result<Var<'t, T>> {
    let s = T::from_f64(factor);
    let value = a.value().map(|v| v * s);
    a.tape().record("scale", value, &[a], Box::new(ScaleBack(factor)))
}

// ------------------------------------------------------------ activation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Softplus,
    Sigmoid,
    Exp,
    /// Softmax normalized over the last axis.
    Softmax,
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows<T: Scalar>(x: &Array<T>) -> Array<T> {
    let w = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

struct ActivationBack(Activation);

impl<T: Scalar> BackwardOp<T> for ActivationBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let x = ctx.input(0);
        let y = ctx.output();
        let dx = match self.0 {
            Activation::Silu => g.zip_map(x, |g, x| {
                let s = sigmoid(x);
                g * s * (T::one() + x * (T::one() - s))
            }),
            Activation::Softplus => g.zip_map(x, |g, x| g * sigmoid(x)),
            Activation::Sigmoid => g.zip_map(y, |g, y| g * y * (T::one() - y)),
            Activation::Exp => g.zip_map(y, |g, y| g * y),
            Activation::Softmax => {
                let w = y.last_dim();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - dot);
                    }
                }
                dx
            }
        };
        vec![Some(dx)]
    }
}

pub fn activation<'t, T: Scalar>(x: Var<'t, T>, kind: Activation) -> Result<Var<'t, T>> {
    let value = {
        let xv = x.value();
        match kind {
            Activation::Silu => xv.map(|v| v * sigmoid(v)),
            Activation::Softplus => xv.map(softplus),
            Activation::Sigmoid => xv.map(sigmoid),
            Activation::Exp => xv.map(|v| v.exp()),
            Activation::Softmax => {
                if xv.rank() == 0 || xv.last_dim() == 0 {
                    return Err(shape_err(format!("softmax over empty last axis: {:?}", xv.shape())));
                }
                softmax_rows(&xv)
            }
        }
    };
    x.tape().record("activation", value, &[x], Box::new(ActivationBack(kind)))
}

pub fn silu<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    activation(x, Activation::Silu)
}

// ------------------------------------------------------------ layer norm

struct LayerNormBack {
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

impl<T: Scalar> BackwardOp<T> for LayerNormBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let x = ctx.input(0);
        let gamma = ctx.input(1);
        let d = x.last_dim();
        let rows = x.leading();
        let mut dx = ctx.needs_grad(0).then(|| Array::zeros(x.shape()));
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        let mut dxhat = vec![T::zero(); d];
        let dn = T::from_f64(d as f64);
        for r in 0..rows {
            let mean = T::from_f64(self.mean[r]);
            let rstd = T::from_f64(self.rstd[r]);
            let xr = &x.data()[r * d..(r + 1) * d];
            let gr = &g.data()[r * d..(r + 1) * d];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for j in 0..d {
                xhat[j] = (xr[j] - mean) * rstd;
                dxhat[j] = gr[j] * gamma.data()[j];
                dgamma[j] += gr[j] * xhat[j];
                dbeta[j] += gr[j];
                sum_dxhat += dxhat[j];
                sum_dxhat_xhat += dxhat[j] * xhat[j];
            }
            if let Some(dx) = dx.as_mut() {
                let out = &mut dx.data_mut()[r * d..(r + 1) * d];
                for j in 0..d {
                    out[j] = rstd * (dxhat[j] - sum_dxhat / dn - xhat[j] * sum_dxhat_xhat / dn);
                }
            }
        }
        vec![
            dx,
            ctx.needs_grad(1).then(|| Array::from_parts(vec![d], dgamma)),
            ctx.needs_grad(2).then(|| Array::from_parts(vec![d], dbeta)),
        ]
    }
}

/// Normalizes each row over the last axis, then applies `gamma`/`beta`.
pub fn layer_norm<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let (value, back) = {
        let xv = x.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let d = xv.last_dim();
        if xv.rank() == 0 || d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err(format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.leading();
        let mut y = Array::zeros(xv.shape());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let dn = T::from_f64(d as f64);
        let eps_t = T::from_f64(eps);
        for r in 0..rows {
            let xr = &xv.data()[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps_t).sqrt();
            let yr = &mut y.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                yr[j] = (xr[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
            means.push(mean.as_f64());
            rstds.push(rstd.as_f64());
        }
        (y, LayerNormBack { mean: means, rstd: rstds })
    };
    x.tape()
        .record("layer_norm", value, &[x, gamma, beta], Box::new(back))
}

// ------------------------------------------------------------ convolution

struct ConvBack {
    has_bias: bool,
}

impl<T: Scalar> BackwardOp<T> for ConvBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let x = ctx.input(0);
        let ker = ctx.input(1);
        let (l, d) = (x.shape()[0], x.shape()[1]);
        let k = ker.shape()[0];
        let (xd, kd, gd) = (x.data(), ker.data(), g.data());
        let dx = ctx.needs_grad(0).then(|| {
            let mut dx = Array::zeros(x.shape());
            let out = dx.data_mut();
            for t in 0..l {
                for tap in 0..k {
                    // y[t] reads x[t - (k-1) + tap]
                    let Some(s) = (t + tap).checked_sub(k - 1) else { continue };
                    let (orow, grow, krow) = (&mut out[s * d..(s + 1) * d], &gd[t * d..(t + 1) * d], &kd[tap * d..(tap + 1) * d]);
                    for c in 0..d {
                        orow[c] += grow[c] * krow[c];
                    }
                }
            }
            dx
        });
        let dk = ctx.needs_grad(1).then(|| {
            let mut dk = Array::zeros(ker.shape());
            let out = dk.data_mut();
            for t in 0..l {
                for tap in 0..k {
                    let Some(s) = (t + tap).checked_sub(k - 1) else { continue };
                    let (orow, grow, xrow) = (&mut out[tap * d..(tap + 1) * d], &gd[t * d..(t + 1) * d], &xd[s * d..(s + 1) * d]);
                    for c in 0..d {
                        orow[c] += grow[c] * xrow[c];
                    }
                }
            }
            dk
        });
        let mut grads = vec![dx, dk];
        if self.has_bias {
            grads.push(ctx.needs_grad(2).then(|| column_sums(gd, l, d)));
        }
        grads
    }
}

/// Per-channel causal convolution of `x[L,D]` with `kernel[K,D]`.
///
/// Output row `t` reads input rows `t-K+1 ..= t` (zero padded on the left),
/// with tap `K-1` aligned to `t`.
pub fn depthwise_conv1d<'t, T: Scalar>(
    x: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let value = {
        let xv = x.value();
        let kv = kernel.value();
        if xv.rank() != 2 || kv.rank() != 2 || xv.shape()[1] != kv.shape()[1] {
            return Err(shape_err(format!(
                "depthwise_conv1d: input {:?}, kernel {:?}",
                xv.shape(),
                kv.shape()
            )));
        }
        let (l, d) = (xv.shape()[0], xv.shape()[1]);
        let k = kv.shape()[0];
        if l == 0 {
            return Err(NumericsError::Empty("depthwise_conv1d: zero-length sequence".into()));
        }
        if k == 0 {
            return Err(shape_err("depthwise_conv1d: kernel needs at least one tap".into()));
        }
        let mut y = Array::zeros(&[l, d]);
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [d] {
                return Err(shape_err(format!("depthwise_conv1d: bias {:?} for {d} channels", bv.shape())));
            }
            for row in y.data_mut().chunks_mut(d) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, kd) = (xv.data(), kv.data());
        let out = y.data_mut();
        for t in 0..l {
            for tap in 0..k {
                let Some(s) = (t + tap).checked_sub(k - 1) else { continue };
                let (orow, xrow, krow) = (&mut out[t * d..(t + 1) * d], &xd[s * d..(s + 1) * d], &kd[tap * d..(tap + 1) * d]);
                for c in 0..d {
                    orow[c] += xrow[c] * krow[c];
                }
            }
        }
        y
    };
    let mut inputs = vec![x, kernel];
    inputs.extend(bias);
    x.tape()
        .record("depthwise_conv1d", value, &inputs, Box::new(ConvBack { has_bias: bias.is_some() }))
}

// -------------------------------------------------------- data movement

fn reverse_rows_array<T: Scalar>(a: &Array<T>) -> Array<T> {
    let rows = a.shape().first().copied().unwrap_or(1);
    let w = if rows == 0 { 0 } else { a.len() / rows };
    let mut out = Vec::with_capacity(a.len());
    for r in (0..rows).rev() {
        out.extend_from_slice(&a.data()[r * w..(r + 1) * w]);
    }
    Array::from_parts(a.shape().to_vec(), out)
}

struct ReverseBack;

impl<T: Scalar> BackwardOp<T> for ReverseBack {
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        vec![Some(reverse_rows_array(g))]
    }
}

/// Reverses the order of the first axis (the sequence axis).
pub fn reverse_rows<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let value = {
        let xv = x.value();
        if xv.rank() == 0 {
            return Err(shape_err("reverse_rows on a scalar".into()));
        }
        reverse_rows_array(&xv)
    };
    x.tape().record("reverse_rows", value, &[x], Box::new(ReverseBack))
}

struct SliceColsBack {
    start: usize,
}

impl<T: Scalar> BackwardOp<T> for SliceColsBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let x = ctx.input(0);
        let (rows, cols) = (x.leading(), x.last_dim());
        let w = g.last_dim();
        let mut dx = Array::zeros(x.shape());
        for r in 0..rows {
            dx.data_mut()[r * cols + self.start..r * cols + self.start + w]
                .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
        }
        vec![Some(dx)]
    }
}

/// Columns `start..end` of the last axis.
pub fn slice_cols<'t, T: Scalar>(x: Var<'t, T>, start: usize, end: usize) -> Result<Var<'t, T>> {
    let value = {
        let xv = x.value();
        let cols = xv.last_dim();
        if xv.rank() == 0 || start > end || end > cols {
            return Err(shape_err(format!("slice_cols {start}..{end} of {:?}", xv.shape())));
        }
        let rows = xv.leading();
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        Array::from_parts(shape, out)
    };
    x.tape().record("slice_cols", value, &[x], Box::new(SliceColsBack { start }))
}

struct ConcatColsBack {
    widths: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for ConcatColsBack {
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let total = g.last_dim();
        let rows = g.leading();
        let mut start = 0;
        self.widths
            .iter()
            .map(|&w| {
                let mut out = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    out.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                }
                start += w;
                let mut shape = g.shape().to_vec();
                *shape.last_mut().unwrap() = w;
                Some(Array::from_parts(shape, out))
            })
            .collect()
    }
}

/// Concatenates along the last axis; leading axes must agree.
pub fn concat_cols<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| NumericsError::Empty("concat_cols of nothing".into()))?;
    let (value, widths) = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = &vals[0].shape()[..vals[0].rank().saturating_sub(1)];
        for v in &vals {
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(shape_err(format!(
                    "concat_cols: {:?} vs {:?}",
                    vals[0].shape(),
                    v.shape()
                )));
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = vals[0].leading();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        (Array::from_parts(shape, out), widths)
    };
    first
        .tape()
        .record("concat_cols", value, parts, Box::new(ConcatColsBack { widths }))
}

struct InsertRowBack {
    index: usize,
}

impl<T: Scalar> BackwardOp<T> for InsertRowBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let x = ctx.input(0);
        let d = g.last_dim();
        let i = self.index;
        let dx = ctx.needs_grad(0).then(|| {
            let mut v = Vec::with_capacity(x.len());
            v.extend_from_slice(&g.data()[..i * d]);
            v.extend_from_slice(&g.data()[(i + 1) * d..]);
            Array::from_parts(x.shape().to_vec(), v)
        });
        let drow = ctx
            .needs_grad(1)
            .then(|| Array::from_parts(vec![d], g.row(i).to_vec()));
        vec![dx, drow]
    }
}

/// Inserts `row[D]` into `x[M,D]` before row `index`, giving `[M+1,D]`.
pub fn insert_row<'t, T: Scalar>(x: Var<'t, T>, row: Var<'t, T>, index: usize) -> Result<Var<'t, T>> {
    let value = {
        let (xv, rv) = (x.value(), row.value());
        if xv.rank() != 2 || rv.shape() != [xv.shape()[1]] || index > xv.shape()[0] {
            return Err(shape_err(format!(
                "insert_row: row {:?} at {index} into {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        let (m, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity((m + 1) * d);
        out.extend_from_slice(&xv.data()[..index * d]);
        out.extend_from_slice(rv.data());
        out.extend_from_slice(&xv.data()[index * d..]);
        Array::from_parts(vec![m + 1, d], out)
    };
    x.tape().record("insert_row", value, &[x, row], Box::new(InsertRowBack { index }))
}

struct SelectRowBack {
    index: usize,
}

impl<T: Scalar> BackwardOp<T> for SelectRowBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let x = ctx.input(0);
        let d = x.last_dim();
        let mut dx = Array::zeros(x.shape());
        dx.data_mut()[self.index * d..(self.index + 1) * d].copy_from_slice(g.data());
        vec![Some(dx)]
    }
}

/// Row `index` of `x[M,D]` as a `[D]` vector.
pub fn select_row<'t, T: Scalar>(x: Var<'t, T>, index: usize) -> Result<Var<'t, T>> {
    let value = {
        let xv = x.value();
        if xv.rank() != 2 || index >= xv.shape()[0] {
            return Err(shape_err(format!("select_row {index} of {:?}", xv.shape())));
        }
        Array::from_parts(vec![xv.shape()[1]], xv.row(index).to_vec())
    };
    x.tape().record("select_row", value, &[x], Box::new(SelectRowBack { index }))
}

struct StackRowsBack;

impl<T: Scalar> BackwardOp<T> for StackRowsBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        (0..ctx.num_inputs())
            .map(|i| {
                ctx.needs_grad(i)
                    .then(|| Array::from_parts(vec![g.last_dim()], g.row(i).to_vec()))
            })
            .collect()
    }
}

/// Stacks `[D]` vectors into a `[B,D]` matrix.
pub fn stack_rows<'t, T: Scalar>(rows: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = rows
        .first()
        .ok_or_else(|| NumericsError::Empty("stack_rows of nothing".into()))?;
    let value = {
        let vals: Vec<_> = rows.iter().map(|r| r.value()).collect();
        let d = vals[0].len();
        let mut out = Vec::with_capacity(d * vals.len());
        for v in &vals {
            if v.rank() != 1 || v.len() != d {
                return Err(shape_err(format!("stack_rows: {:?} vs [{d}]", v.shape())));
            }
            out.extend_from_slice(v.data());
        }
        Array::from_parts(vec![vals.len(), d], out)
    };
    first.tape().record("stack_rows", value, rows, Box::new(StackRowsBack))
}

struct ReshapeBack;

impl<T: Scalar> BackwardOp<T> for ReshapeBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let shape = ctx.input(0).shape();
        vec![Some(Array::from_parts(shape.to_vec(), g.to_vec()))]
    }
}

pub fn reshape<'t, T: Scalar>(x: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let value = x.to_array().reshape(shape)?;
    x.tape().record("reshape", value, &[x], Box::new(ReshapeBack))
}

// ------------------------------------------------------------ reductions

struct SumBack {
    scale: f64,
}

impl<T: Scalar> BackwardOp<T> for SumBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let v = g.item() * T::from_f64(self.scale);
        vec![Some(Array::full(ctx.input(0).shape(), v))]
    }
}

/// Sum of all elements, as a rank-0 array.
pub fn sum<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let value = Array::scalar(x.value().sum());
    x.tape().record("sum", value, &[x], Box::new(SumBack { scale: 1.0 }))
}

pub fn mean<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = x.value().len();
    if n == 0 {
        return Err(NumericsError::Empty("mean of empty array".into()));
    }
    let value = Array::scalar(x.value().sum() / T::from_f64(n as f64));
    x.tape()
        .record("mean", value, &[x], Box::new(SumBack { scale: 1.0 / n as f64 }))
}

// ---------------------------------------------------------------- losses

struct CrossEntropyBack {
    targets: Vec<f64>,
}

impl<T: Scalar> BackwardOp<T> for CrossEntropyBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let x = ctx.input(0);
        let c = x.last_dim();
        let b = x.leading();
        let p = softmax_rows(x);
        let scale = g.item() / T::from_f64(b as f64);
        let mut dx = p;
        for r in 0..b {
            let t = &self.targets[r * c..(r + 1) * c];
            let mass: f64 = t.iter().sum();
            let row = &mut dx.data_mut()[r * c..(r + 1) * c];
            for j in 0..c {
                row[j] = scale * (row[j] * T::from_f64(mass) - T::from_f64(t[j]));
            }
        }
        vec![Some(dx)]
    }
}

fn check_targets<T: Scalar>(op: &str, logits: &Array<T>, targets: &Array<T>) -> Result<()> {
    if logits.rank() != 2 || logits.shape() != targets.shape() {
        return Err(shape_err(format!(
            "{op}: logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    Ok(())
}

/// Softmax cross-entropy against (possibly soft) targets, averaged over rows.
pub fn softmax_cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, targets: &Array<T>) -> Result<Var<'t, T>> {
    let value = {
        let x = logits.value();
        check_targets("softmax_cross_entropy", &x, targets)?;
        let c = x.last_dim();
        let b = x.leading();
        let mut total = T::zero();
        for r in 0..b {
            let row = x.row(r);
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for j in 0..c {
                total += targets.data()[r * c + j] * (lse - row[j]);
            }
        }
        Array::scalar(total / T::from_f64(b.max(1) as f64))
    };
    let targets = targets.data().iter().map(|v| v.as_f64()).collect();
    logits
        .tape()
        .record("softmax_cross_entropy", value, &[logits], Box::new(CrossEntropyBack { targets }))
}

struct BceBack {
    targets: Vec<f64>,
}

impl<T: Scalar> BackwardOp<T> for BceBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let x = ctx.input(0);
        let scale = g.item() / T::from_f64(x.len() as f64);
        let dx = Array::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(&self.targets)
                .map(|(&v, &t)| scale * (sigmoid(v) - T::from_f64(t)))
                .collect(),
        );
        vec![Some(dx)]
    }
}

/// Sigmoid binary cross-entropy, averaged over every (row, class) entry.
pub fn bce_with_logits<'t, T: Scalar>(logits: Var<'t, T>, targets: &Array<T>) -> Result<Var<'t, T>> {
    let value = {
        let x = logits.value();
        check_targets("bce_with_logits", &x, targets)?;
        let total: T = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p())
            .sum();
        Array::scalar(total / T::from_f64(x.len().max(1) as f64))
    };
    let targets = targets.data().iter().map(|v| v.as_f64()).collect();
    logits
        .tape()
        .record("bce_with_logits", value, &[logits], Box::new(BceBack { targets }))
}
