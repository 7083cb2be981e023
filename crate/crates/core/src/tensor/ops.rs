//! Pure forward and backward kernels.
//!
//! Every function here is a plain computation on [`Tensor`] values: no tape,
//! no recording, no hidden state. The tape module wraps these kernels to
//! register backward rules; evaluation-mode forward passes call them
//! directly. Backward kernels assume the shapes already passed the matching
//! forward validation and therefore do not re-validate.
//!
//! Conventions:
//! - conv2d is cross-correlation (no kernel flip), NCHW input, OIHW weight.
//! - conv_transpose2d takes IOHW weight and is the linear adjoint of conv2d.
//! - batch normalization normalizes with the biased (population) variance and
//!   updates running statistics with the unbiased variance, momentum-weighted.
//! - Forward kernels reject non-finite outputs: overflow is an error, never a
//!   silent Inf.

use crate::error::{Error, Result};
use crate::tensor::{idx4, Element, Tensor};

/// Errors when any output element is NaN or Inf.
pub(crate) fn ensure_finite<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Checks two operands for an elementwise binary op: either identical shapes
/// or one side a scalar (single element) that broadcasts.
fn binary_layout<E: Element>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<BinaryLayout> {
    if a.shape() == b.shape() {
        Ok(BinaryLayout::Same)
    } else if a.numel() == 1 {
        Ok(BinaryLayout::ScalarLeft)
    } else if b.numel() == 1 {
        Ok(BinaryLayout::ScalarRight)
    } else {
        Err(shape_err(
            op,
            format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()),
        ))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryLayout {
    Same,
    ScalarLeft,
    ScalarRight,
}

fn binary_apply<E: Element>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    let layout = binary_layout(op, a, b)?;
    let out = match layout {
        BinaryLayout::Same => {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(a.shape().to_vec(), data)?
        }
        BinaryLayout::ScalarLeft => {
            let s = a.data()[0];
            let data = b.data().iter().map(|&y| f(s, y)).collect();
            Tensor::from_vec(b.shape().to_vec(), data)?
        }
        BinaryLayout::ScalarRight => {
            let s = b.data()[0];
            let data = a.data().iter().map(|&x| f(x, s)).collect();
            Tensor::from_vec(a.shape().to_vec(), data)?
        }
    };
    ensure_finite(op, &out)?;
    Ok(out)
}

/// Sums a full-shape gradient down to `[1]` when the forward operand was a
/// broadcast scalar; otherwise passes it through.
pub(crate) fn reduce_for_broadcast<E: Element>(grad: Tensor<E>, was_scalar: bool) -> Tensor<E> {
    if was_scalar && grad.numel() > 1 {
        let sum = grad.data().iter().fold(E::zero(), |acc, &v| acc + v);
        Tensor::scalar(sum)
    } else {
        grad
    }
}

pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary_apply("add", a, b, |x, y| x + y)
}

pub fn sub<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary_apply("sub", a, b, |x, y| x - y)
}

pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary_apply("mul", a, b, |x, y| x * y)
}

pub fn neg<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(a.map(|v| -v))
}

pub fn log<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    if let Some(bad) = a.data().iter().find(|v| **v <= E::zero()) {
        return Err(Error::DomainError {
            op: "log",
            detail: format!("log requires strictly positive inputs, got {bad}"),
        });
    }
    let out = a.map(|v| v.ln());
    ensure_finite("log", &out)?;
    Ok(out)
}

pub fn exp<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let out = a.map(|v| v.exp());
    ensure_finite("exp", &out)?;
    Ok(out)
}

pub fn relu<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(a.map(|v| if v > E::zero() { v } else { E::zero() }))
}

pub fn relu_backward<E: Element>(x: &Tensor<E>, go: &Tensor<E>) -> Tensor<E> {
    let data = x
        .data()
        .iter()
        .zip(go.data())
        .map(|(&xi, &g)| if xi > E::zero() { g } else { E::zero() })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn leaky_relu<E: Element>(a: &Tensor<E>, alpha: f64) -> Result<Tensor<E>> {
    check_alpha(alpha)?;
    let al = E::from_f64(alpha);
    Ok(a.map(|v| if v > E::zero() { v } else { al * v }))
}

pub fn leaky_relu_backward<E: Element>(x: &Tensor<E>, alpha: f64, go: &Tensor<E>) -> Tensor<E> {
    let al = E::from_f64(alpha);
    let data = x
        .data()
        .iter()
        .zip(go.data())
        .map(|(&xi, &g)| if xi > E::zero() { g } else { al * g })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("shape preserved")
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidHyperparameter(format!(
            "leaky_relu alpha must be in (0, 1), got {alpha}"
        )))
    }
}

pub fn tanh<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(a.map(|v| v.tanh()))
}

pub fn tanh_backward<E: Element>(y: &Tensor<E>, go: &Tensor<E>) -> Tensor<E> {
    let data = y
        .data()
        .iter()
        .zip(go.data())
        .map(|(&yi, &g)| g * (E::one() - yi * yi))
        .collect();
    Tensor::from_vec(y.shape().to_vec(), data).expect("shape preserved")
}

/// Numerically stable logistic function, pinned strictly inside (0, 1)
/// so downstream logs of `p` and `1 - p` stay finite even at saturation.
pub fn sigmoid<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let half_eps = E::epsilon() / E::from_f64(2.0);
    let hi = E::one() - half_eps;
    let lo = E::min_positive_value();
    Ok(a.map(|v| {
        let y = if v >= E::zero() {
            E::one() / (E::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (E::one() + e)
        };
        y.max(lo).min(hi)
    }))
}

pub fn sigmoid_backward<E: Element>(y: &Tensor<E>, go: &Tensor<E>) -> Tensor<E> {
    let data = y
        .data()
        .iter()
        .zip(go.data())
        .map(|(&yi, &g)| g * yi * (E::one() - yi))
        .collect();
    Tensor::from_vec(y.shape().to_vec(), data).expect("shape preserved")
}

fn rank2<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, format!("expected rank-2 tensor, got {other:?}"))),
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, ka) = rank2("matmul", a)?;
    let (kb, n) = rank2("matmul", b)?;
    if ka != kb {
        return Err(shape_err(
            "matmul",
            format!("inner dimensions differ: {:?} × {:?}", a.shape(), b.shape()),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for k in 0..ka {
            let aik = ad[i * ka + k];
            if aik == E::zero() {
                continue;
            }
            let row = &bd[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * row[j];
            }
        }
    }
    let out = Tensor::from_vec(vec![m, n], out)?;
    ensure_finite("matmul", &out)?;
    Ok(out)
}

/// Transpose of a rank-2 tensor (backward helper).
pub fn transpose2<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = rank2("transpose", a)?;
    let ad = a.data();
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

/// Adds a `[n]` bias vector to every row of an `[m, n]` matrix.
pub fn bias_add_rows<E: Element>(x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = rank2("bias_add_rows", x)?;
    if b.shape() != [n] {
        return Err(shape_err(
            "bias_add_rows",
            format!("bias shape {:?} does not match row width {n}", b.shape()),
        ));
    }
    let bd = b.data();
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] = row[j] + bd[j];
        }
    }
    out.clear_grad();
    ensure_finite("bias_add_rows", &out)?;
    Ok(out)
}

/// Column sums of a rank-2 gradient (bias backward).
pub fn column_sums<E: Element>(go: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = rank2("column_sums", go)?;
    let gd = go.data();
    let mut out = vec![E::zero(); n];
    for i in 0..m {
        for j in 0..n {
            out[j] = out[j] + gd[i * n + j];
        }
    }
    Tensor::from_vec(vec![n], out)
}

fn rank4<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        other => Err(shape_err(op, format!("expected rank-4 tensor, got {other:?}"))),
    }
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride >= 1 {
        Ok(())
    } else {
        Err(Error::InvalidHyperparameter(format!("{op}: stride must be ≥ 1")))
    }
}

/// floor((extent + 2·pad − k)/stride) + 1, rejecting outputs smaller than 1.
fn conv_out_size(op: &'static str, extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::InvalidHyperparameter(format!(
            "{op}: kernel {k} exceeds padded extent {padded}, output would be < 1"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// (extent − 1)·stride − 2·pad + k, rejecting outputs smaller than 1.
fn tconv_out_size(op: &'static str, extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (extent - 1) * stride + k;
    if grown < 2 * pad + 1 {
        return Err(Error::InvalidHyperparameter(format!(
            "{op}: padding {pad} swallows the whole output, would be < 1"
        )));
    }
    Ok(grown - 2 * pad)
}

/// 2-D cross-correlation. `x` is NCHW, `w` is OIHW, optional bias is `[O]`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    check_stride("conv2d", stride)?;
    let (n, c_in, h, wd) = rank4("conv2d", x)?;
    let (c_out, ci_w, kh, kw) = rank4("conv2d", w)?;
    if ci_w != c_in {
        return Err(shape_err(
            "conv2d",
            format!("input has {c_in} channels, weight expects {ci_w}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?} does not match {c_out} output channels", b.shape()),
            ));
        }
    }
    let h_out = conv_out_size("conv2d", h, kh, stride, pad)?;
    let w_out = conv_out_size("conv2d", wd, kw, stride, pad)?;

    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![E::zero(); n * c_out * h_out * w_out];
    for ni in 0..n {
        for oc in 0..c_out {
            let base_bias = bias.map(|b| b.data()[oc]).unwrap_or_else(E::zero);
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = base_bias;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let ih = (oh * stride + ky) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let iw = (ow * stride + kx) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let xv = xd[idx4(c_in, h, wd, ni, ic, ih as usize, iw as usize)];
                                let wv = wdat[idx4(ci_w, kh, kw, oc, ic, ky, kx)];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[idx4(c_out, h_out, w_out, ni, oc, oh, ow)] = acc;
                }
            }
        }
    }
    let out = Tensor::from_vec(vec![n, c_out, h_out, w_out], out)?;
    ensure_finite("conv2d", &out)?;
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight, and (optionally) bias.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    go: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Option<Tensor<E>>) {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h_out, w_out) = (go.shape()[2], go.shape()[3]);

    let xd = x.data();
    let wdat = w.data();
    let gd = go.data();
    let mut dx = vec![E::zero(); x.numel()];
    let mut dw = vec![E::zero(); w.numel()];
    let mut db = vec![E::zero(); c_out];
    for ni in 0..n {
        for oc in 0..c_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let g = gd[idx4(c_out, h_out, w_out, ni, oc, oh, ow)];
                    if has_bias {
                        db[oc] = db[oc] + g;
                    }
                    if g == E::zero() {
                        continue;
                    }
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let ih = (oh * stride + ky) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let iw = (ow * stride + kx) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let xi = idx4(c_in, h, wd, ni, ic, ih as usize, iw as usize);
                                let wi = idx4(c_in, kh, kw, oc, ic, ky, kx);
                                dx[xi] = dx[xi] + g * wdat[wi];
                                dw[wi] = dw[wi] + g * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = Tensor::from_vec(x.shape().to_vec(), dx).expect("shape preserved");
    let dw = Tensor::from_vec(w.shape().to_vec(), dw).expect("shape preserved");
    let db = has_bias.then(|| Tensor::from_vec(vec![c_out], db).expect("shape preserved"));
    (dx, dw, db)
}

/// Transposed 2-D convolution (the adjoint of [`conv2d`]).
/// `x` is NCHW, `w` is IOHW (input channels first), optional bias is `[O]`.
pub fn conv_transpose2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    check_stride("conv_transpose2d", stride)?;
    let (n, c_in, h, wd) = rank4("conv_transpose2d", x)?;
    let (ci_w, c_out, kh, kw) = rank4("conv_transpose2d", w)?;
    if ci_w != c_in {
        return Err(shape_err(
            "conv_transpose2d",
            format!("input has {c_in} channels, weight expects {ci_w}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err(
                "conv_transpose2d",
                format!("bias shape {:?} does not match {c_out} output channels", b.shape()),
            ));
        }
    }
    let h_out = tconv_out_size("conv_transpose2d", h, kh, stride, pad)?;
    let w_out = tconv_out_size("conv_transpose2d", wd, kw, stride, pad)?;

    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![E::zero(); n * c_out * h_out * w_out];
    if let Some(b) = bias {
        for ni in 0..n {
            for oc in 0..c_out {
                let bv = b.data()[oc];
                let base = (ni * c_out + oc) * h_out * w_out;
                for v in &mut out[base..base + h_out * w_out] {
                    *v = bv;
                }
            }
        }
    }
    for ni in 0..n {
        for ic in 0..c_in {
            for ih in 0..h {
                for iw in 0..wd {
                    let xv = xd[idx4(c_in, h, wd, ni, ic, ih, iw)];
                    if xv == E::zero() {
                        continue;
                    }
                    for oc in 0..c_out {
                        for ky in 0..kh {
                            let oh = (ih * stride + ky) as isize - pad as isize;
                            if oh < 0 || oh >= h_out as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ow = (iw * stride + kx) as isize - pad as isize;
                                if ow < 0 || ow >= w_out as isize {
                                    continue;
                                }
                                let oi = idx4(c_out, h_out, w_out, ni, oc, oh as usize, ow as usize);
                                let wv = wdat[idx4(c_out, kh, kw, ic, oc, ky, kx)];
                                out[oi] = out[oi] + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(vec![n, c_out, h_out, w_out], out)?;
    ensure_finite("conv_transpose2d", &out)?;
    Ok(out)
}

/// Gradients of conv_transpose2d w.r.t. input, weight, and (optionally) bias.
pub fn conv_transpose2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    go: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Option<Tensor<E>>) {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (_, c_out, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h_out, w_out) = (go.shape()[2], go.shape()[3]);

    let xd = x.data();
    let wdat = w.data();
    let gd = go.data();
    let mut dx = vec![E::zero(); x.numel()];
    let mut dw = vec![E::zero(); w.numel()];
    for ni in 0..n {
        for ic in 0..c_in {
            for ih in 0..h {
                for iw in 0..wd {
                    let xi = idx4(c_in, h, wd, ni, ic, ih, iw);
                    let xv = xd[xi];
                    let mut acc = E::zero();
                    for oc in 0..c_out {
                        for ky in 0..kh {
                            let oh = (ih * stride + ky) as isize - pad as isize;
                            if oh < 0 || oh >= h_out as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ow = (iw * stride + kx) as isize - pad as isize;
                                if ow < 0 || ow >= w_out as isize {
                                    continue;
                                }
                                let g = gd[idx4(c_out, h_out, w_out, ni, oc, oh as usize, ow as usize)];
                                let wi = idx4(c_out, kh, kw, ic, oc, ky, kx);
                                acc = acc + g * wdat[wi];
                                dw[wi] = dw[wi] + g * xv;
                            }
                        }
                    }
                    dx[xi] = dx[xi] + acc;
                }
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![E::zero(); c_out];
        for ni in 0..n {
            for (oc, slot) in db.iter_mut().enumerate() {
                let base = (ni * c_out + oc) * h_out * w_out;
                for &g in &gd[base..base + h_out * w_out] {
                    *slot = *slot + g;
                }
            }
        }
        Tensor::from_vec(vec![c_out], db).expect("shape preserved")
    });
    let dx = Tensor::from_vec(x.shape().to_vec(), dx).expect("shape preserved");
    let dw = Tensor::from_vec(w.shape().to_vec(), dw).expect("shape preserved");
    (dx, dw, db)
}

/// Values saved by the batch-norm training forward for its backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<E: Element> {
    /// Per-channel batch mean.
    pub mean: Vec<E>,
    /// Per-channel 1/sqrt(biased variance + eps).
    pub inv_std: Vec<E>,
}

/// Output bundle of a batch-norm training forward.
#[derive(Debug, Clone)]
pub struct BnTrainOut<E: Element> {
    pub y: Tensor<E>,
    pub saved: BnSaved<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

fn bn_check<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<(usize, usize, usize, usize)> {
    let dims = rank4("batchnorm2d", x)?;
    let c = dims.1;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(shape_err(
                "batchnorm2d",
                format!("{name} shape {:?} does not match {c} channels", t.shape()),
            ));
        }
    }
    Ok(dims)
}

/// Training-mode batch normalization over NCHW.
///
/// Normalizes with the per-channel batch mean and *biased* variance, then
/// folds the *unbiased* variance into the running statistics:
/// `running ← (1 − momentum)·running + momentum·batch_stat`.
pub fn batchnorm2d_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
    momentum: f64,
) -> Result<BnTrainOut<E>> {
    let (n, c, h, w) = bn_check(x, gamma, beta)?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::DegenerateBatch { elements_per_channel: m });
    }
    let m_e = E::from_f64(m as f64);
    let eps_e = E::from_f64(eps);
    let mom = E::from_f64(momentum);
    let keep = E::one() - mom;

    let xd = x.data();
    let mut mean = vec![E::zero(); c];
    let mut var_biased = vec![E::zero(); c];
    for ci in 0..c {
        let mut sum = E::zero();
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    sum = sum + xd[idx4(c, h, w, ni, ci, hi, wi)];
                }
            }
        }
        let mu = sum / m_e;
        let mut sq = E::zero();
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let d = xd[idx4(c, h, w, ni, ci, hi, wi)] - mu;
                    sq = sq + d * d;
                }
            }
        }
        mean[ci] = mu;
        var_biased[ci] = sq / m_e;
    }

    let inv_std: Vec<E> = var_biased.iter().map(|&v| E::one() / (v + eps_e).sqrt()).collect();
    let gd = gamma.data();
    let bd = beta.data();
    let mut y = vec![E::zero(); x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let i = idx4(c, h, w, ni, ci, hi, wi);
                    let xhat = (xd[i] - mean[ci]) * inv_std[ci];
                    y[i] = gd[ci] * xhat + bd[ci];
                }
            }
        }
    }

    // Unbiased variance enters the running estimate (m ≥ 2 checked above).
    let unbias = E::from_f64(m as f64 / (m as f64 - 1.0));
    let rm_old = running_mean.data();
    let rv_old = running_var.data();
    let mut rm = vec![E::zero(); c];
    let mut rv = vec![E::zero(); c];
    for ci in 0..c {
        rm[ci] = keep * rm_old[ci] + mom * mean[ci];
        rv[ci] = keep * rv_old[ci] + mom * var_biased[ci] * unbias;
    }

    let y = Tensor::from_vec(x.shape().to_vec(), y)?;
    ensure_finite("batchnorm2d", &y)?;
    Ok(BnTrainOut {
        y,
        saved: BnSaved { mean, inv_std },
        running_mean: Tensor::from_vec(vec![c], rm)?,
        running_var: Tensor::from_vec(vec![c], rv)?,
    })
}

/// Evaluation-mode batch normalization: normalizes with running statistics.
pub fn batchnorm2d_eval<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = bn_check(x, gamma, beta)?;
    let eps_e = E::from_f64(eps);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let rm = running_mean.data();
    let rv = running_var.data();
    let mut y = vec![E::zero(); x.numel()];
    for ci in 0..c {
        let inv = E::one() / (rv[ci] + eps_e).sqrt();
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let i = idx4(c, h, w, ni, ci, hi, wi);
                    y[i] = gd[ci] * ((xd[i] - rm[ci]) * inv) + bd[ci];
                }
            }
        }
    }
    let y = Tensor::from_vec(x.shape().to_vec(), y)?;
    ensure_finite("batchnorm2d", &y)?;
    Ok(y)
}

/// Gradients of training-mode batch norm w.r.t. input, gamma, and beta.
pub fn batchnorm2d_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    saved: &BnSaved<E>,
    go: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = n * h * w;
    let m_e = E::from_f64(m as f64);
    let xd = x.data();
    let gd = go.data();
    let gam = gamma.data();

    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for ci in 0..c {
        let mut sg = E::zero();
        let mut sgx = E::zero();
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let i = idx4(c, h, w, ni, ci, hi, wi);
                    let xhat = (xd[i] - saved.mean[ci]) * saved.inv_std[ci];
                    sg = sg + gd[i];
                    sgx = sgx + gd[i] * xhat;
                }
            }
        }
        dbeta[ci] = sg;
        dgamma[ci] = sgx;
    }

    let mut dx = vec![E::zero(); x.numel()];
    for ci in 0..c {
        let coeff = gam[ci] * saved.inv_std[ci] / m_e;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let i = idx4(c, h, w, ni, ci, hi, wi);
                    let xhat = (xd[i] - saved.mean[ci]) * saved.inv_std[ci];
                    dx[i] = coeff * (m_e * gd[i] - dbeta[ci] - xhat * dgamma[ci]);
                }
            }
        }
    }

    (
        Tensor::from_vec(x.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::from_vec(vec![c], dgamma).expect("shape preserved"),
        Tensor::from_vec(vec![c], dbeta).expect("shape preserved"),
    )
}

/// Average pooling over NCHW with a square kernel. Padded positions count
/// toward the denominator (count-include-pad), so every output divides by k².
pub fn avg_pool2d<E: Element>(
    x: &Tensor<E>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    check_stride("avg_pool2d", stride)?;
    if kernel == 0 {
        return Err(Error::InvalidHyperparameter("avg_pool2d: kernel must be ≥ 1".into()));
    }
    let (n, c, h, w) = rank4("avg_pool2d", x)?;
    let h_out = conv_out_size("avg_pool2d", h, kernel, stride, pad)?;
    let w_out = conv_out_size("avg_pool2d", w, kernel, stride, pad)?;
    let inv_area = E::one() / E::from_f64((kernel * kernel) as f64);

    let xd = x.data();
    let mut out = vec![E::zero(); n * c * h_out * w_out];
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = E::zero();
                    for ky in 0..kernel {
                        let ih = (oh * stride + ky) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let iw = (ow * stride + kx) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            acc = acc + xd[idx4(c, h, w, ni, ci, ih as usize, iw as usize)];
                        }
                    }
                    out[idx4(c, h_out, w_out, ni, ci, oh, ow)] = acc * inv_area;
                }
            }
        }
    }
    let out = Tensor::from_vec(vec![n, c, h_out, w_out], out)?;
    ensure_finite("avg_pool2d", &out)?;
    Ok(out)
}

/// Gradient of [`avg_pool2d`] w.r.t. its input.
pub fn avg_pool2d_backward<E: Element>(
    x_shape: &[usize],
    kernel: usize,
    stride: usize,
    pad: usize,
    go: &Tensor<E>,
) -> Tensor<E> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (h_out, w_out) = (go.shape()[2], go.shape()[3]);
    let inv_area = E::one() / E::from_f64((kernel * kernel) as f64);
    let gd = go.data();
    let mut dx = vec![E::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let g = gd[idx4(c, h_out, w_out, ni, ci, oh, ow)] * inv_area;
                    for ky in 0..kernel {
                        let ih = (oh * stride + ky) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let iw = (ow * stride + kx) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let i = idx4(c, h, w, ni, ci, ih as usize, iw as usize);
                            dx[i] = dx[i] + g;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape.to_vec(), dx).expect("shape preserved")
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(shape_err("concat_channels", "no tensors to concatenate".into()));
    }
    let (n, _, h, w) = rank4("concat_channels", parts[0])?;
    let mut c_total = 0usize;
    for p in parts {
        let (pn, pc, ph, pw) = rank4("concat_channels", p)?;
        if pn != n || ph != h || pw != w {
            return Err(shape_err(
                "concat_channels",
                format!("batch/spatial dims differ: {:?} vs {:?}", parts[0].shape(), p.shape()),
            ));
        }
        c_total += pc;
    }
    let mut out = vec![E::zero(); n * c_total * h * w];
    for ni in 0..n {
        let mut c_off = 0usize;
        for p in parts {
            let pc = p.shape()[1];
            let plane = pc * h * w;
            let src = &p.data()[ni * plane..(ni + 1) * plane];
            let dst_start = (ni * c_total + c_off) * h * w;
            out[dst_start..dst_start + plane].copy_from_slice(src);
            c_off += pc;
        }
    }
    Tensor::from_vec(vec![n, c_total, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<E: Element>(go: &Tensor<E>, channel_sizes: &[usize]) -> Vec<Tensor<E>> {
    let (n, c_total, h, w) = (go.shape()[0], go.shape()[1], go.shape()[2], go.shape()[3]);
    debug_assert_eq!(channel_sizes.iter().sum::<usize>(), c_total);
    let gd = go.data();
    let mut outs = Vec::with_capacity(channel_sizes.len());
    let mut c_off = 0usize;
    for &pc in channel_sizes {
        let mut part = vec![E::zero(); n * pc * h * w];
        for ni in 0..n {
            let src_start = (ni * c_total + c_off) * h * w;
            let dst_start = ni * pc * h * w;
            part[dst_start..dst_start + pc * h * w]
                .copy_from_slice(&gd[src_start..src_start + pc * h * w]);
        }
        outs.push(Tensor::from_vec(vec![n, pc, h, w], part).expect("shape preserved"));
        c_off += pc;
    }
    outs
}

/// Mean over every element, as a `[1]` scalar tensor.
pub fn mean_all<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = E::from_f64(x.numel() as f64);
    let sum = x.data().iter().fold(E::zero(), |acc, &v| acc + v);
    let out = Tensor::scalar(sum / n);
    ensure_finite("mean_all", &out)?;
    Ok(out)
}

/// Probability clamp applied inside [`bce`] before the logarithms.
pub const BCE_EPS: f64 = 1e-7;

fn bce_bounds<E: Element>() -> (E, E) {
    let lo = E::from_f64(BCE_EPS);
    (lo, E::one() - lo)
}

/// Binary cross-entropy, averaged over all elements:
/// `−mean(y·ln p̂ + (1−y)·ln(1−p̂))` with `p̂ = clamp(p, ε, 1−ε)`, ε = 1e-7.
/// Targets must be exactly 0 or 1.
pub fn bce<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            "bce",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if let Some(bad) = target.data().iter().find(|t| **t != E::zero() && **t != E::one()) {
        return Err(Error::InvalidTarget(format!("bce targets must be 0 or 1, got {bad}")));
    }
    let (lo, hi) = bce_bounds::<E>();
    let n = E::from_f64(pred.numel() as f64);
    let mut acc = E::zero();
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let pc = p.max(lo).min(hi);
        acc = acc + y * pc.ln() + (E::one() - y) * (E::one() - pc).ln();
    }
    let out = Tensor::scalar(-acc / n);
    ensure_finite("bce", &out)?;
    Ok(out)
}

/// Gradient of [`bce`] w.r.t. the prediction. Predictions in the clamped
/// region get zero gradient (the clamp is locally constant there).
pub fn bce_backward<E: Element>(pred: &Tensor<E>, target: &Tensor<E>, go_scalar: E) -> Tensor<E> {
    let (lo, hi) = bce_bounds::<E>();
    let inv_n = E::one() / E::from_f64(pred.numel() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                E::zero()
            } else {
                go_scalar * inv_n * (-(y / p) + (E::one() - y) / (E::one() - p))
            }
        })
        .collect();
    Tensor::from_vec(pred.shape().to_vec(), data).expect("shape preserved")
}

/// Row-wise softmax of a rank-2 tensor (max-subtracted for stability).
pub fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, k) = rank2("softmax", logits)?;
    let ld = logits.data();
    let mut out = vec![E::zero(); n * k];
    for i in 0..n {
        let row = &ld[i * k..(i + 1) * k];
        let max = row.iter().fold(row[0], |a, &b| a.max(b));
        let mut denom = E::zero();
        for j in 0..k {
            let e = (row[j] - max).exp();
            out[i * k + j] = e;
            denom = denom + e;
        }
        for j in 0..k {
            out[i * k + j] = out[i * k + j] / denom;
        }
    }
    let out = Tensor::from_vec(vec![n, k], out)?;
    ensure_finite("softmax", &out)?;
    Ok(out)
}

fn check_targets(op: &'static str, n: usize, k: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != n {
        return Err(shape_err(
            op,
            format!("{n} logit rows but {} targets", targets.len()),
        ));
    }
    if let Some(bad) = targets.iter().find(|t| **t >= k) {
        return Err(Error::InvalidTarget(format!(
            "class index {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `[N, K]` logits against class indices.
pub fn softmax_cross_entropy<E: Element>(logits: &Tensor<E>, targets: &[usize]) -> Result<Tensor<E>> {
    let (n, k) = rank2("softmax_cross_entropy", logits)?;
    check_targets("softmax_cross_entropy", n, k, targets)?;
    let ld = logits.data();
    let mut acc = E::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = &ld[i * k..(i + 1) * k];
        let max = row.iter().fold(row[0], |a, &b| a.max(b));
        let mut denom = E::zero();
        for &v in row {
            denom = denom + (v - max).exp();
        }
        acc = acc + (denom.ln() + max - row[t]);
    }
    let out = Tensor::scalar(acc / E::from_f64(n as f64));
    ensure_finite("softmax_cross_entropy", &out)?;
    Ok(out)
}

/// Gradient of [`softmax_cross_entropy`] w.r.t. the logits:
/// `(softmax − onehot) / N`, scaled by the upstream scalar.
pub fn softmax_cross_entropy_backward<E: Element>(
    logits: &Tensor<E>,
    targets: &[usize],
    go_scalar: E,
) -> Tensor<E> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let sm = softmax_rows(logits).expect("validated at forward time");
    let scale = go_scalar / E::from_f64(n as f64);
    let mut data = sm.data().to_vec();
    for (i, &t) in targets.iter().enumerate() {
        data[i * k + t] = data[i * k + t] - E::one();
    }
    for v in data.iter_mut() {
        *v = *v * scale;
    }
    Tensor::from_vec(logits.shape().to_vec(), data).expect("shape preserved")
}
